"""Channel ingestion (REDD low-frequency layout), alignment, windowing and synthetic homes."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import AlignmentError, ConfigError, DataIntegrityError, ParseError
from .numerics import RngStream

log = logging.getLogger(__name__)

RESAMPLE_PERIOD = 3.0
GAP_LIMIT = 1800.0
AGGREGATE_P_MAX = 6000.0
# synthetic channels are quantised to this step so sums and differences are exact
SYNTH_RESOLUTION = 2.0**-10

# REDD labels -> canonical appliance names
LABEL_ALIASES = {
    "refrigerator": "fridge",
    "washer_dryer": "washer",
    "dishwaser": "dishwasher",
    "mains": "mains",
}


@dataclass
class ChannelSeries:
    timestamps: np.ndarray
    watts: np.ndarray
    label: str = ""

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float)
        self.watts = np.asarray(self.watts, dtype=float)
        if self.timestamps.shape != self.watts.shape or self.timestamps.ndim != 1:
            raise DataIntegrityError(
                f"{self.label or 'channel'}: timestamps {self.timestamps.shape} and watts {self.watts.shape} differ"
            )
        if self.timestamps.size > 1 and np.any(np.diff(self.timestamps) <= 0):
            bad = int(np.argmax(np.diff(self.timestamps) <= 0)) + 2
            raise DataIntegrityError(f"{self.label or 'channel'}: timestamps not increasing at point {bad}")
        if np.any(self.watts < 0):
            raise DataIntegrityError(f"{self.label or 'channel'}: negative power reading")

    def __len__(self) -> int:
        return self.timestamps.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, ChannelSeries):
            return NotImplemented
        return (
            self.label == other.label
            and np.array_equal(self.timestamps, other.timestamps)
            and np.array_equal(self.watts, other.watts)
        )


@dataclass(frozen=True)
class ApplianceSpec:
    name: str
    p_max: float
    on_threshold: float
    lam: float = 1.0
    category: str = "I"
    rated_w: float | None = None

    def __post_init__(self):
        if not 0 <= self.on_threshold < self.p_max:
            raise ConfigError(f"{self.name}: need 0 <= on_threshold < p_max")
        if self.category not in ("I", "II", "III", "IV"):
            raise ConfigError(f"{self.name}: category must be I, II, III or IV")

    @property
    def rated(self) -> float:
        return self.rated_w if self.rated_w is not None else 0.5 * self.p_max


DEFAULT_APPLIANCES = {
    "fridge": ApplianceSpec("fridge", 400.0, 50.0, category="II", rated_w=150.0),
    "washer": ApplianceSpec("washer", 500.0, 20.0, category="II", rated_w=300.0),
    "microwave": ApplianceSpec("microwave", 1800.0, 200.0, category="I", rated_w=1200.0),
    "dishwasher": ApplianceSpec("dishwasher", 1200.0, 10.0, category="II", rated_w=800.0),
}


@dataclass
class HouseDataset:
    house_id: str
    timestamps: np.ndarray
    mains: np.ndarray
    appliances: dict[str, np.ndarray]
    period: float = RESAMPLE_PERIOD
    noise: np.ndarray | None = None

    def __len__(self) -> int:
        return self.timestamps.size

    def segments(self) -> list[slice]:
        """Runs of consecutive grid points with no dropped gap between them."""
        if len(self) == 0:
            return []
        breaks = np.flatnonzero(~np.isclose(np.diff(self.timestamps), self.period)) + 1
        edges = [0, *breaks.tolist(), len(self)]
        return [slice(a, b) for a, b in zip(edges[:-1], edges[1:])]


@dataclass
class WindowBatch:
    inputs: np.ndarray
    targets: np.ndarray
    states: np.ndarray
    house_ids: np.ndarray
    appliance: str = ""
    p_max: float = 1.0
    agg_p_max: float = AGGREGATE_P_MAX

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=float)
        self.targets = np.asarray(self.targets, dtype=float)
        self.states = np.asarray(self.states, dtype=np.int8)
        self.house_ids = np.asarray(self.house_ids, dtype=str)
        if not (self.inputs.shape == self.targets.shape == self.states.shape):
            raise DataIntegrityError("inputs, targets and states must share one shape")
        if self.inputs.ndim != 2 or self.house_ids.shape != (self.inputs.shape[0],):
            raise DataIntegrityError("expected [B, L] windows with one house id per window")
        for name in ("inputs", "targets"):
            arr = getattr(self, name)
            if arr.size and (arr.min() < 0 or arr.max() > 1):
                raise DataIntegrityError(f"{name} outside [0, 1]")
        if self.states.size and not np.all(np.abs(self.states) == 1):
            raise DataIntegrityError("states must be -1 or +1")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def window_len(self) -> int:
        return self.inputs.shape[1]

    def subset(self, index) -> "WindowBatch":
        return WindowBatch(
            self.inputs[index],
            self.targets[index],
            self.states[index],
            self.house_ids[index],
            self.appliance,
            self.p_max,
            self.agg_p_max,
        )

    @classmethod
    def concat(cls, batches: list["WindowBatch"]) -> "WindowBatch":
        if not batches:
            raise ConfigError("nothing to concatenate")
        first = batches[0]
        return cls(
            np.concatenate([b.inputs for b in batches]),
            np.concatenate([b.targets for b in batches]),
            np.concatenate([b.states for b in batches]),
            np.concatenate([b.house_ids for b in batches]),
            first.appliance,
            first.p_max,
            first.agg_p_max,
        )


# ---------------------------------------------------------------- channel files


def parse_channel_file(content, label: str = "") -> ChannelSeries:
    """Parse ``unix_ts watts`` lines; malformed lines raise with their number."""
    text = content.decode("ascii") if isinstance(content, (bytes, bytearray)) else str(content)
    ts: list[float] = []
    watts: list[float] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ParseError(f"expected 'timestamp watts', got {line!r}", lineno)
        try:
            t, w = float(parts[0]), float(parts[1])
        except ValueError:
            raise ParseError(f"non-numeric field in {line!r}", lineno) from None
        if ts and t <= ts[-1]:
            raise DataIntegrityError(f"line {lineno}: timestamp {parts[0]} not after {ts[-1]:.0f}")
        if w < 0:
            raise DataIntegrityError(f"line {lineno}: negative watts {parts[1]}")
        ts.append(t)
        watts.append(w)
    if not ts:
        log.warning("channel %s is empty", label or "<unnamed>")
    return ChannelSeries(np.array(ts), np.array(watts), label)


def _fmt(value: float) -> str:
    return str(int(value)) if float(value).is_integer() and abs(value) < 2**53 else repr(float(value))


def serialize_channel(series: ChannelSeries) -> str:
    return "".join(f"{_fmt(t)} {_fmt(w)}\n" for t, w in zip(series.timestamps.tolist(), series.watts.tolist()))


def read_redd_house(path) -> tuple[str, dict[str, list[ChannelSeries]]]:
    """Read ``house_<n>/labels.dat`` and its ``channel_<k>.dat`` files.

    Returns the house id and canonical label -> list of channels (REDD splits
    mains and some appliances across two channels).
    """
    path = Path(path)
    match = re.fullmatch(r"house_(\w+)", path.name)
    if not match:
        raise ConfigError(f"{path}: directory name must look like house_<n>")
    labels_file = path / "labels.dat"
    if not labels_file.exists():
        raise ConfigError(f"{path}: missing labels.dat")
    channels: dict[str, list[ChannelSeries]] = {}
    for lineno, line in enumerate(labels_file.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2 or not parts[0].isdigit():
            raise ParseError(f"labels.dat: expected 'channel_index name', got {line!r}", lineno)
        name = LABEL_ALIASES.get(parts[1], parts[1])
        series = parse_channel_file((path / f"channel_{parts[0]}.dat").read_bytes(), name)
        channels.setdefault(name, []).append(series)
    return match.group(1), channels


def write_redd_house(dataset: HouseDataset, root) -> Path:
    """Emit ``house_<id>/`` with mains on channel 1 and appliances after it."""
    house_dir = Path(root) / f"house_{dataset.house_id}"
    house_dir.mkdir(parents=True, exist_ok=True)
    names = ["mains", *dataset.appliances]
    (house_dir / "labels.dat").write_text("".join(f"{i} {n}\n" for i, n in enumerate(names, start=1)))
    for i, name in enumerate(names, start=1):
        watts = dataset.mains if name == "mains" else dataset.appliances[name]
        text = serialize_channel(ChannelSeries(dataset.timestamps, watts, name))
        (house_dir / f"channel_{i}.dat").write_text(text)
    return house_dir


def load_dataset_dir(root, period: float = RESAMPLE_PERIOD, gap_limit: float = GAP_LIMIT) -> list[HouseDataset]:
    root = Path(root)
    dirs = sorted(p for p in root.glob("house_*") if p.is_dir())
    if not dirs:
        raise ConfigError(f"{root}: no house_<n> directories")
    houses = []
    for d in dirs:
        house_id, channels = read_redd_house(d)
        houses.append(align_resample(channels, period, gap_limit, house_id))
    return sorted(houses, key=lambda h: house_ordinal(h.house_id))


# ---------------------------------------------------------------- alignment


def _resample(series: ChannelSeries, grid: np.ndarray, period: float, gap_limit: float) -> np.ndarray:
    n = grid.size
    bins = np.floor((series.timestamps - grid[0]) / period).astype(np.int64)
    keep = (bins >= 0) & (bins < n)
    sums = np.bincount(bins[keep], weights=series.watts[keep], minlength=n)
    counts = np.bincount(bins[keep], minlength=n)
    out = np.full(n, np.nan)
    filled = counts > 0
    out[filled] = sums[filled] / counts[filled]
    # empty bins: carry the last reading forward while it is fresh enough
    last = np.searchsorted(series.timestamps, grid, side="right") - 1
    stale_ok = (last >= 0) & ~filled
    idx = np.flatnonzero(stale_ok)
    age = grid[idx] - series.timestamps[last[idx]]
    fresh = idx[age <= gap_limit]
    out[fresh] = series.watts[last[fresh]]
    return out


def align_resample(
    channels: dict[str, list[ChannelSeries]],
    period: float = RESAMPLE_PERIOD,
    gap_limit: float = GAP_LIMIT,
    house_id: str = "1",
) -> HouseDataset:
    """Put every channel on one uniform grid; mains channels are summed.

    Each grid bin ``[t, t + period)`` takes the mean of the readings inside
    it; empty bins forward-fill from the last reading up to ``gap_limit``
    seconds old.  Grid points where any channel is still missing are dropped
    for all channels.
    """
    mains = channels.get("mains", [])
    others = {k: v for k, v in channels.items() if k != "mains"}
    if not mains or not others:
        raise AlignmentError("need at least one mains channel and one appliance channel")
    all_series = [s for group in channels.values() for s in group]
    if any(len(s) == 0 for s in all_series):
        raise AlignmentError("cannot align an empty channel")
    start = max(s.timestamps[0] for s in all_series)
    stop = min(s.timestamps[-1] for s in all_series)
    if stop < start:
        raise AlignmentError("channels do not overlap in time")
    grid = start + period * np.arange(int(np.floor((stop - start) / period)) + 1)

    def combined(group):
        return np.sum([_resample(s, grid, period, gap_limit) for s in group], axis=0)

    agg = combined(mains)
    apps = {k: combined(v) for k, v in others.items()}
    valid = np.isfinite(agg)
    for arr in apps.values():
        valid &= np.isfinite(arr)
    dropped = int((~valid).sum())
    if dropped:
        log.info("house %s: dropped %d grid points inside gaps", house_id, dropped)
    if not valid.any():
        raise AlignmentError("no grid point has data for every channel")
    return HouseDataset(
        house_id=str(house_id),
        timestamps=grid[valid],
        mains=agg[valid],
        appliances={k: v[valid] for k, v in apps.items()},
        period=period,
    )


# ---------------------------------------------------------------- labelling and windows


def label_states(watts, spec: ApplianceSpec) -> np.ndarray:
    return np.where(np.asarray(watts) >= spec.on_threshold, 1, -1).astype(np.int8)


def window_count(total: int, length: int, stride: int) -> int:
    return 0 if total < length else (total - length) // stride + 1


def build_windows(
    dataset: HouseDataset,
    appliance: str,
    length: int,
    stride: int,
    specs: dict[str, ApplianceSpec] | None = None,
    agg_p_max: float = AGGREGATE_P_MAX,
) -> WindowBatch:
    """Slide windows over each gap-free segment and normalise to ``[0, 1]``."""
    specs = specs or DEFAULT_APPLIANCES
    if appliance not in specs:
        raise ConfigError(f"no appliance spec for {appliance!r}")
    if appliance not in dataset.appliances:
        raise ConfigError(f"house {dataset.house_id} has no {appliance!r} channel")
    if stride < 1:
        raise ConfigError(f"stride must be positive, got {stride}")
    spec = specs[appliance]
    if len(dataset) < length:
        raise ConfigError(f"house {dataset.house_id}: series length {len(dataset)} shorter than window {length}")
    starts = []
    for seg in dataset.segments():
        n = window_count(seg.stop - seg.start, length, stride)
        starts.extend(seg.start + stride * np.arange(n))
    starts = np.asarray(starts, dtype=np.int64)
    offsets = starts[:, None] + np.arange(length)[None, :]
    agg = dataset.mains[offsets] / agg_p_max
    app_watts = dataset.appliances[appliance][offsets]
    target = app_watts / spec.p_max
    clipped = int((agg > 1).sum() + (target > 1).sum())
    if clipped:
        log.info("house %s: clipped %d samples above the power limit", dataset.house_id, clipped)
    return WindowBatch(
        inputs=np.clip(agg, 0.0, 1.0),
        targets=np.clip(target, 0.0, 1.0),
        states=label_states(app_watts, spec),
        house_ids=np.full(len(starts), dataset.house_id),
        appliance=appliance,
        p_max=spec.p_max,
        agg_p_max=agg_p_max,
    )


def house_ordinal(house_id: str) -> int:
    match = re.search(r"(\d+)$", str(house_id))
    if not match:
        raise ConfigError(f"house id {house_id!r} has no ordinal")
    return int(match.group(1))


def split_train_test(houses: list[HouseDataset]) -> tuple[list[HouseDataset], list[HouseDataset]]:
    """House 1 (or synthetic S1) is the test home; every other house trains."""
    if not houses:
        raise ConfigError("no houses to split")
    test = [h for h in houses if house_ordinal(h.house_id) == 1]
    if not test:
        raise ConfigError("house 1 is missing; it is the held-out test house")
    train = [h for h in houses if house_ordinal(h.house_id) != 1]
    return sorted(train, key=lambda h: house_ordinal(h.house_id)), test


def validation_split(batch: WindowBatch, fraction: float = 0.1) -> tuple[WindowBatch, WindowBatch]:
    """Hold out the last ``fraction`` of each house's windows."""
    train_idx, val_idx = [], []
    for house in dict.fromkeys(batch.house_ids.tolist()):
        idx = np.flatnonzero(batch.house_ids == house)
        n_val = int(round(fraction * len(idx)))
        cut = len(idx) - n_val
        train_idx.extend(idx[:cut])
        val_idx.extend(idx[cut:])
    return batch.subset(np.array(train_idx, dtype=int)), batch.subset(np.array(val_idx, dtype=int))


# ---------------------------------------------------------------- synthetic homes


def _quantise(x: np.ndarray) -> np.ndarray:
    return np.round(np.asarray(x) / SYNTH_RESOLUTION) * SYNTH_RESOLUTION


def _on_off_pulses(n, period, rated, rng):
    """Category I: square pulses of a few minutes at irregular intervals."""
    out = np.zeros(n)
    t = int(rng.integers(0, max(1, int(1200 / period))))
    while t < n:
        on = int(rng.integers(int(60 / period), int(600 / period) + 1))
        level = rated * (0.95 + 0.1 * rng.uniform(()))
        out[t : t + on] = level
        t += on + int(rng.integers(int(900 / period), int(3600 / period) + 1))
    return out


def _duty_cycle(n, period, rated, rng):
    """Category II: compressor-style cycle with a start-up spike and two running levels."""
    out = np.zeros(n)
    t = int(rng.integers(0, max(1, int(1800 / period))))
    spike = max(1, int(6 / period))
    while t < n:
        on = int(rng.integers(int(600 / period), int(1500 / period) + 1))
        off = int(rng.integers(int(900 / period), int(2400 / period) + 1))
        half = on // 2
        out[t : t + half] = rated
        out[t + half : t + on] = 0.85 * rated
        out[t : t + spike] = 1.6 * rated
        t += on + off
    return out


def _variable(n, period, rated, rng):
    """Category III: piecewise-linear ramps between random levels, with idle stretches."""
    out = np.zeros(n)
    t = 0
    level = 0.0
    while t < n:
        seg = int(rng.integers(int(120 / period), int(900 / period) + 1))
        nxt = 0.0 if rng.uniform(()) < 0.4 else rated * rng.uniform(())
        stop = min(n, t + seg)
        out[t:stop] = np.linspace(level, nxt, seg, endpoint=False)[: stop - t]
        level = nxt
        t = stop
    return out


_GENERATORS = {"I": _on_off_pulses, "II": _duty_cycle, "III": _variable}


def synth_generate(
    specs: list[ApplianceSpec],
    duration: float,
    noise_sigma: float,
    seed: int,
    period: float = RESAMPLE_PERIOD,
    house_id: str = "S1",
    start: float = 1303132929.0,
) -> HouseDataset:
    """Synthetic home: aggregate = sum of appliance channels + Gaussian noise, clipped at 0.

    Appliance channels and the noise draw are quantised to a dyadic step so
    that ``mains_before_clip - sum(appliances) == noise`` holds exactly.
    """
    if not specs:
        raise ConfigError("need at least one appliance spec")
    n = int(duration // period)
    rng = RngStream(seed)
    appliances: dict[str, np.ndarray] = {}
    for i, spec in enumerate(specs):
        sub = rng.spawn(i + 1)
        if spec.category == "IV":
            watts = np.full(n, float(spec.rated))
        else:
            watts = _GENERATORS[spec.category](n, period, spec.rated, sub)
        appliances[spec.name] = _quantise(np.maximum(watts, 0.0))
    noise = _quantise(rng.normal(n, noise_sigma)) if noise_sigma > 0 else np.zeros(n)
    total = np.zeros(n)
    for watts in appliances.values():
        total = total + watts
    raw = total + noise
    return HouseDataset(
        house_id=house_id,
        timestamps=start + period * np.arange(n),
        mains=np.maximum(raw, 0.0),
        appliances=appliances,
        period=period,
        noise=noise,
    )
