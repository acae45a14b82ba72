"""One-factor-at-a-time hyper-parameter sweep with tabular reports.

Each grid cell is one (axis value, appliance) pair trained from scratch with
seed ``base_seed ^ cell_index``.  Cells run in worker processes and are
assembled in grid order, so the results table does not depend on the worker
count or on completion order.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .config import Splits
from .data import ApplianceSpec
from .errors import ConfigError, DivergenceError, GeometryError
from .metrics import MRE_DEFINITION, MetricsReport, evaluate
from .model import PRESET_MASKING, ModelConfig, NilmModel, count_params, predict, preset
from .numerics import RngStream
from .training import LossConfig, MaskingConfig, TrainConfig, fit

AXES = ("hidden_dim", "n_layers", "n_heads", "dropout", "masking_ratio")

# the row values of each block of the published results table
TABLE_GRIDS = {
    "hidden_dim": [4, 8, 16, 32, 64, 128, 256, 512, 1024],
    "n_layers": list(range(1, 11)),
    "n_heads": [1, 2, 4, 8, 16, 32, 64, 128],
    "dropout": [round(0.1 * i, 1) for i in range(1, 10)],
    "masking_ratio": [round(0.1 * i, 1) for i in range(1, 10)],
}

METRIC_COLUMNS = ("Acc", "F1", "MRE", "MAE")
SWEEP_EPOCHS = 20
FULL_EPOCHS = 100
PROPOSED_LABEL = "proposed"


@dataclass(frozen=True)
class SweepGrid:
    axis: str
    values: tuple
    base: ModelConfig = field(default_factory=lambda: preset("bert4nilm-base"))
    masking_ratio: float = PRESET_MASKING["bert4nilm-base"]

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(self.values))
        if self.axis not in AXES:
            raise ConfigError(f"axis: expected one of {AXES}, got {self.axis!r}")
        if not self.values:
            raise ConfigError("values: the grid is empty")
        if len(set(self.values)) != len(self.values):
            raise ConfigError("values: duplicate grid values")

    def cell(self, value) -> tuple[ModelConfig, float]:
        """Base configuration with only ``axis`` set to ``value``; not validated."""
        if self.axis == "masking_ratio":
            return self.base, float(value)
        kind = float if self.axis == "dropout" else int
        return replace(self.base, **{self.axis: kind(value)}), self.masking_ratio


@dataclass
class TrialResult:
    index: int
    label: str
    value: object
    appliance: str
    seed: int
    config: dict
    masking_ratio: float
    status: str  # ok | skipped-invalid | diverged
    metrics: MetricsReport | None = None
    param_count: int = 0
    message: str = ""

    def to_json(self) -> str:
        obj = asdict(self)
        obj["metrics"] = None if self.metrics is None else asdict(self.metrics)
        return json.dumps(obj, sort_keys=True)


@dataclass(frozen=True)
class TrialSpec:
    index: int
    label: str
    value: object
    appliance: str
    seed: int
    config: ModelConfig
    masking_ratio: float
    train: TrainConfig
    loss: LossConfig


def run_trial(spec: TrialSpec, splits: Splits) -> TrialResult:
    """Train and evaluate one cell; invalid or divergent cells are recorded, not raised."""
    result = TrialResult(
        spec.index, spec.label, spec.value, spec.appliance, spec.seed, spec.config.to_dict(), spec.masking_ratio, "ok"
    )
    try:
        spec.config.validate()
        MaskingConfig(spec.masking_ratio)
    except (ConfigError, GeometryError) as exc:
        result.status, result.message = "skipped-invalid", str(exc)
        return result
    model = NilmModel.init(spec.config, RngStream(spec.seed).spawn(1))
    result.param_count = count_params(model).total
    try:
        fitted = fit(model, splits.train, spec.train, spec.loss, MaskingConfig(spec.masking_ratio), splits.val)
        pred = predict(fitted.model, splits.test.inputs) * spec.loss.p_max
        if not np.all(np.isfinite(pred)):
            raise DivergenceError("non-finite predictions")
    except DivergenceError as exc:
        result.status, result.message = "diverged", str(exc)
        return result
    true = splits.test.targets * spec.loss.p_max
    result.metrics = evaluate(pred, true, spec.loss.on_threshold, [r.seconds for r in fitted.history])
    return result


_WORKER_SPLITS: dict[str, Splits] = {}


def _init_worker(splits):
    _WORKER_SPLITS.clear()
    _WORKER_SPLITS.update(splits)


def _run_in_worker(spec: TrialSpec) -> TrialResult:
    return run_trial(spec, _WORKER_SPLITS[spec.appliance])


def plan_trials(
    grid: SweepGrid,
    appliances: list[str],
    specs: dict[str, ApplianceSpec],
    train: TrainConfig,
    tau: float,
    base_seed: int,
    append_proposed: bool = False,
) -> list[TrialSpec]:
    cells = [(str(v), v, *grid.cell(v)) for v in grid.values]
    if append_proposed:
        compact = preset("compact", window_len=grid.base.window_len)
        cells.append((PROPOSED_LABEL, PROPOSED_LABEL, compact, PRESET_MASKING["compact"]))
    trials = []
    for label, value, cfg, masking in cells:
        for appliance in appliances:
            s = specs[appliance]
            index = len(trials)
            seed = base_seed ^ index
            loss = LossConfig(tau=tau, lam=s.lam, p_max=s.p_max, on_threshold=s.on_threshold)
            trials.append(
                TrialSpec(index, label, value, appliance, seed, cfg, masking, replace(train, seed=seed), loss)
            )
    return trials


def run_sweep(
    grid: SweepGrid,
    splits: dict[str, Splits],
    specs: dict[str, ApplianceSpec],
    train: TrainConfig,
    tau: float = LossConfig.tau,
    base_seed: int = 0,
    workers: int = 1,
    append_proposed: bool = False,
) -> "ResultsTable":
    appliances = list(splits)
    if not appliances:
        raise ConfigError("appliances: nothing to sweep over")
    trials = plan_trials(grid, appliances, specs, train, tau, base_seed, append_proposed)
    if workers > 1:
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(splits,)) as pool:
            results = list(pool.map(_run_in_worker, trials))
    else:
        results = [run_trial(t, splits[t.appliance]) for t in trials]
    return ResultsTable(grid.axis, appliances, results)


# ---------------------------------------------------------------- reports


def _fmt(x: float) -> str:
    return "nan" if not math.isfinite(x) else f"{x:.4f}"


@dataclass
class ResultsTable:
    axis: str
    appliances: list[str]
    results: list[TrialResult]

    def rows(self) -> list[tuple[str, dict[str, TrialResult]]]:
        grouped: dict[str, dict[str, TrialResult]] = {}
        for r in sorted(self.results, key=lambda r: r.index):
            grouped.setdefault(r.label, {})[r.appliance] = r
        return list(grouped.items())

    def header(self) -> list[str]:
        cols = [self.axis, "params"]
        for app in self.appliances:
            cols.extend(f"{app} {m}" for m in METRIC_COLUMNS)
        return cols

    def check_one_factor(self) -> None:
        """Every hyper-parameter except the axis must agree across sweep rows."""
        ref = None
        for label, cells in self.rows():
            if label == PROPOSED_LABEL:
                continue
            for r in cells.values():
                snapshot = {**r.config, "masking_ratio": r.masking_ratio}
                snapshot.pop(self.axis, None)
                if ref is None:
                    ref = snapshot
                elif snapshot != ref:
                    diff = sorted(k for k in ref if ref[k] != snapshot.get(k))
                    raise ConfigError(f"row {label!r} varies {diff} besides {self.axis}")

    def body(self) -> list[list[str]]:
        self.check_one_factor()
        out = []
        for label, cells in self.rows():
            params = {r.param_count for r in cells.values()}
            row = [label, str(max(params)) if max(params) else "-"]
            for app in self.appliances:
                r = cells[app]
                if r.status != "ok":
                    row.extend([r.status] * len(METRIC_COLUMNS))
                else:
                    m = r.metrics
                    row.extend(_fmt(v) for v in (m.acc, m.f1, m.mre, m.mae))
            out.append(row)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\r\n")
        writer.writerow(self.header())
        writer.writerows(self.body())
        return buf.getvalue()

    def to_text(self) -> str:
        table = [self.header(), *self.body()]
        widths = [max(len(row[i]) for row in table) for i in range(len(table[0]))]
        lines = [f"# MRE = {MRE_DEFINITION}"]
        for n, row in enumerate(table):
            lines.append("  ".join(c.rjust(w) for c, w in zip(row, widths)).rstrip())
            if n == 0:
                lines.append("  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"

    def to_jsonl(self) -> str:
        return "".join(r.to_json() + "\n" for r in sorted(self.results, key=lambda r: r.index))

    def timing_csv(self) -> str:
        """Seconds per epoch for every cell; wall-clock, so not reproducible byte for byte."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\r\n")
        writer.writerow([self.axis, "appliance", "status", "epochs", "sec_per_epoch_mean", "sec_per_epoch_max"])
        for r in sorted(self.results, key=lambda r: r.index):
            secs = r.metrics.seconds_per_epoch if r.metrics else []
            mean = f"{np.mean(secs):.4f}" if secs else ""
            worst = f"{np.max(secs):.4f}" if secs else ""
            writer.writerow([r.label, r.appliance, r.status, len(secs), mean, worst])
        return buf.getvalue()
