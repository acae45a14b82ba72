"""Manifest schema (YAML, versioned) and the data preparation it drives.

A training manifest looks like::

    version: 1
    appliance: fridge
    data:
      dir: data/            # REDD layout; or a `synthetic:` block instead
      train_stride: 240
      agg_p_max: 6000
    model:
      preset: compact       # any ModelConfig field may follow as an override
      window_len: 480
    train:
      epochs: 100
      lr: 0.0001
      masking_ratio: 0.3
      tau: 0.1
    appliances:             # per-appliance overrides of the default constants
      fridge: {p_max: 400, on_threshold: 50}

Unknown keys are rejected with the dotted path of the offending field.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .data import (
    AGGREGATE_P_MAX,
    DEFAULT_APPLIANCES,
    ApplianceSpec,
    HouseDataset,
    WindowBatch,
    build_windows,
    load_dataset_dir,
    split_train_test,
    synth_generate,
    validation_split,
)
from .errors import ConfigError
from .model import PRESET_MASKING, PRESETS, ModelConfig
from .numerics import RngStream
from .training import LossConfig, MaskingConfig, TrainConfig

SCHEMA_VERSION = 1


def read_manifest(path) -> dict:
    try:
        tree = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    if tree is None:
        tree = {}
    if not isinstance(tree, dict):
        raise ConfigError(f"{path}: manifest must be a mapping")
    version = tree.get("version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"version: unsupported schema version {version!r} (expected {SCHEMA_VERSION})")
    return tree


def _mapping(tree, where: str) -> dict:
    if tree is None:
        return {}
    if not isinstance(tree, dict):
        raise ConfigError(f"{where}: expected a mapping")
    return dict(tree)


def _reject_unknown(tree: dict, allowed, where: str) -> None:
    unknown = sorted(set(tree) - set(allowed))
    if unknown:
        prefix = f"{where}." if where else ""
        raise ConfigError(f"{prefix}{unknown[0]}: unknown field")


def _build(cls, tree: dict, where: str):
    _reject_unknown(tree, [f.name for f in fields(cls)], where)
    try:
        return cls(**tree)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass(frozen=True)
class SynthConfig:
    houses: int = 3
    duration: float = 3 * 86400.0
    noise_sigma: float = 10.0
    seed: int = 0
    appliances: tuple[str, ...] = ("fridge", "microwave")
    period: float = 3.0

    def __post_init__(self):
        object.__setattr__(self, "appliances", tuple(self.appliances))
        if self.houses < 1:
            raise ConfigError(f"houses must be >= 1, got {self.houses}")
        if self.duration <= 0 or self.noise_sigma < 0:
            raise ConfigError("duration must be positive and noise_sigma non-negative")
        if not self.appliances:
            raise ConfigError("need at least one appliance")


@dataclass(frozen=True)
class DataConfig:
    dir: str | None = None
    synthetic: SynthConfig | None = None
    train_stride: int | None = None
    test_stride: int | None = None
    agg_p_max: float = AGGREGATE_P_MAX
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.dir is None and self.synthetic is None:
            raise ConfigError("data: give either dir or synthetic")
        if self.dir is not None and self.synthetic is not None:
            raise ConfigError("data: dir and synthetic are mutually exclusive")
        if self.agg_p_max <= 0:
            raise ConfigError("data.agg_p_max must be positive")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("data.val_fraction must lie in [0, 1)")

    @classmethod
    def from_tree(cls, tree) -> "DataConfig":
        tree = _mapping(tree, "data")
        if "synthetic" in tree:
            tree["synthetic"] = _build(SynthConfig, _mapping(tree["synthetic"], "data.synthetic"), "data.synthetic")
        return _build(cls, tree, "data")


def resolve_specs(tree) -> dict[str, ApplianceSpec]:
    """Default appliance constants with per-appliance overrides applied."""
    specs = dict(DEFAULT_APPLIANCES)
    for name, override in _mapping(tree, "appliances").items():
        where = f"appliances.{name}"
        override = _mapping(override, where)
        _reject_unknown(override, [f.name for f in fields(ApplianceSpec) if f.name != "name"], where)
        base = asdict(specs[name]) if name in specs else {"name": name}
        try:
            specs[name] = ApplianceSpec(**{**base, **override, "name": name})
        except TypeError as exc:
            raise ConfigError(f"{where}: {exc}") from None
    return specs


def model_from_tree(tree, default_preset: str = "compact") -> tuple[str, ModelConfig]:
    tree = _mapping(tree, "model")
    name = tree.pop("preset", default_preset)
    if name not in PRESETS:
        raise ConfigError(f"model.preset: unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    _reject_unknown(tree, [f.name for f in fields(ModelConfig)], "model")
    return name, replace(PRESETS[name], **tree)


TRAIN_EXTRAS = ("masking_ratio", "tau")


def train_from_tree(tree, preset_name: str) -> tuple[TrainConfig, MaskingConfig, float]:
    tree = _mapping(tree, "train")
    masking = MaskingConfig(tree.pop("masking_ratio", PRESET_MASKING[preset_name]))
    tau = float(tree.pop("tau", LossConfig.tau))
    if "betas" in tree:
        tree["betas"] = tuple(tree["betas"])
    return _build(TrainConfig, tree, "train"), masking, tau


@dataclass(frozen=True)
class RunConfig:
    """Everything one training run needs, resolved from manifest and flags."""

    appliance: str
    preset: str
    model: ModelConfig
    train: TrainConfig
    masking: MaskingConfig
    tau: float
    data: DataConfig
    specs: dict[str, ApplianceSpec] = field(default_factory=lambda: dict(DEFAULT_APPLIANCES))

    def __post_init__(self):
        if self.appliance not in self.specs:
            raise ConfigError(f"appliance: no constants for {self.appliance!r}; add them under appliances")
        self.model.validate()

    @property
    def spec(self) -> ApplianceSpec:
        return self.specs[self.appliance]

    def loss_config(self) -> LossConfig:
        return LossConfig(tau=self.tau, lam=self.spec.lam, p_max=self.spec.p_max, on_threshold=self.spec.on_threshold)

    def to_tree(self) -> dict:
        data = {k: v for k, v in asdict(self.data).items() if v is not None}
        if "synthetic" in data:
            data["synthetic"]["appliances"] = list(data["synthetic"]["appliances"])
        train = asdict(self.train)
        train["betas"] = list(train["betas"])
        train.update(masking_ratio=self.masking.ratio, tau=self.tau)
        return {
            "version": SCHEMA_VERSION,
            "appliance": self.appliance,
            "data": data,
            "model": {"preset": self.preset, **self.model.to_dict()},
            "train": train,
            "appliances": {self.appliance: {k: v for k, v in asdict(self.spec).items() if k != "name"}},
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.to_tree(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    @classmethod
    def from_tree(cls, tree: dict, **flags) -> "RunConfig":
        """Build from a manifest tree; non-None ``flags`` override it.

        Recognised flags: data, appliance, seed, preset, epochs.
        """
        tree = dict(tree)
        tree.pop("version", None)
        _reject_unknown(tree, ["appliance", "data", "model", "train", "appliances"], "")
        model_tree = _mapping(tree.get("model"), "model")
        if flags.get("preset") is not None:
            model_tree["preset"] = flags["preset"]
        preset_name, model = model_from_tree(model_tree)
        train_tree = _mapping(tree.get("train"), "train")
        for key in ("seed", "epochs"):
            if flags.get(key) is not None:
                train_tree[key] = flags[key]
        train, masking, tau = train_from_tree(train_tree, preset_name)
        data_tree = _mapping(tree.get("data"), "data")
        if flags.get("data") is not None:
            data_tree = {k: v for k, v in data_tree.items() if k != "synthetic"}
            data_tree["dir"] = str(flags["data"])
        appliance = flags.get("appliance") or tree.get("appliance")
        if not appliance:
            raise ConfigError("appliance: required field is missing")
        return cls(
            appliance=str(appliance),
            preset=preset_name,
            model=model,
            train=train,
            masking=masking,
            tau=tau,
            data=DataConfig.from_tree(data_tree),
            specs=resolve_specs(tree.get("appliances")),
        )


# ---------------------------------------------------------------- data preparation


def synth_houses(cfg: SynthConfig, specs: dict[str, ApplianceSpec]) -> list[HouseDataset]:
    """Synthetic homes ``S1..Sn``; house ``i`` draws from ``seed`` spawned at ``i``."""
    missing = [a for a in cfg.appliances if a not in specs]
    if missing:
        raise ConfigError(f"synthetic.appliances: no constants for {missing}")
    chosen = [specs[a] for a in cfg.appliances]
    root = RngStream(cfg.seed)
    return [
        synth_generate(chosen, cfg.duration, cfg.noise_sigma, root.spawn(i).seed, cfg.period, house_id=f"S{i}")
        for i in range(1, cfg.houses + 1)
    ]


def load_houses(data: DataConfig, specs: dict[str, ApplianceSpec]) -> list[HouseDataset]:
    if data.synthetic is not None:
        return synth_houses(data.synthetic, specs)
    return load_dataset_dir(data.dir)


@dataclass
class Splits:
    train: WindowBatch
    val: WindowBatch
    test: WindowBatch


def prepare_splits(
    houses: list[HouseDataset],
    appliance: str,
    specs: dict[str, ApplianceSpec],
    window_len: int,
    data: DataConfig,
) -> Splits:
    """House 1 (or S1) becomes the test set; the rest train, minus a validation tail."""
    train_houses, test_houses = split_train_test(houses)
    if not train_houses:
        raise ConfigError("no training houses besides house 1")
    train_stride = data.train_stride or max(1, window_len // 2)
    test_stride = data.test_stride or window_len
    train_all = WindowBatch.concat(
        [build_windows(h, appliance, window_len, train_stride, specs, data.agg_p_max) for h in train_houses]
    )
    train, val = validation_split(train_all, data.val_fraction)
    test = WindowBatch.concat(
        [build_windows(h, appliance, window_len, test_stride, specs, data.agg_p_max) for h in test_houses]
    )
    return Splits(train, val, test)
