"""Training configuration and its text/flag overrides."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

from .data import BatchPlan
from .losses import MEASURES, Measure
from .model import ModelSpec

METHODS = ("baseline_l2", "l2sp", "delta_lite", "sbr")

# gradient-reduce ratio and extractor lr divisor used when a method leaves them unset
METHOD_DEFAULTS = {
    "sbr": {"alpha": 0.1, "kappa": 1.0},
    "baseline_l2": {"alpha": 1.0, "kappa": 10.0},
    "l2sp": {"alpha": 1.0, "kappa": 10.0},
    "delta_lite": {"alpha": 1.0, "kappa": 10.0},
}


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    method: str = "sbr"
    measure: str = "squared_euclidean"
    alpha: Optional[float] = None
    beta: float = 1e-4
    kappa: Optional[float] = None
    sp_alpha: float = 0.01
    sp_beta: float = 1e-4
    weight_decay: float = 1e-4
    weight_decay_f: Optional[float] = None   # extractor override; defaults to weight_decay
    base_lr: float = 0.05
    momentum: float = 0.0
    epochs: int = 200
    schedule_per: str = "epoch"
    feature_layer_widths: tuple = (64, 32)
    classes_per_batch: int = 8
    samples_per_class: int = 4
    drop_incomplete: bool = False
    batch_mode: str = "pk"
    sampling_rate: float = 1.0
    seed: int = 0
    seeds_for_report: int = 5

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.measure not in MEASURES:
            raise ConfigError(f"measure must be one of {MEASURES}, got {self.measure!r}")
        if self.alpha is None:
            self.alpha = METHOD_DEFAULTS[self.method]["alpha"]
        if self.kappa is None:
            self.kappa = METHOD_DEFAULTS[self.method]["kappa"]
        self.feature_layer_widths = tuple(int(w) for w in self.feature_layer_widths)
        if not (0.0 < self.alpha <= 1.0):
            raise ConfigError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.beta < 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if self.kappa < 1:
            raise ConfigError(f"kappa must be >= 1, got {self.kappa}")
        if not (0.0 < self.sampling_rate <= 1.0):
            raise ConfigError(f"sampling_rate must be in (0, 1], got {self.sampling_rate}")
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.epochs < 1 or self.seeds_for_report < 1:
            raise ConfigError("epochs and seeds_for_report must be positive")
        if self.schedule_per not in ("epoch", "step"):
            raise ConfigError("schedule_per must be 'epoch' or 'step'")
        if self.base_lr <= 0 or self.weight_decay < 0:
            raise ConfigError("base_lr must be positive and weight_decay nonnegative")
        try:
            plan = self.batch_plan
            if self.method == "sbr":
                plan.check_for_sbr()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def batch_plan(self) -> BatchPlan:
        return BatchPlan(self.classes_per_batch, self.samples_per_class, self.drop_incomplete, self.batch_mode)

    @property
    def measure_obj(self) -> Measure:
        return Measure(self.measure)

    @property
    def lambda_f(self) -> float:
        return self.weight_decay if self.weight_decay_f is None else self.weight_decay_f

    def model_spec(self, input_dim: int, num_classes: int) -> ModelSpec:
        return ModelSpec(input_dim, self.feature_layer_widths, num_classes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["feature_layer_widths"] = list(self.feature_layer_widths)
        return d

    def with_(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


def standard_sbr(**kw) -> TrainConfig:
    """The operating point used for the method: alpha=0.1, kappa=1, beta=1e-4."""
    return TrainConfig(method="sbr", alpha=0.1, kappa=1.0, beta=1e-4, **kw)


def standard_baseline(**kw) -> TrainConfig:
    """Conventional fine-tuning: extractor lr 10x smaller, no gradient reduction."""
    return TrainConfig(method="baseline_l2", alpha=1.0, kappa=10.0, beta=0.0, **kw)


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _coerce(key: str, raw):
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    t = _FIELD_TYPES[key]
    if not isinstance(raw, str):
        return tuple(raw) if key == "feature_layer_widths" else raw
    try:
        if key == "feature_layer_widths":
            return tuple(int(v) for v in raw.replace("[", "").replace("]", "").split(",") if v.strip())
        if "bool" in t:
            if raw.lower() in ("1", "true", "yes"):
                return True
            if raw.lower() in ("0", "false", "no"):
                return False
            raise ValueError(raw)
        if "Optional" in t and raw.lower() in ("none", "null", ""):
            return None
        if "int" in t:
            return int(raw)
        if "float" in t:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def load_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> TrainConfig:
    """JSON object of TrainConfig keys, then ``overrides`` applied on top."""
    raw = {}
    if path:
        with open(path) as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: expected a JSON object")
    raw.update(overrides or {})
    kwargs = {k: _coerce(k, v) for k, v in raw.items()}
    try:
        return TrainConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def parse_overrides(args: list) -> dict:
    """``["--beta=0.1", "--method=sbr"]`` -> ``{"beta": "0.1", "method": "sbr"}``."""
    out = {}
    for a in args:
        if not a.startswith("--") or "=" not in a:
            raise ConfigError(f"expected --key=value, got {a!r}")
        k, v = a[2:].split("=", 1)
        out[k.replace("-", "_")] = v
    return out
