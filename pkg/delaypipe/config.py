"""
Experiment configuration.

A config file (JSON or TOML) mirrors ExperimentConfig; command-line flags
override file values. Unknown keys are rejected.
"""

import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Union

from delaypipe.errors import ConfigError
from delaypipe.nn_core import SgdConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger(__name__)

DATASET_KINDS = ("spiral", "blobs", "idx")
DEFAULT_STRATEGIES = ("sequential", "stash", "latest", "ema-fixed:0.9", "ema-pipeline")
DEFAULT_HIDDEN_WIDTH = 64


@dataclass
class DatasetConfig:
    kind: str = "spiral"
    classes: int = 3
    samples: int = 3000
    noise: float = 0.2
    spread: float = 0.5
    path: Optional[str] = None

    def validate(self) -> None:
        if self.kind not in DATASET_KINDS:
            raise ConfigError(f"Unknown dataset kind '{self.kind}'. Choose from: {', '.join(DATASET_KINDS)}")
        if self.kind == "idx":
            if not self.path:
                raise ConfigError("IDX dataset needs a path")
            if not Path(self.path).is_dir():
                raise ConfigError(f"IDX dataset directory does not exist: {self.path}")
        elif self.classes < 2 or self.samples < self.classes:
            raise ConfigError("Synthetic dataset needs >= 2 classes and at least one sample per class")


@dataclass
class SgdSection:
    lr: float = 0.05
    momentum: float = 0.0
    weight_decay: float = 0.0
    schedule: str = "constant"
    t_max: int = 0


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    layers: List[int] = field(default_factory=lambda: [2, 64, 64, 64, 3])
    partition: str = "per-layer"
    strategy: str = "ema-pipeline"
    strategies: List[str] = field(default_factory=lambda: list(DEFAULT_STRATEGIES))
    sgd: SgdSection = field(default_factory=SgdSection)
    epochs: int = 20
    batch_size: int = 32
    warmup: Optional[int] = None
    accumulate: str = "auto"
    seed: int = 0
    parallel: bool = False
    workers: int = 1
    out: str = "runs"

    @property
    def num_layers(self) -> int:
        return len(self.layers) - 1

    def validate(self) -> None:
        self.dataset.validate()
        if len(self.layers) < 2 or any(w < 1 for w in self.layers):
            raise ConfigError(f"Layer sizes must list input and output width, got {self.layers}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.warmup is not None and self.warmup < 0:
            raise ConfigError("warmup must be nonnegative")
        if self.accumulate not in ("auto", "gradient", "update"):
            raise ConfigError(f"Unknown accumulation mode '{self.accumulate}'")
        if self.workers < 1:
            raise ConfigError("workers must be positive")
        try:
            self.sgd_config(1)
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def sgd_config(self, total_iterations: int) -> SgdConfig:
        """SgdConfig with the cosine horizon defaulting to the whole run."""
        t_max = self.sgd.t_max or total_iterations
        return SgdConfig(self.sgd.lr, self.sgd.momentum, self.sgd.weight_decay, self.sgd.schedule, t_max if self.sgd.schedule == "cosine" else 0)

    def warmup_iterations(self, train_size: int) -> int:
        """Explicit warm-up, or two passes over the training set."""
        if self.warmup is not None:
            return self.warmup
        return 2 * math.ceil(train_size / self.batch_size)

    def accumulate_mode(self) -> str:
        if self.accumulate != "auto":
            return self.accumulate
        plain = self.sgd.momentum == 0 and self.sgd.weight_decay == 0
        return "gradient" if plain else "update"

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _build(cls, data: Mapping[str, Any], where: str):
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"Unknown key(s) in {where}: {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if key == "dataset":
            value = _build(DatasetConfig, value, "dataset")
        elif key == "sgd":
            value = _build(SgdSection, value, "sgd")
        kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(data: Mapping[str, Any]) -> ExperimentConfig:
    try:
        cfg = _build(ExperimentConfig, data, "config")
    except TypeError as e:
        raise ConfigError(f"Malformed config: {e}") from e
    cfg.validate()
    return cfg


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    try:
        if path.suffix == ".toml":
            data = tomllib.loads(path.read_text())
        else:
            data = json.loads(path.read_text())
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(f"Cannot parse config {path}: {e}") from e
    logger.info(f"Loaded config from {path}")
    return config_from_dict(data)


def parse_layers(text: str, inputs: int = 2, classes: int = 3) -> List[int]:
    """'4' gives 4 dense layers of width 64; '2,32,32,3' gives explicit sizes."""
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"Cannot parse layers '{text}'") from None
    if len(values) == 1:
        if values[0] < 1:
            raise ConfigError(f"Need at least one layer, got {values[0]}")
        return [inputs] + [DEFAULT_HIDDEN_WIDTH] * (values[0] - 1) + [classes]
    return values


def apply_overrides(cfg: ExperimentConfig, **overrides: Any) -> ExperimentConfig:
    """Copy of ``cfg`` with every non-None override applied; keys use CLI flag names."""
    top: Dict[str, Any] = {}
    sgd: Dict[str, Any] = {}
    mapping = {"weights": "strategy", "batch": "batch_size"}
    sgd_keys = {"lr": "lr", "momentum": "momentum", "wd": "weight_decay", "schedule": "schedule"}
    for key, value in overrides.items():
        if value is None:
            continue
        if key in sgd_keys:
            sgd[sgd_keys[key]] = value
        elif key == "layers":
            top["layers"] = parse_layers(value, cfg.layers[0], cfg.layers[-1]) if isinstance(value, str) else list(value)
        elif key == "strategies":
            top["strategies"] = list(value)
        else:
            name = mapping.get(key, key)
            if name not in {f.name for f in fields(ExperimentConfig)}:
                raise ConfigError(f"Unknown override '{key}'")
            top[name] = value
    result = replace(cfg, sgd=replace(cfg.sgd, **sgd), **top)
    result.validate()
    return result
