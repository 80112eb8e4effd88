"""TOML run configuration.

Every key has a default, so an empty file reproduces the reference
settings.  Unknown keys and ill-typed values raise :class:`ConfigError`
whose message begins with the dotted key path (``trainer.lr: ...``).
"""
from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .closedloop import LossWeights
from .errors import ConfigError, ShapeError
from .plant import LinearSSM
from .scenarios import ScenarioConfig
from .trainer import TrainConfig

__all__ = ["Config", "PlantConfig", "PolicyConfig", "EvalConfig", "load_config", "parse_config",
           "DEFAULT_CONFIG_PATH"]

DEFAULT_CONFIG_PATH = Path(__file__).with_name("default_config.toml")


@dataclass(frozen=True)
class PlantConfig:
    A: list = field(default_factory=lambda: [[0.95]])
    B: list = field(default_factory=lambda: [[-0.5]])
    C: list = field(default_factory=lambda: [[1.0]])
    E: list = field(default_factory=lambda: [[0.3]])
    u_min: list = field(default_factory=lambda: [0.0])
    u_max: list = field(default_factory=lambda: [5.0])
    du_max: float = 1.0

    def build(self, prefix="plant") -> LinearSSM:
        try:
            return LinearSSM(self.A, self.B, self.C, self.E, self.u_min, self.u_max, self.du_max)
        except (ShapeError, ValueError) as exc:
            raise ConfigError(f"{prefix}.{exc}") from None


@dataclass(frozen=True)
class PolicyConfig:
    hidden: int = 32
    depth: int = 2
    activation: str = "gelu"

    def validate(self, prefix="policy"):
        if self.hidden < 1:
            raise ConfigError(f"{prefix}.hidden: must be >= 1, got {self.hidden}")
        if self.depth < 0:
            raise ConfigError(f"{prefix}.depth: must be >= 0, got {self.depth}")
        if self.activation != "gelu":
            raise ConfigError(f"{prefix}.activation: only 'gelu' is supported, got {self.activation!r}")
        return self


@dataclass(frozen=True)
class EvalConfig:
    steps: int = 3000
    band_dwell: int = 500
    transient: int = 200
    scenarios: int = 1

    def validate(self, prefix="eval"):
        if self.steps < 1:
            raise ConfigError(f"{prefix}.steps: must be >= 1, got {self.steps}")
        if self.band_dwell < 1:
            raise ConfigError(f"{prefix}.band_dwell: must be >= 1, got {self.band_dwell}")
        if self.transient < 0:
            raise ConfigError(f"{prefix}.transient: must be >= 0, got {self.transient}")
        if self.scenarios < 1:
            raise ConfigError(f"{prefix}.scenarios: must be >= 1, got {self.scenarios}")
        return self


@dataclass(frozen=True)
class Config:
    plant: PlantConfig = field(default_factory=PlantConfig)
    scenarios: ScenarioConfig = field(default_factory=ScenarioConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    trainer: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    def model(self) -> LinearSSM:
        return self.plant.build()

    def train_config(self, seed=None) -> TrainConfig:
        return dataclasses.replace(self.trainer, weights=self.loss,
                                   seed=self.seed if seed is None else seed)

    def with_seed(self, seed) -> "Config":
        return dataclasses.replace(self, seed=int(seed))


_SECTIONS = {
    "plant": PlantConfig,
    "scenarios": ScenarioConfig,
    "loss": LossWeights,
    "policy": PolicyConfig,
    "trainer": TrainConfig,
    "eval": EvalConfig,
}
# set from elsewhere in the file, not from the [trainer] table
_HIDDEN = {"trainer": {"weights", "seed"}}


def _coerce(path, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        return _numeric_array(path, value, depth=2 if default and isinstance(default[0], list) else 1)
    raise ConfigError(f"{path}: unsupported value {value!r}")  # pragma: no cover


def _numeric_array(path, value, depth):
    if not isinstance(value, list) or not value:
        raise ConfigError(f"{path}: expected a non-empty array")
    if depth == 2:
        rows = [_numeric_array(f"{path}[{i}]", row, 1) for i, row in enumerate(value)]
        if len({len(r) for r in rows}) != 1:
            raise ConfigError(f"{path}: rows have different lengths")
        return rows
    out = []
    for i, v in enumerate(value):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{path}[{i}]: expected a number, got {v!r}")
        out.append(float(v))
    return out


def _section(name, cls, table):
    if not isinstance(table, dict):
        raise ConfigError(f"{name}: expected a table")
    defaults = cls()
    fields = {f.name for f in dataclasses.fields(cls) if f.init} - _HIDDEN.get(name, set())
    kwargs = {}
    for key, value in table.items():
        if key not in fields:
            raise ConfigError(f"{name}.{key}: unknown key (allowed: {', '.join(sorted(fields))})")
        kwargs[key] = _coerce(f"{name}.{key}", value, getattr(defaults, key))
    try:
        obj = cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{name}.{exc}") from None
    if hasattr(obj, "validate"):
        obj.validate(name)
    return obj


def parse_config(data: dict) -> Config:
    """Build a validated :class:`Config` from an already-parsed TOML table."""
    kwargs = {}
    for key, value in data.items():
        if key == "seed":
            kwargs["seed"] = _coerce("seed", value, 0)
            if kwargs["seed"] < 0:
                raise ConfigError(f"seed: must be >= 0, got {kwargs['seed']}")
        elif key in _SECTIONS:
            kwargs[key] = _section(key, _SECTIONS[key], value)
        else:
            raise ConfigError(f"{key}: unknown section (allowed: {', '.join(sorted(_SECTIONS))}, seed)")
    cfg = Config(**kwargs)
    cfg.plant.build()
    return cfg


def load_config(path=None) -> Config:
    """Read ``path`` (``None`` gives the built-in defaults)."""
    if path is None:
        return Config()
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror or exc})") from None
    try:
        data = tomllib.loads(raw.decode("utf-8"))
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: invalid TOML ({exc})") from None
    return parse_config(data)
