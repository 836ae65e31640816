"""Run configuration: one JSON file drives every command."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .finetune import FinetuneConfig, FitnessConfig
from .nn import ModelConfig
from .search import SearchConfig

SEED_ENV = "EQD_SEED"


@dataclass
class PretrainConfig:
    corpus_size: int = 10000
    epochs: int = 16
    lr: float = 1e-3
    batch_size: int = 32
    rows_per_example: int = 64
    num_vars_range: tuple[int, int] = (1, 3)
    depth_range: tuple[int, int] = (2, 4)

    def __post_init__(self):
        if self.corpus_size < 1 or self.epochs < 0 or self.batch_size < 1 or self.rows_per_example < 2:
            raise ConfigError("pretrain corpus_size/epochs/batch_size/rows_per_example out of range")
        if self.lr <= 0:
            raise ConfigError("pretrain.lr must be > 0")
        self.num_vars_range = tuple(self.num_vars_range)
        self.depth_range = tuple(self.depth_range)


@dataclass
class BenchConfig:
    noise: float = 0.0
    split_ratio: float = 0.75
    threshold: float = 0.99

    def __post_init__(self):
        if self.noise < 0:
            raise ConfigError("bench.noise must be >= 0")
        if not 0.0 < self.split_ratio < 1.0:
            raise ConfigError("bench.split_ratio must lie in (0, 1)")


@dataclass
class PathsConfig:
    corpus: str | None = None
    checkpoints: str = "checkpoints"
    quadruples: str = "quadruples"
    reports: str = "reports"


SECTIONS = {
    "model": ModelConfig,
    "pretrain": PretrainConfig,
    "fitness": FitnessConfig,
    "finetune": FinetuneConfig,
    "search": SearchConfig,
    "bench": BenchConfig,
    "paths": PathsConfig,
}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    fitness: FitnessConfig = field(default_factory=FitnessConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    master_seed: int = 0

    def to_dict(self) -> dict:
        out = {name: asdict(getattr(self, name)) for name in SECTIONS}
        out["master_seed"] = self.master_seed
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - set(SECTIONS) - {"master_seed"}
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(sorted(unknown))}")
        kwargs = {}
        for name, klass in SECTIONS.items():
            section = d.get(name, {})
            if not isinstance(section, dict):
                raise ConfigError(f"config field {name!r} must be an object")
            allowed = {f.name for f in fields(klass)}
            bad = set(section) - allowed
            if bad:
                raise ConfigError(f"unknown field(s) in {name!r}: {', '.join(sorted(bad))}")
            try:
                kwargs[name] = klass(**section)
            except ConfigError:
                raise
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid {name!r} section: {exc}") from None
        seed = d.get("master_seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise ConfigError("config field 'master_seed' must be an integer")
        return cls(master_seed=seed, **kwargs)


def load_config(path: str | Path | None) -> RunConfig:
    """Read a RunConfig from JSON (defaults when ``path`` is None); EQD_SEED
    overrides master_seed."""
    if path is None:
        cfg = RunConfig()
    else:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {p} is not valid JSON: {exc}") from None
        cfg = RunConfig.from_dict(data)
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            cfg.master_seed = int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return cfg
