"""Run configuration and its flat ``key = value`` file format."""
from __future__ import annotations

import dataclasses
import math
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    precision: str = "float32"

    # data
    T: int = 16
    N: int = 4
    hands: int = 1
    appearance_dim: int = 16
    num_verbs: int = 6
    num_preps: int = 4
    num_nouns: int = 8
    num_classes: int = 40
    noise: float = 4.0
    p_miss: float = 0.05
    head_count: int = 200
    tail_count: int = 10
    val_per_class: int = 20
    fewshot_base_classes: int = 20
    fewshot_base_count: int = 100
    fewshot_pool: int = 10
    compositional_train_count: int = 60
    compositional_val_fraction: float = 0.25

    # model
    D: int = 128
    gnn_steps: int = 2
    gcn_layers: int = 2
    mlp_layers: int = 2
    reducer_layers: int = 1
    n_max_verb: int = 2
    n_max_prep: int = 2
    n_max_noun: int = 2
    adjacency_noise: float = 1e-3
    shared_tcn: bool = True
    separate_gnns: bool = False
    full_graph_sum: bool = True
    gcn_residual: bool = True

    # training
    batch_size: int = 64
    lr: float = 0.01
    lr_decay_epochs: list[int] = field(default_factory=lambda: [15])
    lr_decay_factor: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 25
    lam: float = 0.1
    composition: bool = True
    attached_composition: bool = False
    composed_per_batch: int = 10
    tail_classes: int = 20
    tail_threshold: int = 0
    bank_capacity: int = 64

    # few-shot finetuning
    fewshot_epochs: int = 8
    fewshot_batch_size: int = 16
    fewshot_lr: float = 0.01
    fewshot_bank_per_class: int = 8

    def __post_init__(self):
        self.validate()

    def validate(self) -> "RunConfig":
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        positive = ["T", "N", "hands", "appearance_dim", "D", "gnn_steps", "gcn_layers",
                    "mlp_layers", "reducer_layers", "n_max_verb", "n_max_noun", "batch_size",
                    "num_verbs", "num_preps", "num_nouns", "num_classes", "bank_capacity",
                    "fewshot_batch_size"]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.N - self.hands < 2:
            raise ConfigError("need at least two object slots (N - hands >= 2)")
        for name in ("lam", "lr", "noise", "epochs", "composed_per_batch", "n_max_prep",
                     "weight_decay", "momentum"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0 <= self.p_miss < 1:
            raise ConfigError(f"p_miss must lie in [0, 1), got {self.p_miss}")
        lcm = math.lcm(*range(1, max(self.n_max_verb, self.n_max_prep, self.n_max_noun) + 1))
        if self.D % lcm:
            raise ConfigError(f"D={self.D} must be divisible by lcm(1..n_max)={lcm}")
        return self

    def lr_at(self, epoch: int, base: float | None = None) -> float:
        """Piecewise-constant schedule: divide by the factor at every decay epoch passed."""
        base = self.lr if base is None else base
        drops = sum(1 for e in self.lr_decay_epochs if epoch >= e)
        return base / (self.lr_decay_factor ** drops)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        return cls(**d)


def _coerce(name: str, raw: str, tp):
    raw = raw.strip()
    origin = typing.get_origin(tp)
    try:
        if tp is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if origin is list:
            (inner,) = typing.get_args(tp)
            return [inner(x) for x in raw.replace(",", " ").split()]
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    hints = typing.get_type_hints(RunConfig)
    values = dataclasses.asdict(base) if base is not None else {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in hints:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        values[key] = _coerce(key, raw, hints[key])
    return RunConfig(**values)


def load_config(path: str | os.PathLike | None = None, env: dict | None = None) -> RunConfig:
    """Read a config file (defaults when ``path`` is None); FFCN_SEED overrides the seed."""
    cfg = parse_config_text(Path(path).read_text(encoding="utf-8")) if path else RunConfig()
    env = os.environ if env is None else env
    if env.get("FFCN_SEED"):
        try:
            cfg = cfg.replace(seed=int(env["FFCN_SEED"]))
        except ValueError:
            raise ConfigError(f"FFCN_SEED must be an integer, got {env['FFCN_SEED']!r}") from None
    return cfg


def format_config(cfg: RunConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, list):
            v = ", ".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
