"""Flat ``key=value`` experiment configuration.

One file configures data generation, source pretraining, training and
reporting. Blank lines and ``#`` comments are ignored; list values are
comma separated. Unknown keys are rejected before anything runs.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

from .synthdata import ModalityPairSpec, PretrainConfig
from .training import METHODS, TrainConfig


class ConfigError(ValueError):
    """Malformed or inconsistent configuration."""


@dataclass
class ExperimentConfig:
    # data
    source_classes: int = 10
    target_classes: int = 4
    delta: float = 0.9
    transform: str = "random-linear"
    noise: float = 0.25
    n_source: int = 2000
    n_target: int = 1000
    latent_dim: int = 16
    source_raw_dim: int = 32
    target_raw_dim: int = 24
    signal: float = 1.0
    target_train_fraction: float = 0.2
    surrogate_size: int = 400
    probe_size: int = 2000
    # pretraining
    pretrain_embed_dim: int = 16
    pretrain_hidden: int = 32
    pretrain_depth: int = 2
    pretrain_lr: float = 0.05
    pretrain_max_steps: int = 4000
    # training
    method: str = "mona"
    inner_lr: float = 2.0
    meta_lr: float = 0.5
    finetune_lr: float = 0.2
    momentum: float = 0.9
    lam: float = 0.4
    stage1_steps: int = 100
    stage2_steps: int = 600
    inner_steps: int = 1
    batch_size: int = 64
    source_batch_size: int = 60
    outer_variant: str = "au"
    literal_eq5_signs: bool = False
    supcon_temperature: float = 0.1
    stage2_head: str = "reuse"
    # discrepancy
    trials: int = 100_000
    mode: str = "auto"
    # orchestration
    seed: int = 0
    seeds: list[int] = field(default_factory=lambda: [0])
    methods: list[str] = field(default_factory=lambda: ["finetune", "mona"])
    deltas: list[float] = field(default_factory=list)
    lambdas: list[float] = field(default_factory=list)
    inner_steps_list: list[int] = field(default_factory=list)
    outer_variants: list[str] = field(default_factory=list)
    out: str = "runs"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        try:
            self.pair_spec()
            self.train_config()
            self.pretrain_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r} in methods; expected one of {METHODS}")
        if not 0 < self.target_train_fraction < 1:
            raise ConfigError("target_train_fraction must lie in (0, 1)")
        if self.mode not in ("auto", "exact", "mc", "mc-hungarian"):
            raise ConfigError(f"unknown mode {self.mode!r}; expected auto, exact, mc or mc-hungarian")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")

    def pair_spec(self, delta: float | None = None) -> ModalityPairSpec:
        names = {f.name for f in fields(ModalityPairSpec)}
        values = {k: getattr(self, k) for k in names}
        if delta is not None:
            values["delta"] = delta
        return ModalityPairSpec(**values)

    def train_config(self, **overrides) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        values = {k: getattr(self, k) for k in names}
        values.update(overrides)
        return TrainConfig(**values)

    def pretrain_config(self, seed: int | None = None) -> PretrainConfig:
        return PretrainConfig(embed_dim=self.pretrain_embed_dim, hidden=self.pretrain_hidden,
                              depth=self.pretrain_depth, lr=self.pretrain_lr,
                              max_steps=self.pretrain_max_steps,
                              seed=self.seed if seed is None else seed)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"


_TYPES = typing.get_type_hints(ExperimentConfig)


def _coerce(key: str, raw: str):
    kind = _TYPES[key]
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind in (int, float, str):
            return kind(raw)
        (item,) = typing.get_args(kind)
        return [item(x.strip()) for x in raw.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(kind, '__name__', kind)}") from None


def parse_pairs(pairs: dict[str, str]) -> dict:
    unknown = sorted(set(pairs) - set(_TYPES))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return {k: _coerce(k, v) for k, v in pairs.items()}


def read_pairs(path) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    pairs = {}
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value
    return pairs


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """File values, then ``overrides`` (already typed or raw strings) on top."""
    values = parse_pairs(read_pairs(path)) if path else {}
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        values.update(parse_pairs({k: v}) if isinstance(v, str) else {k: v})
    unknown = sorted(set(values) - set(_TYPES))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return ExperimentConfig(**values)


def write_config(path, cfg: ExperimentConfig) -> None:
    Path(path).write_text(cfg.to_text(), encoding="utf-8")
