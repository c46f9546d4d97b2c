"""Paired synthetic modalities with a controllable knowledge-misalignment knob.

The source modality is a Gaussian mixture around ``K_s`` unit prototypes in a
latent space, pushed to raw inputs by a fixed linear map. A target modality
draws ``K`` of those prototypes and re-expresses them through its own input
transform, so with ``delta = 0`` every target class is a relabelled source
class seen through a different sensor.

``delta`` sets the fraction of target classes that are *misaligned*. A
misaligned class is defined by a freshly drawn prototype direction that no
source class uses, and each of its samples also sits on a uniformly random
source prototype. The source model therefore sorts those samples by a
nuisance variable unrelated to the target label, and a target classifier has
to become invariant to exactly the structure the source encoder learned.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

TRANSFORMS = ("identity", "rotation", "random-linear", "nonlinear-mlp")


class AssumptionError(ValueError):
    """Target asks for more classes than the source modality has."""


@dataclass(frozen=True)
class ModalityPairSpec:
    source_classes: int = 10
    target_classes: int = 4
    delta: float = 0.5
    transform: str = "random-linear"
    noise: float = 0.25
    n_source: int = 2000
    n_target: int = 1000
    latent_dim: int = 16
    source_raw_dim: int = 32
    target_raw_dim: int = 24
    signal: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError(f"delta must lie in [0, 1], got {self.delta}")
        if self.transform not in TRANSFORMS:
            raise ValueError(f"unknown transform {self.transform!r}; expected one of {TRANSFORMS}")
        if self.target_classes > self.source_classes:
            raise AssumptionError(
                f"target classes ({self.target_classes}) exceed source classes ({self.source_classes})")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if self.transform == "rotation" and self.target_raw_dim < self.latent_dim:
            raise ValueError("rotation needs target_raw_dim >= latent_dim")
        for name in ("source_classes", "target_classes", "n_source", "n_target", "latent_dim",
                     "source_raw_dim", "target_raw_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    classes: int
    modality: str = "source"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.inputs.ndim != 2 or self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError(f"inputs {self.inputs.shape} vs {self.labels.shape[0]} labels")
        if np.any(self.labels < 0) or np.any(self.labels >= self.classes):
            raise ValueError(f"labels must lie in [0, {self.classes})")

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], self.classes, self.modality,
                       dict(self.provenance))


@dataclass(frozen=True)
class SourceWorld:
    """Generator state shared by a source modality and the targets built on it."""

    prototypes: np.ndarray   # K_s x latent
    raw_map: np.ndarray      # latent x source_raw_dim
    seed: int


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def balanced_labels(n: int, classes: int, rng: np.random.Generator) -> np.ndarray:
    if n < 2 * classes:
        raise ValueError(f"{n} samples cannot give each of {classes} classes two members")
    return rng.permutation(np.arange(n) % classes)


def make_world(spec: ModalityPairSpec, seed: int) -> SourceWorld:
    rng = np.random.default_rng([seed, 0])
    protos = _unit_rows(rng, spec.source_classes, spec.latent_dim)
    raw_map = rng.normal(size=(spec.latent_dim, spec.source_raw_dim)) / np.sqrt(spec.latent_dim)
    return SourceWorld(protos, raw_map, seed)


def sample_source(spec: ModalityPairSpec, world: SourceWorld, n: int, seed: int) -> Dataset:
    """Fresh draw from the source modality (e.g. a held-out surrogate set)."""
    rng = np.random.default_rng([world.seed, 1, seed])
    y = balanced_labels(n, spec.source_classes, rng)
    latent = world.prototypes[y] + spec.noise * rng.normal(size=(n, spec.latent_dim))
    return Dataset(latent @ world.raw_map, y, spec.source_classes, "source",
                   {"spec": asdict(spec), "seed": world.seed, "draw": seed})


def make_source(spec: ModalityPairSpec, seed: int) -> tuple[Dataset, SourceWorld]:
    world = make_world(spec, seed)
    return sample_source(spec, world, spec.n_source, 0), world


def _target_transform(spec: ModalityPairSpec, world: SourceWorld, rng: np.random.Generator):
    d, out = spec.latent_dim, spec.target_raw_dim
    if spec.transform == "identity":
        return lambda z: z @ world.raw_map
    if spec.transform == "rotation":
        q, _ = np.linalg.qr(rng.normal(size=(out, d)))
        return lambda z: z @ q.T
    if spec.transform == "random-linear":
        G = rng.normal(size=(d, out)) / np.sqrt(d)
        return lambda z: z @ G
    W1 = rng.normal(size=(d, 2 * d)) / np.sqrt(d)
    W2 = rng.normal(size=(2 * d, out)) / np.sqrt(2 * d)
    return lambda z: np.tanh(z @ W1) @ W2


def make_target(spec: ModalityPairSpec, world: SourceWorld, seed: int) -> Dataset:
    """Target modality built on ``world``.

    ``round(delta * K)`` classes are misaligned; the rest reuse distinct source
    prototypes. The ``identity`` transform keeps the source raw space, so the
    source model can be evaluated on target inputs directly.
    """
    K = spec.target_classes
    rng = np.random.default_rng([world.seed, 2, seed])
    chosen = rng.choice(spec.source_classes, size=K, replace=False)
    misaligned = np.zeros(K, dtype=bool)
    misaligned[rng.choice(K, size=int(round(spec.delta * K)), replace=False)] = True
    fresh = _unit_rows(rng, K, spec.latent_dim)
    transform = _target_transform(spec, world, rng)

    y = balanced_labels(spec.n_target, K, rng)
    noise = spec.noise * rng.normal(size=(spec.n_target, spec.latent_dim))
    nuisance = rng.integers(0, spec.source_classes, size=spec.n_target)
    latent = np.where(
        misaligned[y][:, None],
        world.prototypes[nuisance] + spec.signal * fresh[y],
        world.prototypes[chosen[y]],
    ) + noise
    prov = {"spec": asdict(spec), "seed": world.seed, "draw": seed,
            "source_classes_used": chosen.tolist(), "misaligned": misaligned.tolist()}
    return Dataset(transform(latent), y, K, f"target-{spec.transform}", prov)


def stratified_split(data: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Split each class ``fraction`` / ``1 - fraction``, keeping >= 2 per side."""
    rng = np.random.default_rng(seed)
    first, second = [], []
    for c in range(data.classes):
        idx = rng.permutation(np.flatnonzero(data.labels == c))
        if idx.size < 4:
            raise ValueError(f"class {c} has {idx.size} samples; need 4 to split")
        cut = min(max(int(round(fraction * idx.size)), 2), idx.size - 2)
        first.append(idx[:cut])
        second.append(idx[cut:])
    a = np.sort(np.concatenate(first))
    b = np.sort(np.concatenate(second))
    return data.subset(a), data.subset(b)


@dataclass(frozen=True)
class PretrainConfig:
    embed_dim: int = 16
    hidden: int = 32
    depth: int = 2
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64
    min_steps: int = 600
    max_steps: int = 4000
    check_every: int = 200
    target_error: float = 0.02
    seed: int = 0


def pretrain_source(spec: ModalityPairSpec, source: Dataset, cfg: PretrainConfig = PretrainConfig()):
    """Supervised source model; trains until train error <= ``target_error``.

    Raises ``RuntimeError`` if ``max_steps`` pass without reaching it.
    """
    from . import autodiff as ad
    from .models import Dims, forward, init_params
    from .training import TrainConfig, train_supervised, error_rate

    dims = Dims(source.inputs.shape[1], cfg.embed_dim, cfg.hidden, source.classes, cfg.depth)
    params = init_params(dims, cfg.seed)
    tcfg = TrainConfig(method="finetune", finetune_lr=cfg.lr, momentum=cfg.momentum,
                       batch_size=cfg.batch_size, seed=cfg.seed)
    done, err = 0, 1.0
    chunk = cfg.min_steps
    while done < cfg.max_steps:
        params = train_supervised(params, source, tcfg, chunk, cfg.lr, seed_offset=100 + done)
        done += chunk
        with ad.no_grad():
            err = error_rate(forward(params, source.inputs).value, source.labels)
        if err <= cfg.target_error:
            return params
        chunk = cfg.check_every
    raise RuntimeError(f"source pretraining stalled at train error {err:.3f} after {done} steps")
