"""Training strategies for cross-modality transfer.

* vanilla finetuning of every block on the target task loss,
* embedder warmup (only the embedder moves) and frozen-encoder finetuning,
* two-stage meta-learned embedder training followed by full finetuning,
  with an exact bi-level meta-gradient or its first-order Taylor variant.

Parameters are immutable ``ModelParams`` values; every routine returns new
blocks and leaves its inputs untouched.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .losses import LossValue, combined_outer, cross_entropy, outer_objective, OUTER_VARIANTS
from .models import (
    Block,
    Dims,
    ModelParams,
    adapt_embedder,
    as_constants,
    as_leaves,
    copy_block,
    embed,
    encode,
    forward,
    init_embedder,
    init_predictor,
)

log = logging.getLogger(__name__)

METHODS = ("finetune", "finetune-pp", "frozen", "emb", "mona", "mona-fo")
BLOCKS = ("embedder", "encoder", "predictor")
RUN_RECORD_SCHEMA = 1


class TrainingError(RuntimeError):
    """A training step could not be completed (non-finite loss, bad batch)."""


@dataclass
class TrainConfig:
    method: str = "mona"
    inner_lr: float = 0.1          # alpha: virtual update rate
    meta_lr: float = 0.1           # beta: embedder meta-update rate
    finetune_lr: float = 0.05
    momentum: float = 0.9          # stage-2 / supervised SGD momentum
    lam: float = 0.4
    stage1_steps: int = 100
    stage2_steps: int = 200
    inner_steps: int = 1
    batch_size: int = 64
    source_batch_size: int = 60
    seed: int = 0
    outer_variant: str = "au"
    literal_eq5_signs: bool = False
    supcon_temperature: float = 0.1
    stage2_head: str = "reuse"     # fresh | reuse (stage-1 head carried into stage 2)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.outer_variant not in OUTER_VARIANTS:
            raise ValueError(f"unknown outer variant {self.outer_variant!r}; expected one of {OUTER_VARIANTS}")
        if self.inner_lr <= 0 or self.meta_lr < 0 or self.finetune_lr < 0:
            raise ValueError("learning rates must be positive (meta/finetune may be zero)")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.stage1_steps < 0 or self.stage2_steps < 0 or self.inner_steps < 1:
            raise ValueError("step counts must be non-negative and inner_steps >= 1")
        if self.batch_size < 1 or self.source_batch_size < 2:
            raise ValueError("batch sizes too small")
        if self.stage2_head not in ("fresh", "reuse"):
            raise ValueError(f"stage2_head must be 'fresh' or 'reuse', got {self.stage2_head!r}")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))


@dataclass
class RunRecord:
    """Append-only per-step and per-checkpoint log of a run."""

    steps: list[dict] = field(default_factory=list)
    checkpoints: list[dict] = field(default_factory=list)
    notes: dict = field(default_factory=dict)
    schema: int = RUN_RECORD_SCHEMA

    def log_step(self, stage: str, inner: float, outer: float | None = None,
                 combined: float | None = None, train_error: float | None = None):
        self.steps.append({
            "step": len(self.steps),
            "stage": stage,
            "inner": inner,
            "outer": outer,
            "combined": combined,
            "train_error": train_error,
        })

    def log_checkpoint(self, **metrics):
        self.checkpoints.append(dict(metrics))

    def stage_count(self, stage: str) -> int:
        return sum(1 for row in self.steps if row["stage"] == stage)

    def as_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------------ plumbing

class SGD:
    """Plain / heavy-ball SGD over named arrays."""

    def __init__(self, lr: float, momentum: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        out = {}
        for k, p in params.items():
            g = grads[k]
            if self.momentum:
                v = self.momentum * self.velocity.get(k, 0.0) + g
                self.velocity[k] = v
                g = v
            out[k] = p - self.lr * g
        return out


class BatchSampler:
    """Epoch-shuffled minibatches, deterministic per seed."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = rng
        self._order = np.empty(0, dtype=np.int64)

    def next(self) -> np.ndarray:
        if self._order.size < self.batch_size:
            self._order = np.concatenate([self._order, self.rng.permutation(self.n)])
        idx, self._order = self._order[:self.batch_size], self._order[self.batch_size:]
        return idx


def balanced_batch(labels: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    """Equal draws per class (at least two each) so same-class pairs exist."""
    classes = np.unique(labels)
    per = max(2, size // classes.size)
    idx = [rng.choice(np.flatnonzero(labels == c), size=per,
                      replace=np.count_nonzero(labels == c) < per) for c in classes]
    return np.concatenate(idx)


def _flatten(blocks: dict[str, dict]) -> list[tuple[str, str]]:
    return [(b, k) for b in BLOCKS if b in blocks for k in blocks[b]]


def _check_finite(value: float, what: str, step: int):
    if not math.isfinite(value):
        raise TrainingError(f"non-finite {what} at step {step}")


def error_rate(logits: np.ndarray, labels) -> float:
    return float(np.mean(np.argmax(logits, axis=1) != np.asarray(labels)))


def supervised_grads(params: ModelParams, x, y, trainable=BLOCKS) -> tuple[LossValue, dict, np.ndarray]:
    """Task loss and gradients for the ``trainable`` blocks only."""
    view = {}
    for name, block in params.blocks().items():
        view[name] = as_leaves(block) if name in trainable else as_constants(block)
    logits = forward(view, x)
    loss = cross_entropy(logits, y)
    keys = [(b, k) for b in trainable for k in view[b]]
    gs = ad.grad(loss.total, [view[b][k] for b, k in keys])
    grads: dict[str, dict[str, np.ndarray]] = {b: {} for b in trainable}
    for (b, k), g in zip(keys, gs):
        grads[b][k] = g.value
    return loss, grads, logits.value


def train_supervised(init: ModelParams, data, cfg: TrainConfig, steps: int, lr: float,
                     trainable=BLOCKS, record: RunRecord | None = None, stage: str = "finetune",
                     seed_offset: int = 0, momentum: float | None = None) -> ModelParams:
    """SGD on the target task loss over the ``trainable`` blocks."""
    rng = np.random.default_rng([cfg.seed, 17, seed_offset])
    sampler = BatchSampler(len(data), cfg.batch_size, rng)
    mom = cfg.momentum if momentum is None else momentum
    opts = {b: SGD(lr, mom) for b in trainable}
    blocks = {b: copy_block(blk) for b, blk in init.blocks().items()}
    for step in range(steps):
        idx = sampler.next()
        current = ModelParams(init.dims, blocks["embedder"], blocks["encoder"], blocks["predictor"])
        try:
            loss, grads, logits = supervised_grads(current, data.inputs[idx], data.labels[idx], trainable)
        except ad.NumericOverflowError as exc:
            raise TrainingError(f"non-finite task loss at step {step}: {exc}") from exc
        _check_finite(loss.value, "task loss", step)
        for b in trainable:
            blocks[b] = opts[b].step(blocks[b], grads[b])
        if record is not None:
            record.log_step(stage, loss.value, train_error=error_rate(logits, data.labels[idx]))
    return ModelParams(init.dims, blocks["embedder"], blocks["encoder"], blocks["predictor"])


def vanilla_finetune(init: ModelParams, target, cfg: TrainConfig, record: RunRecord | None = None,
                     steps: int | None = None, seed_offset: int = 0) -> ModelParams:
    """Every block follows the target task loss."""
    if len(target) == 0:
        raise TrainingError("empty target dataset")
    steps = cfg.stage2_steps if steps is None else steps
    return train_supervised(init, target, cfg, steps, cfg.finetune_lr, BLOCKS, record,
                            "finetune", seed_offset)


def embedder_warmup(init: ModelParams, target, cfg: TrainConfig, record: RunRecord | None = None,
                    steps: int | None = None) -> ModelParams:
    """Only the embedder moves; encoder and predictor stay frozen."""
    steps = cfg.stage1_steps if steps is None else steps
    return train_supervised(init, target, cfg, steps, cfg.finetune_lr, ("embedder",), record,
                            "warmup", seed_offset=1)


def frozen_encoder_finetune(init: ModelParams, target, cfg: TrainConfig,
                            record: RunRecord | None = None, steps: int | None = None) -> ModelParams:
    steps = cfg.stage2_steps if steps is None else steps
    return train_supervised(init, target, cfg, steps, cfg.finetune_lr, ("embedder", "predictor"),
                            record, "frozen", seed_offset=2)


# ------------------------------------------------------------- meta-learning

@dataclass
class Stage1State:
    """Stage-1 state: meta-learned embedder and the warm-started target head.

    The encoder is the persistent pretrained one and is never written to.
    """

    phi: Block
    head: Block
    step: int = 0


@dataclass
class Stage1Batch:
    target_x: np.ndarray
    target_y: np.ndarray
    source_x: np.ndarray
    source_y: np.ndarray


def _source_features(source_embedder: Block, encoder, x) -> ad.Tensor:
    z = embed(as_constants(source_embedder), x)
    return ad.l2_normalize_rows(encode(encoder, z))


def _outer(cfg: TrainConfig, features: ad.Tensor, labels) -> LossValue:
    return outer_objective(cfg.outer_variant, features, labels,
                           literal_signs=cfg.literal_eq5_signs,
                           temperature=cfg.supcon_temperature)


def _check_source_batch(batch: Stage1Batch):
    if np.unique(batch.source_y).size < 2:
        raise TrainingError("source batch needs at least two classes for the outer loss")


def exact_meta_objective(state: Stage1State, batch: Stage1Batch, source_model: ModelParams,
                         cfg: TrainConfig, alpha: float | None = None):
    """Build ``lam * L_outer(virtual encoder) + L_inner`` as a graph.

    Returns the combined loss, the phi leaves, and the first-step head
    gradient (used to warm-start the persistent head).
    """
    alpha = cfg.inner_lr if alpha is None else alpha
    virtual = {
        "embedder": as_leaves(state.phi),
        "encoder": as_leaves(source_model.encoder),
        "predictor": as_leaves(state.head),
    }
    phi_leaves = virtual["embedder"]
    inner0 = cross_entropy(forward(virtual, batch.target_x), batch.target_y)
    inner = inner0
    head_grad = None
    for s in range(cfg.inner_steps):
        keys = _flatten(virtual)
        gs = ad.grad(inner.total, [virtual[b][k] for b, k in keys], create_graph=True)
        stepped = {b: dict(virtual[b]) for b in virtual}
        for (b, k), g in zip(keys, gs):
            stepped[b][k] = ad.sub(virtual[b][k], ad.scale(g, alpha))
            if s == 0 and b == "predictor":
                head_grad = head_grad or {}
                head_grad[k] = g.value
        virtual = stepped
        if s + 1 < cfg.inner_steps:
            inner = cross_entropy(forward(virtual, batch.target_x), batch.target_y)
    feats = _source_features(source_model.embedder, virtual["encoder"], batch.source_x)
    outer = _outer(cfg, feats, batch.source_y)
    return combined_outer(outer, inner0, cfg.lam), phi_leaves, head_grad


def mona_stage1_step(state: Stage1State, batch: Stage1Batch, source_model: ModelParams,
                     cfg: TrainConfig) -> tuple[Stage1State, dict]:
    """One meta-update of the embedder through a virtual finetuning step.

    The virtually updated model is discarded. The head keeps its first
    inner-step update so it warm-starts the next iteration.
    """
    _check_source_batch(batch)
    combined, phi_leaves, head_grad = exact_meta_objective(state, batch, source_model, cfg)
    keys = list(phi_leaves)
    gs = ad.grad(combined.total, [phi_leaves[k] for k in keys])
    meta_grad = {k: g.value for k, g in zip(keys, gs)}
    if not all(np.all(np.isfinite(g)) for g in meta_grad.values()):
        raise TrainingError(f"non-finite meta-gradient at stage-1 step {state.step}")
    phi = {k: state.phi[k] - cfg.meta_lr * meta_grad[k] for k in keys}
    head = {k: state.head[k] - cfg.inner_lr * head_grad[k] for k in state.head}
    metrics = {"inner": combined.parts["inner"], "outer": combined.parts["outer"],
               "combined": combined.parts["combined"], "meta_grad": meta_grad}
    return Stage1State(phi, head, state.step + 1), metrics


def outer_gradient_at(encoder: Block, source_model: ModelParams, batch: Stage1Batch,
                      cfg: TrainConfig) -> tuple[float, dict[str, np.ndarray]]:
    """Outer loss and its gradient w.r.t. the encoder, without any update."""
    enc = as_leaves(encoder)
    outer = _outer(cfg, _source_features(source_model.embedder, enc, batch.source_x), batch.source_y)
    keys = list(enc)
    gs = ad.grad(outer.total, [enc[k] for k in keys])
    return outer.value, {k: g.value for k, g in zip(keys, gs)}


def first_order_objective(state: Stage1State, batch: Stage1Batch, source_model: ModelParams,
                          cfg: TrainConfig, alpha: float | None = None,
                          outer_grad: dict[str, np.ndarray] | None = None):
    """``L_inner - lam * alpha * <grad_f L_outer, grad_f L_inner>`` as a graph.

    The outer gradient is taken at the pretrained encoder and held constant.
    """
    alpha = cfg.inner_lr if alpha is None else alpha
    if outer_grad is None:
        _, outer_grad = outer_gradient_at(source_model.encoder, source_model, batch, cfg)
    view = {
        "embedder": as_leaves(state.phi),
        "encoder": as_leaves(source_model.encoder),
        "predictor": as_leaves(state.head),
    }
    inner = cross_entropy(forward(view, batch.target_x), batch.target_y)
    enc_keys = list(view["encoder"])
    head_keys = list(view["predictor"])
    gs = ad.grad(inner.total, [view["encoder"][k] for k in enc_keys]
                 + [view["predictor"][k] for k in head_keys], create_graph=True)
    align = None
    for k, g in zip(enc_keys, gs):
        term = ad.dot(g, outer_grad[k])
        align = term if align is None else ad.add(align, term)
    total = ad.sub(inner.total, ad.scale(align, cfg.lam * alpha))
    head_grad = {k: g.value for k, g in zip(head_keys, gs[len(enc_keys):])}
    parts = {"inner": inner.value, "grad_alignment": align.item(), "combined": total.item()}
    return LossValue(total, parts), view["embedder"], head_grad


def mona_fo_step(state: Stage1State, batch: Stage1Batch, source_model: ModelParams,
                 cfg: TrainConfig) -> tuple[Stage1State, dict]:
    """Embedder update on the first-order objective; no virtual model is built."""
    _check_source_batch(batch)
    outer_value, outer_grad = outer_gradient_at(source_model.encoder, source_model, batch, cfg)
    obj, phi_leaves, head_grad = first_order_objective(state, batch, source_model, cfg,
                                                      outer_grad=outer_grad)
    keys = list(phi_leaves)
    gs = ad.grad(obj.total, [phi_leaves[k] for k in keys])
    meta_grad = {k: g.value for k, g in zip(keys, gs)}
    if not all(np.all(np.isfinite(g)) for g in meta_grad.values()):
        raise TrainingError(f"non-finite meta-gradient at stage-1 step {state.step}")
    phi = {k: state.phi[k] - cfg.meta_lr * meta_grad[k] for k in keys}
    head = {k: state.head[k] - cfg.inner_lr * head_grad[k] for k in state.head}
    metrics = {"inner": obj.parts["inner"], "outer": outer_value, "combined": obj.parts["combined"],
               "meta_grad": meta_grad}
    return Stage1State(phi, head, state.step + 1), metrics


def taylor_gap(state: Stage1State, batch: Stage1Batch, source_model: ModelParams,
               cfg: TrainConfig, alpha: float) -> float:
    """|L_outer(f - a grad L_inner) - [L_outer(f) - a <grad L_outer, grad L_inner>]|."""
    outer0, outer_grad = outer_gradient_at(source_model.encoder, source_model, batch, cfg)
    view = {
        "embedder": as_constants(state.phi),
        "encoder": as_leaves(source_model.encoder),
        "predictor": as_constants(state.head),
    }
    inner = cross_entropy(forward(view, batch.target_x), batch.target_y)
    keys = list(view["encoder"])
    gs = {k: g.value for k, g in zip(keys, ad.grad(inner.total, [view["encoder"][k] for k in keys]))}
    stepped = {k: source_model.encoder[k] - alpha * gs[k] for k in keys}
    with ad.no_grad():
        feats = _source_features(source_model.embedder, as_constants(stepped), batch.source_x)
        outer_after = _outer(cfg, feats, batch.source_y).value
    linear = outer0 - alpha * sum(float(np.sum(outer_grad[k] * gs[k])) for k in keys)
    return abs(outer_after - linear)


# ------------------------------------------------------------------ pipelines

def target_dims(source_model: ModelParams, target) -> Dims:
    return Dims(target.inputs.shape[1], source_model.dims.embed_dim, source_model.dims.hidden,
                target.classes, source_model.dims.depth)


def fresh_target_model(source_model: ModelParams, target, seed: int, embedder: Block | None = None) -> ModelParams:
    """Target model with the pretrained encoder, a new head and (by default) a new embedder."""
    dims = target_dims(source_model, target)
    rng = np.random.default_rng([seed, 3])
    emb = init_embedder(dims.input_dim, dims.embed_dim, rng)
    head = init_predictor(dims.hidden, dims.classes, rng)
    if embedder is not None:
        emb = copy_block(embedder)
    return ModelParams(dims, emb, copy_block(source_model.encoder), head)


def mona_train(source_model: ModelParams, target, surrogate, cfg: TrainConfig,
               first_order: bool | None = None, snapshots: dict | None = None
               ) -> tuple[ModelParams, RunRecord]:
    """Stage 1 (meta-learned embedder) then stage 2 (vanilla finetuning)."""
    if first_order is None:
        first_order = cfg.method == "mona-fo"
    record = RunRecord(notes={
        "method": "mona-fo" if first_order else "mona",
        "stage1_head": "persistent head warm-started with its first inner-step update",
        "stage2_head": "re-initialized" if cfg.stage2_head == "fresh" else "stage-1 head reused",
    })
    dims = target_dims(source_model, target)
    rng = np.random.default_rng([cfg.seed, 5])
    state = Stage1State(init_embedder(dims.input_dim, dims.embed_dim, rng),
                        init_predictor(dims.hidden, dims.classes, rng))
    t_sampler = BatchSampler(len(target), cfg.batch_size, np.random.default_rng([cfg.seed, 6]))
    s_rng = np.random.default_rng([cfg.seed, 7])
    step_fn = mona_fo_step if first_order else mona_stage1_step
    for it in range(cfg.stage1_steps):
        ti = t_sampler.next()
        si = balanced_batch(surrogate.labels, cfg.source_batch_size, s_rng)
        batch = Stage1Batch(target.inputs[ti], target.labels[ti], surrogate.inputs[si], surrogate.labels[si])
        try:
            state, m = step_fn(state, batch, source_model, cfg)
        except ad.NumericOverflowError as exc:
            raise TrainingError(f"non-finite stage-1 objective at step {it}: {exc}") from exc
        _check_finite(m["combined"], "stage-1 objective", it)
        record.log_step("stage1", m["inner"], m["outer"], m["combined"])
    init = fresh_target_model(source_model, target, cfg.seed, embedder=state.phi)
    if cfg.stage2_head == "reuse":
        init = init.with_blocks(predictor=copy_block(state.head))
    if snapshots is not None:
        snapshots["stage1"] = init
    params = vanilla_finetune(init, target, cfg, record, steps=cfg.stage2_steps)
    return params, record


def train_method(method: str, source_model: ModelParams, target, surrogate, cfg: TrainConfig,
                 snapshots: dict | None = None) -> tuple[ModelParams, RunRecord]:
    """Run one of the named strategies from the pretrained source model.

    Two-stage methods put the model handed to stage 2 in ``snapshots["stage1"]``.
    """
    if method in ("mona", "mona-fo"):
        return mona_train(source_model, target, surrogate, cfg, first_order=method == "mona-fo",
                          snapshots=snapshots)
    record = RunRecord(notes={"method": method})
    if method == "finetune":
        init = fresh_target_model(source_model, target, cfg.seed)
        return vanilla_finetune(init, target, cfg, record), record
    if method == "finetune-pp":
        emb = adapt_embedder(source_model.embedder, target.inputs.shape[1])
        init = fresh_target_model(source_model, target, cfg.seed, embedder=emb)
        return vanilla_finetune(init, target, cfg, record), record
    if method == "frozen":
        init = fresh_target_model(source_model, target, cfg.seed)
        return frozen_encoder_finetune(init, target, cfg, record), record
    if method == "emb":
        init = fresh_target_model(source_model, target, cfg.seed)
        warmed = embedder_warmup(init, target, cfg, record)
        if snapshots is not None:
            snapshots["stage1"] = warmed
        return vanilla_finetune(warmed, target, cfg, record), record
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
