"""Embedder / encoder / predictor stack at desk width.

A model is three named parameter blocks:

* embedder: linear projection followed by row LayerNorm (maps raw inputs into
  the shared embedding space),
* encoder: ``depth`` dense layers with tanh,
* predictor: mean-pool over tokens then a linear layer to class logits. Inputs
  here are single flat vectors, so the pooling is over one token.

Blocks are plain ``dict[str, np.ndarray]``; the forward functions accept either
arrays or autodiff tensors per entry, which is how virtual (inner-loop)
parameters and mixed embedder/encoder pairings are evaluated.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np

from . import autodiff as ad

Block = dict[str, np.ndarray]

EMBEDDER_KEYS = ("W", "b", "ln_gain", "ln_bias")
PREDICTOR_KEYS = ("W", "b")
LAYERNORM_EPS = 1e-5
MODES = ("full", "embed-only", "encode-from-embedding")


@dataclass(frozen=True)
class Dims:
    input_dim: int
    embed_dim: int
    hidden: int
    classes: int
    depth: int = 2

    def __post_init__(self):
        for name in ("input_dim", "embed_dim", "hidden", "classes", "depth"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")

    def as_tuple(self) -> tuple[int, ...]:
        return (self.input_dim, self.embed_dim, self.hidden, self.classes, self.depth)


def encoder_keys(depth: int) -> tuple[str, ...]:
    return tuple(k for i in range(depth) for k in (f"W{i}", f"b{i}"))


def block_shapes(dims: Dims) -> dict[str, dict[str, tuple[int, int]]]:
    enc = {}
    fan_in = dims.embed_dim
    for i in range(dims.depth):
        enc[f"W{i}"] = (fan_in, dims.hidden)
        enc[f"b{i}"] = (1, dims.hidden)
        fan_in = dims.hidden
    return {
        "embedder": {
            "W": (dims.input_dim, dims.embed_dim),
            "b": (1, dims.embed_dim),
            "ln_gain": (1, dims.embed_dim),
            "ln_bias": (1, dims.embed_dim),
        },
        "encoder": enc,
        "predictor": {"W": (dims.hidden, dims.classes), "b": (1, dims.classes)},
    }


@dataclass(frozen=True)
class ModelParams:
    """Parameters of the three blocks plus the dims record they must agree with.

    Treated as an immutable value: training returns new instances.
    """

    dims: Dims
    embedder: Block
    encoder: Block
    predictor: Block

    def __post_init__(self):
        shapes = block_shapes(self.dims)
        for name, expected in shapes.items():
            block = getattr(self, name)
            if set(block) != set(expected):
                raise ValueError(f"{name} block keys {sorted(block)} != {sorted(expected)}")
            for key, shape in expected.items():
                arr = block[key]
                if arr.shape != shape:
                    raise ValueError(f"{name}.{key} has shape {arr.shape}, dims require {shape}")
                if not np.all(np.isfinite(arr)):
                    raise ValueError(f"{name}.{key} contains non-finite values")

    def blocks(self) -> dict[str, Block]:
        return {"embedder": self.embedder, "encoder": self.encoder, "predictor": self.predictor}

    def with_blocks(self, **blocks: Block) -> "ModelParams":
        """Copy with some blocks swapped; dims follow the new embedder/predictor."""
        emb = blocks.get("embedder", self.embedder)
        pred = blocks.get("predictor", self.predictor)
        dims = replace(self.dims, input_dim=emb["W"].shape[0], classes=pred["W"].shape[1])
        return ModelParams(dims, emb, blocks.get("encoder", self.encoder), pred)

    def copy(self) -> "ModelParams":
        return ModelParams(self.dims, copy_block(self.embedder), copy_block(self.encoder),
                           copy_block(self.predictor))

    def equals(self, other: "ModelParams") -> bool:
        """Bit-exact comparison."""
        return self.dims == other.dims and all(
            blocks_equal(a, b) for a, b in zip(self.blocks().values(), other.blocks().values())
        )


def copy_block(block: Mapping[str, np.ndarray]) -> Block:
    return {k: np.array(v, dtype=np.float64, copy=True) for k, v in block.items()}


def blocks_equal(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> bool:
    return set(a) == set(b) and all(
        a[k].shape == b[k].shape and a[k].tobytes() == b[k].tobytes() for k in a
    )


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_embedder(input_dim: int, embed_dim: int, rng: np.random.Generator) -> Block:
    return {
        "W": _xavier(rng, input_dim, embed_dim),
        "b": np.zeros((1, embed_dim)),
        "ln_gain": np.ones((1, embed_dim)),
        "ln_bias": np.zeros((1, embed_dim)),
    }


def init_encoder(dims: Dims, rng: np.random.Generator) -> Block:
    block = {}
    fan_in = dims.embed_dim
    for i in range(dims.depth):
        block[f"W{i}"] = _xavier(rng, fan_in, dims.hidden)
        block[f"b{i}"] = np.zeros((1, dims.hidden))
        fan_in = dims.hidden
    return block


def init_predictor(hidden: int, classes: int, rng: np.random.Generator) -> Block:
    return {"W": _xavier(rng, hidden, classes), "b": np.zeros((1, classes))}


def init_params(dims: Dims, seed: int) -> ModelParams:
    """Xavier-uniform weights, zero biases, unit LayerNorm gain."""
    rng = np.random.default_rng(seed)
    emb = init_embedder(dims.input_dim, dims.embed_dim, rng)
    enc = init_encoder(dims, rng)
    pred = init_predictor(dims.hidden, dims.classes, rng)
    return ModelParams(dims, emb, enc, pred)


# --------------------------------------------------------------------- forward

def embed(block: Mapping, x) -> ad.Tensor:
    x = x if isinstance(x, ad.Tensor) else ad.constant(x)
    h = ad.add(ad.matmul(x, block["W"]), block["b"])
    return ad.layernorm_rows(h, block["ln_gain"], block["ln_bias"], eps=LAYERNORM_EPS)


def encode(block: Mapping, z) -> ad.Tensor:
    h = z if isinstance(z, ad.Tensor) else ad.constant(z)
    depth = len(block) // 2
    for i in range(depth):
        h = ad.tanh(ad.add(ad.matmul(h, block[f"W{i}"]), block[f"b{i}"]))
    return h


def predict(block: Mapping, features) -> ad.Tensor:
    f = features if isinstance(features, ad.Tensor) else ad.constant(features)
    # mean-pool over a single token is the identity
    return ad.add(ad.matmul(f, block["W"]), block["b"])


def forward(params, batch, mode: str = "full") -> ad.Tensor:
    """Run the stack on a batch.

    ``params`` is a ModelParams or a mapping with ``embedder`` / ``encoder`` /
    ``predictor`` blocks (entries may be tensors). ``mode`` selects what is
    returned: logits (``full``), embeddings (``embed-only``), or encoder
    features from a batch that is already embedded (``encode-from-embedding``).
    """
    blocks = params.blocks() if isinstance(params, ModelParams) else params
    if mode not in MODES:
        raise ValueError(f"unknown forward mode {mode!r}; expected one of {MODES}")
    width = _shape(batch)[1]
    if mode == "encode-from-embedding":
        expected = _shape(blocks["encoder"]["W0"])[0]
        if width != expected:
            raise ad.ShapeError("forward[encode-from-embedding]", _shape(batch), (_shape(batch)[0], expected))
        return encode(blocks["encoder"], batch)
    expected = _shape(blocks["embedder"]["W"])[0]
    if width != expected:
        raise ad.ShapeError(f"forward[{mode}]", _shape(batch), (_shape(batch)[0], expected))
    z = embed(blocks["embedder"], batch)
    if mode == "embed-only":
        return z
    return predict(blocks["predictor"], encode(blocks["encoder"], z))


def _shape(x) -> tuple[int, int]:
    return x.shape if isinstance(x, ad.Tensor) else np.shape(x)


def as_leaves(block: Mapping[str, np.ndarray]) -> dict[str, ad.Tensor]:
    return {k: ad.tensor(v) for k, v in block.items()}


def as_constants(block: Mapping[str, np.ndarray]) -> dict[str, ad.Tensor]:
    return {k: ad.constant(v) for k, v in block.items()}


def adapt_embedder(source_embedder: Mapping[str, np.ndarray], input_dim: int) -> Block:
    """Copy a source embedder for a target with a different raw width.

    Projection rows are truncated, or zero-padded when the target is wider.
    """
    W = source_embedder["W"]
    rows = min(input_dim, W.shape[0])
    new_W = np.zeros((input_dim, W.shape[1]))
    new_W[:rows] = W[:rows]
    out = copy_block(source_embedder)
    out["W"] = new_W
    return out
