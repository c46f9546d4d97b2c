"""Task loss and the outer objectives used to score source features.

Every loss returns a :class:`LossValue`: a differentiable scalar plus a float
breakdown of its named components.

Sign convention: the alignment term is the mean squared distance over
same-class pairs and the uniformity term is ``log mean exp(-2 d^2)`` over all
pairs; both are minimized. Passing ``literal_signs=True`` to
:func:`outer_loss` negates both terms instead, which is the form with leading
minus signs that some write-ups print. It is kept for auditing only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


class LossError(ValueError):
    """Loss undefined for the given batch (bad labels, no pairs, ...)."""


@dataclass
class LossValue:
    total: ad.Tensor
    parts: dict[str, float] = field(default_factory=dict)

    @property
    def value(self) -> float:
        return self.total.item()


def _labels(labels, n: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != n:
        raise LossError(f"{y.shape[0]} labels for {n} rows")
    return y


def one_hot(labels, classes: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64)
    out = np.zeros((y.shape[0], classes))
    out[np.arange(y.shape[0]), y] = 1.0
    return out


def cross_entropy(logits: ad.Tensor, labels) -> LossValue:
    """Mean negative log-softmax probability of the true class."""
    n, k = logits.shape
    y = _labels(labels, n)
    if np.any(y < 0) or np.any(y >= k):
        raise LossError(f"labels must lie in [0, {k}); got range [{y.min()}, {y.max()}]")
    lse = ad.logsumexp(logits, axis=1)
    picked = ad.sum(ad.mul(logits, one_hot(y, k)), axis=1)
    total = ad.mean(ad.sub(lse, picked))
    return LossValue(total, {"ce": total.item()})


def _pair_masks(labels) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(labels)
    n = y.shape[0]
    upper = np.triu(np.ones((n, n)), k=1)
    same = upper * (y[:, None] == y[None, :])
    return upper, same


def alignment_loss(features: ad.Tensor, labels) -> LossValue:
    """Mean squared distance over unordered same-class pairs (i < j)."""
    n = features.shape[0]
    y = _labels(labels, n)
    _, same = _pair_masks(y)
    count = same.sum()
    if count == 0:
        raise LossError("alignment loss needs at least one same-class pair")
    d2 = ad.pairwise_sq_dist(features)
    total = ad.scale(ad.sum(ad.mul(d2, same)), 1.0 / count)
    return LossValue(total, {"align": total.item()})


def uniformity_loss(features: ad.Tensor, t: float = 2.0) -> LossValue:
    """``log`` of the mean over pairs i < j of ``exp(-t * ||f_i - f_j||^2)``."""
    n = features.shape[0]
    if n < 2:
        raise LossError("uniformity loss needs at least two rows")
    upper = np.triu(np.ones((n, n)), k=1)
    d2 = ad.pairwise_sq_dist(features)
    lse = ad.logsumexp(ad.scale(d2, -t), mask=upper)
    total = ad.sub(lse, np.log(upper.sum()))
    return LossValue(total, {"uniform": total.item()})


def outer_loss(features: ad.Tensor, labels, literal_signs: bool = False) -> LossValue:
    align = alignment_loss(features, labels)
    uniform = uniformity_loss(features)
    if literal_signs:
        total = ad.neg(ad.add(align.total, uniform.total))
        parts = {"align": -align.value, "uniform": -uniform.value}
    else:
        total = ad.add(align.total, uniform.total)
        parts = {"align": align.value, "uniform": uniform.value}
    parts["outer"] = total.item()
    return LossValue(total, parts)


def combined_outer(outer: LossValue, inner: LossValue, lam: float) -> LossValue:
    """``lam * outer + inner``; breakdown keeps both components."""
    if lam < 0:
        raise ValueError(f"trade-off must be non-negative, got {lam}")
    total = ad.add(ad.scale(outer.total, lam), inner.total)
    parts = {"outer": outer.value, "inner": inner.value, "lambda": float(lam),
             "combined": total.item()}
    return LossValue(total, parts)


def supcon_loss(features: ad.Tensor, labels, temperature: float = 0.1) -> LossValue:
    """Supervised contrastive loss over the batch.

    For each anchor with at least one positive, average ``-log`` of the
    softmax weight of each positive among all non-anchor rows, then average
    over anchors.
    """
    n = features.shape[0]
    y = _labels(labels, n)
    not_self = 1.0 - np.eye(n)
    pos = not_self * (y[:, None] == y[None, :])
    n_pos = pos.sum(axis=1)
    anchors = n_pos > 0
    if not np.any(anchors):
        raise LossError("supervised contrastive loss needs at least one positive pair")
    sim = ad.scale(ad.matmul(features, ad.transpose(features)), 1.0 / temperature)
    # rows without any other sample never occur for n >= 2
    denom = ad.logsumexp(sim, mask=not_self, axis=1)
    log_prob = ad.sub(sim, denom)
    weights = pos / np.where(n_pos > 0, n_pos, 1.0)[:, None]
    per_anchor = ad.sum(ad.mul(log_prob, weights), axis=1)
    total = ad.scale(ad.sum(ad.mul(per_anchor, anchors[:, None].astype(float))),
                     -1.0 / anchors.sum())
    return LossValue(total, {"supcon": total.item()})


def davies_bouldin_objective(features: ad.Tensor, labels, eps: float = 1e-12) -> LossValue:
    """Differentiable Davies-Bouldin index over the label partition.

    Scatter is the mean Euclidean distance to the class centroid. The inner
    max over partner classes is taken at the current argmax, so its gradient
    flows through the selected pair only.
    """
    n = features.shape[0]
    y = _labels(labels, n)
    classes = np.unique(y)
    if classes.shape[0] < 2:
        raise LossError("Davies-Bouldin objective needs at least two classes")
    member = (y[None, :] == classes[:, None]).astype(float)   # C x n
    counts = member.sum(axis=1, keepdims=True)
    centroids = ad.matmul(member / counts, features)             # C x d
    assign = ad.matmul(member.T, centroids)                      # n x d
    diff = ad.sub(features, assign)
    dist = ad.sqrt(ad.add(ad.sum(ad.mul(diff, diff), axis=1), eps))   # n x 1
    scatter = ad.matmul(member / counts, dist)                   # C x 1
    c = classes.shape[0]
    sep = ad.sqrt(ad.add(ad.pairwise_sq_dist(centroids), eps))
    ratio = ad.mul(ad.add(scatter, ad.transpose(scatter)), ad.power(sep, -1.0))
    masked = np.where(np.eye(c) > 0, -np.inf, ratio.value)
    pick = np.zeros((c, c))
    pick[np.arange(c), masked.argmax(axis=1)] = 1.0
    total = ad.mean(ad.sum(ad.mul(ratio, pick), axis=1))
    return LossValue(total, {"db": total.item()})


OUTER_VARIANTS = ("au", "supcon", "db")


def outer_objective(variant: str, features: ad.Tensor, labels, *, literal_signs: bool = False,
                    temperature: float = 0.1) -> LossValue:
    """Dispatch the outer loss by config name. Features must already be unit rows."""
    if variant == "au":
        return outer_loss(features, labels, literal_signs=literal_signs)
    if variant == "supcon":
        return supcon_loss(features, labels, temperature)
    if variant == "db":
        return davies_bouldin_objective(features, labels)
    raise ValueError(f"unknown outer-loss variant {variant!r}; expected one of {OUTER_VARIANTS}")
