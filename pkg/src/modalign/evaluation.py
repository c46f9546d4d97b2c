"""Representation-quality metrics: linear probing and the Davies-Bouldin index."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .models import embed, encode

log = logging.getLogger(__name__)

PROBE_MAX_ITERS = 5000
PROBE_GRAD_TOL = 1e-6
PROBE_TRAIN_FRACTION = 0.8


@dataclass
class ProbeResult:
    error: float
    weights: np.ndarray
    split_seed: int
    iterations: int = 0
    resampled: int = 0


@dataclass
class ClusterScore:
    index: float
    centroids: np.ndarray
    scatters: np.ndarray
    degenerate: bool = False


def extract_features(embedder, encoder, data) -> np.ndarray:
    """Encoder features of ``data`` for any embedder/encoder pairing."""
    x = getattr(data, "inputs", data)
    with ad.no_grad():
        return encode(encoder, embed(embedder, np.asarray(x, dtype=np.float64))).value


def _split(n: int, labels: np.ndarray, seed: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.random.default_rng(seed).permutation(n)
    cut = int(round(PROBE_TRAIN_FRACTION * n))
    return order[:cut], order[cut:]


def _fit_softmax_regression(X: np.ndarray, y: np.ndarray, classes: int) -> tuple[np.ndarray, int]:
    n, d = X.shape
    Y = np.zeros((n, classes))
    Y[np.arange(n), y] = 1.0
    W = np.zeros((d, classes))
    # softmax CE Hessian is bounded by 0.5 * X^T X / n
    curvature = 0.5 * np.linalg.norm(X, ord=2) ** 2 / n
    lr = 1.0 / max(curvature, 1e-12)
    for it in range(1, PROBE_MAX_ITERS + 1):
        Z = X @ W
        Z -= Z.max(axis=1, keepdims=True)
        P = np.exp(Z)
        P /= P.sum(axis=1, keepdims=True)
        G = X.T @ (P - Y) / n
        if np.linalg.norm(G) < PROBE_GRAD_TOL:
            return W, it
        W -= lr * G
    return W, PROBE_MAX_ITERS


def linear_probe(features, labels, split_seed: int = 0, max_resamples: int = 100) -> ProbeResult:
    """Held-out error of a multinomial logistic regression on frozen features.

    The 80/20 split is drawn from ``split_seed``; if the training part misses
    a class the next seed is tried. Features are standardized with training
    statistics and a bias column is appended.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if X.shape[0] != y.shape[0]:
        raise ValueError(f"{X.shape[0]} feature rows for {y.shape[0]} labels")
    classes = int(y.max()) + 1
    present = np.unique(y)
    if present.shape[0] < 2:
        raise ValueError("linear probe needs at least two classes")
    seed = split_seed
    for attempt in range(max_resamples):
        tr, te = _split(X.shape[0], y, seed)
        if np.array_equal(np.unique(y[tr]), present) and te.size:
            break
        log.info("probe split seed %d misses a class; trying %d", seed, seed + 1)
        seed += 1
    else:
        raise ValueError("could not draw a split covering every class")

    mu = X[tr].mean(axis=0)
    sd = X[tr].std(axis=0)
    sd[sd < 1e-12] = 1.0

    def design(rows):
        Z = (X[rows] - mu) / sd
        return np.hstack([Z, np.ones((Z.shape[0], 1))])

    W, iters = _fit_softmax_regression(design(tr), y[tr], classes)
    pred = np.argmax(design(te) @ W, axis=1)
    error = float(np.mean(pred != y[te]))
    return ProbeResult(error, W, seed, iters, seed - split_seed)


def davies_bouldin(features, labels) -> ClusterScore:
    """Mean over classes of the worst ``(s_i + s_j) / d(c_i, c_j)`` ratio.

    ``s`` is the mean Euclidean distance of a class's points to its centroid.
    Coinciding centroids make the index infinite and flag the score degenerate.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels).reshape(-1)
    classes = np.unique(y)
    if classes.shape[0] < 2:
        raise ValueError("Davies-Bouldin index needs at least two classes")
    centroids = np.stack([X[y == c].mean(axis=0) for c in classes])
    scatters = np.array([np.linalg.norm(X[y == c] - centroids[i], axis=1).mean()
                         for i, c in enumerate(classes)])
    sep = np.linalg.norm(centroids[:, None, :] - centroids[None, :, :], axis=2)
    off = ~np.eye(classes.shape[0], dtype=bool)
    if np.any(sep[off] == 0):
        return ClusterScore(float("inf"), centroids, scatters, degenerate=True)
    ratio = np.full(sep.shape, -np.inf)
    ratio[off] = (scatters[:, None] + scatters[None, :])[off] / sep[off]
    return ClusterScore(float(ratio.max(axis=1).mean()), centroids, scatters)
