"""Modality knowledge discrepancy between a source model and a labeled target set.

A matching picks an ordered set of source classes: target class ``k`` is paired
with source class ``subset[perm[k]]``. For each target sample the source
prediction is the arg-max of its source logits restricted to ``subset``
(lowest class index wins ties), and the per-matching discrepancy is the
fraction of samples whose target label is not paired with that prediction.
The discrepancy is the minimum over matchings.

Three estimators are provided:

* ``mc``: uniform random (subset, permutation) trials, the minimum is kept;
* ``mc-hungarian``: random subsets, each solved for its best permutation;
* ``exact``: full enumeration, guarded by a size limit.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from .models import ModelParams, forward

DEFAULT_TRIALS = 100_000
EXACT_LIMIT = 1_000_000
MODES = ("exact", "mc", "mc-hungarian")


class AssumptionError(ValueError):
    """The target has more classes than the source model distinguishes."""


class SearchTooLarge(ValueError):
    """Exact enumeration refused: the matching space exceeds the guardrail."""


@dataclass
class LogitTable:
    logits: np.ndarray     # n_t x |Y^s|
    labels: np.ndarray     # n_t target labels in [0, K)
    classes: int           # K

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.logits.ndim != 2 or self.logits.shape[0] != self.labels.shape[0]:
            raise ValueError(f"logits {self.logits.shape} do not match {self.labels.shape[0]} labels")
        if np.any(self.labels < 0) or np.any(self.labels >= self.classes):
            raise ValueError(f"target labels must lie in [0, {self.classes})")
        if self.classes > self.logits.shape[1]:
            raise AssumptionError(
                f"target has {self.classes} classes but source model only {self.logits.shape[1]}")

    @property
    def source_classes(self) -> int:
        return self.logits.shape[1]


@dataclass(frozen=True)
class LabelMatching:
    subset: tuple[int, ...]   # sorted source class ids
    perm: tuple[int, ...]     # target class k -> position perm[k] in subset

    def __post_init__(self):
        if len(set(self.subset)) != len(self.subset):
            raise ValueError(f"subset has repeated classes: {self.subset}")
        if sorted(self.perm) != list(range(len(self.subset))):
            raise ValueError(f"perm {self.perm} is not a permutation of {len(self.subset)} items")

    def source_class_of(self, target_class: int) -> int:
        return self.subset[self.perm[target_class]]


@dataclass
class DiscrepancyEstimate:
    value: float
    matching: LabelMatching
    trials: int
    mode: str

    def as_record(self) -> dict:
        return {
            "discrepancy": self.value,
            "subset": list(self.matching.subset),
            "perm": list(self.matching.perm),
            "trials": self.trials,
            "mode": self.mode,
        }


def matching_space_size(source_classes: int, classes: int) -> int:
    return math.comb(source_classes, classes) * math.factorial(classes)


def _subset_positions(logits: np.ndarray, subset) -> np.ndarray:
    # np.argmax returns the first maximum; subset is sorted, so ties go to the
    # smallest source class
    return np.argmax(logits[:, list(subset)], axis=1)


def _confusion(table: LogitTable, subset) -> np.ndarray:
    """counts[k, j]: samples of target class k predicted at subset position j."""
    pos = _subset_positions(table.logits, subset)
    K = table.classes
    return np.bincount(table.labels * K + pos, minlength=K * K).reshape(K, K)


def trial_mismatch(table: LogitTable, matching: LabelMatching) -> float:
    if len(matching.subset) != table.classes:
        raise ValueError(f"matching pairs {len(matching.subset)} classes, target has {table.classes}")
    if max(matching.subset) >= table.source_classes or min(matching.subset) < 0:
        raise ValueError(f"subset {matching.subset} outside [0, {table.source_classes})")
    order = np.argsort(matching.subset, kind="stable")
    subset = tuple(matching.subset[i] for i in order)
    pos = _subset_positions(table.logits, subset)
    predicted = np.asarray(subset)[pos]
    paired = np.array([matching.source_class_of(k) for k in range(table.classes)])[table.labels]
    return float(np.mean(predicted != paired))


# ------------------------------------------------------------------ exact

def estimate_exact(table: LogitTable) -> DiscrepancyEstimate:
    """Global minimum over every (subset, permutation)."""
    Ks, K = table.source_classes, table.classes
    size = matching_space_size(Ks, K)
    if size > EXACT_LIMIT:
        raise SearchTooLarge(
            f"exact search over C({Ks},{K})*{K}! = {size} matchings exceeds {EXACT_LIMIT}")
    n = table.labels.shape[0]
    perms = np.array(list(itertools.permutations(range(K))))
    rows = np.arange(K)
    best_hits, best = -1, None
    for subset in itertools.combinations(range(Ks), K):
        conf = _confusion(table, subset)
        hits = conf[rows, perms].sum(axis=1)
        i = int(np.argmax(hits))
        if hits[i] > best_hits:
            best_hits, best = int(hits[i]), LabelMatching(subset, tuple(int(p) for p in perms[i]))
    return DiscrepancyEstimate((n - best_hits) / n, best, size, "exact")


# ------------------------------------------------------------ monte carlo

def _draws(seed: int, start: int, count: int, Ks: int, K: int) -> tuple[np.ndarray, np.ndarray]:
    """Subsets and permutations for trials ``start .. start+count-1``.

    Each trial consumes exactly ``Ks + K`` doubles from one PCG64 stream, so
    any shard can jump straight to its first trial.
    """
    bitgen = np.random.PCG64(seed)
    bitgen.advance(start * (Ks + K))
    u = np.random.Generator(bitgen).random((count, Ks + K))
    subsets = np.sort(np.argsort(u[:, :Ks], axis=1, kind="stable")[:, :K], axis=1)
    perms = np.argsort(u[:, Ks:], axis=1, kind="stable")
    return subsets, perms


def _scan(table: LogitTable, seed: int, start: int, count: int, hungarian: bool,
          chunk: int = 20_000):
    """Best (hits, trial index, matching) over a contiguous trial range."""
    Ks, K = table.source_classes, table.classes
    cache: dict[tuple, np.ndarray] = {}
    rows = np.arange(K)
    best = (-1, -1, None)
    for lo in range(start, start + count, chunk):
        m = min(chunk, start + count - lo)
        subsets, perms = _draws(seed, lo, m, Ks, K)
        keys = [tuple(s) for s in subsets.tolist()]
        for key in set(keys) - cache.keys():
            cache[key] = _confusion(table, key)
        if hungarian:
            hits = np.empty(m, dtype=np.int64)
            solved = {}
            for t, key in enumerate(keys):
                if key not in solved:
                    r, c = linear_sum_assignment(cache[key], maximize=True)
                    solved[key] = (int(cache[key][r, c].sum()), tuple(int(x) for x in c))
                hits[t] = solved[key][0]
            i = int(np.argmax(hits))
            if hits[i] > best[0]:
                best = (int(hits[i]), lo + i, LabelMatching(keys[i], solved[keys[i]][1]))
        else:
            confs = np.stack([cache[k] for k in keys])          # m x K x K
            hits = confs[np.arange(m)[:, None], rows[None, :], perms].sum(axis=1)
            i = int(np.argmax(hits))
            if hits[i] > best[0]:
                best = (int(hits[i]), lo + i,
                        LabelMatching(keys[i], tuple(int(p) for p in perms[i])))
    return best


def estimate_mc(table: LogitTable, trials: int = DEFAULT_TRIALS, seed: int = 0,
                workers: int = 1, hungarian: bool = False) -> DiscrepancyEstimate:
    """Minimum mismatch over ``trials`` random matchings.

    Sharding across ``workers`` gives the same answer as a single pass: each
    shard reads its own slice of the seed stream and ties resolve to the
    earliest trial.
    """
    if trials < 1:
        raise ValueError("need at least one trial")
    n = table.labels.shape[0]
    workers = max(1, min(workers, trials))
    bounds = np.linspace(0, trials, workers + 1).astype(int)
    shards = [(int(a), int(b - a)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    if len(shards) == 1:
        results = [_scan(table, seed, 0, trials, hungarian)]
    else:
        with ThreadPoolExecutor(max_workers=len(shards)) as pool:
            results = list(pool.map(lambda s: _scan(table, seed, s[0], s[1], hungarian), shards))
    hits, _, matching = max(results, key=lambda r: (r[0], -r[1]))
    return DiscrepancyEstimate((n - hits) / n, matching, trials,
                               "mc-hungarian" if hungarian else "mc")


def estimate(table: LogitTable, mode: str = "auto", trials: int = DEFAULT_TRIALS,
             seed: int = 0, workers: int = 1) -> DiscrepancyEstimate:
    if mode == "auto":
        small = matching_space_size(table.source_classes, table.classes) <= EXACT_LIMIT
        mode = "exact" if small else "mc"
    if mode == "exact":
        return estimate_exact(table)
    if mode == "mc":
        return estimate_mc(table, trials, seed, workers)
    if mode == "mc-hungarian":
        return estimate_mc(table, trials, seed, workers, hungarian=True)
    raise ValueError(f"unknown discrepancy mode {mode!r}; expected auto or one of {MODES}")


def logit_table(model: ModelParams, inputs, labels, classes: int | None = None) -> LogitTable:
    """Source-model logits (original predictor included) on target inputs."""
    y = np.asarray(labels, dtype=np.int64)
    with ad.no_grad():
        z = forward(model, np.asarray(inputs, dtype=np.float64), "full").value
    return LogitTable(z, y, int(y.max()) + 1 if classes is None else classes)


def discrepancy_report(model: ModelParams, target, mode: str = "auto",
                       trials: int = DEFAULT_TRIALS, seed: int = 0) -> DiscrepancyEstimate:
    """Discrepancy of ``model`` on a target Dataset (exact when small enough)."""
    table = logit_table(model, target.inputs, target.labels, target.classes)
    return estimate(table, mode, trials, seed)
