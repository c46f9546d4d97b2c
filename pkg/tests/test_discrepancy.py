import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from modalign import discrepancy as D


def brute_force(logits, labels, K):
    """Independent oracle: every ordered K-tuple of distinct source classes,
    evaluated one sample at a time."""
    n, Ks = logits.shape
    best = 1.0
    for pairing in itertools.permutations(range(Ks), K):
        allowed = sorted(pairing)
        wrong = 0
        for i in range(n):
            top = max(allowed, key=lambda c: (logits[i, c], -c))
            wrong += top != pairing[labels[i]]
        best = min(best, wrong / n)
    return best


def random_table(rng, n, K, Ks):
    labels = rng.integers(0, K, size=n)
    logits = rng.normal(size=(n, Ks))
    # give labels some structure so minima are not all trivial
    logits[np.arange(n), labels] += rng.uniform(0, 1.5)
    return D.LogitTable(logits, labels, K)


def test_trial_mismatch_perfect_and_swapped():
    logits = np.array([[5.0, 0.0, 1.0], [0.0, 5.0, 1.0], [4.0, 1.0, 0.0]])
    table = D.LogitTable(logits, [0, 1, 0], 2)
    assert D.trial_mismatch(table, D.LabelMatching((0, 1), (0, 1))) == 0.0
    assert D.trial_mismatch(table, D.LabelMatching((0, 1), (1, 0))) == 1.0


def test_trial_mismatch_hand_fixture():
    # 4 samples, K=2, |Y^s|=3; subset {1, 2}
    logits = np.array([
        [9.0, 1.0, 2.0],   # argmax in {1,2} -> 2
        [0.0, 3.0, 3.0],   # tie -> 1
        [0.0, 4.0, 1.0],   # -> 1
        [0.0, 0.0, 5.0],   # -> 2
    ])
    labels = [0, 0, 1, 1]
    table = D.LogitTable(logits, labels, 2)
    # perm (0, 1): label 0 -> class 1, label 1 -> class 2
    # sample 0: pred 2 vs 1 wrong; 1: 1 vs 1 ok; 2: 1 vs 2 wrong; 3: 2 vs 2 ok
    assert D.trial_mismatch(table, D.LabelMatching((1, 2), (0, 1))) == 0.5
    # perm (1, 0): label 0 -> 2, label 1 -> 1: ok, wrong, ok, wrong
    assert D.trial_mismatch(table, D.LabelMatching((1, 2), (1, 0))) == 0.5


def test_assumption_violation():
    with pytest.raises(D.AssumptionError):
        D.LogitTable(np.zeros((3, 2)), [0, 1, 2], 3)


def test_exact_k1_is_zero(rng):
    table = D.LogitTable(rng.normal(size=(10, 5)), np.zeros(10, dtype=int), 1)
    assert D.estimate_exact(table).value == 0.0


def test_exact_double_enumeration(rng):
    table = random_table(rng, 8, 2, 4)
    est = D.estimate_exact(table)
    assert est.trials == 12
    assert est.value == brute_force(table.logits, table.labels, 2)
    assert D.trial_mismatch(table, est.matching) == est.value


def test_exact_guardrail():
    table = D.LogitTable(np.zeros((4, 40)), [0, 1, 2, 3], 4)
    with pytest.raises(D.SearchTooLarge, match="exceeds"):
        D.estimate_exact(table)


def test_mc_reaches_exact_on_small_space(rng):
    table = random_table(rng, 16, 2, 4)
    exact = D.estimate_exact(table)
    mc = D.estimate_mc(table, trials=10_000, seed=3)
    assert mc.value == exact.value


def test_mc_constant_logits_adversarial():
    # constant logits: every sample predicts the lowest class in the subset,
    # and with balanced labels the best matching still misses half
    table = D.LogitTable(np.zeros((6, 3)), [0, 1, 0, 1, 0, 1], 2)
    assert D.estimate_exact(table).value == 0.5
    assert D.estimate_mc(table, trials=100, seed=0).value == 0.5


def test_worst_case_table_hits_upper_bound():
    # averaging over permutations gives >= n/K hits for any subset, so the
    # discrepancy never exceeds 1 - 1/K; constant logits with balanced labels
    # attain it
    for K in (2, 3):
        labels = np.tile(np.arange(K), 4)
        table = D.LogitTable(np.zeros((labels.size, K + 2)), labels, K)
        assert D.estimate_exact(table).value == pytest.approx(1 - 1 / K)
        assert D.estimate_mc(table, trials=200, seed=1).value == pytest.approx(1 - 1 / K)


def test_mc_perfect_match_found(rng):
    labels = rng.integers(0, 3, size=30)
    logits = np.full((30, 5), -1.0)
    logits[np.arange(30), labels + 2] = 1.0
    table = D.LogitTable(logits, labels, 3)
    assert D.estimate_mc(table, trials=2000, seed=0).value == 0.0


def test_mc_deterministic_and_monotone_in_trials(rng):
    table = random_table(rng, 20, 3, 6)
    a = D.estimate_mc(table, trials=500, seed=11)
    b = D.estimate_mc(table, trials=500, seed=11)
    assert a == b
    values = [D.estimate_mc(table, trials=t, seed=11).value for t in (1, 5, 20, 100, 500, 2000)]
    assert all(x >= y for x, y in zip(values, values[1:]))


def test_mc_sharded_equals_sequential(rng):
    table = random_table(rng, 25, 3, 6)
    seq = D.estimate_mc(table, trials=3001, seed=5)
    par = D.estimate_mc(table, trials=3001, seed=5, workers=4)
    assert seq == par


def test_hungarian_dominates_uniform_per_budget(rng):
    table = random_table(rng, 30, 3, 6)
    exact = D.estimate_exact(table).value
    for seed in range(5):
        plain = D.estimate_mc(table, trials=30, seed=seed)
        hung = D.estimate_mc(table, trials=30, seed=seed, hungarian=True)
        assert exact <= hung.value <= plain.value
        assert D.trial_mismatch(table, hung.matching) == hung.value


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_exact_properties(seed):
    rng = np.random.default_rng(seed)
    K = int(rng.integers(2, 4))
    Ks = int(rng.integers(K, 6))
    table = random_table(rng, int(rng.integers(4, 20)), K, Ks)
    exact = D.estimate_exact(table)
    assert 0.0 <= exact.value <= 1 - 1 / K + 1e-12
    assert exact.value <= D.estimate_mc(table, trials=50, seed=seed).value
    # relabel target classes
    relabel = rng.permutation(K)
    moved = D.LogitTable(table.logits, relabel[table.labels], K)
    assert abs(D.estimate_exact(moved).value - exact.value) <= 1e-15
    # duplicate every sample
    doubled = D.LogitTable(np.vstack([table.logits] * 2), np.concatenate([table.labels] * 2), K)
    assert D.estimate_exact(doubled).value == exact.value


def test_estimate_dispatch(rng):
    table = random_table(rng, 12, 2, 4)
    assert D.estimate(table, "auto").mode == "exact"
    assert D.estimate(table, "mc", trials=10).mode == "mc"
    assert D.estimate(table, "mc-hungarian", trials=10).mode == "mc-hungarian"
    with pytest.raises(ValueError):
        D.estimate(table, "bogus")


def test_record_shape(rng):
    rec = D.estimate_exact(random_table(rng, 12, 2, 4)).as_record()
    assert set(rec) == {"discrepancy", "subset", "perm", "trials", "mode"}
