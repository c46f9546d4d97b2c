import numpy as np
import pytest

from modalign import autodiff as ad


def central_fd(fn, arrays, h=1e-5):
    """Central finite differences of scalar ``fn(*arrays)`` w.r.t. each array."""
    grads = []
    for idx, arr in enumerate(arrays):
        g = np.zeros_like(arr)
        for pos in np.ndindex(arr.shape):
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[idx][pos] += h
            minus[idx][pos] -= h
            g[pos] = (fn(*plus) - fn(*minus)) / (2 * h)
        grads.append(g)
    return grads


def rel_err(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


def check_grad(build, arrays, h=1e-5):
    """Relative error between autodiff and finite differences for ``build(*tensors)``."""
    leaves = [ad.tensor(a) for a in arrays]
    analytic = [g.value for g in ad.grad(build(*leaves), leaves)]

    def scalar(*arrs):
        with ad.no_grad():
            return build(*[ad.constant(a) for a in arrs]).item()

    numeric = central_fd(scalar, [np.array(a, dtype=float) for a in arrays], h)
    return max(rel_err(a, n) for a, n in zip(analytic, numeric))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_meta_fixture(seed=0, source_classes=4, classes=3, batch=12):
    """Standard tiny setting: input 8, embed 6, hidden 8, K=3, batch 12."""
    from modalign.models import Dims, init_embedder, init_params, init_predictor
    from modalign.training import Stage1Batch, Stage1State

    rng = np.random.default_rng(seed)
    source = init_params(Dims(8, 6, 8, source_classes, 2), seed + 1)
    state = Stage1State(init_embedder(8, 6, rng), init_predictor(8, classes, rng))
    batch = Stage1Batch(
        target_x=rng.normal(size=(batch, 8)),
        target_y=np.arange(batch) % classes,
        source_x=rng.normal(size=(batch, 8)),
        source_y=np.arange(batch) % source_classes,
    )
    return state, batch, source


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record a one-line verdict for an acceptance criterion."""

    def record(number: int, passed: bool, detail: str) -> bool:
        ACCEPTANCE_LINES[number] = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
