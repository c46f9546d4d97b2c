import numpy as np
import pytest

from modalign import autodiff as ad
from modalign import training as T
from modalign.models import Dims, ModelParams, blocks_equal, forward, init_embedder, init_params
from modalign.synthdata import Dataset

from conftest import central_fd, rel_err, tiny_meta_fixture


def phi_arrays(state):
    return [state.phi[k] for k in state.phi]


def meta_grad(objective, state, batch, source, cfg):
    total, leaves, _ = objective(state, batch, source, cfg)
    return [g.value for g in ad.grad(total.total, list(leaves.values()))]


def objective_value(objective, state, batch, source, cfg):
    keys = list(state.phi)

    def fn(*arrays):
        s = T.Stage1State(dict(zip(keys, arrays)), state.head)
        return objective(s, batch, source, cfg)[0].value

    return fn


def separable(n=120, seed=0, dim=8):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = rng.normal(size=(n, dim)) * 0.3
    x[:, 0] += np.where(y == 1, 3.0, -3.0)
    return Dataset(x, y, 2, "target")


@pytest.fixture
def small_source():
    return init_params(Dims(8, 6, 8, 4, 2), 7)


# --- meta-gradients ---------------------------------------------------------

@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("inner_steps", [1, 2])
def test_exact_meta_gradient_matches_fd(seed, inner_steps):
    state, batch, source = tiny_meta_fixture(seed)
    cfg = T.TrainConfig(lam=0.7, inner_lr=0.3, inner_steps=inner_steps)
    analytic = meta_grad(T.exact_meta_objective, state, batch, source, cfg)
    numeric = central_fd(objective_value(T.exact_meta_objective, state, batch, source, cfg),
                         phi_arrays(state))
    assert max(rel_err(a, n) for a, n in zip(analytic, numeric)) <= 1e-3


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_first_order_gradient_matches_fd(seed):
    state, batch, source = tiny_meta_fixture(seed)
    cfg = T.TrainConfig(lam=0.7, inner_lr=0.3)
    analytic = meta_grad(T.first_order_objective, state, batch, source, cfg)
    numeric = central_fd(objective_value(T.first_order_objective, state, batch, source, cfg),
                         phi_arrays(state))
    assert max(rel_err(a, n) for a, n in zip(analytic, numeric)) <= 1e-4


@pytest.mark.parametrize("variant", ["supcon", "db"])
def test_meta_gradient_other_outer_variants(variant):
    state, batch, source = tiny_meta_fixture(3)
    cfg = T.TrainConfig(lam=0.5, inner_lr=0.2, outer_variant=variant)
    analytic = meta_grad(T.exact_meta_objective, state, batch, source, cfg)
    numeric = central_fd(objective_value(T.exact_meta_objective, state, batch, source, cfg),
                         phi_arrays(state))
    assert max(rel_err(a, n) for a, n in zip(analytic, numeric)) <= 1e-3


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_taylor_gap_is_second_order(seed):
    state, batch, source = tiny_meta_fixture(seed)
    cfg = T.TrainConfig()
    gaps = [T.taylor_gap(state, batch, source, cfg, a) for a in (1e-2, 5e-3, 2.5e-3)]
    assert gaps[0] / gaps[1] >= 3 and gaps[1] / gaps[2] >= 3


def test_taylor_gap_matches_objective_difference():
    state, batch, source = tiny_meta_fixture(0)
    cfg = T.TrainConfig(lam=0.8, inner_lr=0.01)
    exact = T.exact_meta_objective(state, batch, source, cfg)[0].value
    first = T.first_order_objective(state, batch, source, cfg)[0].value
    outer0, _ = T.outer_gradient_at(source.encoder, source, batch, cfg)
    gap = T.taylor_gap(state, batch, source, cfg, 0.01)
    assert abs(abs(exact - first - cfg.lam * outer0) - cfg.lam * gap) <= 1e-12


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_exact_and_first_order_directions_agree(seed):
    state, batch, source = tiny_meta_fixture(seed)
    cfg = T.TrainConfig(lam=1.0, inner_lr=1e-2)
    a = np.concatenate([g.ravel() for g in meta_grad(T.exact_meta_objective, state, batch, source, cfg)])
    b = np.concatenate([g.ravel() for g in meta_grad(T.first_order_objective, state, batch, source, cfg)])
    assert a @ b / (np.linalg.norm(a) * np.linalg.norm(b)) > 0


# --- single steps -----------------------------------------------------------

@pytest.mark.parametrize("step", [T.mona_stage1_step, T.mona_fo_step])
def test_zero_meta_lr_keeps_embedder(step):
    state, batch, source = tiny_meta_fixture(0)
    new, _ = step(state, batch, source, T.TrainConfig(meta_lr=0.0))
    assert all(np.array_equal(new.phi[k], state.phi[k]) for k in state.phi)


@pytest.mark.parametrize("step", [T.mona_stage1_step, T.mona_fo_step])
def test_zero_lambda_is_warmup_step(step):
    state, batch, source = tiny_meta_fixture(1)
    cfg = T.TrainConfig(lam=0.0, meta_lr=0.2)
    new, _ = step(state, batch, source, cfg)
    model = ModelParams(Dims(8, 6, 8, 3, 2), state.phi, source.encoder, state.head)
    _, grads, _ = T.supervised_grads(model, batch.target_x, batch.target_y, ("embedder",))
    for k in state.phi:
        assert np.max(np.abs(new.phi[k] - (state.phi[k] - 0.2 * grads["embedder"][k]))) <= 1e-8


@pytest.mark.parametrize("step", [T.mona_stage1_step, T.mona_fo_step])
def test_stage1_leaves_source_model_untouched(step):
    state, batch, source = tiny_meta_fixture(2)
    before = source.copy()
    for _ in range(3):
        state, _ = step(state, batch, source, T.TrainConfig())
    assert source.equals(before)


def test_stage1_head_takes_first_virtual_step():
    state, batch, source = tiny_meta_fixture(0)
    cfg = T.TrainConfig(inner_lr=0.25)
    new, _ = T.mona_stage1_step(state, batch, source, cfg)
    model = ModelParams(Dims(8, 6, 8, 3, 2), state.phi, source.encoder, state.head)
    _, grads, _ = T.supervised_grads(model, batch.target_x, batch.target_y, ("predictor",))
    for k in state.head:
        assert np.allclose(new.head[k], state.head[k] - 0.25 * grads["predictor"][k], atol=1e-12)


@pytest.mark.parametrize("step", [T.mona_stage1_step, T.mona_fo_step])
def test_single_class_source_batch_rejected(step):
    state, batch, source = tiny_meta_fixture(0)
    batch.source_y = np.zeros_like(batch.source_y)
    with pytest.raises(T.TrainingError, match="two classes"):
        step(state, batch, source, T.TrainConfig())


def test_stage1_metrics_report_both_losses():
    state, batch, source = tiny_meta_fixture(0)
    _, m = T.mona_stage1_step(state, batch, source, T.TrainConfig(lam=0.5))
    assert m["combined"] == pytest.approx(0.5 * m["outer"] + m["inner"], abs=1e-12)


# --- supervised strategies --------------------------------------------------

def test_zero_lr_finetune_is_identity(small_source):
    data = separable()
    init = T.fresh_target_model(small_source, data, 0)
    out = T.vanilla_finetune(init, data, T.TrainConfig(finetune_lr=0.0, stage2_steps=20))
    assert out.equals(init)


def test_finetune_separates_separable_data(small_source):
    data = separable()
    rec = T.RunRecord()
    init = T.fresh_target_model(small_source, data, 0)
    out = T.vanilla_finetune(init, data, T.TrainConfig(stage2_steps=200, finetune_lr=0.05), rec)
    with ad.no_grad():
        assert T.error_rate(forward(out, data.inputs).value, data.labels) == 0.0
    assert len(rec.steps) == 200
    for name in ("embedder", "encoder", "predictor"):
        assert not all(np.array_equal(a, b) for a, b in
                       zip(init.blocks()[name].values(), out.blocks()[name].values()))


def test_convex_head_training_never_increases_loss(small_source):
    data = separable(60)
    init = T.fresh_target_model(small_source, data, 1)
    rec = T.RunRecord()
    cfg = T.TrainConfig(batch_size=len(data))
    T.train_supervised(init, data, cfg, 40, 0.05, ("predictor",), rec, momentum=0.0)
    losses = [r["inner"] for r in rec.steps]
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


def test_warmup_and_frozen_contracts(small_source):
    data = separable()
    init = T.fresh_target_model(small_source, data, 0)
    cfg = T.TrainConfig(stage1_steps=30, stage2_steps=30)
    warm = T.embedder_warmup(init, data, cfg)
    assert blocks_equal(warm.encoder, init.encoder) and blocks_equal(warm.predictor, init.predictor)
    assert not blocks_equal(warm.embedder, init.embedder)
    frozen = T.frozen_encoder_finetune(init, data, cfg)
    assert blocks_equal(frozen.encoder, init.encoder)
    assert not blocks_equal(frozen.predictor, init.predictor)


def test_warmup_loss_trends_down_with_random_encoder():
    data = separable(200, seed=3)
    init = init_params(Dims(8, 6, 8, 2, 2), 11)
    rec = T.RunRecord()
    T.embedder_warmup(init, data, T.TrainConfig(stage1_steps=120, batch_size=20), rec)
    losses = np.array([r["inner"] for r in rec.steps])
    assert losses[-20:].mean() < losses[:20].mean()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_loss_reports_step(small_source):
    data = separable()
    data.inputs[:, :] = 1e300
    init = T.fresh_target_model(small_source, data, 0)
    with pytest.raises(T.TrainingError, match="step 0"):
        T.vanilla_finetune(init, data, T.TrainConfig(stage2_steps=3))


# --- end-to-end -------------------------------------------------------------

def surrogate(n=40, classes=4, seed=5):
    rng = np.random.default_rng(seed)
    return Dataset(rng.normal(size=(n, 8)), np.arange(n) % classes, classes, "source")


def test_mona_record_counts_and_determinism(small_source):
    data = separable()
    cfg = T.TrainConfig(stage1_steps=4, stage2_steps=6, source_batch_size=8, batch_size=16)
    p1, r1 = T.mona_train(small_source, data, surrogate(), cfg)
    p2, r2 = T.mona_train(small_source, data, surrogate(), cfg)
    assert r1.stage_count("stage1") == 4 and r1.stage_count("finetune") == 6
    assert [row["step"] for row in r1.steps] == list(range(10))
    assert p1.equals(p2) and r1.as_dict() == r2.as_dict()


def test_mona_without_stage1_is_vanilla_finetuning(small_source):
    data = separable()
    cfg = T.TrainConfig(stage1_steps=0, stage2_steps=5, stage2_head="fresh")
    got, _ = T.mona_train(small_source, data, surrogate(), cfg)
    phi = init_embedder(8, 6, np.random.default_rng([cfg.seed, 5]))
    expected = T.vanilla_finetune(T.fresh_target_model(small_source, data, cfg.seed, embedder=phi), data, cfg)
    assert got.equals(expected)


def test_stage2_head_choice(small_source):
    data = separable()
    base = dict(stage1_steps=3, stage2_steps=0, source_batch_size=8)
    fresh, _ = T.mona_train(small_source, data, surrogate(), T.TrainConfig(stage2_head="fresh", **base))
    reuse, _ = T.mona_train(small_source, data, surrogate(), T.TrainConfig(stage2_head="reuse", **base))
    assert blocks_equal(fresh.embedder, reuse.embedder)
    assert not blocks_equal(fresh.predictor, reuse.predictor)
    assert blocks_equal(fresh.encoder, small_source.encoder)


@pytest.mark.parametrize("method", T.METHODS)
def test_every_method_runs(method, small_source):
    data = separable()
    cfg = T.TrainConfig(method=method, stage1_steps=2, stage2_steps=3, source_batch_size=8)
    params, rec = T.train_method(method, small_source, data, surrogate(), cfg)
    assert params.dims.input_dim == 8 and params.dims.classes == 2
    assert rec.notes["method"] == method
    if method == "frozen":
        assert blocks_equal(params.encoder, small_source.encoder)


def test_finetune_pp_starts_from_source_embedder(small_source):
    data = separable(dim=5)
    cfg = T.TrainConfig(method="finetune-pp", finetune_lr=0.0, stage2_steps=1)
    params, _ = T.train_method("finetune-pp", small_source, data, surrogate(), cfg)
    assert np.array_equal(params.embedder["W"], small_source.embedder["W"][:5])


def test_config_validation():
    with pytest.raises(ValueError):
        T.TrainConfig(method="sgd")
    with pytest.raises(ValueError):
        T.TrainConfig(lam=-1)
    with pytest.raises(ValueError):
        T.TrainConfig(inner_lr=0)
    with pytest.raises(ValueError):
        T.TrainConfig(inner_steps=0)
    with pytest.raises(ValueError):
        T.TrainConfig(outer_variant="ot")


def test_balanced_batch_covers_every_class():
    labels = np.repeat(np.arange(5), [2, 3, 10, 40, 7])
    idx = T.balanced_batch(labels, 20, np.random.default_rng(0))
    counts = np.bincount(labels[idx], minlength=5)
    assert counts.min() >= 2 and np.all(counts == counts[0])
