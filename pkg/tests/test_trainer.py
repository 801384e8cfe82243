import numpy as np
import pytest
from scipy.special import softmax

from helpers import plain_sgd_on_doubled_loss
from roast.models import Model, ModelSpec
from roast.rng import RandomSource
from roast.trainer import (DivergenceError, ImportanceAccumulator, MaskState, RoastConfig, TrainLog,
                           accumulate_importance, apply_masked_update, flat_gradient, init_grad,
                           mask_iou, masked_gradient, normalize_scores, refresh_mask, sample_mask,
                           sampling_probability, train)

DENSE = ModelSpec("linear", 0, 3, [], 2)
TOKENS = ModelSpec("mlp", 10, 4, [5], 3)


def dense_data(seed=0, n=8):
    rng = RandomSource(seed)
    return rng.normal(size=(n, 3)), rng.integers(0, 2, n)


def token_data(seed=0, n=40):
    rng = RandomSource(seed)
    return rng.integers(0, 10, (n, 6)), rng.integers(0, 3, n)


# --- importance --------------------------------------------------------------

def test_init_grad_matches_closed_form():
    model = Model.create(DENSE, 0)
    x, y = dense_data()
    acc = init_grad(model, x, y, batch_size=8)
    W = model.store["head.W"]
    r = softmax(x @ W, axis=1) - np.eye(2)[y]
    dW = x.T @ r / len(y)
    db = r.mean(axis=0)
    np.testing.assert_allclose(acc.sums, np.concatenate([dW.ravel(), db]) ** 2, rtol=1e-12)
    assert acc.steps == 1


def test_init_grad_two_identical_batches():
    model = Model.create(DENSE, 0)
    x, y = dense_data(n=4)
    single = init_grad(model, x, y, batch_size=4).sums
    double = init_grad(model, np.concatenate([x, x]), np.concatenate([y, y]), batch_size=4).sums
    np.testing.assert_allclose(double, 2 * single, rtol=1e-14)


def test_unused_embedding_rows_score_zero():
    model = Model.create(TOKENS, 0)
    ids = np.array([[0, 1, 2], [2, 1, 0]])
    acc = init_grad(model, ids, np.array([0, 1]), batch_size=2)
    start = model.store.offsets["embedding"]
    table = acc.sums[start:start + model.store.sizes["embedding"]].reshape(10, 4)
    assert np.all(table[3:] == 0)
    assert np.any(table[:3] > 0)


def test_accumulation_example():
    acc = ImportanceAccumulator(2)
    accumulate_importance(acc, [1.0, -2.0])
    accumulate_importance(acc, [3.0, 0.0])
    np.testing.assert_array_equal(acc.sums, [10.0, 4.0])
    acc.reset()
    assert acc.steps == 0 and np.all(acc.sums == 0)
    with pytest.raises(ValueError):
        accumulate_importance(acc, [1.0])


def test_accumulation_brute_force():
    rng = RandomSource(1)
    grads = rng.normal(size=(25, 30))
    acc = ImportanceAccumulator(30)
    for g in grads:
        accumulate_importance(acc, g)
    brute = [sum(g[i] ** 2 for g in grads) for i in range(30)]
    np.testing.assert_allclose(acc.sums, brute, rtol=1e-13)


# --- normalisation and probabilities -----------------------------------------

def test_normalize_examples():
    np.testing.assert_array_equal(normalize_scores([3.0, 1.0, 2.0]), [1.0, 0.0, 0.5])
    np.testing.assert_array_equal(normalize_scores([3.0, 1.0, 2.0], "min"), [0.0, 1.0, 0.5])
    np.testing.assert_array_equal(normalize_scores([5.0, 5.0, 5.0]), [0.0, 0.5, 1.0])
    np.testing.assert_array_equal(normalize_scores([7.0]), [0.5])
    with pytest.raises(ValueError):
        normalize_scores([1.0, 2.0], "median")
    with pytest.raises(ValueError):
        normalize_scores([1.0, 2.0], "rand")


@pytest.mark.parametrize("seed", range(5))
def test_normalize_is_permutation_of_ranks(seed):
    rng = RandomSource(seed)
    s = rng.integers(0, 4, 17).astype(float)  # plenty of ties
    for strategy in ("max", "min", "rand"):
        out = normalize_scores(s, strategy, RandomSource(seed))
        np.testing.assert_allclose(np.sort(out), np.arange(17) / 16)
        assert out.max() + out.min() == 1.0
    mx = normalize_scores(s)
    # larger score never gets a lower rank
    assert np.all(np.diff(mx[np.argsort(s, kind="stable")]) > 0)


def test_sampling_probability_examples():
    np.testing.assert_allclose(sampling_probability([0.7], 0.7, 5.0), [0.5])
    # 1 / (1 + e^-2), independent 30-digit evaluation
    np.testing.assert_allclose(sampling_probability([1.0], 0.5, 2.0), [0.880797077977882444], rtol=1e-15)
    np.testing.assert_allclose(sampling_probability([1.0], 0.5, 2.0, "as-printed"),
                               [0.119202922022117556], rtol=1e-14)
    p = sampling_probability([0.0, 1.0], 0.5, 1e6)
    np.testing.assert_array_equal(p, [1e-6, 1 - 1e-6])
    np.testing.assert_allclose(sampling_probability(np.linspace(0, 1, 11), 0.6, 1e-9), 0.5, atol=1e-8)


def test_sample_mask_mean():
    m = sample_mask(np.full(100_000, 0.5), RandomSource(0))
    assert set(np.unique(m)) <= {0.0, 1.0}
    assert 0.494 <= m.mean() <= 0.506
    np.testing.assert_array_equal(m, sample_mask(np.full(100_000, 0.5), RandomSource(0)))


def test_refresh_mask_modes():
    scores = np.arange(10.0)
    cfg = RoastConfig(mask_mode="hard-threshold", alpha=0.5)
    st = refresh_mask(scores, cfg, RandomSource(0))
    np.testing.assert_array_equal(st.mask, (np.arange(10) / 9 >= 0.5).astype(float))
    st = refresh_mask(scores, RoastConfig(mask_mode="soft-scale"), RandomSource(0))
    assert np.all(st.mask == 1)


# --- updates -----------------------------------------------------------------

def _state(mask, prob):
    mask, prob = np.asarray(mask, float), np.asarray(prob, float)
    return MaskState(np.zeros_like(prob), prob, mask)


def test_masked_update_arithmetic():
    st = _state([1, 0], [0.5, 0.5])
    np.testing.assert_array_equal(masked_gradient([1.0, 1.0], st, scaling=True), [2.0, 0.0])
    np.testing.assert_array_equal(masked_gradient([1.0, 1.0], st, scaling=False), [1.0, 0.0])
    np.testing.assert_array_equal(masked_gradient([1.0, 1.0], st, mask_mode="soft-scale"), [0.5, 0.5])
    np.testing.assert_array_equal(masked_gradient([1.0, 1.0], st, mask_mode="hard-threshold"), [1.0, 0.0])
    np.testing.assert_array_equal(masked_gradient([1.0, 1.0], st, mask_mode="off"), [1.0, 1.0])


def test_apply_update_changes_only_masked_entries():
    model = Model.create(DENSE, 0)
    before = model.store.flat.copy()
    n = model.store.size
    mask = np.zeros(n)
    mask[::2] = 1
    g = np.ones(n)
    apply_masked_update(model.store, g, _state(mask, np.full(n, 0.25)), lr=0.1)
    np.testing.assert_allclose(before - model.store.flat, 0.4 * mask, rtol=1e-14)
    with pytest.raises(ValueError):
        apply_masked_update(model.store, np.ones(n + 1), None, lr=0.1)


def test_scaled_update_unbiased_in_expectation():
    g = np.array([0.3, -1.2, 2.0, 0.0])
    p = np.array([0.1, 0.5, 0.9, 0.3])
    rng = RandomSource(3)
    draws = np.array([masked_gradient(g, _state(sample_mask(p, rng), p)) for _ in range(50_000)])
    se = draws.std(axis=0) / np.sqrt(len(draws))
    assert np.all(np.abs(draws.mean(axis=0) - g) <= 4 * se + 1e-15)


def test_mask_iou():
    assert mask_iou([1, 1, 0, 0], [0, 1, 1, 0]) == pytest.approx(1 / 3)
    assert mask_iou([0, 0], [0, 0]) == 1.0
    assert mask_iou([1, 0], [1, 0]) == 1.0
    with pytest.raises(ValueError):
        mask_iou([1], [1, 0])


# --- training loop -----------------------------------------------------------

def test_reduces_to_sgd_on_doubled_loss():
    x, y = token_data(n=40)
    cfg = RoastConfig(delta=0.0, lam=0.0, mask_mode="off", lr=0.05, batch_size=4, epochs=10, seed=5)
    a, b = Model.create(TOKENS, 1), Model.create(TOKENS, 1)
    train(a, x, y, cfg)
    plain_sgd_on_doubled_loss(b, x, y, 0.05, 4, 10, seed=5)  # 100 steps
    np.testing.assert_allclose(a.store.flat, b.store.flat, rtol=1e-12, atol=1e-12)


def test_flat_gradient_matches_train_loss():
    model = Model.create(TOKENS, 0)
    x, y = token_data()
    loss, g = flat_gradient(model, x, y)
    assert g.shape == (model.store.size,) and np.isfinite(loss)


def test_mask_constant_within_refresh_window():
    x, y = token_data(n=40)
    log = train(Model.create(TOKENS, 0), x, y, RoastConfig(batch_size=8, epochs=3, refresh_period=3))
    ids = log.step_mask_ids
    assert len(ids) == 15
    assert ids == [t // 3 for t in range(15)]
    assert len(log.masks) == 5


def test_default_refresh_is_one_epoch():
    x, y = token_data(n=40)
    log = train(Model.create(TOKENS, 0), x, y, RoastConfig(batch_size=8, epochs=3))
    assert log.epoch_mask_ids == [0, 1, 2]
    assert log.epochs[0].iou_vs_first == 1.0
    assert log.epochs[-1].iou_vs_last == 1.0


def test_training_is_deterministic():
    x, y = token_data()
    a, b = Model.create(TOKENS, 0), Model.create(TOKENS, 0)
    la = train(a, x, y, RoastConfig(epochs=2, batch_size=8, seed=3))
    lb = train(b, x, y, RoastConfig(epochs=2, batch_size=8, seed=3))
    assert np.array_equal(a.store.flat, b.store.flat)
    assert la.to_jsonl() == lb.to_jsonl()
    assert a.trained


def test_training_lowers_loss():
    x, y = token_data(n=60)
    log = train(Model.create(TOKENS, 0), x, y, RoastConfig(epochs=8, batch_size=10, lr=0.2))
    assert log.epochs[-1].mean_loss < log.epochs[0].mean_loss


@pytest.mark.filterwarnings("ignore:overflow")
def test_huge_learning_rate_diverges():
    x, y = token_data()
    with pytest.raises(DivergenceError):
        train(Model.create(TOKENS, 0), x, y, RoastConfig(lr=1e200, mask_mode="off", epochs=3, batch_size=8))


def test_invalid_configs():
    for bad in ({"alpha": 1.5}, {"beta": 0}, {"lr": -1}, {"strategy": "mid"}, {"mask_mode": "x"},
                {"refresh_period": 0}, {"sigmoid_sign": "up"}):
        with pytest.raises(ValueError):
            RoastConfig(**bad)
    with pytest.raises(ValueError):
        RoastConfig.from_dict({"learning_rate": 0.1})
    with pytest.raises(ValueError):
        train(Model.create(TOKENS, 0), np.zeros((0, 3), int), np.zeros(0, int), RoastConfig())


def test_trainlog_jsonl_round_trip(tmp_path):
    x, y = token_data()
    log = train(Model.create(TOKENS, 0), x, y, RoastConfig(epochs=2, batch_size=8))
    log.write(tmp_path / "log.jsonl")
    assert TrainLog.read(tmp_path / "log.jsonl") == log.epochs


def test_large_beta_disagreements_only_at_clamp():
    cfg = RoastConfig(alpha=0.7, beta=1e4)
    for k in range(10):
        st = refresh_mask(RandomSource(500 + k).random(1000) ** 3, cfg, RandomSource(600 + k))
        far = np.abs(st.normalized - 0.7) >= 1e-3
        hard = (st.normalized >= 0.7).astype(float)
        bad = far & (st.mask != hard)
        # any disagreement must come from a probability pinned at the clamp
        assert np.all(np.isin(st.prob[bad], [1e-6, 1 - 1e-6]))
        assert np.all(np.isin(st.prob[far], [1e-6, 1 - 1e-6]))
