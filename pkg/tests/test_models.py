import numpy as np
import pytest

from sfp import models as M
from sfp import subspace as ss
from sfp.errors import InvalidInput, NumericalFailure


def _state(kind, d=6, m=4, classes=3, seed=0):
    st = M.init_model(M.ModelSpec(kind, d, m, classes if kind == "mlp" else 0), seed)
    if kind == "mlp":
        # non-zero biases so the rectifier kinks are exercised away from zero
        st.params["b"] = np.random.default_rng(seed + 1).normal(0, 0.3, m)
    return st


def _batch(kind, n=9, d=6, m=4, classes=3, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, d))
    y = rng.standard_normal((n, m)) if kind == "linear" else rng.integers(0, classes, n)
    return x, y


def _objective(state, x, y, mask, eta):
    return M.loss_and_grads(state, x, y, mask, eta).objective


def _fd_check(state, x, y, mask, eta, coords=16, h=1e-6, seed=0):
    g = M.loss_and_grads(state, x, y, mask, eta).grads
    rng = np.random.default_rng(seed)
    names = sorted(state.params)
    worst = 0.0
    for _ in range(coords):
        name = names[rng.integers(len(names))]
        idx = tuple(rng.integers(s) for s in state.params[name].shape)
        plus, minus = state.copy(), state.copy()
        plus.params[name][idx] += h
        minus.params[name][idx] -= h
        fd = (_objective(plus, x, y, mask, eta) - _objective(minus, x, y, mask, eta)) / (2 * h)
        worst = max(worst, abs(fd - g[name][idx]) / max(abs(fd), abs(g[name][idx]), 1e-8))
    return worst


def test_spec_validation():
    with pytest.raises(InvalidInput):
        M.ModelSpec("cnn", 2, 2)
    with pytest.raises(InvalidInput):
        M.ModelSpec("mlp", 2, 2, 0)


def test_init_deterministic_and_shaped():
    spec = M.ModelSpec("linear", 8, 4)
    a, b = M.init_model(spec, 3), M.init_model(spec, 3)
    assert a.params["w"].shape == (4, 8)
    np.testing.assert_array_equal(a.params["w"], b.params["w"])
    assert not np.array_equal(a.params["w"], M.init_model(spec, 4).params["w"])


def test_init_seeds_give_different_epsilon():
    from sfp.datasets import gen_linear_task

    task, _, _ = gen_linear_task(2, 2, 2, 0.8, 0.2, 500, 0.0, 0)
    eps = []
    for seed in (0, 1):
        w0 = M.init_model(M.ModelSpec("linear", 6, 2), seed).params["w"]
        lid, lood = ss.domain_losses(w0, task.spec, task.w_star)
        eps.append(lood - lid)
    assert eps[0] != eps[1]


def test_forward_zero_input():
    lin = _state("linear")
    feats, _ = M.forward(lin, np.zeros((2, 6)))
    assert not np.any(feats)
    mlp = _state("mlp")
    feats, _ = M.forward(mlp, np.zeros((2, 6)))
    np.testing.assert_array_equal(feats, np.tile(np.maximum(mlp.params["b"], 0), (2, 1)))


def test_forward_identity_weights():
    st = M.ModelState(M.ModelSpec("linear", 3, 3), {"w": np.eye(3)})
    x = np.random.default_rng(0).standard_normal((4, 3))
    np.testing.assert_array_equal(M.forward(st, x)[0], x)


def test_forward_matches_loop():
    st = _state("mlp")
    x, _ = _batch("mlp")
    feats, out = M.forward(st, x)
    p = st.params
    for n in range(x.shape[0]):
        f = [max(0.0, sum(p["w"][j, i] * x[n, i] for i in range(6)) + p["b"][j]) for j in range(4)]
        o = [sum(p["head"][c, j] * f[j] for j in range(4)) + p["c"][c] for c in range(3)]
        np.testing.assert_allclose(feats[n], f, atol=1e-12)
        np.testing.assert_allclose(out[n], o, atol=1e-12)


def test_forward_shape_mismatch():
    with pytest.raises(InvalidInput):
        M.forward(_state("linear"), np.zeros((2, 5)))


def test_erm_reduction_empty_mask():
    st = _state("mlp")
    x, y = _batch("mlp")
    plain = M.loss_and_grads(st, x, y)
    masked = M.loss_and_grads(st, x, y, np.zeros(9, bool), 0.0)
    for k in plain.grads:
        np.testing.assert_array_equal(plain.grads[k], masked.grads[k])
    assert plain.objective == masked.objective


def test_linear_task_gradient_matches_brute_gradient():
    rng = np.random.default_rng(2)
    w_star = rng.standard_normal((2, 5))
    x = rng.standard_normal((12, 5))
    st = M.ModelState(M.ModelSpec("linear", 5, 2), {"w": rng.standard_normal((2, 5))})
    g = M.loss_and_grads(st, x, x @ w_star.T).grads["w"]
    np.testing.assert_allclose(g, ss.brute_gradient(st.params["w"], x, w_star), atol=1e-10)


@pytest.mark.parametrize("kind", ["linear", "mlp"])
@pytest.mark.parametrize("seed", range(3))
def test_gradients_match_finite_differences(kind, seed):
    st = _state(kind, seed=seed)
    x, y = _batch(kind, seed=seed)
    mask = np.random.default_rng(seed).random(9) < 0.5
    eta = np.random.default_rng(seed + 7).uniform(0.1, 2.0, 9)
    assert _fd_check(st, x, y, None, 0.0, seed=seed) <= 1e-5
    assert _fd_check(st, x, y, mask, eta, seed=seed) <= 1e-5


def test_all_masked_rectified_penalty_gradient():
    # positive features everywhere: penalty gradient on w is eta/(n m) sum_i x_i per unit
    st = _state("mlp")
    st.params["b"] = np.full(4, 10.0)
    x, y = _batch("mlp")
    eta = 0.7
    with_pen = M.loss_and_grads(st, x, y, np.ones(9, bool), eta).grads["w"]
    without = M.loss_and_grads(st, x, y).grads["w"]
    expected = np.tile(eta / (9 * 4) * x.sum(axis=0), (4, 1))
    np.testing.assert_allclose(with_pen - without, expected, atol=1e-12)
    assert _fd_check(st, x, y, np.ones(9, bool), eta) <= 1e-5


def test_penalty_value_mean_over_masked():
    f = np.array([[1.0, -3.0], [2.0, 2.0], [5.0, 5.0]])
    mask = np.array([True, True, False])
    assert M.penalty_value(f, mask, 2.0) == pytest.approx((2 * 2 + 2 * 2) / 2)
    assert M.penalty_value(f, np.zeros(3, bool), 2.0) == 0.0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_loss_and_grads_validation():
    st = _state("linear")
    x, y = _batch("linear")
    with pytest.raises(InvalidInput):
        M.loss_and_grads(st, x, y, np.ones(3, bool), 1.0)
    with pytest.raises(InvalidInput):
        M.loss_and_grads(st, x, y, np.ones(9, bool), -1.0)
    with pytest.raises(NumericalFailure):
        M.loss_and_grads(st, x * 1e200, y)


def test_sgd_examples():
    st = _state("linear")
    zero = {k: np.zeros_like(v) for k, v in st.params.items()}
    np.testing.assert_array_equal(M.sgd_step(st, zero, 0.1).params["w"], st.params["w"])
    eye = M.ModelState(M.ModelSpec("linear", 3, 3), {"w": np.full((3, 3), 2.0)})
    np.testing.assert_array_equal(M.sgd_step(eye, {"w": np.eye(3)}, 1.0).params["w"], 2.0 - np.eye(3))
    with pytest.raises(InvalidInput):
        M.sgd_step(st, zero, 0.0)


def test_sgd_monotone_on_convex_task():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((40, 5))
    y = x @ rng.standard_normal((2, 5)).T
    st = M.ModelState(M.ModelSpec("linear", 5, 2), {"w": np.zeros((2, 5))})
    lr = 0.9 / np.linalg.eigvalsh(2 * x.T @ x / 40).max()
    losses = []
    for _ in range(50):
        g = M.loss_and_grads(st, x, y)
        losses.append(g.objective)
        st = M.sgd_step(st, g, lr)
    assert np.all(np.diff(losses) <= 1e-12)


def test_checkpoint_round_trip(tmp_path):
    st = _state("mlp")
    st.step = 17
    M.save_checkpoint(st, tmp_path / "ck")
    back, meta = M.load_checkpoint(tmp_path / "ck")
    assert back.spec == st.spec and back.step == 17
    for k in st.params:
        np.testing.assert_array_equal(back.params[k], st.params[k])
    x, _ = _batch("mlp")
    np.testing.assert_array_equal(M.forward(back, x)[1], M.forward(st, x)[1])
