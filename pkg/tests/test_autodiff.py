import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sacf import autodiff as ad
from sacf.autodiff import Adam, ContractViolation, Graph, NumericFault, Tensor

SEEDS = range(20)


def away_from_zero(rng, shape, gap=0.05):
    x = rng.uniform(gap, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def param(x):
    return Tensor(x, requires_grad=True)


UNARY = {
    "relu": (ad.relu, away_from_zero),
    "tanh": (ad.tanh, lambda r, s: r.standard_normal(s)),
    "sigmoid": (ad.sigmoid, lambda r, s: r.standard_normal(s)),
    "exp": (ad.exp, lambda r, s: r.uniform(-1, 1, s)),
    "log": (ad.log, lambda r, s: r.uniform(0.5, 2, s)),
    "cos": (ad.cos, lambda r, s: r.standard_normal(s)),
    "sin": (ad.sin, lambda r, s: r.standard_normal(s)),
    "softplus": (ad.softplus, lambda r, s: r.standard_normal(s)),
    "neg": (ad.neg, lambda r, s: r.standard_normal(s)),
    "scale": (lambda t: ad.scale(t, -2.5), lambda r, s: r.standard_normal(s)),
    "softmax": (ad.softmax, lambda r, s: r.standard_normal(s)),
    "log_softmax": (ad.log_softmax, lambda r, s: r.standard_normal(s)),
    "mean": (lambda t: ad.mean(t, axis=0), lambda r, s: r.standard_normal(s)),
    "sum": (lambda t: ad.sum_(t, axis=1), lambda r, s: r.standard_normal(s)),
    "reshape": (lambda t: ad.reshape(t, (t.size,)), lambda r, s: r.standard_normal(s)),
    "slice": (lambda t: t[1:, ::2], lambda r, s: r.standard_normal(s)),
    "clip": (lambda t: ad.clip(t, -0.5, 0.5), lambda r, s: np.where(
        np.abs(np.abs(x := r.uniform(-1, 1, s)) - 0.5) < 0.05, 0.2, x)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@pytest.mark.parametrize("seed", SEEDS)
def test_unary_ops_match_central_differences(name, seed):
    fn, sampler = UNARY[name]
    rng = np.random.default_rng(seed)
    with ad.precision(np.float64):
        x = param(sampler(rng, (3, 4)))
        w_rng = np.random.default_rng(seed + 100)
        w = Tensor(w_rng.standard_normal(fn(Tensor(x.values)).shape))
        err = ad.finite_difference_check(lambda: ad.sum_(ad.mul(fn(x), w)), [x])
    assert err < 1e-2


BINARY = {
    "add": (ad.add, (3, 4), (4,)),
    "sub": (ad.sub, (3, 4), (3, 1)),
    "mul": (ad.mul, (3, 4), (1, 4)),
    "matmul": (ad.matmul, (3, 4), (4, 2)),
    "minimum": (ad.minimum, (3, 4), (3, 4)),
    "concat0": (lambda a, b: ad.concat([a, b], axis=0), (3, 4), (2, 4)),
    "concat1": (lambda a, b: ad.concat([a, b], axis=-1), (3, 4), (3, 2)),
}


@pytest.mark.parametrize("name", sorted(BINARY))
@pytest.mark.parametrize("seed", SEEDS)
def test_binary_ops_match_central_differences(name, seed):
    fn, sa, sb = BINARY[name]
    rng = np.random.default_rng(seed)
    with ad.precision(np.float64):
        a = param(rng.standard_normal(sa))
        b = param(rng.standard_normal(sb))
        if name == "minimum":
            # keep the two arguments apart so no coordinate sits on the kink
            b.values[...] = a.values + away_from_zero(rng, sb, 0.05)
        w = Tensor(rng.standard_normal(fn(Tensor(a.values), Tensor(b.values)).shape))
        err = ad.finite_difference_check(lambda: ad.sum_(ad.mul(fn(a, b), w)), [a, b])
    assert err < 1e-2


@pytest.mark.parametrize("stride", [1, (1, 2), 2])
@pytest.mark.parametrize("seed", SEEDS)
def test_conv2d_matches_central_differences(stride, seed):
    rng = np.random.default_rng(seed)
    with ad.precision(np.float64):
        x = param(rng.standard_normal((2, 3, 5, 6)))
        k = param(rng.standard_normal((4, 3, 2, 3)))
        b = param(rng.standard_normal(4))
        w = Tensor(rng.standard_normal(ad.conv2d(Tensor(x.values), Tensor(k.values), None, stride).shape))
        err = ad.finite_difference_check(lambda: ad.sum_(ad.mul(ad.conv2d(x, k, b, stride), w)), [x, k, b],
                                         max_coords=96)
    assert err < 1e-2


@pytest.mark.parametrize("seed", SEEDS)
def test_spatial_ops_match_central_differences(seed):
    rng = np.random.default_rng(seed)
    with ad.precision(np.float64):
        f = param(rng.standard_normal((2, 3, 2, 2)))
        gamma = param(rng.standard_normal((2, 3)))
        beta = param(rng.standard_normal((2, 3)))
        w = Tensor(rng.standard_normal((2, 3, 4, 4)))
        u = Tensor(rng.standard_normal((2, 3)))

        def loss():
            up = ad.upsample_nearest(ad.affine_channel(f, gamma, beta), 2, 2)
            return ad.add(ad.sum_(ad.mul(up, w)), ad.sum_(ad.mul(ad.mean_pool_spatial(f), u)))

        err = ad.finite_difference_check(loss, [f, gamma, beta])
    assert err < 1e-2


@pytest.mark.parametrize("seed", SEEDS)
def test_split_rows_and_reuse(seed):
    rng = np.random.default_rng(seed)
    with ad.precision(np.float64):
        x = param(rng.standard_normal((6, 3)))

        def loss():
            parts = ad.split_rows(x, 3)
            # x used three ways: via chunks, directly, and twice in one product
            return ad.add(ad.sum_(ad.mul(parts[0], parts[2])), ad.sum_(ad.mul(ad.tanh(x), x)))

        assert ad.finite_difference_check(loss, [x]) < 1e-2


def np_sigmoid(x):
    return 1 / (1 + np.exp(-x))


def gru_reference(gx, h, w_h, b_h):
    H = h.shape[1]
    gh = h @ w_h + b_h
    r = np_sigmoid(gx[:, :H] + gh[:, :H])
    z = np_sigmoid(gx[:, H : 2 * H] + gh[:, H : 2 * H])
    n = np.tanh(gx[:, 2 * H :] + r * gh[:, 2 * H :])
    return (1 - z) * n + z * h


def lstm_reference(x, h, c, w_x, w_h, b):
    H = h.shape[1]
    pre = x @ w_x + h @ w_h + b
    i, f, o = np_sigmoid(pre[:, :H]), np_sigmoid(pre[:, H : 2 * H]), np_sigmoid(pre[:, 3 * H :])
    c2 = f * c + i * np.tanh(pre[:, 2 * H : 3 * H])
    return o * np.tanh(c2), c2


@pytest.mark.parametrize("seed", SEEDS)
def test_fused_cells_match_textbook_equations(seed):
    rng = np.random.default_rng(seed)
    with ad.precision(np.float64):
        gx, h, c = rng.standard_normal((3, 9)), rng.standard_normal((3, 3)), rng.standard_normal((3, 3))
        w_h, b_h = rng.standard_normal((3, 9)), rng.standard_normal(9)
        out = ad.gru_cell(Tensor(gx), Tensor(h), Tensor(w_h), Tensor(b_h)).values
        np.testing.assert_allclose(out, gru_reference(gx, h, w_h, b_h), atol=1e-12)
        x, w_x, w4, b4 = rng.standard_normal((3, 2)), rng.standard_normal((2, 12)), rng.standard_normal((3, 12)), \
            rng.standard_normal(12)
        hc = ad.lstm_cell(Tensor(x), Tensor(h), Tensor(c), Tensor(w_x), Tensor(w4), Tensor(b4)).values
        h2, c2 = lstm_reference(x, h, c, w_x, w4, b4)
        np.testing.assert_allclose(hc, np.concatenate([h2, c2], axis=1), atol=1e-12)


def test_zero_weight_cells_hand_values():
    # all-zero pre-activations: gates are 0.5, candidates tanh(0) = 0
    h = Tensor([[2.0]])
    out = ad.gru_cell(Tensor(np.zeros((1, 3))), h, Tensor(np.zeros((1, 3))), Tensor(np.zeros(3)))
    assert out.item() == pytest.approx(1.0)
    hc = ad.lstm_cell(Tensor([[1.0]]), h, Tensor([[4.0]]), Tensor(np.zeros((1, 4))), Tensor(np.zeros((1, 4))),
                      Tensor(np.zeros(4)))
    np.testing.assert_allclose(hc.values, [[0.5 * np.tanh(2.0), 2.0]], rtol=1e-6)


@pytest.mark.parametrize("seed", SEEDS)
def test_fused_cells_match_central_differences(seed):
    rng = np.random.default_rng(seed)
    with ad.precision(np.float64):
        gx, h, c = param(rng.standard_normal((2, 9))), param(rng.standard_normal((2, 3))), \
            param(rng.standard_normal((2, 3)))
        w_h, b_h = param(rng.standard_normal((3, 9))), param(rng.standard_normal(9))
        x, w_x = param(rng.standard_normal((2, 4))), param(rng.standard_normal((4, 12)))
        w4, b4 = param(rng.standard_normal((3, 12))), param(rng.standard_normal(12))
        u, v = Tensor(rng.standard_normal((2, 3))), Tensor(rng.standard_normal((2, 6)))

        def loss():
            h1 = ad.gru_cell(gx, h, w_h, b_h)
            hc = ad.lstm_cell(x, h1, c, w_x, w4, b4)
            return ad.add(ad.sum_(ad.mul(h1, u)), ad.sum_(ad.mul(hc, v)))

        err = ad.finite_difference_check(loss, [gx, h, c, w_h, b_h, x, w_x, w4, b4], h=1e-5, max_coords=128,
                                         rng=np.random.default_rng(seed))
    assert err < 1e-2


def test_fused_cell_shape_checks():
    with pytest.raises(ContractViolation):
        ad.gru_cell(Tensor(np.zeros((1, 6))), Tensor(np.zeros((1, 3))), Tensor(np.zeros((3, 9))), Tensor(np.zeros(9)))
    with pytest.raises(ContractViolation):
        ad.lstm_cell(Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 3))), Tensor(np.zeros((1, 2))),
                     Tensor(np.zeros((2, 12))), Tensor(np.zeros((3, 12))), Tensor(np.zeros(12)))


@pytest.mark.parametrize("seed", SEEDS)
def test_quadratic_gradient_is_exact(seed):
    rng = np.random.default_rng(seed)
    with ad.precision(np.float64):
        a = rng.standard_normal((4, 4))
        q = Tensor(a @ a.T + np.eye(4))
        x = param(rng.standard_normal((1, 4)))
        err = ad.finite_difference_check(lambda: ad.sum_(ad.mul(ad.matmul(x, q), x)), [x])
        # hand-derived gradient 2 x Q for symmetric Q
        x.grad = None
        with Graph():
            ad.backward(ad.sum_(ad.mul(ad.matmul(x, q), x)))
        np.testing.assert_allclose(x.grad, 2 * x.values @ q.values, rtol=1e-12)
    assert err < 1e-6


def test_backward_requires_scalar():
    x = param(np.ones(3))
    with Graph(), pytest.raises(ContractViolation):
        ad.backward(ad.mul(x, x))


def test_nan_is_caught_at_the_producing_op():
    x = param(np.array([-1.0, 1.0]))
    with Graph(), pytest.raises(NumericFault, match="log"):
        ad.log(x)


def test_matmul_shape_mismatch_names_the_op():
    with pytest.raises(ContractViolation, match="matmul"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_gradients_accumulate_across_uses():
    x = param(np.array([2.0]))
    with Graph():
        ad.backward(ad.sum_(ad.add(ad.mul(x, x), x)))
    assert x.grad[0] == pytest.approx(5.0)


def test_no_grad_records_nothing():
    x = param(np.ones(2))
    with ad.no_grad():
        y = ad.mul(x, x)
    assert not y.requires_grad


def test_fd_check_rejects_nondeterministic_closure():
    x = param(np.ones(2))
    rng = np.random.default_rng(0)
    with pytest.raises(ContractViolation):
        ad.finite_difference_check(lambda: ad.sum_(ad.mul(x, Tensor(rng.standard_normal(2)))), [x])


@given(st.floats(-50, 50), st.floats(-50, 50))
def test_sigmoid_and_softplus_are_stable(a, b):
    x = Tensor(np.array([a, b]))
    s = ad.sigmoid(x).values
    assert np.all((s >= 0) & (s <= 1))
    assert np.all(np.isfinite(ad.softplus(x).values))


@settings(max_examples=50)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=8))
def test_softmax_is_normalized(xs):
    p = ad.softmax(Tensor(np.array([xs]))).values
    assert abs(p.sum() - 1) < 1e-5
    ls = ad.log_softmax(Tensor(np.array([xs]))).values
    np.testing.assert_allclose(np.exp(ls), p, atol=1e-5)


def test_clip_grad_norm_caps_global_norm():
    a, b = param(np.zeros(2)), param(np.zeros(3))
    a.grad, b.grad = np.full(2, 3.0, dtype=np.float32), np.full(3, 4.0, dtype=np.float32)
    pre = ad.clip_grad_norm([a, b], 0.5)
    assert pre == pytest.approx(np.sqrt(18 + 48))
    post = np.sqrt((a.grad**2).sum() + (b.grad**2).sum())
    assert post <= 0.5 + 1e-6


def test_adam_first_step_is_minus_lr():
    # bias-corrected moments give a unit normalized step
    p = param(np.array([0.0]))
    opt = Adam([p], lr=2.5e-4, eps=1e-5)
    p.grad = np.array([1.0], dtype=np.float32)
    opt.step()
    assert p.values[0] == pytest.approx(-2.5e-4 / (1 + 1e-5), rel=1e-5)


def test_adam_zero_grad_changes_nothing():
    p = param(np.array([0.7, -0.2]))
    opt = Adam([p])
    before = p.values.copy()
    p.grad = np.zeros(2, dtype=np.float32)
    opt.step()
    np.testing.assert_array_equal(p.values, before)


def test_adam_missing_grad_is_refused():
    opt = Adam([param(np.ones(2))])
    with pytest.raises(ContractViolation):
        opt.step()


def test_adam_linear_decay_reaches_zero():
    opt = Adam([param(np.ones(1))], lr=1.0, total_updates=4)
    lrs = []
    for _ in range(5):
        lrs.append(opt.lr)
        opt.decay()
    assert lrs == [1.0, 0.75, 0.5, 0.25, 0.0]
