import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hierseg import tensor as T
from hierseg.optim import OptimizerState, WeightEMA, halving_schedule, lr_at, sgd_step
from hierseg.tensor import Tensor

from conftest import numeric_grad, rel_error
from oracles import bilinear_pixel, conv2d_loops, conv_transpose_scatter, same_pads, softmax_direct

SEEDS = range(5)


# -- conv2d -------------------------------------------------------------------

def test_conv_identity_kernel():
    x = np.arange(9.0).reshape(1, 1, 3, 3)
    out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x)


def test_conv_dilated_ones():
    out = T.conv2d(Tensor(np.ones((1, 1, 5, 5))), Tensor(np.ones((1, 1, 3, 3))), dilation=2)
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 9.0


def test_conv_matches_loops_example():
    rng = np.random.default_rng(0)
    x, k = rng.normal(size=(1, 2, 6, 6)), rng.normal(size=(3, 2, 3, 3))
    np.testing.assert_allclose(T.conv2d(Tensor(x), Tensor(k)).data, conv2d_loops(x, k), atol=1e-10)


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("dilation", [1, 2])
@pytest.mark.parametrize("padding", ["valid", "same"])
def test_conv_matches_loops_grid(stride, dilation, padding):
    rng = np.random.default_rng(10 * stride + dilation)
    for _ in range(4):
        h, w = rng.integers(5, 9, size=2)
        kh, kw = rng.integers(1, 4, size=2)
        x = rng.normal(size=(2, 2, h, w))
        k = rng.normal(size=(3, 2, kh, kw))
        pads = (0, 0, 0, 0)
        if padding == "same":
            pads = same_pads(h, kh, stride, dilation) + same_pads(w, kw, stride, dilation)
        elif (h - dilation * (kh - 1)) < 1 or (w - dilation * (kw - 1)) < 1:
            continue
        got = T.conv2d(Tensor(x), Tensor(k), stride=stride, dilation=dilation, padding=padding).data
        np.testing.assert_allclose(got, conv2d_loops(x, k, stride, dilation, pads), atol=1e-10)
        if padding == "same":
            assert got.shape[2:] == (-(-h // stride), -(-w // stride))


def test_conv_shape_mismatch_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(1, 2, 4, 4\).*\(1, 3, 1, 1\)"):
        T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 1, 1))))


def test_conv_rejects_unknown_padding():
    with pytest.raises(ValueError):
        T.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 1, 1))), padding="full")


# -- conv2d_transpose -----------------------------------------------------------

def test_transpose_single_pixel():
    k = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    out = T.conv2d_transpose(Tensor(np.full((1, 1, 1, 1), 2.5)), Tensor(k))
    np.testing.assert_array_equal(out.data, 2.5 * k)


def test_transpose_ones_doubles_extent():
    out = T.conv2d_transpose(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 2, 2))))
    np.testing.assert_array_equal(out.data, np.ones((1, 1, 4, 4)))


@pytest.mark.parametrize("seed", SEEDS)
def test_transpose_matches_scatter(seed):
    rng = np.random.default_rng(seed)
    x, k = rng.normal(size=(2, 3, 3, 4)), rng.normal(size=(3, 2, 2, 2))
    np.testing.assert_allclose(T.conv2d_transpose(Tensor(x), Tensor(k)).data,
                               conv_transpose_scatter(x, k), atol=1e-10)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("stride,ksize", [(2, 2), (2, 3), (1, 3)])
def test_adjointness(seed, stride, ksize):
    rng = np.random.default_rng(seed)
    k = rng.normal(size=(2, 3, ksize, ksize))        # conv2d: 3 -> 2 channels
    x = rng.normal(size=(2, 3, 2 * stride + ksize, 3 * stride + ksize))
    cx = T.conv2d(Tensor(x), Tensor(k), stride=stride).data
    y = rng.normal(size=cx.shape)
    ty = T.conv2d_transpose(Tensor(y), Tensor(k), stride=stride).data
    assert ty.shape == x.shape
    assert abs(np.sum(cx * y) - np.sum(x * ty)) < 1e-10


def test_transpose_channel_mismatch():
    with pytest.raises(ValueError):
        T.conv2d_transpose(Tensor(np.zeros((1, 2, 2, 2))), Tensor(np.zeros((3, 1, 2, 2))))


# -- bilinear ------------------------------------------------------------------

def test_bilinear_constant():
    out = T.bilinear_upsample(Tensor(np.full((2, 3, 3, 5), 7.0)), 11, 13)
    np.testing.assert_allclose(out.data, 7.0, atol=1e-12)


def test_bilinear_row_oracle():
    x = np.array([[[[0.0, 1.0]]]])
    out = T.bilinear_upsample(Tensor(x), 1, 4).data[0, 0, 0]
    expected = [bilinear_pixel(x[0, 0], 0, j, 1, 4) for j in range(4)]
    np.testing.assert_allclose(out, expected, atol=1e-12)
    np.testing.assert_allclose(out, [0.0, 0.25, 0.75, 1.0], atol=1e-12)


@pytest.mark.parametrize("seed", SEEDS)
def test_bilinear_random_oracle(seed):
    rng = np.random.default_rng(seed)
    h, w = rng.integers(1, 5, size=2)
    th, tw = h + rng.integers(0, 7), w + rng.integers(0, 7)
    x = rng.normal(size=(1, 1, h, w))
    out = T.bilinear_upsample(Tensor(x), th, tw).data[0, 0]
    ref = np.array([[bilinear_pixel(x[0, 0], i, j, th, tw) for j in range(tw)] for i in range(th)])
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_bilinear_identity_and_reject():
    x = np.random.default_rng(0).normal(size=(1, 2, 3, 3))
    np.testing.assert_array_equal(T.bilinear_upsample(Tensor(x), 3, 3).data, x)
    with pytest.raises(ValueError):
        T.bilinear_upsample(Tensor(x), 2, 4)


# -- batch norm ----------------------------------------------------------------

def test_batch_norm_train_statistics():
    rng = np.random.default_rng(0)
    x = rng.normal(3.0, 2.0, size=(64, 2, 16, 16))
    gamma, beta = np.array([1.5, -0.5]), np.array([0.2, -1.0])
    out = T.batch_norm(Tensor(x), Tensor(gamma), Tensor(beta), T.BatchNormStats(2), training=True).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), beta, atol=1e-2)
    np.testing.assert_allclose(out.std(axis=(0, 2, 3)), np.abs(gamma), atol=1e-2)


def test_batch_norm_running_stats_ema():
    x = np.random.default_rng(1).normal(size=(4, 1, 3, 3))
    stats = T.BatchNormStats(1, decay=0.9)
    T.batch_norm(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)), stats, training=True)
    assert stats.mean[0] == pytest.approx(0.1 * x.mean())
    assert stats.var[0] == pytest.approx(0.9 + 0.1 * x.var(ddof=1))


def test_batch_norm_relu_negative_is_zero():
    stats = T.BatchNormStats(1)
    out = T.batch_norm_relu(Tensor(-np.ones((1, 1, 2, 2))), Tensor(np.ones(1)), Tensor(np.zeros(1)),
                            stats, training=False)
    np.testing.assert_array_equal(out.data, 0.0)
    x = np.random.default_rng(2).normal(size=(2, 3, 4, 4))
    out = T.batch_norm_relu(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), T.BatchNormStats(3), training=False)
    np.testing.assert_allclose(out.data, np.maximum(x, 0) / np.sqrt(1 + T.BN_EPS), atol=1e-12)


def test_batch_norm_zero_variance_is_finite():
    out = T.batch_norm(Tensor(np.ones((2, 1, 2, 2))), Tensor(np.ones(1)), Tensor(np.zeros(1)),
                       T.BatchNormStats(1), training=True)
    assert np.isfinite(out.data).all()


def test_batch_norm_rejects_bad_decay():
    with pytest.raises(ValueError):
        T.BatchNormStats(2, decay=1.0)


# -- softmax -------------------------------------------------------------------

def test_softmax_uniform_and_stable():
    np.testing.assert_allclose(T.softmax_map(Tensor(np.zeros((1, 3, 2, 2)))).data, 1 / 3, atol=1e-15)
    s = T.softmax_map(Tensor(np.array([1000.0, 0.0]).reshape(1, 2, 1, 1))).data.ravel()
    assert np.isfinite(s).all()
    np.testing.assert_allclose(s, [1.0, 0.0], atol=1e-300)


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_direct_oracle(seed):
    x = np.random.default_rng(seed).normal(size=(2, 4, 3, 3))
    s = T.softmax_map(Tensor(x)).data
    for n in range(2):
        for r in range(3):
            for c in range(3):
                np.testing.assert_allclose(s[n, :, r, c], softmax_direct(x[n, :, r, c]), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 6), st.floats(0.1, 500.0), st.integers(0, 2 ** 31 - 1))
def test_softmax_sums_to_one(k, scale, seed):
    x = np.random.default_rng(seed).normal(size=(2, k, 3, 3)) * scale
    s = T.softmax_map(Tensor(x)).data
    assert (s >= 0).all()
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-9)


# -- backward ------------------------------------------------------------------

def test_backward_linear_and_quadratic():
    x = Tensor(np.arange(4.0), requires_grad=True)
    T.backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones(4))
    x = Tensor(np.arange(4.0), requires_grad=True)
    T.backward((x * x).sum())
    np.testing.assert_array_equal(x.grad, 2 * np.arange(4.0))


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        T.backward(x * x)


def test_backward_shared_node_evaluated_once():
    calls = []
    x = Tensor(np.ones(2), requires_grad=True)
    y = x * x
    orig = y._backward

    def counting(g):
        calls.append(1)
        return orig(g)

    y._backward = counting
    T.backward((y + y).sum())
    assert len(calls) == 1
    np.testing.assert_array_equal(x.grad, 4 * np.ones(2))


def _fd_check(build, arrays, tol=1e-3):
    """Compare autodiff and central differences for every array in ``arrays``."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    T.backward(build(*tensors))
    for t, a in zip(tensors, arrays):
        num = numeric_grad(lambda: float(build(*[Tensor(b) for b in arrays]).data), a)
        assert rel_error(t.grad, num) < tol


def _weights(rng, shape):
    return rng.normal(size=shape)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("stride,dilation,padding", [(1, 1, "same"), (2, 1, "same"), (1, 2, "valid"),
                                                     (2, 2, "same")])
def test_grad_conv2d(seed, stride, dilation, padding):
    rng = np.random.default_rng(seed)
    x, k, w = rng.normal(size=(2, 2, 6, 6)), rng.normal(size=(3, 2, 3, 3)), None
    out_shape = T.conv2d(Tensor(x), Tensor(k), stride, dilation, padding).shape
    w = _weights(rng, out_shape)
    _fd_check(lambda a, b: (T.conv2d(a, b, stride, dilation, padding) * Tensor(w)).sum(), [x, k])


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_conv2d_transpose(seed):
    rng = np.random.default_rng(seed)
    x, k = rng.normal(size=(2, 3, 3, 3)), rng.normal(size=(3, 2, 2, 2))
    w = _weights(rng, (2, 2, 6, 6))
    _fd_check(lambda a, b: (T.conv2d_transpose(a, b) * Tensor(w)).sum(), [x, k])


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_bilinear(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(1, 2, 3, 4))
    w = _weights(rng, (1, 2, 7, 9))
    _fd_check(lambda a: (T.bilinear_upsample(a, 7, 9) * Tensor(w)).sum(), [x])


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("training", [True, False])
def test_grad_batch_norm(seed, training):
    rng = np.random.default_rng(seed)
    x, g, b = rng.normal(size=(3, 2, 3, 3)), rng.normal(size=2), rng.normal(size=2)
    w = _weights(rng, x.shape)

    def f(a, gg, bb):
        stats = T.BatchNormStats(2)
        stats.mean, stats.var = np.array([0.1, -0.2]), np.array([1.3, 0.7])
        return (T.batch_norm(a, gg, bb, stats, training) * Tensor(w)).sum()

    _fd_check(f, [x, g, b])


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_softmax_log_take(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 4, 3, 3))
    idx = (rng.integers(0, 2, 5), rng.integers(0, 4, 5), rng.integers(0, 3, 5), rng.integers(0, 3, 5))
    _fd_check(lambda a: T.mean(T.log(T.take(T.softmax_map(a), idx), eps=1e-12)), [x])


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_elementwise(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(1, 4))
    w = _weights(rng, (3, 4))
    # keep relu away from its kink
    a[np.abs(a) < 1e-2] = 0.5
    _fd_check(lambda p, q: ((T.relu(p) * q + (p - q) * Tensor(w)).reshape(12)).mean() - T.neg(p).sum(), [a, b])


# -- optimizer -----------------------------------------------------------------

def _param(v):
    return T.parameter(np.array([float(v)]))


def test_sgd_plain_step():
    p = _param(0.0)
    p.grad = np.array([1.0])
    sgd_step({"p": p}, OptimizerState(learning_rate=0.1, momentum=0.0, weight_decay=0.0))
    assert p.data[0] == pytest.approx(-0.1)
    assert p.grad is None


def test_sgd_momentum_unroll():
    p = _param(0.0)
    state = OptimizerState(learning_rate=1.0, momentum=0.9, weight_decay=0.0)
    trace = []
    for _ in range(2):
        p.grad = np.array([1.0])
        sgd_step({"p": p}, state)
        trace.append(p.data[0])
    np.testing.assert_allclose(trace, [-1.0, -2.9], atol=1e-12)


def test_sgd_decay_shrinks_param():
    p = _param(2.0)
    p.grad = np.zeros(1)
    sgd_step({"p": p}, OptimizerState(learning_rate=0.5, momentum=0.9, weight_decay=0.00017))
    assert p.data[0] == pytest.approx(2.0 - 0.5 * 0.00017 * 2.0, abs=1e-15)


def test_sgd_no_decay_for_normalization():
    p, g = _param(2.0), _param(2.0)
    p.grad, g.grad = np.zeros(1), np.zeros(1)
    sgd_step({"w": p, "bn.gamma": g}, OptimizerState(0.5, 0.0, 0.1), no_decay={"bn.gamma"})
    assert p.data[0] < 2.0
    assert g.data[0] == 2.0


def test_sgd_missing_grad_rejected():
    with pytest.raises(ValueError):
        sgd_step({"p": _param(0.0)}, OptimizerState())


def test_optimizer_state_validation():
    with pytest.raises(ValueError):
        OptimizerState(learning_rate=0.0)
    with pytest.raises(ValueError):
        OptimizerState(momentum=1.0)
    with pytest.raises(ValueError):
        OptimizerState(weight_decay=-1.0)


def test_halving_schedule_sequence():
    ms = halving_schedule(0.01, 8)
    lrs = sorted({lr_at(s, 0.01, ms) for s in range(8)}, reverse=True)
    np.testing.assert_allclose(lrs, [0.01, 0.005, 0.0025, 0.00125])
    assert [lr_at(s, 0.01, ms) for s in range(8)] == [0.01, 0.01, 0.005, 0.005, 0.0025, 0.0025,
                                                     0.00125, 0.00125]


def test_weight_ema_tracks():
    p = _param(0.0)
    ema = WeightEMA({"p": p}, decay=0.5)
    p.data[:] = 4.0
    ema.update({"p": p})
    assert ema.shadow["p"][0] == pytest.approx(2.0)


def test_default_dtype_switch():
    try:
        T.set_default_dtype(np.float32)
        assert T.parameter([1.0]).data.dtype == np.float32
    finally:
        T.set_default_dtype(np.float64)
    assert T.parameter([1.0]).data.dtype == np.float64
