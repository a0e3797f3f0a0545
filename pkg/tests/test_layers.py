import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from facechannel.gradcheck import grad_check
from facechannel.layers import (
    SHUNT_EPS,
    BatchNorm2D,
    Conv2D,
    Dense,
    Dropout,
    MaxPool2D,
    ReLU,
    Shunting,
    Softmax,
    UninitializedStatisticsError,
    conv2d,
    relu,
    shunting_forward,
    softmax,
    softplus,
)
from facechannel.tensor import ShapeError

F64 = np.float64


def direct_conv(x, w, b, pad):
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    hout, wout = h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1
    out = np.zeros((n, f, hout, wout))
    for i in range(n):
        for j in range(f):
            for y in range(hout):
                for z in range(wout):
                    out[i, j, y, z] = np.sum(xp[i, :, y:y + kh, z:z + kw] * w[j]) + b[j]
    return out


# -- convolution -------------------------------------------------------------

def test_conv_sum_of_ones():
    out = conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1), 1, 0)
    np.testing.assert_array_equal(out, [[[[9.0]]]])


def test_conv_same_padding_shape():
    assert conv2d(np.ones((1, 1, 4, 4)), np.ones((1, 1, 3, 3)), None, 1, 1).shape == (1, 1, 4, 4)


def test_conv_matches_direct_loops(rng):
    x = rng.standard_normal((2, 3, 6, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    np.testing.assert_allclose(conv2d(x, w, b, 1, 1), direct_conv(x, w, b, 1), rtol=1e-10, atol=1e-12)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError, match="channels"):
        conv2d(np.ones((1, 2, 4, 4)), np.ones((1, 3, 3, 3)))


def test_conv_gradients(rng):
    layer = Conv2D(3, 4, 3, 1, 1, rng=rng, dtype=F64)
    rep = grad_check(layer, rng.standard_normal((2, 3, 8, 8)), eps=1e-6, tolerance=1e-5)
    assert rep.passed, str(rep)


# -- max pooling -------------------------------------------------------------

def test_maxpool_single_window():
    assert MaxPool2D().forward(np.array([[[[1.0, 2], [3, 4]]]]))[0, 0, 0, 0] == 4


def test_maxpool_tie_routes_to_first():
    pool = MaxPool2D()
    x = np.full((1, 1, 4, 4), 2.0)
    np.testing.assert_array_equal(pool.forward(x), np.full((1, 1, 2, 2), 2.0))
    dx = pool.backward(np.ones((1, 1, 2, 2)))
    expected = np.zeros((4, 4))
    expected[::2, ::2] = 1
    np.testing.assert_array_equal(dx[0, 0], expected)


def test_maxpool_odd_dims():
    with pytest.raises(ShapeError, match="even"):
        MaxPool2D().forward(np.ones((1, 1, 3, 4)))


def test_maxpool_gradients(rng):
    rep = grad_check(MaxPool2D(), rng.standard_normal((1, 2, 6, 6)), tolerance=1e-5)
    assert rep.passed and rep.skipped["input"] == 0


def test_maxpool_ties_are_skipped():
    rep = grad_check(MaxPool2D(), np.ones((1, 1, 4, 4)))
    assert rep.skipped["input"] == 16
    assert "skipped at ties" in str(rep)


# -- batch norm ----------------------------------------------------------------

def test_batchnorm_normalizes(rng):
    bn = BatchNorm2D(3, dtype=F64)
    y = bn.forward(rng.standard_normal((4, 3, 5, 5)) * 3 + 7)
    assert np.all(np.abs(y.mean(axis=(0, 2, 3))) < 1e-6)
    assert np.all(np.abs(y.var(axis=(0, 2, 3)) - 1) < 1e-4)


def test_batchnorm_zero_gamma_gives_beta(rng):
    bn = BatchNorm2D(2, dtype=F64)
    bn.params["gamma"][:] = 0
    bn.params["beta"][:] = [0.5, -1.5]
    y = bn.forward(rng.standard_normal((2, 2, 3, 3)))
    np.testing.assert_array_equal(y[:, 0], 0.5)
    np.testing.assert_array_equal(y[:, 1], -1.5)


def test_batchnorm_eval_before_train_errors():
    bn = BatchNorm2D(2)
    bn.eval()
    with pytest.raises(UninitializedStatisticsError, match="uninitialized running statistics"):
        bn.forward(np.ones((1, 2, 2, 2), np.float32))


def test_batchnorm_running_statistics(rng):
    bn = BatchNorm2D(1, dtype=F64)
    x = rng.standard_normal((4, 1, 3, 3)) + 2
    bn.forward(x)
    np.testing.assert_allclose(bn.buffers["running_mean"], 0.1 * x.mean())
    np.testing.assert_allclose(bn.buffers["running_var"], 0.9 + 0.1 * x.var())
    bn.eval()
    y = bn.forward(x)
    rm, rv = bn.buffers["running_mean"], bn.buffers["running_var"]
    np.testing.assert_allclose(y, (x - rm) / np.sqrt(rv + 1e-5))


@pytest.mark.parametrize("seed", range(3))
def test_batchnorm_gradients(seed):
    r = np.random.default_rng(seed)
    bn = BatchNorm2D(3, dtype=F64)
    bn.params["gamma"][:] = r.uniform(0.5, 2, 3)
    rep = grad_check(bn, r.standard_normal((2, 3, 4, 4)), tolerance=1e-4, seed=seed)
    assert rep.passed, str(rep)


def test_batchnorm_frozen_uses_running_stats(rng):
    bn = BatchNorm2D(2, dtype=F64)
    bn.forward(rng.standard_normal((2, 2, 3, 3)))
    before = {k: v.copy() for k, v in bn.buffers.items()}
    bn.frozen = True
    bn.forward(rng.standard_normal((2, 2, 3, 3)))
    for k in before:
        assert np.array_equal(before[k], bn.buffers[k])
    assert grad_check(bn, rng.standard_normal((2, 2, 3, 3))).passed


# -- dropout -----------------------------------------------------------------

def test_dropout_eval_identity(rng):
    d = Dropout(0.7)
    d.eval()
    x = rng.standard_normal((3, 4)).astype(np.float32)
    assert d.forward(x) is x or np.array_equal(d.forward(x), x)


def test_dropout_zero_rate(rng):
    x = rng.standard_normal((3, 4))
    assert np.array_equal(Dropout(0.0).forward(x), x)


def test_dropout_survival_fraction():
    d = Dropout(0.5)
    d.rng = np.random.default_rng(7)
    y = d.forward(np.ones(10_000, dtype=np.float64))
    frac = np.mean(y != 0)
    assert abs(frac - 0.5) <= 0.02
    np.testing.assert_array_equal(np.unique(y), [0.0, 2.0])


def test_dropout_rate_validation():
    with pytest.raises(ValueError):
        Dropout(1.0)


def test_dropout_needs_generator():
    with pytest.raises(RuntimeError, match="random generator"):
        Dropout(0.5).forward(np.ones(3))


def test_dropout_gradient(rng):
    d = Dropout(0.3)
    d.rng = rng
    assert grad_check(d, rng.standard_normal((2, 5))).passed


# -- shunting inhibition -----------------------------------------------------

def _decay_for_softplus_one(c):
    return np.full(c, np.log(np.e - 1))


def test_shunting_without_inhibition():
    c = 3
    s = shunting_forward(np.ones((1, c, 4, 4)), np.zeros((c, c, 3, 3)), _decay_for_softplus_one(c))
    np.testing.assert_allclose(s, 1 / (1 + SHUNT_EPS), rtol=1e-12)
    assert s[0, 0, 0, 0] == pytest.approx(0.9999, abs=1e-4)


def test_shunting_zero_input(rng):
    s = shunting_forward(np.zeros((1, 2, 4, 4)), rng.standard_normal((2, 2, 3, 3)), np.zeros(2))
    assert np.all(s == 0)


def test_shunting_matches_formula(rng):
    u = np.abs(rng.standard_normal((1, 2, 5, 5)))
    w = rng.standard_normal((2, 2, 3, 3))
    a = rng.standard_normal(2)
    inhib = relu(direct_conv(u, w, np.zeros(2), 1))
    expected = u / (softplus(a)[None, :, None, None] + inhib + SHUNT_EPS)
    np.testing.assert_allclose(shunting_forward(u, w, a), expected, rtol=1e-10)


def test_shunting_channel_mismatch():
    layer = Shunting(3, dtype=F64)
    with pytest.raises(ShapeError, match="channels"):
        layer.forward(np.ones((1, 2, 4, 4)))


@pytest.mark.parametrize("seed", range(3))
def test_shunting_gradients(seed):
    r = np.random.default_rng(seed)
    layer = Shunting(4, rng=r, dtype=F64)
    layer.params["inhib_weight"][:] = 0.3 * r.standard_normal(layer.params["inhib_weight"].shape)
    layer.params["decay"][:] = r.standard_normal(4)
    rep = grad_check(layer, r.standard_normal((1, 4, 8, 8)), tolerance=1e-4, seed=seed)
    assert rep.passed, str(rep)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), scale=st.floats(0.01, 100))
def test_shunting_denominator_positive(seed, scale):
    r = np.random.default_rng(seed)
    layer = Shunting(2, rng=r, dtype=F64)
    layer.params["decay"][:] = r.standard_normal(2) * 20
    layer.params["inhib_weight"][:] = r.standard_normal((2, 2, 3, 3)) * scale
    out = layer.forward(r.standard_normal((1, 2, 4, 4)) * scale)
    _, _, denom = layer._cache
    assert np.all(denom >= SHUNT_EPS)
    assert np.all(np.isfinite(out))


# -- dense, relu, softmax ----------------------------------------------------

def test_dense_identity_and_zero_input(rng):
    layer = Dense(4, 4, dtype=F64)
    layer.params["weight"][:] = np.eye(4)
    x = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(layer.forward(x), x)
    layer.params["bias"][:] = [1, 2, 3, 4]
    np.testing.assert_array_equal(layer.forward(np.zeros((2, 4))), [[1, 2, 3, 4]] * 2)


def test_dense_dimension_mismatch():
    with pytest.raises(ShapeError):
        Dense(4, 2).forward(np.ones((1, 5), np.float32))


def test_dense_gradients(rng):
    rep = grad_check(Dense(10, 5, rng=rng, dtype=F64), rng.standard_normal((3, 10)))
    assert rep.passed and rep.max_error < 1e-6


def test_relu():
    layer = ReLU()
    np.testing.assert_array_equal(layer.forward(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])
    # subgradient at zero is zero
    np.testing.assert_array_equal(layer.backward(np.ones(3)), [0, 0, 1])


def test_softmax_examples():
    np.testing.assert_allclose(softmax(np.array([[0.0, 0.0]])), [[0.5, 0.5]])
    np.testing.assert_allclose(softmax(np.array([[1000.0, 1000.0]])), [[0.5, 0.5]])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), shift=st.floats(-500, 500), k=st.integers(1, 10))
def test_softmax_rows_and_shift_invariance(seed, shift, k):
    x = np.random.default_rng(seed).standard_normal((4, k)) * 10
    p = softmax(x)
    np.testing.assert_allclose(p.sum(axis=1), 1, atol=1e-6)
    np.testing.assert_allclose(softmax(x + shift), p, atol=1e-9)


def test_softmax_gradient(rng):
    assert grad_check(Softmax(), rng.standard_normal((3, 5))).passed


def test_layers_finite_outputs(rng):
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32) * 50
    layers = [Conv2D(3, 3, rng=rng), BatchNorm2D(3), ReLU(), Shunting(3, rng=rng), MaxPool2D()]
    for layer in layers:
        x = layer.forward(x)
        assert np.all(np.isfinite(x)), layer


def test_backward_before_forward():
    with pytest.raises(RuntimeError, match="before forward"):
        Dense(2, 2).backward(np.ones((1, 2)))
