import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from semparse import nn
from semparse.nn import LstmLayerParams, Parameter

import oracles


@pytest.fixture(autouse=True)
def _high():
    with nn.precision("high"):
        yield


# -- affine


def test_affine_identity():
    out = nn.affine(np.array([3.0, -1.0]), np.eye(2), np.zeros(2))
    assert np.allclose(out, [3, -1])


def test_affine_zero_weights():
    out = nn.affine(np.array([5.0, 7.0]), np.zeros((2, 2)), np.array([1.0, 2.0]))
    assert np.allclose(out, [1, 2])


def test_affine_hand_product():
    out = nn.affine(np.ones(2), np.array([[1.0, 2], [3, 4]]), np.zeros(2))
    assert np.allclose(out, [3, 7])


def test_affine_shape_mismatch():
    with pytest.raises(nn.DimensionError, match="W has shape"):
        nn.affine(np.ones(3), np.ones((2, 2)), np.zeros(2))
    with pytest.raises(nn.DimensionError):
        nn.affine(np.ones(2), np.ones((2, 2)), np.zeros(3))


# -- softmax


def test_softmax_examples():
    assert np.allclose(nn.softmax(np.array([0.0, 0.0])), [0.5, 0.5])
    assert np.allclose(nn.softmax(np.array([1000.0, 1000, 1000])), [1 / 3] * 3)
    assert np.allclose(nn.softmax(np.array([1.0, 2.0])), [0.26894, 0.73106], atol=1e-5)


def test_softmax_empty():
    with pytest.raises(nn.DimensionError):
        nn.softmax(np.array([]))


@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)), st.randoms())
def test_softmax_sums_to_one_and_permutes(z, rnd):
    p = nn.softmax(z)
    assert abs(p.sum() - 1) < 1e-6
    perm = list(range(len(z)))
    rnd.shuffle(perm)
    assert np.allclose(nn.softmax(z[perm]), p[perm])


# -- cross entropy


def test_cross_entropy_examples():
    assert nn.cross_entropy(np.array([1.0, 0.0]), 0) == pytest.approx(0, abs=1e-9)
    assert nn.cross_entropy(np.full(4, 0.25), 2) == pytest.approx(math.log(4))
    assert nn.cross_entropy(np.array([0.1, 0.9]), 1) == pytest.approx(0.10536, abs=1e-5)


def test_cross_entropy_out_of_range():
    with pytest.raises(IndexError):
        nn.cross_entropy(np.array([0.5, 0.5]), 2)


# -- LSTM cell


def _zero_layer(m, n):
    return LstmLayerParams.zeros(m, n)


def test_lstm_zero_params_zero_state():
    h, c = nn.lstm_cell(np.zeros(3), np.zeros(2), np.zeros(2), _zero_layer(3, 2))
    assert np.all(h == 0) and np.all(c == 0)


def test_lstm_zero_params_carry():
    v = np.array([1.5, -2.0])
    h, c = nn.lstm_cell(np.zeros(3), np.zeros(2), v, _zero_layer(3, 2))
    assert np.allclose(c, 0.5 * v)
    assert np.allclose(h, 0.5 * np.tanh(0.5 * v))


def _scalar_lstm(x, h, c, Wx, Wh, b):
    """Independent loop implementation; gates ordered input, forget, output, candidate."""
    n = len(h)
    sig = lambda a: 1 / (1 + math.exp(-a))
    pre = []
    for r in range(4 * n):
        s = b[r]
        for j in range(len(x)):
            s += Wx[r][j] * x[j]
        for j in range(n):
            s += Wh[r][j] * h[j]
        pre.append(s)
    h_new, c_new = [], []
    for k in range(n):
        i, f, o = sig(pre[k]), sig(pre[n + k]), sig(pre[2 * n + k])
        g = math.tanh(pre[3 * n + k])
        ck = f * c[k] + i * g
        c_new.append(ck)
        h_new.append(o * math.tanh(ck))
    return h_new, c_new


def test_lstm_matches_scalar_loop():
    rng = np.random.default_rng(3)
    for _ in range(5):
        m, n = 4, 3
        layer = LstmLayerParams(
            Parameter(rng.uniform(-0.5, 0.5, (4 * n, m))),
            Parameter(rng.uniform(-0.5, 0.5, (4 * n, n))),
            Parameter(rng.uniform(-0.5, 0.5, 4 * n)),
        )
        x, h0, c0 = rng.normal(size=m), rng.normal(size=n), rng.normal(size=n)
        h, c = nn.lstm_cell(x, h0, c0, layer)
        hs, cs = _scalar_lstm(
            x.tolist(), h0.tolist(), c0.tolist(),
            layer.input_weights.value.tolist(), layer.recurrent_weights.value.tolist(), layer.biases.value.tolist(),
        )
        assert np.max(np.abs(h - hs)) < 1e-10
        assert np.max(np.abs(c - cs)) < 1e-10


def test_lstm_dimension_errors():
    layer = _zero_layer(3, 2)
    with pytest.raises(nn.DimensionError):
        nn.lstm_cell(np.zeros(4), np.zeros(2), np.zeros(2), layer)
    with pytest.raises(nn.DimensionError):
        nn.lstm_cell(np.zeros(3), np.zeros(3), np.zeros(2), layer)


def test_lstm_layer_mask_carries_state():
    rng = np.random.default_rng(0)
    layer = LstmLayerParams.zeros(2, 3)
    nn.init_uniform(layer.parameters(), 0.5, rng)
    X = rng.normal(size=(4, 2, 2))
    mask = np.array([[1, 1], [1, 0], [1, 0], [1, 0]], dtype=bool)
    H, C, _ = nn.lstm_layer_forward(X, np.zeros((2, 3)), np.zeros((2, 3)), layer, mask)
    assert np.array_equal(H[3, 1], H[0, 1])
    H1, _, _ = nn.lstm_layer_forward(X[:1, 1:], np.zeros((1, 3)), np.zeros((1, 3)), layer)
    assert np.allclose(H[0, 1], H1[0, 0])


@given(arrays(np.float64, 5, elements=st.floats(-10, 10)), arrays(np.float64, 3, elements=st.floats(-10, 10)))
@settings(max_examples=30)
def test_forward_is_finite(x, c):
    layer = LstmLayerParams.zeros(5, 3)
    nn.init_uniform(layer.parameters(), 0.08, nn.make_rng(0, "init"))
    h, c2 = nn.lstm_cell(x, np.tanh(c), c, layer)
    assert np.all(np.isfinite(h)) and np.all(np.isfinite(c2))


# -- dropout


def test_dropout_identity_cases():
    x = np.arange(6.0)
    rng = np.random.default_rng(0)
    assert np.array_equal(nn.dropout(x, 0.0, rng, True), x)
    assert np.array_equal(nn.dropout(x, 0.7, rng, False), x)


def test_dropout_preserves_mean():
    out = nn.dropout(np.ones(100_000), 0.5, np.random.default_rng(1), True)
    assert 0.98 <= out.mean() <= 1.02
    assert set(np.unique(out)) <= {0.0, 2.0}


def test_dropout_bad_rate():
    with pytest.raises(nn.ConfigurationError):
        nn.dropout(np.ones(3), 1.0, np.random.default_rng(0), True)


# -- clipping and RMSProp


def _param(vals):
    p = Parameter(np.zeros(len(vals)))
    p.grad[...] = vals
    return p


def test_clip_examples():
    p = _param([0.0, 2.0])
    assert nn.clip_gradients([p], 5) == pytest.approx(2)
    assert np.allclose(p.grad, [0, 2])
    p = _param([6.0, 8.0])
    assert nn.clip_gradients([p], 5) == pytest.approx(10)
    assert np.allclose(p.grad, [3, 4])
    p = _param([0.0, 0.0])
    assert nn.clip_gradients([p], 5) == 0
    assert nn.clip_gradients([], 5) == 0


@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-100, 100)), st.floats(0.1, 10))
def test_clip_bound_and_idempotent(g, thr):
    p = _param(g)
    nn.clip_gradients([p], thr)
    once = p.grad.copy()
    assert nn.global_grad_norm([p]) <= thr + 1e-9
    nn.clip_gradients([p], thr)
    assert np.allclose(p.grad, once, rtol=1e-12, atol=0)


def test_rmsprop_single_step():
    p = _param([4.0])
    nn.rmsprop_step([p], lr=0.01, smoothing=0.95, eps=1e-8)
    assert p.rms_cache[0] == pytest.approx(0.8)
    assert p.value[0] == pytest.approx(-0.01 * 4 / (math.sqrt(0.8) + 1e-8))
    assert p.value[0] == pytest.approx(-0.044721, abs=1e-6)
    assert p.grad[0] == 0


def test_rmsprop_zero_grad_noop():
    p = Parameter(np.array([1.0, -2.0]))
    nn.rmsprop_step([p], 0.01)
    assert np.array_equal(p.value, [1.0, -2.0])


def test_rmsprop_converges_to_sign_step():
    p = Parameter(np.zeros(2))
    prev = 0.0
    for _ in range(400):
        p.grad[...] = [3.0, -0.5]
        before = p.value.copy()
        nn.rmsprop_step([p], 0.01)
        prev = p.value - before
    assert np.allclose(prev, [-0.01, 0.01], rtol=1e-3)
    assert np.all(p.rms_cache >= 0)


# -- init and RNG


def test_init_bounds_mean_and_determinism():
    ps = [Parameter(np.zeros(100_000))]
    nn.init_uniform(ps, 0.08, nn.make_rng(7, "init"))
    v = ps[0].value
    assert v.min() >= -0.08 and v.max() <= 0.08
    assert abs(v.mean()) < 0.002
    qs = [Parameter(np.zeros(100_000))]
    nn.init_uniform(qs, 0.08, nn.make_rng(7, "init"))
    assert np.array_equal(v, qs[0].value)


def test_streams_are_independent():
    a = nn.make_rng(1, "init").random(4)
    b = nn.make_rng(1, "dropout").random(4)
    assert not np.array_equal(a, b)
    with pytest.raises(ValueError):
        nn.make_rng(1, "nope")


def test_precision_modes():
    assert nn.dtype() == np.float64
    with nn.precision("standard"):
        assert nn.dtype() == np.float32
    assert nn.get_precision() == "high"


# -- gradient checking


def test_fd_linear_loss():
    p = Parameter(np.random.default_rng(0).normal(size=20))

    def loss():
        p.grad += 1.0
        return float(p.value.sum())

    assert nn.finite_difference_check(loss, [p], probes=20) < 1e-10


def test_fd_affine():
    assert oracles.affine_check() < 1e-4


def test_fd_lstm_cell():
    assert oracles.lstm_cell_check() < 1e-4


def test_fd_lstm_layer_masked():
    rng = np.random.default_rng(5)
    layer = LstmLayerParams.zeros(2, 3)
    nn.init_uniform(layer.parameters(), 0.5, rng)
    X = Parameter(rng.normal(size=(4, 2, 2)))
    mask = np.array([[1, 1], [1, 1], [1, 0], [1, 0]], dtype=bool)
    w = rng.normal(size=(4, 2, 3))

    def loss():
        H, C, cache = nn.lstm_layer_forward(X.value, np.zeros((2, 3)), np.zeros((2, 3)), layer, mask)
        dX, _, _ = nn.lstm_layer_backward(w, 0.5 * np.ones_like(C), cache, layer)
        X.grad += dX
        return float((w * H).sum() + 0.5 * C.sum())

    assert nn.finite_difference_check(loss, layer.parameters() + [X]) < 1e-4


def test_relative_error_floor():
    assert nn.relative_error(0.0, 1e-11) == pytest.approx(1e-6)
    assert nn.relative_error(2.0, 1.0) == pytest.approx(0.5)
