import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from vflbackdoor import gradcheck, nn
from vflbackdoor.errors import ConfigError


def layer(w, b=None, act=nn.IDENTITY):
    w = np.asarray(w, dtype=float)
    return nn.DenseLayer(w, np.zeros(w.shape[1]) if b is None else b, act)


def test_forward_identity():
    out = nn.dense_forward(layer(np.eye(2)), [[1.0, 2.0]])
    np.testing.assert_array_equal(out, [[1.0, 2.0]])


def test_forward_relu_clips_negatives():
    out = nn.dense_forward(layer(np.eye(2), act=nn.RELU), [[-1.0, 2.0]])
    np.testing.assert_array_equal(out, [[0.0, 2.0]])


def test_forward_matches_triple_loop():
    rng = np.random.default_rng(3)
    w, b, x = rng.normal(size=(3, 4)), rng.normal(size=4), rng.normal(size=(2, 3))
    expected = np.zeros((2, 4))
    for i in range(2):
        for j in range(4):
            acc = b[j]
            for k in range(3):
                acc += x[i, k] * w[k, j]
            expected[i, j] = acc
    np.testing.assert_allclose(nn.dense_forward(layer(w, b), x), expected, rtol=1e-12)


def test_forward_shape_mismatch():
    with pytest.raises(ConfigError):
        nn.dense_forward(layer(np.eye(2)), np.ones((1, 3)))


def test_forward_deterministic():
    rng = np.random.default_rng(0)
    l = nn.init_dense(5, 4, rng)
    x = rng.normal(size=(7, 5))
    assert np.array_equal(nn.dense_forward(l, x), nn.dense_forward(l, x))


def test_backward_identity():
    _, gx = nn.dense_backward(layer(np.eye(2)), [[3.0, 4.0]], [[1.0, 0.0]])
    np.testing.assert_array_equal(gx, [[1.0, 0.0]])


def test_backward_dead_relu_unit():
    l = layer(np.eye(2), act=nn.RELU)
    grads, gx = nn.dense_backward(l, [[-1.0, 2.0]], [[5.0, 5.0]])
    assert gx[0, 0] == 0.0 and grads.bias[0] == 0.0
    assert gx[0, 1] == 5.0


def test_backward_shape_mismatch():
    with pytest.raises(ConfigError):
        nn.dense_backward(layer(np.eye(2)), np.ones((1, 2)), np.ones((2, 2)))


@pytest.mark.parametrize("seed", range(5))
def test_backward_finite_differences(seed):
    res = gradcheck.check_layer(np.random.default_rng(seed))
    assert res.max_rel_error < 1e-4, res.line()


def test_layer_rejects_inconsistent_shapes():
    with pytest.raises(ConfigError):
        nn.DenseLayer(np.ones((2, 3)), np.zeros(2))
    with pytest.raises(ConfigError):
        nn.DenseLayer(np.ones((2, 3)), np.zeros(3), "tanh")


def test_init_glorot_bounds():
    rng = np.random.default_rng(1)
    l = nn.init_dense(30, 20, rng)
    limit = np.sqrt(6 / 50)
    assert np.abs(l.weights).max() <= limit
    assert np.abs(l.weights).max() > 0.9 * limit
    assert not l.bias.any()


def test_softmax_ce_uniform_row():
    loss, g = nn.softmax_ce_grad(np.zeros((1, 5)), [0])
    np.testing.assert_allclose(g, [[-0.8, 0.2, 0.2, 0.2, 0.2]])
    assert loss == pytest.approx(np.log(5))


def test_softmax_ce_bad_label():
    with pytest.raises(ConfigError):
        nn.softmax_ce_grad(np.zeros((2, 3)), [0, 3])
    with pytest.raises(ConfigError):
        nn.softmax_ce_grad(np.zeros((2, 3)), [0, -1])


def test_softmax_stable_for_large_logits():
    loss, g = nn.softmax_ce_grad(np.array([[1000.0, 0.0, -1000.0]]), [0])
    assert np.isfinite(loss) and np.isfinite(g).all()


def test_softmax_ce_finite_differences():
    assert gradcheck.check_softmax_ce(np.random.default_rng(2)).passed


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (4, 6), elements=st.floats(-20, 20)),
       st.lists(st.integers(0, 5), min_size=4, max_size=4))
def test_softmax_ce_rows(logits, labels):
    _, g = nn.softmax_ce_grad(logits, labels)
    np.testing.assert_allclose(g.sum(axis=1), 0.0, atol=1e-12)
    for row, y in zip(g, labels):
        nonpos = np.flatnonzero(row <= 0)
        assert y in nonpos
        assert row[y] < 0 or np.isclose(row[y], 0.0)
        others = np.delete(row, y)
        assert (others >= 0).all()


def test_sgd_zero_grad_keeps_params():
    l = layer([[1.0, 2.0]], np.array([0.5, -0.5]))
    out = nn.sgd_step(l, nn.LayerGrads(np.zeros((1, 2)), np.zeros(2)), nn.SgdState(0.1))
    np.testing.assert_array_equal(out.weights, l.weights)
    np.testing.assert_array_equal(out.bias, l.bias)


def test_sgd_one_step():
    out = nn.sgd_step(layer([[1.0]]), nn.LayerGrads(np.array([[1.0]]), np.zeros(1)),
                      nn.SgdState(0.01))
    assert out.weights[0, 0] == pytest.approx(0.99)


def test_sgd_weight_decay():
    state = nn.SgdState(0.1, l2_lambda=0.5)
    out = nn.sgd_step(layer([[2.0]]), nn.LayerGrads(np.zeros((1, 1)), np.zeros(1)), state)
    assert out.weights[0, 0] == pytest.approx(2.0 * (1 - 0.1 * 0.5))


def test_sgd_state_validation():
    with pytest.raises(ConfigError):
        nn.SgdState(0.0)
    with pytest.raises(ConfigError):
        nn.SgdState(0.1, -1.0)


def test_sgd_shape_check():
    with pytest.raises(ConfigError):
        nn.sgd_step(layer([[1.0]]), nn.LayerGrads(np.zeros((2, 1)), np.zeros(1)), nn.SgdState())
