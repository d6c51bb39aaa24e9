import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import loop_conv
from patternprune.tensor import (
    Activation,
    ConvLayer,
    ConvModel,
    DenseLayer,
    ShapeError,
    col2im,
    conv2d_backward,
    conv2d_forward,
    dense_backward,
    dense_forward,
    frobenius_distance_sq,
    im2col,
    sgd_step,
    softmax_cross_entropy,
)


@given(
    n=st.integers(1, 2), c=st.integers(1, 3), o=st.integers(1, 3),
    h=st.integers(3, 7), w=st.integers(3, 7), k=st.sampled_from([1, 3]),
    stride=st.sampled_from([1, 2]), padding=st.sampled_from([0, 1]),
    relu=st.booleans(), seed=st.integers(0, 2**16),
)
def test_forward_matches_loop_oracle(n, c, o, h, w, k, stride, padding, relu, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((n, c, h, w)).astype(np.float32)
    wt = r.standard_normal((o, c, k, k)).astype(np.float32)
    b = r.standard_normal(o).astype(np.float32)
    act = Activation.RELU if relu else Activation.IDENTITY
    got = conv2d_forward(x, ConvLayer(wt, b, stride, padding, act))
    ref = loop_conv(x, wt, b, stride, padding, relu)
    assert got.dtype == np.float32
    np.testing.assert_allclose(got, ref, rtol=1e-5, atol=1e-5)


def test_output_extent_formula():
    layer = ConvLayer(np.zeros((2, 1, 3, 3), np.float32), np.zeros(2, np.float32), 2, 1)
    assert conv2d_forward(np.zeros((1, 1, 7, 8), np.float32), layer).shape == (1, 2, 4, 4)


@given(seed=st.integers(0, 2**16), stride=st.sampled_from([1, 2]),
       padding=st.sampled_from([0, 1]), k=st.sampled_from([1, 3]))
def test_col2im_is_adjoint_of_im2col(seed, stride, padding, k):
    r = np.random.default_rng(seed)
    x = r.standard_normal((2, 3, 6, 5))
    cols = im2col(x, k, k, stride, padding)
    y = r.standard_normal(cols.shape)
    oh = (6 + 2 * padding - k) // stride + 1
    ow = (5 + 2 * padding - k) // stride + 1
    lhs = np.sum(cols * y)
    rhs = np.sum(x * col2im(y, x.shape, k, k, stride, padding, (oh, ow)))
    assert lhs == pytest.approx(rhs, rel=1e-10)


def _fd_check(layer, x, seed):
    """Central differences of sum(out * probe) in float64."""
    probe = np.random.default_rng(seed).standard_normal(conv2d_forward(x, layer).shape)
    loss = lambda l, xx: float(np.sum(conv2d_forward(xx, l) * probe))
    gw, gb, gx = conv2d_backward(x, layer, probe)
    eps = 1e-6

    def numeric(arr, rebuild):
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            plus, minus = arr.copy(), arr.copy()
            plus[idx] += eps
            minus[idx] -= eps
            g[idx] = (rebuild(plus) - rebuild(minus)) / (2 * eps)
        return g

    nw = numeric(layer.weights, lambda w: loss(layer.replace(weights=w), x))
    nb = numeric(layer.bias, lambda b: loss(layer.replace(bias=b), x))
    nx = numeric(x, lambda xx: loss(layer, xx))
    return [(gw, nw), (gb, nb), (gx, nx)]


def _rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


def test_gradients_small_case():
    r = np.random.default_rng(5)
    x = r.standard_normal((2, 2, 5, 5))
    layer = ConvLayer(r.standard_normal((3, 2, 3, 3)), r.standard_normal(3), 2, 1,
                      Activation.IDENTITY)
    for analytic, numeric in _fd_check(layer, x, 0):
        assert _rel(analytic, numeric) < 1e-6


def test_backward_rejects_wrong_grad_shape():
    layer = ConvLayer(np.zeros((2, 1, 3, 3)), np.zeros(2))
    with pytest.raises(ShapeError):
        conv2d_backward(np.zeros((1, 1, 4, 4)), layer, np.zeros((1, 2, 3, 3)))


def test_relu_subgradient_is_zero_at_zero():
    layer = ConvLayer(np.zeros((1, 1, 1, 1)), np.zeros(1), activation=Activation.RELU)
    gw, gb, gx = conv2d_backward(np.ones((1, 1, 2, 2)), layer, np.ones((1, 1, 2, 2)))
    assert not gw.any() and not gb.any() and not gx.any()


def test_shape_errors():
    with pytest.raises(ShapeError):
        ConvLayer(np.zeros((1, 1, 5, 5)), np.zeros(1))
    with pytest.raises(ShapeError):
        ConvLayer(np.zeros((2, 1, 3, 3)), np.zeros(3))
    layer = ConvLayer(np.zeros((2, 3, 3, 3), np.float32), np.zeros(2, np.float32))
    with pytest.raises(ShapeError):
        conv2d_forward(np.zeros((1, 2, 5, 5), np.float32), layer)
    with pytest.raises(ShapeError):
        conv2d_forward(np.zeros((1, 3, 2, 2), np.float32), layer)
    with pytest.raises(ShapeError):
        ConvModel([layer, layer], (3, 8, 8))


def test_model_chaining_and_classifier_width():
    l1 = ConvLayer(np.zeros((4, 3, 3, 3), np.float32), np.zeros(4, np.float32), 2, 1)
    head = DenseLayer(np.zeros((2, 4 * 4 * 4), np.float32), np.zeros(2, np.float32))
    model = ConvModel([l1], (3, 8, 8), head)
    assert model.layer_shapes() == [(4, 4, 4)]
    assert model.logits(np.zeros((5, 3, 8, 8), np.float32)).shape == (5, 2)
    with pytest.raises(ShapeError):
        ConvModel([l1], (3, 8, 8), DenseLayer(np.zeros((2, 10), np.float32),
                                              np.zeros(2, np.float32)))


def test_preprocess_scaling_and_normalization():
    model = ConvModel([], (1, 1, 2))
    img = np.array([[[[0, 255]]]], np.uint8)
    np.testing.assert_array_equal(model.preprocess(img), [[[[0.0, 1.0]]]])
    model.norm_mean, model.norm_std = np.array([0.5]), np.array([0.5])
    np.testing.assert_allclose(model.preprocess(img), [[[[-1.0, 1.0]]]])


def test_dense_gradients():
    r = np.random.default_rng(2)
    x = r.standard_normal((4, 5))
    layer = DenseLayer(r.standard_normal((3, 5)), r.standard_normal(3))
    probe = r.standard_normal((4, 3))
    gw, gb, gx = dense_backward(x, layer, probe)
    np.testing.assert_allclose(gw, probe.T @ x)
    np.testing.assert_allclose(gb, probe.sum(0))
    np.testing.assert_allclose(gx, probe @ layer.weights)
    np.testing.assert_allclose(dense_forward(x, layer), x @ layer.weights.T + layer.bias)


def test_softmax_cross_entropy_gradient():
    r = np.random.default_rng(3)
    z = r.standard_normal((6, 4))
    y = r.integers(0, 4, 6)
    loss, g = softmax_cross_entropy(z, y)
    eps = 1e-6
    for idx in [(0, 0), (3, 2), (5, 3)]:
        zp, zm = z.copy(), z.copy()
        zp[idx] += eps
        zm[idx] -= eps
        fd = (softmax_cross_entropy(zp, y)[0] - softmax_cross_entropy(zm, y)[0]) / (2 * eps)
        assert g[idx] == pytest.approx(fd, abs=1e-7)
    assert loss == pytest.approx(-np.mean(z[np.arange(6), y]
                                          - np.log(np.exp(z).sum(1))))


def test_frobenius_distance():
    a = np.array([1.0, 2.0], np.float32)
    assert frobenius_distance_sq(a, np.zeros(2, np.float32)) == 5.0
    with pytest.raises(ShapeError):
        frobenius_distance_sq(a, np.zeros(3))


@given(seed=st.integers(0, 2**16), steps=st.integers(1, 5))
def test_masked_sgd_freezes_masked_positions(seed, steps):
    r = np.random.default_rng(seed)
    p = r.standard_normal((3, 4)).astype(np.float32)
    mask = (r.random((3, 4)) < 0.5).astype(np.float32)
    start = p.copy()
    for _ in range(steps):
        p = sgd_step(p, r.standard_normal((3, 4)).astype(np.float32), 0.1, mask)
    frozen = mask == 0
    assert p[frozen].tobytes() == start[frozen].tobytes()


def test_sgd_step_validation():
    p = np.zeros(3, np.float32)
    np.testing.assert_array_equal(sgd_step(p, np.ones(3, np.float32), 0.5), [-0.5] * 3)
    with pytest.raises(ValueError):
        sgd_step(p, np.ones(3, np.float32), 0.0)
    with pytest.raises(ShapeError):
        sgd_step(p, np.ones(4, np.float32), 0.1)
