"""Finite-difference checks of every hand-written backward pass."""

import numpy as np
import pytest

from dnfeat import nn
from dnfeat.detector import _LinearHead, _ResNet
from dnfeat.predictor import TinyDenoiser


def numeric_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        up = f()
        x[i] = old - eps
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * eps)
    return g


def to64(params):
    return {k: v.astype(np.float64) for k, v in params.items()}


# (1, 3): im2col; (2, 3): shifted taps; (3, 2): multiply then shift
@pytest.mark.parametrize("c_in,c_out", [(1, 3), (2, 3), (3, 2)])
def test_conv3x3_gradients(c_in, c_out):
    rng = np.random.default_rng(0)
    conv = nn.Conv3x3("c", c_in, c_out)
    params = {}
    conv.init(rng, params, dtype=np.float64)
    params["c.b"] = rng.standard_normal(c_out)
    x = rng.standard_normal((2, 4, 5, c_in))
    w_out = rng.standard_normal((2, 4, 5, c_out))

    def loss():
        return float(np.sum(conv.forward(params, x)[0] * w_out))

    out, cache = conv.forward(params, x)
    grads = {}
    dx = conv.backward(params, cache, grads, w_out)
    np.testing.assert_allclose(dx, numeric_grad(loss, x), atol=1e-7)
    np.testing.assert_allclose(grads["c.w"], numeric_grad(loss, params["c.w"]), atol=1e-7)
    np.testing.assert_allclose(grads["c.b"], numeric_grad(loss, params["c.b"]), atol=1e-7)


@pytest.mark.parametrize("c_in,c_out", [(1, 2), (2, 1), (2, 3), (4, 4)])
def test_conv3x3_matches_direct_correlation(c_in, c_out):
    rng = np.random.default_rng(1)
    conv = nn.Conv3x3("c", c_in, c_out)
    params = {}
    conv.init(rng, params, dtype=np.float64)
    x = rng.standard_normal((2, 5, 6, c_in))
    out, _ = conv.forward(params, x)
    w = params["c.w"].reshape(3, 3, c_in, c_out)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    direct = np.array([[[np.einsum("abc,abcd->d", xp[n, i:i + 3, j:j + 3], w) for j in range(6)]
                        for i in range(5)] for n in range(2)])
    np.testing.assert_allclose(out, direct, atol=1e-12)


def test_dense_gradients():
    rng = np.random.default_rng(2)
    layer = nn.Dense("d", 4, 3)
    params = {}
    layer.init(rng, params, dtype=np.float64)
    x = rng.standard_normal((5, 4))
    w_out = rng.standard_normal((5, 3))

    def loss():
        return float(np.sum(layer.forward(params, x)[0] * w_out))

    _, cache = layer.forward(params, x)
    grads = {}
    dx = layer.backward(params, cache, grads, w_out)
    np.testing.assert_allclose(dx, numeric_grad(loss, x), atol=1e-7)
    np.testing.assert_allclose(grads["d.w"], numeric_grad(loss, params["d.w"]), atol=1e-7)


def test_avgpool_is_adjoint():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 4, 6, 3))
    d = rng.standard_normal((2, 2, 3, 3))
    assert np.sum(nn.avgpool2_forward(x) * d) == pytest.approx(np.sum(x * nn.avgpool2_backward(d)), abs=1e-12)


def test_bce_gradient_and_stability():
    rng = np.random.default_rng(4)
    z = rng.standard_normal(7) * 3
    y = (rng.random(7) < 0.5).astype(float)
    _, g = nn.bce_with_logits(z, y)
    np.testing.assert_allclose(g, numeric_grad(lambda: nn.bce_with_logits(z, y)[0], z), atol=1e-8)
    loss, _ = nn.bce_with_logits(np.array([800.0, -800.0]), np.array([1.0, 0.0]))
    assert loss == pytest.approx(0.0, abs=1e-12)


def test_sigmoid_saturates_without_warnings():
    with np.errstate(over="raise", invalid="raise", divide="raise"):
        s = nn.sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    np.testing.assert_array_equal(s, [0.0, 0.5, 1.0])


def test_adam_first_step_moves_by_learning_rate():
    params = {"w": np.array([1.0, -2.0, 3.0])}
    opt = nn.Adam(params, lr=0.1)
    opt.step(params, {"w": np.array([0.5, -4.0, 0.0])})
    # bias-corrected first step is lr * sign(g) (zero gradient leaves the entry alone)
    np.testing.assert_allclose(params["w"], [0.9, -1.9, 3.0], atol=1e-7)


@pytest.mark.parametrize("net", [_ResNet(4, 3), _ResNet(3, 2), _ResNet(4, 2, stem_pool=True),
                                 _ResNet(3, 3, stem_pool=True), _LinearHead(8, 8)])
def test_detector_network_gradients(net):
    rng = np.random.default_rng(5)
    params = {}
    net.init(rng, params)
    params = to64(params)
    for k in params:  # leave no parameter exactly at zero so every path is exercised
        params[k] = params[k] + 0.05 * rng.standard_normal(params[k].shape)
    x = rng.standard_normal((3, 8, 8))
    w_out = rng.standard_normal(3)

    def loss():
        return float(np.sum(net.forward(params, x)[0] * w_out))

    logits, cache = net.forward(params, x)
    grads = net.backward(params, cache, w_out)
    assert sorted(grads) == sorted(params)
    for k in sorted(params):
        np.testing.assert_allclose(grads[k], numeric_grad(loss, params[k]), atol=1e-6, err_msg=k)


def test_denoiser_network_gradients():
    model = TinyDenoiser(width=3, embed_dim=4, seed=1)
    model._layers_ = model._layers()
    params = to64(model._init_params())
    rng = np.random.default_rng(6)
    inp = rng.standard_normal((2, 5, 5, 1))
    t = np.array([3, 700])
    w_out = rng.standard_normal((2, 5, 5, 1))

    def loss():
        return float(np.sum(model._net_forward(params, inp, t)[0] * w_out))

    _, cache = model._net_forward(params, inp, t)
    grads = model._net_backward(params, cache, w_out)
    for k in sorted(params):
        np.testing.assert_allclose(grads[k], numeric_grad(loss, params[k]), atol=1e-6, err_msg=k)


def test_sinusoidal_embedding_shape_and_range():
    e = nn.sinusoidal_embedding(np.arange(1, 11), 16)
    assert e.shape == (10, 16)
    assert np.all(np.abs(e) <= 1)
    np.testing.assert_allclose(e[:, :8] ** 2 + e[:, 8:] ** 2, 1.0, atol=1e-12)
