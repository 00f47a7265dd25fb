import numpy as np
import pytest

from foveassl import nn


def gradcheck(layer, in_shape, seed=0, h=1e-6):
    """Compare backward against central differences of sum(forward * probe)."""
    rng = np.random.default_rng(seed)
    params = layer.init(rng, in_shape[1:])
    x = rng.normal(size=in_shape)
    y, cache = layer.forward(params, x)
    probe = rng.normal(size=y.shape)
    dx, grads = layer.backward(params, cache, probe)
    f = lambda p, xx: float(np.sum(layer.forward(p, xx)[0] * probe))
    num = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        num[idx] = (f(params, xp) - f(params, xm)) / (2 * h)
    assert np.abs(num - dx).max() <= 1e-6 * max(1.0, np.abs(num).max())
    for name, g in grads.items():
        for idx in np.ndindex(g.shape):
            pp = {k: v.copy() for k, v in params.items()}
            pm = {k: v.copy() for k, v in params.items()}
            pp[name][idx] += h
            pm[name][idx] -= h
            n = (f(pp, x) - f(pm, x)) / (2 * h)
            assert abs(n - g[idx]) <= 1e-6 * max(1.0, abs(n))
    return y


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_gradient(stride):
    y = gradcheck(nn.Conv2d("c", 3, 3, stride), (2, 5, 5, 2))
    assert y.shape[1:] == nn.Conv2d("c", 3, 3, stride).out_shape((5, 5, 2))


def test_dense_gradient():
    gradcheck(nn.Dense("d", 4), (3, 6))


def test_relu_gradient():
    gradcheck(nn.ReLU("r"), (2, 3, 3, 2), seed=1)


def test_avgpool_gradient_with_odd_size():
    y = gradcheck(nn.AvgPool("p", 2), (2, 5, 5, 3))
    assert y.shape == (2, 2, 2, 3)


def test_global_pool_and_flatten_gradients():
    gradcheck(nn.GlobalAvgPool("g"), (2, 3, 4, 2))
    gradcheck(nn.Flatten("f"), (2, 3, 3, 2))


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(3)
    layer = nn.Conv2d("c", 2, 3, 1)
    params = layer.init(rng, (4, 4, 2))
    x = rng.normal(size=(1, 4, 4, 2))
    y, _ = layer.forward(params, x)
    w = params["c.weight"].reshape(2, 3, 3, 2)  # (C, kh, kw, out)
    xp = np.pad(x[0], ((1, 1), (1, 1), (0, 0)))
    for i in range(4):
        for j in range(4):
            want = np.einsum("hwc,chwo->o", xp[i:i + 3, j:j + 3], w) + params["c.bias"]
            assert np.allclose(y[0, i, j], want)


def test_sequential_roundtrip_and_shapes():
    layers = [nn.parse_layer(t, f"l{i}") for i, t in enumerate(["conv:4:3:2", "relu", "gap", "dense:3"])]
    net = nn.Sequential(layers, (8, 8, 3))
    assert net.out_shape == (3,)
    params = net.init(np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(2, 8, 8, 3))
    y, caches = net.forward(params, x)
    dx, grads = net.backward(params, caches, np.ones_like(y))
    assert dx.shape == x.shape and set(grads) == set(params)
    assert [nn.layer_token(l) for l in layers] == ["conv:4:3:2", "relu", "gap", "dense:3"]


def test_unknown_layer_rejected():
    with pytest.raises(ValueError):
        nn.parse_layer("lstm:3", "x")
