"""Small NHWC layers with hand-written reverse-mode gradients.

Each layer is a stateless description. ``init`` creates its parameters,
``forward`` returns the output and a cache, and ``backward`` turns an
upstream gradient into an input gradient plus parameter gradients.
Parameters live in a flat ``dict[str, ndarray]`` keyed ``"<layer>.<param>"``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Params = dict[str, np.ndarray]


def _uniform(rng, fan_in, shape):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class Conv2d:
    name: str
    out_channels: int
    kernel: int = 3
    stride: int = 1

    kind = "conv"

    def out_shape(self, in_shape):
        h, w, _ = in_shape
        p = self.kernel // 2
        ho = (h + 2 * p - self.kernel) // self.stride + 1
        wo = (w + 2 * p - self.kernel) // self.stride + 1
        return ho, wo, self.out_channels

    def init(self, rng, in_shape) -> Params:
        c = in_shape[2]
        fan_in = c * self.kernel * self.kernel
        return {
            f"{self.name}.weight": _uniform(rng, fan_in, (fan_in, self.out_channels)),
            f"{self.name}.bias": np.zeros(self.out_channels),
        }

    def _cols(self, x):
        p = self.kernel // 2
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        win = sliding_window_view(xp, (self.kernel, self.kernel), axis=(1, 2))
        win = win[:, ::self.stride, ::self.stride]
        # (B, Ho, Wo, C, kh, kw) -> rows of length C*kh*kw
        b, ho, wo = win.shape[:3]
        return win.reshape(b * ho * wo, -1), xp.shape, (b, ho, wo)

    def forward(self, params, x):
        cols, xp_shape, (b, ho, wo) = self._cols(x)
        w = params[f"{self.name}.weight"]
        y = cols @ w + params[f"{self.name}.bias"]
        return y.reshape(b, ho, wo, -1), (cols, xp_shape, x.shape)

    def backward(self, params, cache, dy):
        cols, xp_shape, x_shape = cache
        w = params[f"{self.name}.weight"]
        dyf = dy.reshape(-1, dy.shape[-1])
        grads = {f"{self.name}.weight": cols.T @ dyf,
                 f"{self.name}.bias": dyf.sum(axis=0)}
        b, ho, wo, _ = dy.shape
        c = x_shape[3]
        k, s = self.kernel, self.stride
        dcols = (dyf @ w.T).reshape(b, ho, wo, c, k, k)
        dxp = np.zeros(xp_shape)
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + s * ho:s, j:j + s * wo:s, :] += dcols[..., i, j]
        p = k // 2
        dx = dxp[:, p:p + x_shape[1], p:p + x_shape[2], :]
        return dx, grads


@dataclass
class ReLU:
    name: str
    kind = "relu"

    def out_shape(self, in_shape):
        return in_shape

    def init(self, rng, in_shape) -> Params:
        return {}

    def forward(self, params, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, params, mask, dy):
        return dy * mask, {}


@dataclass
class AvgPool:
    name: str
    size: int = 2
    kind = "avgpool"

    def out_shape(self, in_shape):
        h, w, c = in_shape
        return h // self.size, w // self.size, c

    def init(self, rng, in_shape) -> Params:
        return {}

    def forward(self, params, x):
        b, h, w, c = x.shape
        s = self.size
        ho, wo = h // s, w // s
        xr = x[:, :ho * s, :wo * s].reshape(b, ho, s, wo, s, c)
        return xr.mean(axis=(2, 4)), x.shape

    def backward(self, params, x_shape, dy):
        s = self.size
        b, ho, wo, c = dy.shape
        dx = np.zeros(x_shape)
        g = np.repeat(np.repeat(dy, s, axis=1), s, axis=2) / (s * s)
        dx[:, :ho * s, :wo * s] = g
        return dx, {}


@dataclass
class GlobalAvgPool:
    name: str
    kind = "gap"

    def out_shape(self, in_shape):
        return (in_shape[2],)

    def init(self, rng, in_shape) -> Params:
        return {}

    def forward(self, params, x):
        return x.mean(axis=(1, 2)), x.shape

    def backward(self, params, x_shape, dy):
        b, h, w, c = x_shape
        return np.broadcast_to(dy[:, None, None, :] / (h * w), x_shape).copy(), {}


@dataclass
class Flatten:
    name: str
    kind = "flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def init(self, rng, in_shape) -> Params:
        return {}

    def forward(self, params, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, params, x_shape, dy):
        return dy.reshape(x_shape), {}


@dataclass
class Dense:
    name: str
    out_features: int
    kind = "dense"

    def out_shape(self, in_shape):
        return (self.out_features,)

    def init(self, rng, in_shape) -> Params:
        (fan_in,) = in_shape
        return {
            f"{self.name}.weight": _uniform(rng, fan_in, (fan_in, self.out_features)),
            f"{self.name}.bias": np.zeros(self.out_features),
        }

    def forward(self, params, x):
        return x @ params[f"{self.name}.weight"] + params[f"{self.name}.bias"], x

    def backward(self, params, x, dy):
        w = params[f"{self.name}.weight"]
        return dy @ w.T, {f"{self.name}.weight": x.T @ dy,
                          f"{self.name}.bias": dy.sum(axis=0)}


LAYER_TYPES = {cls.kind: cls for cls in (Conv2d, ReLU, AvgPool, GlobalAvgPool, Flatten, Dense)}


def parse_layer(token: str, name: str):
    """Build a layer from a descriptor token such as ``conv:16``, ``conv:32:3:2`` or ``relu``."""
    kind, *args = token.split(":")
    if kind not in LAYER_TYPES:
        raise ValueError(f"unknown layer type {kind!r}")
    return LAYER_TYPES[kind](name, *(int(a) for a in args))


def layer_token(layer) -> str:
    if isinstance(layer, Conv2d):
        return f"conv:{layer.out_channels}:{layer.kernel}:{layer.stride}"
    if isinstance(layer, AvgPool):
        return f"avgpool:{layer.size}"
    if isinstance(layer, Dense):
        return f"dense:{layer.out_features}"
    return layer.kind


class Sequential:
    def __init__(self, layers, in_shape):
        self.layers = list(layers)
        self.in_shape = tuple(in_shape)
        shapes = [self.in_shape]
        for layer in self.layers:
            shapes.append(tuple(layer.out_shape(shapes[-1])))
        self.shapes = shapes

    @property
    def out_shape(self):
        return self.shapes[-1]

    def init(self, rng) -> Params:
        params: Params = {}
        for layer, shape in zip(self.layers, self.shapes):
            params.update(layer.init(rng, shape))
        return params

    def forward(self, params, x, keep: bool = True):
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(params, x)
            if keep:
                caches.append(cache)
        return x, caches

    def backward(self, params, caches, dy):
        grads: Params = {}
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            dy, g = layer.backward(params, cache, dy)
            grads.update(g)
        return dy, grads
