"""Minimal numpy layers with hand-written backward passes.

Tensors are NHWC. Layers hold no state besides their shapes: ``forward``
returns ``(out, cache)`` and ``backward`` takes that cache back, returns the
input gradient and writes parameter gradients into ``grads`` under the same
keys as ``params``. Inference is therefore safe from concurrent threads.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def he_init(rng: np.random.Generator, fan_in: int, shape, dtype=np.float32) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def _im2col3(x: np.ndarray) -> np.ndarray:
    """Rows are output pixels, columns are ``(di, dj, c)`` taps of a 3x3 window."""
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (n, h, w, c, 3, 3)
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * h * w, 9 * c)


def _conv3(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Zero-padded 3x3 correlation of NHWC ``x`` with ``w`` shaped ``(9 * c_in, c_out)``.

    Single-channel inputs go through im2col. Wider inputs skip the im2col copy
    and accumulate the nine shifted taps, multiplying before shifting when the
    output is narrower than the input.
    """
    n, h, wd, c = x.shape
    c_out = w.shape[1]
    if c == 1:
        return (_im2col3(x) @ w).reshape(n, h, wd, c_out)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    taps = w.reshape(3, 3, c, c_out)
    if c_out < c:
        y = (xp.reshape(-1, c) @ taps.transpose(2, 0, 1, 3).reshape(c, 9 * c_out)).reshape(
            n, h + 2, wd + 2, 3, 3, c_out)
        out = y[:, :h, :wd, 0, 0].copy()
        for i in range(3):
            for j in range(3):
                if i or j:
                    out += y[:, i:i + h, j:j + wd, i, j]
        return out
    out = np.matmul(xp[:, :h, :wd], taps[0, 0])
    for i in range(3):
        for j in range(3):
            if i or j:
                out += np.matmul(xp[:, i:i + h, j:j + wd], taps[i, j])
    return out


class Conv3x3:
    """3x3 convolution, stride 1, zero padding 1."""

    def __init__(self, name: str, c_in: int, c_out: int, input_grad: bool = True):
        self.name = name
        self.c_in = c_in
        self.c_out = c_out
        self.input_grad = input_grad

    def init(self, rng, params, dtype=np.float32):
        params[self.name + ".w"] = he_init(rng, 9 * self.c_in, (9 * self.c_in, self.c_out), dtype)
        params[self.name + ".b"] = np.zeros(self.c_out, dtype=dtype)

    def forward(self, params, x):
        out = _conv3(x, params[self.name + ".w"])
        out += params[self.name + ".b"]
        return out, x

    def backward(self, params, cache, grads, dout):
        d = dout.reshape(-1, self.c_out)
        grads[self.name + ".w"] = _im2col3(cache).T @ d
        grads[self.name + ".b"] = d.sum(axis=0)
        if not self.input_grad:
            return None
        # input gradient = transposed convolution = correlation with the flipped kernel
        w = params[self.name + ".w"].reshape(3, 3, self.c_in, self.c_out)
        w_flip = w[::-1, ::-1].transpose(0, 1, 3, 2).reshape(9 * self.c_out, self.c_in)
        return _conv3(np.ascontiguousarray(dout), w_flip)


class Dense:
    def __init__(self, name: str, d_in: int, d_out: int, zero: bool = False):
        self.name = name
        self.d_in = d_in
        self.d_out = d_out
        self.zero = zero

    def init(self, rng, params, dtype=np.float32):
        if self.zero:
            params[self.name + ".w"] = np.zeros((self.d_in, self.d_out), dtype=dtype)
        else:
            params[self.name + ".w"] = (
                rng.standard_normal((self.d_in, self.d_out)) / np.sqrt(self.d_in)
            ).astype(dtype)
        params[self.name + ".b"] = np.zeros(self.d_out, dtype=dtype)

    def forward(self, params, x):
        return x @ params[self.name + ".w"] + params[self.name + ".b"], x

    def backward(self, params, cache, grads, dout):
        grads[self.name + ".w"] = cache.T @ dout
        grads[self.name + ".b"] = dout.sum(axis=0)
        return dout @ params[self.name + ".w"].T


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def avgpool2_forward(x):
    n, h, w, c = x.shape
    return x.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))


def avgpool2_backward(dout):
    return np.repeat(np.repeat(dout, 2, axis=1), 2, axis=2) * 0.25


def sinusoidal_embedding(t, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Standard transformer-style embedding of integer timesteps."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half, dtype=np.float64) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def bce_with_logits(logits: np.ndarray, y: np.ndarray):
    """Mean binary cross-entropy and its gradient w.r.t. the logits."""
    loss = np.mean(np.maximum(logits, 0) - logits * y + np.log1p(np.exp(-np.abs(logits))))
    grad = (sigmoid(logits) - y) / logits.shape[0]
    return float(loss), grad


def sigmoid(z):
    z = np.asarray(z)
    out = np.empty_like(z, dtype=np.result_type(z, np.float32))
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class Adam:
    def __init__(self, params: dict, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for k in sorted(params):
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            update = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            params[k] -= update.astype(params[k].dtype)
