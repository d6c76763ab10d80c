"""A closed catalog of layers with hand-written backward passes, and Adam.

Parameters live in one flat ``dict[str, ndarray]`` owned by the caller;
layers only remember their parameter names and the activations they need
for the backward pass. Feature dimensions are always last.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import NonFiniteError


class Layer:
    def init(self, rng: np.random.Generator) -> dict:
        return {}

    def forward(self, params: dict, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, params: dict, grads: dict, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Affine(Layer):
    def __init__(self, name: str, n_in: int, n_out: int):
        self.W, self.b = f"{name}.W", f"{name}.b"
        self.n_in, self.n_out = n_in, n_out

    def init(self, rng):
        bound = 1.0 / math.sqrt(self.n_in)
        return {self.W: rng.uniform(-bound, bound, (self.n_in, self.n_out)),
                self.b: np.zeros(self.n_out)}

    def forward(self, params, x, train=False):
        self.x = x
        return x @ params[self.W] + params[self.b]

    def backward(self, params, grads, dout):
        x2 = self.x.reshape(-1, self.n_in)
        d2 = dout.reshape(-1, self.n_out)
        grads[self.W] = x2.T @ d2
        grads[self.b] = d2.sum(axis=0)
        return dout @ params[self.W].T


class ReLU(Layer):
    def forward(self, params, x, train=False):
        self.mask = x > 0
        return x * self.mask

    def backward(self, params, grads, dout):
        return dout * self.mask


class Conv1d(Layer):
    """Strided 1-D convolution on (batch, time, channels), no padding."""

    def __init__(self, name: str, c_in: int, c_out: int, kernel: int, stride: int):
        self.W, self.b = f"{name}.W", f"{name}.b"
        self.c_in, self.c_out, self.kernel, self.stride = c_in, c_out, kernel, stride

    def init(self, rng):
        fan_in = self.kernel * self.c_in
        bound = 1.0 / math.sqrt(fan_in)
        return {self.W: rng.uniform(-bound, bound, (fan_in, self.c_out)),
                self.b: np.zeros(self.c_out)}

    def forward(self, params, x, train=False):
        self.in_shape = x.shape
        k, s = self.kernel, self.stride
        if s == k and x.shape[1] % k == 0:
            cols = x.reshape(x.shape[0], x.shape[1] // k, k * self.c_in)
        else:
            win = np.lib.stride_tricks.sliding_window_view(x, k, axis=1)[:, ::s]
            # win: (B, T', C, k) -> (B, T', k, C)
            cols = np.ascontiguousarray(win.transpose(0, 1, 3, 2)).reshape(
                win.shape[0], win.shape[1], k * self.c_in)
        self.cols = cols
        return cols @ params[self.W] + params[self.b]

    def backward(self, params, grads, dout):
        c2 = self.cols.reshape(-1, self.kernel * self.c_in)
        d2 = dout.reshape(-1, self.c_out)
        grads[self.W] = c2.T @ d2
        grads[self.b] = d2.sum(axis=0)
        dcols = (dout @ params[self.W].T).reshape(
            dout.shape[0], dout.shape[1], self.kernel, self.c_in)
        k, s = self.kernel, self.stride
        B, T, C = self.in_shape
        if s == k and T % k == 0:
            return dcols.reshape(B, T, C)
        dx = np.zeros(self.in_shape)
        t_out = dout.shape[1]
        for j in range(k):
            dx[:, j:j + s * (t_out - 1) + 1:s] += dcols[:, :, j]
        return dx


class LayerNorm(Layer):
    def __init__(self, name: str, dim: int, eps: float = 1e-5):
        self.g, self.b = f"{name}.g", f"{name}.b"
        self.dim, self.eps = dim, eps

    def init(self, rng):
        return {self.g: np.ones(self.dim), self.b: np.zeros(self.dim)}

    def forward(self, params, x, train=False):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        self.inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + self.eps)
        self.xhat = xc * self.inv
        return self.xhat * params[self.g] + params[self.b]

    def backward(self, params, grads, dout):
        grads[self.g] = (dout * self.xhat).reshape(-1, self.dim).sum(axis=0)
        grads[self.b] = dout.reshape(-1, self.dim).sum(axis=0)
        dxhat = dout * params[self.g]
        return self.inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                           - self.xhat * (dxhat * self.xhat).mean(axis=-1, keepdims=True))


class MeanPool(Layer):
    """Average over the time axis: (B, T, C) -> (B, C)."""

    def forward(self, params, x, train=False):
        self.steps = x.shape[1]
        return x.mean(axis=1)

    def backward(self, params, grads, dout):
        return np.repeat(dout[:, None, :] / self.steps, self.steps, axis=1)


class Dropout(Layer):
    def __init__(self, rate: float, rng: np.random.Generator):
        self.rate, self.rng = rate, rng

    def forward(self, params, x, train=False):
        if not train or self.rate == 0:
            self.mask = None
            return x
        self.mask = (self.rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * self.mask

    def backward(self, params, grads, dout):
        return dout if self.mask is None else dout * self.mask


class Sequential:
    def __init__(self, layers):
        self.layers = list(layers)

    def init(self, rng) -> dict:
        params = {}
        for layer in self.layers:
            params.update(layer.init(rng))
        return params

    def forward(self, params, x, train=False, check=True):
        for idx, layer in enumerate(self.layers):
            x = layer.forward(params, x, train)
            if check and not np.all(np.isfinite(x)):
                raise NonFiniteError(
                    f"non-finite activations after layer {idx} ({type(layer).__name__})")
        return x

    def backward(self, params, grads, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(params, grads, dout)
        return dout


class Adam:
    """Adam with bias-corrected moments; optional L2 term folded into the gradient."""

    def __init__(self, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m, self.v = {}, {}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name in sorted(grads):
            g = grads[name]
            if self.weight_decay:
                g = g + self.weight_decay * params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(params[name])
                self.v[name] = np.zeros_like(params[name])
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            params[name] = params[name] - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
