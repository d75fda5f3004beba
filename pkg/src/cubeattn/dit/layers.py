"""NumPy layer primitives with hand-written backward passes."""
from __future__ import annotations

import math

import numpy as np

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


def layer_norm(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * gain + bias, (xhat, rstd, gain)


def layer_norm_backward(dy, cache):
    xhat, rstd, gain = cache
    dgain = np.sum(dy * xhat, axis=0)
    dbias = np.sum(dy, axis=0)
    dxhat = dy * gain
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True))
    return dx, dgain, dbias


def gelu(x):
    u = _GELU_C * (x + 0.044715 * (x * x * x))
    th = np.tanh(u)
    return 0.5 * x * (1.0 + th), th


def gelu_backward(dy, x, th):
    du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du)


def silu(x):
    sig = 1.0 / (1.0 + np.exp(-x))
    return x * sig, sig


def silu_backward(dy, x, sig):
    return dy * (sig + x * sig * (1.0 - sig))


def timestep_embedding(tau: float, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal features of ``1000 * tau`` (cos half, then sin half)."""
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half, dtype=np.float64) / half)
    args = 1000.0 * float(tau) * freqs
    return np.concatenate([np.cos(args), np.sin(args)])


def split_heads(x, heads):
    n, c = x.shape
    return np.ascontiguousarray(x.reshape(n, heads, c // heads).transpose(1, 0, 2))


def merge_heads(x):
    h, n, d = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * d)


class Adam:
    """Adam with bias correction; keeps per-parameter moment buffers."""

    def __init__(self, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict, frozen=frozenset()) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name in sorted(grads):
            if name in frozen:
                continue
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
