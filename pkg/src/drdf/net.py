"""Neural network layers with explicit reverse-mode gradients in float64.

Everything here is functional-with-context: ``forward`` returns the output
plus an opaque cache, ``backward`` consumes the cache, accumulates into the
layer's parameter ``.grad`` buffers, and returns the input gradient.  That
keeps layers reusable several times per step (the image encoder runs once
per view) as long as backward calls mirror forward calls in reverse order.

Gradients are verified against central finite differences in the tests, so
each backward must be the exact adjoint of its forward, including the
bilinear feature sampler (implemented as a sparse matrix so the transpose
is literal) and the masked softmax (masked entries carry zero gradient).
"""

from __future__ import annotations

import numpy as np
from scipy import sparse
from scipy.special import erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)
_MASK_FILL = -1e30  # additive mask; large enough to zero out after softmax


class Param:
    """Named tensor with a matching gradient accumulator."""

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0.0


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    """y = x @ W + b with x of shape (..., d_in)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, name: str):
        self.W = Param(f"{name}.W", glorot(rng, d_in, d_out, (d_in, d_out)))
        self.b = Param(f"{name}.b", np.zeros(d_out))

    def params(self):
        return [self.W, self.b]

    def forward(self, x: np.ndarray):
        return x @ self.W.value + self.b.value, x

    def backward(self, dy: np.ndarray, ctx):
        x = ctx
        x2 = x.reshape(-1, x.shape[-1])
        dy2 = dy.reshape(-1, dy.shape[-1])
        self.W.grad += x2.T @ dy2
        self.b.grad += dy2.sum(axis=0)
        return dy @ self.W.value.T


def gelu(x: np.ndarray):
    """Exact (erf-based) GELU."""
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2)), x


def gelu_backward(dy: np.ndarray, ctx) -> np.ndarray:
    x = ctx
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return dy * (cdf + x * pdf)


class Conv2d:
    """3x3 convolution, padding 1, configurable stride, HWC layout.

    Forward lowers to a patch-matrix GEMM; backward scatters patch
    gradients back with nine strided slice-adds (exact adjoint).
    """

    KSIZE = 3

    def __init__(self, c_in: int, c_out: int, stride: int, rng: np.random.Generator, name: str):
        self.c_in = c_in
        self.c_out = c_out
        self.stride = stride
        fan_in = self.KSIZE * self.KSIZE * c_in
        self.W = Param(f"{name}.W", glorot(rng, fan_in, c_out, (fan_in, c_out)))
        self.b = Param(f"{name}.b", np.zeros(c_out))

    def params(self):
        return [self.W, self.b]

    def _out_hw(self, H: int, W: int):
        return (H - 1) // self.stride + 1, (W - 1) // self.stride + 1

    def forward(self, x: np.ndarray):
        H, W, C = x.shape
        if C != self.c_in:
            raise ValueError(f"expected {self.c_in} channels, got {C}")
        s = self.stride
        Ho, Wo = self._out_hw(H, W)
        pad = np.zeros((H + 2, W + 2, C))
        pad[1 : H + 1, 1 : W + 1] = x
        cols = np.empty((Ho, Wo, self.KSIZE, self.KSIZE, C))
        for ky in range(self.KSIZE):
            for kx in range(self.KSIZE):
                cols[:, :, ky, kx] = pad[ky : ky + (Ho - 1) * s + 1 : s, kx : kx + (Wo - 1) * s + 1 : s]
        cols2 = cols.reshape(Ho * Wo, -1)
        y = (cols2 @ self.W.value + self.b.value).reshape(Ho, Wo, self.c_out)
        return y, (cols2, (H, W))

    def backward(self, dy: np.ndarray, ctx):
        cols2, (H, W) = ctx
        s = self.stride
        Ho, Wo, _ = dy.shape
        dy2 = dy.reshape(Ho * Wo, self.c_out)
        self.W.grad += cols2.T @ dy2
        self.b.grad += dy2.sum(axis=0)
        dcols = (dy2 @ self.W.value.T).reshape(Ho, Wo, self.KSIZE, self.KSIZE, self.c_in)
        dpad = np.zeros((H + 2, W + 2, self.c_in))
        for ky in range(self.KSIZE):
            for kx in range(self.KSIZE):
                dpad[ky : ky + (Ho - 1) * s + 1 : s, kx : kx + (Wo - 1) * s + 1 : s] += dcols[:, :, ky, kx]
        return dpad[1 : H + 1, 1 : W + 1]


def bilinear_forward(grid: np.ndarray, gx: np.ndarray, gy: np.ndarray):
    """Border-clamped bilinear lookup of a (Hf, Wf, D) grid at fractional
    grid coordinates.  Built as a sparse interpolation matrix so backward
    is its exact transpose."""
    Hf, Wf, D = grid.shape
    gx = np.clip(np.asarray(gx, dtype=np.float64), 0.0, Wf - 1.0)
    gy = np.clip(np.asarray(gy, dtype=np.float64), 0.0, Hf - 1.0)
    x0 = np.minimum(np.floor(gx), Wf - 2).astype(np.int64) if Wf > 1 else np.zeros(len(gx), np.int64)
    y0 = np.minimum(np.floor(gy), Hf - 2).astype(np.int64) if Hf > 1 else np.zeros(len(gy), np.int64)
    fx = gx - x0
    fy = gy - y0
    k = len(gx)
    if Wf == 1:
        fx = np.zeros(k)
    if Hf == 1:
        fy = np.zeros(k)
    x1 = np.minimum(x0 + 1, Wf - 1)
    y1 = np.minimum(y0 + 1, Hf - 1)
    rows = np.repeat(np.arange(k, dtype=np.int64), 4)
    cells = np.stack([y0 * Wf + x0, y0 * Wf + x1, y1 * Wf + x0, y1 * Wf + x1], axis=1).ravel()
    w = np.stack(
        [(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx], axis=1
    ).ravel()
    S = sparse.csr_matrix((w, (rows, cells)), shape=(k, Hf * Wf))
    vals = S @ grid.reshape(Hf * Wf, D)
    return vals, (S, (Hf, Wf, D))


def bilinear_backward(dvals: np.ndarray, ctx) -> np.ndarray:
    S, (Hf, Wf, D) = ctx
    return (S.T @ dvals).reshape(Hf, Wf, D)


def masked_softmax(logits: np.ndarray, mask: np.ndarray):
    """Softmax over the last axis with False entries excluded (probability
    exactly 0).  Every row must have at least one True entry."""
    filled = np.where(mask, logits, _MASK_FILL)
    m = filled.max(axis=-1, keepdims=True)
    e = np.exp(filled - m) * mask
    z = e.sum(axis=-1, keepdims=True)
    p = e / z
    return p, p


def masked_softmax_backward(dp: np.ndarray, ctx) -> np.ndarray:
    p = ctx
    inner = (dp * p).sum(axis=-1, keepdims=True)
    return p * (dp - inner)


def positional_encoding(v: np.ndarray, octaves: int) -> np.ndarray:
    """[sin(2^k pi v), cos(2^k pi v)] for k = 0..octaves-1, concatenated
    over the last axis: layout [sin_0, cos_0, sin_1, cos_1, ...]."""
    parts = []
    for k in range(octaves):
        arg = (2.0**k) * np.pi * v
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    return np.concatenate(parts, axis=-1)
