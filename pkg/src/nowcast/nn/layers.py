"""Primitive layers with explicit forward/backward passes.

Everything is plain numpy plus the shared conv kernels from
``nowcast.backend``; gradients are hand-derived and validated against
central finite differences in the test suite.  Layers keep their
parameters as mutable numpy arrays so the optimizer can update in place.
"""

from __future__ import annotations

import numpy as np

from .. import backend


def _he_init(rng, shape, fan_in, dtype):
    # sampled in float64 first so float32/float64 builds share init values
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2D:
    """Strided 2D cross-correlation with bias."""

    def __init__(self, rng, in_ch, out_ch, kernel, stride=1, pad=0, dtype=np.float32):
        self.w = _he_init(rng, (out_ch, in_ch, kernel, kernel),
                          in_ch * kernel * kernel, dtype)
        self.b = np.zeros(out_ch, dtype=dtype)
        self.stride = stride
        self.pad = pad

    def params(self):
        return {"w": self.w, "b": self.b}

    def forward(self, x):
        p = self.pad
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        xp = np.ascontiguousarray(xp)
        y = backend.conv_gather(xp, self.w, self.stride)
        y += self.b[None, :, None, None]
        return y, (xp, x.shape)

    def backward(self, dy, cache):
        xp, xshape = cache
        dy = np.ascontiguousarray(dy)
        db = dy.sum(axis=(0, 2, 3))
        kh, kw = self.w.shape[2], self.w.shape[3]
        dw = backend.conv_wgrad(dy, xp, self.stride, kh, kw)
        dxp = backend.conv_scatter(dy, self.w, self.stride, xp.shape[2], xp.shape[3])
        p = self.pad
        dx = dxp[:, :, p:p + xshape[2], p:p + xshape[3]]
        return dx, {"w": dw, "b": db}


class ConvTranspose2D:
    """Transposed convolution (the conv adjoint), used for 2x upsampling."""

    def __init__(self, rng, in_ch, out_ch, kernel, stride=2, pad=1, dtype=np.float32):
        self.w = _he_init(rng, (in_ch, out_ch, kernel, kernel),
                          in_ch * kernel * kernel, dtype)
        self.b = np.zeros(out_ch, dtype=dtype)
        self.kernel = kernel
        self.stride = stride
        self.pad = pad

    def params(self):
        return {"w": self.w, "b": self.b}

    def out_size(self, h):
        return (h - 1) * self.stride - 2 * self.pad + self.kernel

    def forward(self, x):
        x = np.ascontiguousarray(x)
        B, C, H, W = x.shape
        hf = (H - 1) * self.stride + self.kernel
        wf = (W - 1) * self.stride + self.kernel
        y_full = backend.conv_scatter(x, self.w, self.stride, hf, wf)
        p = self.pad
        y = y_full[:, :, p:hf - p, p:wf - p].copy()
        y += self.b[None, :, None, None]
        return y, (x, (hf, wf))

    def backward(self, dy, cache):
        x, (hf, wf) = cache
        p = self.pad
        dyp = np.pad(dy, ((0, 0), (0, 0), (p, p), (p, p))) if p else dy
        dyp = np.ascontiguousarray(dyp)
        db = dy.sum(axis=(0, 2, 3))
        dw = backend.conv_wgrad(x, dyp, self.stride, self.kernel, self.kernel)
        dx = backend.conv_gather(dyp, self.w, self.stride)
        return dx, {"w": dw, "b": db}


class Dense:
    def __init__(self, rng, in_features, out_features, dtype=np.float32):
        self.w = _he_init(rng, (in_features, out_features), in_features, dtype)
        self.b = np.zeros(out_features, dtype=dtype)

    def params(self):
        return {"w": self.w, "b": self.b}

    def forward(self, x):
        return x @ self.w + self.b, x

    def backward(self, dy, cache):
        x = cache
        dw = x.T @ dy
        db = dy.sum(axis=0)
        dx = dy @ self.w.T
        return dx, {"w": dw, "b": db}


# --- activations (functional, cache-returning) ---

def leaky_relu(x, slope):
    return np.where(x >= 0, x, slope * x), x


def leaky_relu_backward(dy, cache, slope):
    x = cache
    return dy * np.where(x >= 0, 1.0, slope).astype(dy.dtype)


def relu(x):
    return np.maximum(x, 0), x


def relu_backward(dy, cache):
    x = cache
    return dy * (x >= 0)


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out, out


def sigmoid_backward(dy, cache):
    y = cache
    return dy * y * (1.0 - y)


def tanh(x):
    y = np.tanh(x)
    return y, y


def tanh_backward(dy, cache):
    y = cache
    return dy * (1.0 - y * y)


def avg_pool(x, k):
    """k x k mean pooling; trailing rows/cols that do not fill a cell are dropped."""
    if k == 1:
        return x, x.shape
    B, C, H, W = x.shape
    h, w = H // k, W // k
    xc = x[:, :, :h * k, :w * k]
    y = xc.reshape(B, C, h, k, w, k).mean(axis=(3, 5))
    return y, x.shape


def avg_pool_backward(dy, xshape, k):
    if k == 1:
        return dy
    B, C, H, W = xshape
    h, w = H // k, W // k
    dx = np.zeros(xshape, dtype=dy.dtype)
    spread = np.repeat(np.repeat(dy, k, axis=2), k, axis=3) / (k * k)
    dx[:, :, :h * k, :w * k] = spread
    return dx
