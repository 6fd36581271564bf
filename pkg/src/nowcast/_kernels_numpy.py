"""Pure-numpy reference implementations of the hot kernels.

These are the fallback path when numba is unavailable (or disabled via
``NOWCAST_BACKEND=numpy``).  Convolutions are expressed as one BLAS
tensordot per kernel tap, which keeps memory flat and is reasonably fast
without JIT compilation.

Conventions shared with the numba twin:
  * ``xp`` is the already-padded input, layout [B, C, Hp, Wp].
  * conv weights are [O, C, kh, kw]; transposed-conv callers pass the
    same kernels with their own axis meaning (see nn.layers).
  * all kernels are pure and allocate their outputs.
"""

import numpy as np


def conv_gather(xp, w, stride):
    """Strided cross-correlation: y[b,o,m,n] = sum w[o,c,u,v] * xp[b,c,m*s+u,n*s+v]."""
    B, C, Hp, Wp = xp.shape
    O, _, kh, kw = w.shape
    ho = (Hp - kh) // stride + 1
    wo = (Wp - kw) // stride + 1
    y = np.zeros((B, O, ho, wo), dtype=xp.dtype)
    for u in range(kh):
        for v in range(kw):
            xs = xp[:, :, u:u + (ho - 1) * stride + 1:stride,
                    v:v + (wo - 1) * stride + 1:stride]
            # [B,ho,wo,O] <- [B,C,ho,wo] x [O,C]
            y += np.tensordot(xs, w[:, :, u, v], axes=([1], [1])).transpose(0, 3, 1, 2)
    return y


def conv_scatter(dy, w, stride, hz, wz):
    """Adjoint of conv_gather: z[b,c,m*s+u,n*s+v] += dy[b,o,m,n] * w[o,c,u,v].

    ``hz``/``wz`` give the full (padded) input size; trailing rows or
    columns no kernel tap reaches stay zero.
    """
    B, O, ho, wo = dy.shape
    _, C, kh, kw = w.shape
    z = np.zeros((B, C, hz, wz), dtype=dy.dtype)
    for u in range(kh):
        for v in range(kw):
            t = np.tensordot(dy, w[:, :, u, v], axes=([1], [0]))  # [B,ho,wo,C]
            z[:, :, u:u + (ho - 1) * stride + 1:stride,
              v:v + (wo - 1) * stride + 1:stride] += t.transpose(0, 3, 1, 2)
    return z


def conv_wgrad(dy, xp, stride, kh, kw):
    """Weight gradient: dw[o,c,u,v] = sum_b,m,n dy[b,o,m,n] * xp[b,c,m*s+u,n*s+v]."""
    B, O, ho, wo = dy.shape
    _, C, _, _ = xp.shape
    dw = np.zeros((O, C, kh, kw), dtype=dy.dtype)
    for u in range(kh):
        for v in range(kw):
            xs = xp[:, :, u:u + (ho - 1) * stride + 1:stride,
                    v:v + (wo - 1) * stride + 1:stride]
            dw[:, :, u, v] = np.tensordot(dy, xs, axes=([0, 2, 3], [0, 2, 3]))
    return dw


def warp_bilinear(field, x_src, y_src):
    """Sample ``field`` at fractional source coordinates, zero outside.

    Backward semi-Lagrangian step: out[i,j] = field(y_src[i,j], x_src[i,j]).
    Exact (no interpolation error) when the coordinates are integers.
    """
    H, W = field.shape
    x0 = np.floor(x_src)
    y0 = np.floor(y_src)
    wx = x_src - x0
    wy = y_src - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)

    out = np.zeros_like(field)
    for dx, dy_, wgt in (
        (0, 0, (1 - wx) * (1 - wy)),
        (1, 0, wx * (1 - wy)),
        (0, 1, (1 - wx) * wy),
        (1, 1, wx * wy),
    ):
        xi = x0 + dx
        yi = y0 + dy_
        inside = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
        contrib = np.where(inside, wgt, 0.0)
        vals = field[np.clip(yi, 0, H - 1), np.clip(xi, 0, W - 1)]
        out = out + contrib * vals
    return out.astype(field.dtype, copy=False)
