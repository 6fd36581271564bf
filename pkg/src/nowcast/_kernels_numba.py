"""Numba-jitted hot kernels.

Same contracts as ``_kernels_numpy``; see that module for the layout
conventions.  Parallel loops partition work so that every output element
is written by exactly one thread, which keeps results bit-reproducible
across runs and thread counts.  ``fastmath`` stays off for the same
reason.
"""

import numpy as np
from numba import njit, prange


@njit(cache=True, parallel=True, fastmath=False)
def conv_gather(xp, w, stride):
    B, C, Hp, Wp = xp.shape
    O, _, kh, kw = w.shape
    ho = (Hp - kh) // stride + 1
    wo = (Wp - kw) // stride + 1
    y = np.zeros((B, O, ho, wo), dtype=xp.dtype)
    for bo in prange(B * O):
        b = bo // O
        o = bo % O
        for m in range(ho):
            for n in range(wo):
                acc = 0.0
                for c in range(C):
                    for u in range(kh):
                        for v in range(kw):
                            acc += w[o, c, u, v] * xp[b, c, m * stride + u, n * stride + v]
                y[b, o, m, n] = acc
    return y


@njit(cache=True, parallel=True, fastmath=False)
def conv_scatter(dy, w, stride, hz, wz):
    B, O, ho, wo = dy.shape
    _, C, kh, kw = w.shape
    z = np.zeros((B, C, hz, wz), dtype=dy.dtype)
    for bc in prange(B * C):
        b = bc // C
        c = bc % C
        for o in range(O):
            for m in range(ho):
                for n in range(wo):
                    d = dy[b, o, m, n]
                    if d != 0.0:
                        for u in range(kh):
                            for v in range(kw):
                                z[b, c, m * stride + u, n * stride + v] += d * w[o, c, u, v]
    return z


@njit(cache=True, parallel=True, fastmath=False)
def conv_wgrad(dy, xp, stride, kh, kw):
    B, O, ho, wo = dy.shape
    C = xp.shape[1]
    dw = np.zeros((O, C, kh, kw), dtype=dy.dtype)
    for oc in prange(O * C):
        o = oc // C
        c = oc % C
        for u in range(kh):
            for v in range(kw):
                acc = 0.0
                for b in range(B):
                    for m in range(ho):
                        for n in range(wo):
                            acc += dy[b, o, m, n] * xp[b, c, m * stride + u, n * stride + v]
                dw[o, c, u, v] = acc
    return dw


@njit(cache=True, fastmath=False)
def warp_bilinear(field, x_src, y_src):
    H, W = field.shape
    out = np.zeros_like(field)
    for i in range(H):
        for j in range(W):
            x = x_src[i, j]
            y = y_src[i, j]
            x0 = int(np.floor(x))
            y0 = int(np.floor(y))
            wx = x - x0
            wy = y - y0
            acc = 0.0
            for dx in range(2):
                for dy in range(2):
                    xi = x0 + dx
                    yi = y0 + dy
                    if 0 <= xi < W and 0 <= yi < H:
                        wgt = (wx if dx == 1 else 1.0 - wx) * (wy if dy == 1 else 1.0 - wy)
                        acc += wgt * field[yi, xi]
            out[i, j] = acc
    return out
