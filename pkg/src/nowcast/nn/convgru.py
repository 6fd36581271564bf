"""Convolutional GRU cell.

Gates z and r come from convolutions over [x, h]; the candidate is
tanh(conv([x, r*h])) and the update is h' = (1-z)*h + z*candidate.
A cell built with in_ch=0 takes no input (the forecaster's deepest stage
runs on its hidden state alone).
"""

from __future__ import annotations

import numpy as np

from .layers import Conv2D, sigmoid, sigmoid_backward, tanh, tanh_backward


class ConvGRUCell:
    def __init__(self, rng, in_ch, hid_ch, kernel=3, dtype=np.float32):
        self.in_ch = in_ch
        self.hid_ch = hid_ch
        cat = in_ch + hid_ch
        pad = kernel // 2
        self.conv_z = Conv2D(rng, cat, hid_ch, kernel, 1, pad, dtype)
        self.conv_r = Conv2D(rng, cat, hid_ch, kernel, 1, pad, dtype)
        self.conv_c = Conv2D(rng, cat, hid_ch, kernel, 1, pad, dtype)

    def params(self):
        out = {}
        for tag, conv in (("z", self.conv_z), ("r", self.conv_r), ("c", self.conv_c)):
            for k, v in conv.params().items():
                out[f"{tag}.{k}"] = v
        return out

    def step(self, x, h):
        """One recurrence step; ``x`` may be None for input-free cells."""
        xin = h if x is None else np.concatenate([x, h], axis=1)
        az, cz = self.conv_z.forward(xin)
        z, sz = sigmoid(az)
        ar, cr = self.conv_r.forward(xin)
        r, sr = sigmoid(ar)
        rh = r * h
        cin = rh if x is None else np.concatenate([x, rh], axis=1)
        ac, cc = self.conv_c.forward(cin)
        c, tc = tanh(ac)
        h_new = (1.0 - z) * h + z * c
        cache = (x is not None, h, z, sz, cz, r, sr, cr, c, tc, cc)
        return h_new, cache

    def step_backward(self, dh_new, cache):
        """Returns (dx, dh_prev, grads); dx is None for input-free cells."""
        has_x, h, z, sz, cz, r, sr, cr, c, tc, cc = cache
        nin = self.in_ch

        dz = dh_new * (c - h)
        dc = dh_new * z
        dh_prev = dh_new * (1.0 - z)

        dac = tanh_backward(dc, tc)
        dcin, g_c = self.conv_c.backward(dac, cc)
        if has_x:
            dx = dcin[:, :nin]
            drh = dcin[:, nin:]
        else:
            dx = None
            drh = dcin
        dr = drh * h
        dh_prev = dh_prev + drh * r

        daz = sigmoid_backward(dz, sz)
        dar = sigmoid_backward(dr, sr)
        dxin_z, g_z = self.conv_z.backward(daz, cz)
        dxin_r, g_r = self.conv_r.backward(dar, cr)
        dxin = dxin_z + dxin_r
        if has_x:
            dx = dx + dxin[:, :nin]
            dh_prev = dh_prev + dxin[:, nin:]
        else:
            dh_prev = dh_prev + dxin

        grads = {}
        for tag, g in (("z", g_z), ("r", g_r), ("c", g_c)):
            for k, v in g.items():
                grads[f"{tag}.{k}"] = v
        return dx, dh_prev, grads
