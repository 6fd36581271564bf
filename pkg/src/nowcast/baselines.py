"""Non-learned reference forecasters.

Persistence ("last 10/20 min") plus a radar-extrapolation baseline in the
operational style: per-block motion vectors from normalized cross
correlation between the last two reflectivity maps, then backward
semi-Lagrangian advection of the last rain map.  By construction the
extrapolation cannot represent growth or decay of cells.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backend
from .errors import MissingFrame, ShapeMismatch
from .grids import RADAR_SENTINEL, ForecastBundle, RadarGrid, SequenceSample


@dataclass(frozen=True)
class MotionField:
    """Per-block displacement in px per 10-minute frame."""

    u: np.ndarray              # [nby, nbx], x (column) displacement
    v: np.ndarray              # [nby, nbx], y (row) displacement
    block_size: int
    search_radius: int
    grid_hw: tuple
    degenerate: bool = False

    def __post_init__(self):
        r = self.search_radius
        if np.any(np.abs(self.u) > r) or np.any(np.abs(self.v) > r):
            raise ValueError("block displacement exceeds the search radius")

    def dense(self):
        """Expand block vectors to per-pixel (u, v) maps."""
        H, W = self.grid_hw
        nby, nbx = self.u.shape
        iy = np.minimum(np.arange(H) // self.block_size, nby - 1)
        ix = np.minimum(np.arange(W) // self.block_size, nbx - 1)
        return self.u[np.ix_(iy, ix)], self.v[np.ix_(iy, ix)]


def persistence_forecast(sample: SequenceSample, lag: int = 10) -> ForecastBundle:
    """Use the rain map at t-lag as the prediction for all three hours."""
    offsets = {g.timestamp: g for g in sample.rain_in}
    want = sample.anchor - lag
    if want not in offsets:
        raise MissingFrame(f"sample has no rain frame at t-{lag}min")
    frame = offsets[want].values
    preds = np.repeat(frame[None], 3, axis=0)
    return ForecastBundle(preds.copy(), None, f"persistence_{lag}min", sample.anchor)


def _working_field(radar: RadarGrid) -> np.ndarray:
    """Reflectivity with sentinel cells treated as echo-free (0 dBZ)."""
    v = radar.values.astype(np.float64)
    return np.where(v == RADAR_SENTINEL, 0.0, v)


def estimate_motion(prev: RadarGrid, curr: RadarGrid, block_size: int = 16,
                    search_radius: int = 8, energy_floor: float = 1.0) -> MotionField:
    """Per-block integer displacement maximizing normalized cross-correlation.

    Blocks without usable echo (max below ``energy_floor`` or flat) inherit
    the median motion of valid blocks.  If no block is valid, the field is
    zero and flagged degenerate.
    """
    if prev.values.shape != curr.values.shape:
        raise ShapeMismatch("radar frames differ in shape")
    a = _working_field(prev)
    b = _working_field(curr)
    H, W = a.shape
    bs, r = block_size, search_radius
    nby, nbx = H // bs, W // bs
    if nby == 0 or nbx == 0:
        raise ShapeMismatch(f"grid {H}x{W} smaller than one {bs}px block")

    # displacements ordered by magnitude so ties resolve to the smallest motion
    disps = sorted(((dx, dy) for dx in range(-r, r + 1) for dy in range(-r, r + 1)),
                   key=lambda d: (d[0] * d[0] + d[1] * d[1], d[1], d[0]))

    u = np.zeros((nby, nbx))
    v = np.zeros((nby, nbx))
    valid = np.zeros((nby, nbx), dtype=bool)
    for by in range(nby):
        for bx in range(nbx):
            y0, x0 = by * bs, bx * bs
            ref = a[y0:y0 + bs, x0:x0 + bs]
            if ref.max() < energy_floor or ref.std() == 0:
                continue
            ref_c = ref - ref.mean()
            ref_n = np.sqrt((ref_c * ref_c).sum())
            best, best_d = None, None
            for dx, dy in disps:
                yy, xx = y0 + dy, x0 + dx
                if yy < 0 or xx < 0 or yy + bs > H or xx + bs > W:
                    continue
                win = b[yy:yy + bs, xx:xx + bs]
                win_c = win - win.mean()
                win_n = np.sqrt((win_c * win_c).sum())
                if win_n == 0:
                    continue
                score = (ref_c * win_c).sum() / (ref_n * win_n)
                if best is None or score > best + 1e-12:
                    best, best_d = score, (dx, dy)
            if best_d is not None:
                u[by, bx], v[by, bx] = best_d
                valid[by, bx] = True

    if not valid.any():
        return MotionField(u, v, bs, r, (H, W), degenerate=True)
    if not valid.all():
        u[~valid] = np.median(u[valid])
        v[~valid] = np.median(v[valid])
    return MotionField(u, v, bs, r, (H, W))


def extrapolate(sample: SequenceSample, motion: MotionField | None = None) -> ForecastBundle:
    """Advect the last rain map along the estimated motion.

    Hour 0 is the mean of the six advected 10-minute steps; hours 1 and 2
    copy hour 0 (the extrapolation benchmark convention for longer leads).
    """
    if motion is None:
        motion = estimate_motion(sample.radar_in[-2], sample.radar_in[-1])
    last = sample.rain_in[-1].values.astype(np.float64)
    H, W = last.shape
    u_px, v_px = motion.dense()
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)

    steps = np.zeros((6, H, W))
    for i in range(1, 7):
        x_src = xx - i * u_px
        y_src = yy - i * v_px
        steps[i - 1] = backend.warp_bilinear(last, x_src, y_src)
    hour0 = steps.mean(axis=0)
    preds = np.stack([hour0, hour0, hour0]).astype(np.float32)
    preds[preds < 0] = 0.0
    return ForecastBundle(preds, None, "extrapolation", sample.anchor)
