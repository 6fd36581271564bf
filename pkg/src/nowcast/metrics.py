"""Forecast verification: confusion counts, CSI, HSS, per-hour weighted MAE,
performance-diagram coordinates and standard errors.

Binarization is closed at the threshold (event iff value >= threshold).
Degenerate denominators yield ``None`` markers, never silent zeros, and
marker rows are excluded from aggregation.  Confusion counts are pooled
over samples; per-day score lists back the standard errors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import losses
from .errors import ShapeMismatch, TooFewUnits
from .grids import ts_to_datetime

CSI_HSS_THRESHOLDS = (1.0, 3.0, 5.0, 10.0, 15.0, 20.0, 30.0, 40.0)
HOURS = (0, 1, 2)


@dataclass
class ConfusionCounts:
    """Binary contingency table at one rain threshold."""

    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0
    threshold: float = 0.0

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn

    def add(self, other: "ConfusionCounts"):
        self.tp += other.tp
        self.fp += other.fp
        self.tn += other.tn
        self.fn += other.fn


def confusion(target, pred, threshold: float) -> ConfusionCounts:
    """Binarize both fields at >= threshold and count the four cells."""
    target = np.asarray(target)
    pred = np.asarray(pred)
    if target.shape != pred.shape:
        raise ShapeMismatch(f"target {target.shape} vs prediction {pred.shape}")
    t = target >= threshold
    p = pred >= threshold
    return ConfusionCounts(
        tp=int(np.count_nonzero(t & p)),
        fp=int(np.count_nonzero(~t & p)),
        tn=int(np.count_nonzero(~t & ~p)),
        fn=int(np.count_nonzero(t & ~p)),
        threshold=threshold,
    )


def csi(c: ConfusionCounts):
    """Critical success index TP/(TP+FN+FP); None when no events anywhere."""
    denom = c.tp + c.fn + c.fp
    if denom == 0:
        return None
    return c.tp / denom


def hss(c: ConfusionCounts):
    """Heidke skill score: skill relative to random chance, in [-1, 1].

    Standard two-category form 2(TP*TN - FP*FN) / ((TP+FN)(FN+TN) + (TP+FP)(FP+TN));
    None when the denominator degenerates (single-class target and forecast).
    """
    denom = (c.tp + c.fn) * (c.fn + c.tn) + (c.tp + c.fp) * (c.fp + c.tn)
    if denom == 0:
        return None
    return 2.0 * (c.tp * c.tn - c.fp * c.fn) / denom


def pod(c: ConfusionCounts):
    denom = c.tp + c.fn
    return None if denom == 0 else c.tp / denom


def success_ratio(c: ConfusionCounts):
    denom = c.tp + c.fp
    return None if denom == 0 else c.tp / denom


def frequency_bias(c: ConfusionCounts):
    denom = c.tp + c.fn
    return None if denom == 0 else (c.tp + c.fp) / denom


def wmae_metric(targets, preds, th: float = 0.5):
    """Eq-1 weighted MAE evaluated separately per forecast hour.

    Inputs are [T, H, W]; returns a tuple of T scores.
    """
    targets = np.asarray(targets, dtype=np.float64)
    preds = np.asarray(preds, dtype=np.float64)
    if targets.shape != preds.shape or targets.ndim != 3:
        raise ShapeMismatch("need aligned [T, H, W] maps")
    return tuple(losses.wmae(targets[h], preds[h], th) for h in range(targets.shape[0]))


@dataclass
class VerificationReport:
    """Pooled verification over one split for one forecast source."""

    source: str
    split: str
    thresholds: tuple = CSI_HSS_THRESHOLDS
    n_samples: int = 0
    # (hour, threshold) -> pooled ConfusionCounts
    counts: dict = field(default_factory=dict)
    # hour -> running [sum of weighted abs err, pixel-weight count] per Th
    _wmae_sums: dict = field(default_factory=dict)
    # day string -> per-day [wmae05 numerator, denom, wmae0 numerator, denom] (hour 0..2)
    _day_sums: dict = field(default_factory=dict)

    def add_sample(self, target_maps, pred_maps, anchor_ts: int):
        """Accumulate one sample's [T, H, W] target/prediction pair."""
        target_maps = np.asarray(target_maps, dtype=np.float64)
        pred_maps = np.asarray(pred_maps, dtype=np.float64)
        if target_maps.shape != pred_maps.shape or target_maps.ndim != 3:
            raise ShapeMismatch("need aligned [T, H, W] maps")
        day = ts_to_datetime(anchor_ts).strftime("%Y-%m-%d")
        day_acc = self._day_sums.setdefault(
            day, np.zeros((len(HOURS), 4), dtype=np.float64))
        for h in HOURS:
            y, p = target_maps[h], pred_maps[h]
            npix = y.size
            for th in self.thresholds:
                key = (h, th)
                if key not in self.counts:
                    self.counts[key] = ConfusionCounts(threshold=th)
                self.counts[key].add(confusion(y, p, th))
            for col, th in ((0, 0.5), (2, 0.0)):
                err = float(np.sum(losses.weight(y, th) * np.abs(y - p)))
                acc = self._wmae_sums.setdefault((h, th), [0.0, 0])
                acc[0] += err
                acc[1] += npix
                day_acc[h, col] += err
                day_acc[h, col + 1] += npix
        self.n_samples += 1

    def wmae(self, hour: int, th: float = 0.5):
        acc = self._wmae_sums.get((hour, th))
        if not acc or acc[1] == 0:
            return None
        return acc[0] / acc[1]

    def wmae_days(self, hour: int, th: float = 0.5):
        """Per-day WMAE scores (the standard-error aggregation unit)."""
        col = 0 if th == 0.5 else 2
        out = []
        for day in sorted(self._day_sums):
            num, den = self._day_sums[day][hour, col], self._day_sums[day][hour, col + 1]
            if den > 0:
                out.append(num / den)
        return out

    def wmae_stderr(self, hour: int, th: float = 0.5):
        days = self.wmae_days(hour, th)
        if len(days) < 2:
            return None
        return standard_error(days)

    def score_rows(self):
        """One row per (hour, threshold) with all pooled scores."""
        rows = []
        for h in HOURS:
            for th in self.thresholds:
                c = self.counts.get((h, th))
                if c is None:
                    continue
                rows.append({
                    "source": self.source, "split": self.split, "hour": h,
                    "threshold": th, "tp": c.tp, "fp": c.fp, "tn": c.tn, "fn": c.fn,
                    "csi": csi(c), "hss": hss(c), "pod": pod(c),
                    "success_ratio": success_ratio(c), "bias": frequency_bias(c),
                })
        return rows


def standard_error(per_unit_scores) -> float:
    """Sample std / sqrt(n) over per-day aggregates."""
    scores = np.asarray(list(per_unit_scores), dtype=np.float64)
    if scores.size < 2:
        raise TooFewUnits("standard error needs at least two aggregation units")
    return float(scores.std(ddof=1) / math.sqrt(scores.size))


def performance_diagram_rows(report: VerificationReport, hour: int = 0):
    """(threshold, POD, SR, CSI, bias) rows for the performance diagram.

    Degenerate thresholds give marker rows (None scores).  Where defined,
    1/CSI = 1/POD + 1/SR - 1 holds exactly.
    """
    rows = []
    for th in report.thresholds:
        c = report.counts.get((hour, th))
        if c is None:
            rows.append({"threshold": th, "pod": None, "success_ratio": None,
                         "csi": None, "bias": None})
            continue
        rows.append({
            "threshold": th,
            "pod": pod(c),
            "success_ratio": success_ratio(c),
            "csi": csi(c),
            "bias": frequency_bias(c),
        })
    return rows
