"""Grid domain types, binary storage, manifests, splits and preprocessing.

Storage format ("NWG1"): magic ``NWG1``, u8 channel kind (0 rain, 1 radar),
u32 height, u32 width (little endian), i64 timestamp in minutes since the
Unix epoch, then height*width float32 little-endian values, row major.
The format round-trips bit-exactly.

Radar grids use a -999.0 dBZ sentinel for missing cells; sentinel cells
are excluded from normalization quantiles and map to 0 after normalizing.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import (
    BadMagic,
    CropTooLarge,
    DegenerateQuantile,
    DimensionMismatch,
    EmptyTrainingSet,
    ManifestError,
    NonConsecutive,
    TruncatedFile,
    WrongFrameCount,
    WrongLevelCount,
)

GRID_MAGIC = b"NWG1"
KIND_RAIN = 0
KIND_RADAR = 1
RADAR_SENTINEL = -999.0

FRAME_MINUTES = 10          # archive time step
FRAMES_PER_HOUR = 6
INPUT_FRAMES = 6            # one hour of history
TARGET_HOURS = 3

_HEADER = struct.Struct("<4sBIIq")


def ts_to_datetime(ts_minutes: int) -> datetime:
    return datetime.fromtimestamp(ts_minutes * 60, tz=timezone.utc)


def datetime_to_ts(dt: datetime) -> int:
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp()) // 60


def _check_timestamp(ts):
    if ts % FRAME_MINUTES != 0:
        raise ValueError(f"timestamp {ts} is not a multiple of {FRAME_MINUTES} minutes")


@dataclass(frozen=True)
class RainGrid:
    """Single-timestamp rain-rate field in mm/hr."""

    values: np.ndarray
    timestamp: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 2:
            raise ValueError("rain grid must be 2D")
        if not np.all(np.isfinite(v)):
            raise ValueError("rain grid contains non-finite values")
        if np.any(v < 0):
            raise ValueError("rain grid contains negative rain rates")
        _check_timestamp(self.timestamp)
        object.__setattr__(self, "values", v)

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    kind = KIND_RAIN


@dataclass(frozen=True)
class RadarGrid:
    """Single-timestamp column-max reflectivity field in dBZ.

    Missing cells carry the RADAR_SENTINEL value.
    """

    values: np.ndarray
    timestamp: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 2:
            raise ValueError("radar grid must be 2D")
        if not np.all(np.isfinite(v)):
            raise ValueError("radar grid contains non-finite values")
        _check_timestamp(self.timestamp)
        object.__setattr__(self, "values", v)

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    kind = KIND_RADAR

    def mask_missing(self) -> np.ndarray:
        return self.values == RADAR_SENTINEL


@dataclass(frozen=True)
class HourlyTarget:
    """Mean of six consecutive 10-minute rain grids."""

    values: np.ndarray
    hour_index: int
    base_timestamp: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise ValueError("hourly target must be finite and non-negative")
        if self.hour_index not in (0, 1, 2):
            raise ValueError("hour_index must be 0, 1 or 2")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class NormStats:
    """95th-quantile normalizers fitted on the training split."""

    rain_q95: float
    radar_q95: float

    def __post_init__(self):
        if not (self.rain_q95 > 0 and self.radar_q95 > 0):
            raise DegenerateQuantile(
                f"quantiles must be positive, got rain={self.rain_q95} radar={self.radar_q95}")


@dataclass(frozen=True)
class SequenceSample:
    """One training/evaluation window: 6 input frame pairs, 3 hourly targets."""

    rain_in: tuple
    radar_in: tuple
    targets: tuple

    def __post_init__(self):
        if len(self.rain_in) != INPUT_FRAMES or len(self.radar_in) != INPUT_FRAMES:
            raise WrongFrameCount("sample needs 6 rain and 6 radar input frames")
        if len(self.targets) != TARGET_HOURS:
            raise WrongFrameCount("sample needs 3 hourly targets")
        _require_consecutive([g.timestamp for g in self.rain_in])
        for rn, rd in zip(self.rain_in, self.radar_in):
            if rn.timestamp != rd.timestamp:
                raise NonConsecutive("rain/radar input timestamps disagree")

    @property
    def anchor(self) -> int:
        """Forecast time t: first target hour covers [t, t+60)."""
        return self.rain_in[-1].timestamp + FRAME_MINUTES

    def input_array(self, stats: NormStats) -> np.ndarray:
        """Normalized [N, 2, H, W] float32 model input (rain, radar channels)."""
        rain = np.stack([normalize_rain(g.values, stats) for g in self.rain_in])
        radar = np.stack([normalize_radar(g.values, stats) for g in self.radar_in])
        return np.stack([rain, radar], axis=1)

    def last_rain_norm(self, stats: NormStats) -> np.ndarray:
        return normalize_rain(self.rain_in[-1].values, stats)

    def target_array(self) -> np.ndarray:
        """[T, H, W] hourly-mean targets in mm/hr."""
        return np.stack([t.values for t in self.targets])


@dataclass(frozen=True)
class ForecastBundle:
    """Per-hour forecast maps in mm/hr plus optional attention maps."""

    predictions: np.ndarray            # [T, H, W], mm/hr
    attention: np.ndarray | None       # [T, H, W] in [0,1], or None
    source: str
    anchor: int = 0

    def __post_init__(self):
        p = np.asarray(self.predictions)
        if p.ndim != 3 or p.shape[0] != TARGET_HOURS:
            raise ValueError("predictions must be [3, H, W]")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise ValueError("predictions must be finite and non-negative")
        if self.attention is not None:
            a = np.asarray(self.attention)
            if a.shape != p.shape:
                raise ValueError("attention maps must match prediction shape")
            if np.any(a < 0) or np.any(a > 1):
                raise ValueError("attention maps must lie in [0,1]")


# ---------------------------------------------------------------------------
# binary format

def write_grid(grid, path):
    """Write a RainGrid/RadarGrid in the NWG1 format (bit-exact round trip)."""
    v = grid.values
    header = _HEADER.pack(GRID_MAGIC, grid.kind, v.shape[0], v.shape[1], grid.timestamp)
    payload = np.ascontiguousarray(v, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def read_grid(path):
    """Read an NWG1 file back into a RainGrid or RadarGrid."""
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != GRID_MAGIC:
        raise BadMagic(f"{path}: not an NWG1 file")
    if len(raw) < _HEADER.size:
        raise TruncatedFile(f"{path}: header incomplete")
    _, kind, h, w, ts = _HEADER.unpack_from(raw)
    expected = _HEADER.size + h * w * 4
    if len(raw) < expected:
        raise TruncatedFile(f"{path}: expected {expected} bytes, got {len(raw)}")
    if len(raw) > expected:
        raise DimensionMismatch(f"{path}: {len(raw) - expected} trailing bytes")
    values = np.frombuffer(raw, dtype="<f4", count=h * w, offset=_HEADER.size)
    values = values.reshape(h, w).copy()
    if kind == KIND_RAIN:
        return RainGrid(values, ts)
    if kind == KIND_RADAR:
        return RadarGrid(values, ts)
    raise DimensionMismatch(f"{path}: unknown channel kind {kind}")


# ---------------------------------------------------------------------------
# preprocessing

def _require_consecutive(timestamps):
    for a, b in zip(timestamps, timestamps[1:]):
        if b - a != FRAME_MINUTES:
            raise NonConsecutive(f"timestamps {a} -> {b} are not 10 minutes apart")


def hourly_average(frames, hour_index: int = 0) -> HourlyTarget:
    """Pixelwise mean of six consecutive 10-minute rain grids."""
    frames = tuple(frames)
    if len(frames) != FRAMES_PER_HOUR:
        raise WrongFrameCount(f"hourly average needs 6 frames, got {len(frames)}")
    _require_consecutive([f.timestamp for f in frames])
    stack = np.stack([f.values.astype(np.float64) for f in frames])
    mean = stack.mean(axis=0).astype(np.float32)
    base = frames[0].timestamp - 60 * hour_index
    return HourlyTarget(mean, hour_index, base)


def center_crop(grid, out_h: int, out_w: int):
    """Centered out_h x out_w window; offsets floor((dim-out)/2) per axis."""
    values = grid if isinstance(grid, np.ndarray) else grid.values
    h, w = values.shape
    if out_h > h or out_w > w:
        raise CropTooLarge(f"cannot crop {out_h}x{out_w} from {h}x{w}")
    r0 = (h - out_h) // 2
    c0 = (w - out_w) // 2
    cropped = values[r0:r0 + out_h, c0:c0 + out_w]
    if isinstance(grid, np.ndarray):
        return cropped.copy()
    return replace(grid, values=cropped.copy())


def fit_norm_stats(train_grids) -> NormStats:
    """95th quantiles (linear-interpolation definition) over all training pixels.

    Radar sentinel cells are excluded.  Raises DegenerateQuantile when a
    quantile comes out non-positive.
    """
    rain_vals = []
    radar_vals = []
    for g in train_grids:
        if g.kind == KIND_RAIN:
            rain_vals.append(g.values.ravel())
        else:
            v = g.values.ravel()
            radar_vals.append(v[v != RADAR_SENTINEL])
    if not rain_vals or not radar_vals:
        raise EmptyTrainingSet("need at least one rain and one radar training grid")
    rain_q = float(np.quantile(np.concatenate(rain_vals), 0.95))
    radar_q = float(np.quantile(np.concatenate(radar_vals), 0.95))
    if rain_q <= 0 or radar_q <= 0:
        raise DegenerateQuantile(f"q95 non-positive (rain={rain_q}, radar={radar_q})")
    return NormStats(rain_q, radar_q)


def normalize_rain(values: np.ndarray, stats: NormStats) -> np.ndarray:
    return (values / stats.rain_q95).astype(np.float32)


def denormalize_rain(values: np.ndarray, stats: NormStats) -> np.ndarray:
    return (values * stats.rain_q95).astype(np.float32)


def normalize_radar(values: np.ndarray, stats: NormStats) -> np.ndarray:
    out = values / stats.radar_q95
    out = np.where(values == RADAR_SENTINEL, 0.0, out)
    return out.astype(np.float32)


def normalize(grid, stats: NormStats):
    """Quantile normalization; radar sentinel cells become 0."""
    if grid.kind == KIND_RAIN:
        return replace(grid, values=normalize_rain(grid.values, stats))
    return replace(grid, values=normalize_radar(grid.values, stats))


def denormalize(grid, stats: NormStats):
    q = stats.rain_q95 if grid.kind == KIND_RAIN else stats.radar_q95
    return replace(grid, values=(grid.values * q).astype(np.float32))


def column_max_reduce(volume: np.ndarray, timestamp: int, levels: int = 21) -> RadarGrid:
    """Pixelwise max over the vertical levels of a reflectivity volume."""
    volume = np.asarray(volume)
    if volume.ndim != 3 or volume.shape[0] != levels:
        raise WrongLevelCount(
            f"expected {levels}xHxW volume, got shape {volume.shape}")
    return RadarGrid(volume.max(axis=0).astype(np.float32), timestamp)


# ---------------------------------------------------------------------------
# splits

@dataclass(frozen=True)
class SplitScheme:
    """Time-based split: held-out year alternates val/test by day of month."""

    eval_year: int = 2018
    val_last_day: int = 15

    def assign(self, ts_minutes: int) -> str:
        dt = ts_to_datetime(ts_minutes)
        if dt.year != self.eval_year:
            return "train"
        return "val" if dt.day <= self.val_last_day else "test"


def split_by_time(ts_minutes: int, scheme: SplitScheme | None = None) -> str:
    return (scheme or SplitScheme()).assign(ts_minutes)


# ---------------------------------------------------------------------------
# manifests and windowing

@dataclass
class DatasetManifest:
    """Timestamp -> (rain path, radar path) index over an archive on disk."""

    entries: dict            # ts -> (rain_path, radar_path), absolute paths
    root: Path
    split: str | None = None

    def timestamps(self):
        return sorted(self.entries)

    def __len__(self):
        return len(self.entries)

    def subset(self, split: str, scheme: SplitScheme | None = None) -> "DatasetManifest":
        scheme = scheme or SplitScheme()
        keep = {ts: p for ts, p in self.entries.items() if scheme.assign(ts) == split}
        return DatasetManifest(keep, self.root, split)

    def load_rain(self, ts) -> RainGrid:
        return read_grid(self.entries[ts][0])

    def load_radar(self, ts) -> RadarGrid:
        return read_grid(self.entries[ts][1])


def write_manifest(manifest: DatasetManifest, path):
    path = Path(path)
    base = path.parent.resolve()
    lines = ["# timestamp<TAB>rain_path<TAB>radar_path"]
    for ts in manifest.timestamps():
        rain, radar = manifest.entries[ts]
        rel_rain = os.path.relpath(Path(rain).resolve(), base)
        rel_radar = os.path.relpath(Path(radar).resolve(), base)
        lines.append(f"{ts}\t{rel_rain}\t{rel_radar}")
    path.write_text("\n".join(lines) + "\n")


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    entries = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ManifestError(f"{path}:{lineno}: expected 3 tab-separated fields")
        try:
            ts = int(parts[0])
        except ValueError as exc:
            raise ManifestError(f"{path}:{lineno}: bad timestamp {parts[0]!r}") from exc
        if ts in entries:
            raise ManifestError(f"{path}:{lineno}: duplicate timestamp {ts}")
        entries[ts] = (str(path.parent / parts[1]), str(path.parent / parts[2]))
    return DatasetManifest(entries, path.parent)


@dataclass
class GapReport:
    """Windowing coverage: anchors skipped because of missing frames."""

    candidates: int = 0
    emitted: int = 0
    skipped: int = 0
    missing_frames: int = 0


class Windower:
    """Stream of SequenceSamples with full frame coverage.

    A candidate anchor is any manifest timestamp t whose window
    [t-60, t+170] lies inside the archive span; anchors with gaps are
    skipped and counted in ``gap_report``.
    """

    def __init__(self, manifest: DatasetManifest, stats: NormStats | None = None):
        self.manifest = manifest
        self.stats = stats
        self.gap_report = GapReport()
        self._cache = {}

    def _rain(self, ts):
        key = ("rain", ts)
        if key not in self._cache:
            self._cache[key] = self.manifest.load_rain(ts)
        return self._cache[key]

    def _radar(self, ts):
        key = ("radar", ts)
        if key not in self._cache:
            self._cache[key] = self.manifest.load_radar(ts)
        return self._cache[key]

    def anchors(self):
        ts_all = self.manifest.timestamps()
        if not ts_all:
            return []
        lo, hi = ts_all[0], ts_all[-1]
        return [t for t in ts_all
                if t - 60 >= lo and t + 10 * (6 * TARGET_HOURS - 1) <= hi]

    def __iter__(self) -> Iterator[SequenceSample]:
        self.gap_report = GapReport()
        have = self.manifest.entries
        n_target_frames = 6 * TARGET_HOURS
        for t in self.anchors():
            self.gap_report.candidates += 1
            in_ts = [t - 10 * k for k in range(INPUT_FRAMES, 0, -1)]
            tgt_ts = [t + 10 * k for k in range(n_target_frames)]
            missing = [u for u in in_ts + tgt_ts if u not in have]
            if missing:
                self.gap_report.skipped += 1
                self.gap_report.missing_frames += len(missing)
                continue
            rain_in = tuple(self._rain(u) for u in in_ts)
            radar_in = tuple(self._radar(u) for u in in_ts)
            targets = tuple(
                hourly_average([self._rain(t + 60 * h + 10 * i) for i in range(6)],
                               hour_index=h)
                for h in range(TARGET_HOURS))
            self.gap_report.emitted += 1
            # keep the cache from growing without bound on long archives
            if len(self._cache) > 512:
                self._cache.clear()
            yield SequenceSample(rain_in, radar_in, targets)


def window_samples(manifest: DatasetManifest, stats: NormStats | None = None) -> Windower:
    """Build the sample stream for a manifest (see Windower)."""
    return Windower(manifest, stats)
