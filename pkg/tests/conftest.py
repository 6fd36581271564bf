import numpy as np
import pytest

from nowcast.grids import RainGrid, RadarGrid, SequenceSample, hourly_average
from nowcast.synth import SynthConfig, sample_corpus


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Small 32px corpus shared by IO/baseline/trainer tests."""
    cfg = SynthConfig(grid=32, frames_per_scene=33,
                      scenes_train=4, scenes_val=2, scenes_test=2)
    out = tmp_path_factory.mktemp("corpus")
    return sample_corpus(cfg, seed=1, out_dir=out)


def make_sample(rain_frames, radar_frames=None):
    """Build a SequenceSample from 24 consecutive rain (and radar) grids.

    rain_frames[0..5] become the inputs, rain_frames[6..23] the targets.
    """
    assert len(rain_frames) >= 24
    if radar_frames is None:
        radar_frames = [RadarGrid(np.full_like(f.values, -999.0), f.timestamp)
                        for f in rain_frames]
    rain_in = tuple(rain_frames[:6])
    radar_in = tuple(radar_frames[:6])
    targets = tuple(hourly_average(rain_frames[6 + 6 * h:12 + 6 * h], hour_index=h)
                    for h in range(3))
    return SequenceSample(rain_in, radar_in, targets)


def const_frames(value, n=24, hw=(8, 8), t0=600):
    return [RainGrid(np.full(hw, value, dtype=np.float32), t0 + 10 * k)
            for k in range(n)]
