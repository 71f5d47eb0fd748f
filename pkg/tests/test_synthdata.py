import json
from pathlib import Path

import numpy as np
import pytest

from nowcast.synthdata import (
    SceneParams, SwathParams, generate_scene, observe_channels, sample_swath,
    scene_checksum, swath_mask,
)

GOLDEN = json.loads((Path(__file__).parent / "golden" / "checksums.json").read_text())


def test_static_scene_is_constant():
    frames = generate_scene(SceneParams(velocity=(0.0, 0.0), growth=0.0, seed=3), 6)
    for g in frames[1:]:
        assert np.array_equal(g.data, frames[0].data)


def test_integer_advection_is_exact_shift():
    frames = generate_scene(SceneParams(velocity=(1.0, 0.0), growth=0.0, seed=5), 5)
    for a, b in zip(frames, frames[1:]):
        assert np.array_equal(b.data, np.roll(a.data, 1, axis=1))


def test_diagonal_integer_advection():
    frames = generate_scene(SceneParams(velocity=(2.0, -1.0), growth=0.0, seed=9), 3)
    assert np.array_equal(frames[1].data, np.roll(frames[0].data, (-1, 2), axis=(0, 1)))


def test_golden_checksum():
    frames = generate_scene(SceneParams(seed=42), 24)
    assert scene_checksum(frames) == GOLDEN["scene_seed42_24steps"]


def test_scene_non_negative_and_capped():
    p = SceneParams(seed=1, intensity_range=(50.0, 80.0), growth=0.3, cap=60.0, n_cells=12)
    for g in generate_scene(p, 12):
        assert g.data.min() >= 0 and g.data.max() <= 60.0


def test_generate_rejects_zero_steps():
    with pytest.raises(ValueError):
        generate_scene(SceneParams(), 0)


def test_start_offset_matches_full_run():
    p = SceneParams(seed=4)
    full = generate_scene(p, 10)
    tail = generate_scene(p, 4, start=6)
    for a, b in zip(full[6:], tail):
        assert np.array_equal(a.data, b.data)


def test_observe_identity_channel():
    truth = generate_scene(SceneParams(seed=2), 1)[0]
    obs = observe_channels(truth, 3, noise_sigma=0.0, identity_first=True)
    assert np.array_equal(obs.data[:, :, 0], truth.data[:, :, 0])
    assert obs.channels == 3


def test_observe_zero_truth_gives_offsets():
    truth = generate_scene(SceneParams(n_cells=0), 1)[0]
    obs = observe_channels(truth, 4)
    for c in range(4):
        assert np.unique(obs.data[:, :, c]).size == 1
    assert obs.data[0, 0, 1] != obs.data[0, 0, 0]


def test_observe_deterministic():
    truth = generate_scene(SceneParams(seed=2), 1)[0]
    a = observe_channels(truth, 3, noise_sigma=0.1, seed=11)
    b = observe_channels(truth, 3, noise_sigma=0.1, seed=11)
    c = observe_channels(truth, 3, noise_sigma=0.1, seed=12)
    assert a.data.tobytes() == b.data.tobytes()
    assert not np.array_equal(a.data, c.data)


def test_full_width_swath_is_dense():
    truth = generate_scene(SceneParams(seed=2), 1)[0]
    s = sample_swath(truth, SwathParams(width=64, revisit=3), 7)
    assert s.mask.all()


def test_narrow_swath_coverage():
    for t in range(40):
        frac = swath_mask(64, 64, SwathParams(width=2, revisit=32, seed=1), t).mean()
        assert 0.02 <= frac <= 0.08
    assert frac == pytest.approx(2 / 64)


def test_swath_union_over_revisit_covers_grid():
    p = SwathParams(width=2, revisit=32, seed=7)
    union = np.zeros((64, 64), bool)
    for t in range(p.revisit):
        union |= swath_mask(64, 64, p, t)
    assert union.mean() >= 0.99


def test_swath_values_match_truth():
    truth = generate_scene(SceneParams(seed=2), 1)[0]
    s = sample_swath(truth, SwathParams(width=5, revisit=13), 4)
    assert np.array_equal(s.data[s.mask], truth.data[s.mask])
    assert s.mask.any() and not s.mask.all()
    assert not s.data[~s.mask].any()
