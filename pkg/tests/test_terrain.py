import numpy as np
import pandas as pd
import pytest

from rapidmotor import terrain
from rapidmotor.terrain import TerrainParams, TerrainProfile


def _profile_from(heights, resolution=1.0):
    heights = np.asarray(heights, dtype=np.float64)
    return TerrainProfile(seed=0, params=TerrainParams(), resolution=resolution, origin=0.0, heights=heights,
                          scale=1.0, tables=())


def test_zero_scale_is_flat():
    profile = terrain.generate(5, TerrainParams(z_scale=0.0))
    assert profile.flat
    assert np.all(profile.heights == 0.0)
    assert profile.height_at(123.0) == 0.0


def test_same_seed_same_profile():
    a = terrain.generate(11, TerrainParams(), 10.0)
    b = terrain.generate(11, TerrainParams(), 10.0)
    assert np.array_equal(a.heights, b.heights)
    assert not np.array_equal(a.heights, terrain.generate(12, TerrainParams(), 10.0).heights)


def test_full_scale_params_peak_equals_z_scale():
    profile = terrain.generate(3, TerrainParams(), length_m=50.0, resolution=0.05)
    assert len(profile.heights) == 1001
    assert np.max(np.abs(profile.heights)) == pytest.approx(0.27, abs=1e-9)
    assert np.all(np.isfinite(profile.heights))


def test_extension_beyond_samples_is_deterministic_and_bounded():
    profile = terrain.generate(4, TerrainParams(z_scale=0.05), length_m=5.0)
    far = [profile.end + d for d in (0.5, 3.0, 40.0)] + [profile.origin - 7.0]
    first = [profile.height_at(x) for x in far]
    assert first == [profile.height_at(x) for x in far]
    assert all(abs(h) <= 0.05 for h in first)


def test_inside_span_interpolates_samples():
    profile = terrain.generate(4, TerrainParams(), length_m=5.0, resolution=0.1)
    xs = profile.xs
    assert profile.height_at(float(xs[7])) == pytest.approx(profile.heights[7])
    mid = 0.5 * (xs[7] + xs[8])
    assert profile.height_at(float(mid)) == pytest.approx(0.5 * (profile.heights[7] + profile.heights[8]))


def test_heights_are_read_only():
    profile = terrain.generate(1)
    with pytest.raises(ValueError):
        profile.heights[0] = 1.0


def test_bad_params_rejected():
    with pytest.raises(ValueError):
        TerrainParams(octaves=0)
    with pytest.raises(ValueError):
        terrain.generate(0, resolution=0.0)


def test_local_height_on_flat_terrain():
    assert terrain.local_height(terrain.flat(), [0.0, 0.4]) == 0.0


def test_local_height_rounds_then_takes_max():
    profile = _profile_from([0.26, 0.11])
    assert terrain.local_height(profile, [0.0, 1.0]) == pytest.approx(0.3)


def test_local_height_single_query():
    profile = _profile_from([-0.14, 0.02])
    assert terrain.local_height(profile, [0.0]) == pytest.approx(-0.1)


def test_local_height_rounds_halves_up():
    np.testing.assert_allclose(terrain.quantize_height([0.25, -0.25, 0.75, -0.04, -0.06]),
                               [0.3, -0.2, 0.8, 0.0, -0.1])
    assert terrain.local_height(_profile_from([0.25, 0.25]), [0.0]) == pytest.approx(0.3)
    assert terrain.local_height(_profile_from([-0.25, -0.25]), [1.0]) == pytest.approx(-0.2)


def test_local_height_is_quantized():
    profile = terrain.generate(9, TerrainParams(), length_m=10.0)
    values = [terrain.local_height(profile, [x]) for x in np.linspace(-1.0, 7.0, 60)]
    np.testing.assert_allclose(np.round(np.array(values) * 10.0), np.array(values) * 10.0, atol=1e-9)


def test_csv_export(tmp_path):
    profile = terrain.generate(2, length_m=1.0, resolution=0.25)
    path = profile.export_csv(str(tmp_path / "terrain.csv"))
    frame = pd.read_csv(path)
    assert list(frame.columns) == ["x", "height"]
    assert len(frame) == 5
    np.testing.assert_allclose(frame["height"], profile.heights, atol=1e-8)
