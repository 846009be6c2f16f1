import dataclasses

import numpy as np
import pytest

from photocal.errors import GenerationError
from photocal.photometry import radius_map
from photocal.synth import SceneSpec, generate_scene, quantize, render_frame


def flat_scene(**kw):
    """Constant radiance 0.5 (texture pinned to its midpoint)."""
    spec = SceneSpec(response="identity", vignette=(0, 0, 0), noise_sigma=0.0, radiance_floor=0.0, n_frames=3, **kw)
    s = generate_scene(spec, check_saturation=False)
    return dataclasses.replace(
        s, _tables=[np.full_like(t, 0.5) for t in s._tables], radiance_scale=1.0, exposures=np.ones(3)
    )


def test_quantize_rounds_half_away_from_zero():
    np.testing.assert_array_equal(quantize([127.5, 127.49, 0.5, -0.4, 254.5, 300]), [128, 127, 1, 0, 255, 255])


def test_half_irradiance_renders_128():
    s = flat_scene()
    assert np.all(s.irradiance(0) == 0.5)
    assert np.all(render_frame(s, 0, noise=False).image == 128)


def test_doubling_exposure_doubles_intensity():
    s = flat_scene()
    for e in (0.1, 0.25, 0.37):
        s1 = dataclasses.replace(s, exposures=np.full(3, e))
        s2 = dataclasses.replace(s, exposures=np.full(3, 2 * e))
        a = render_frame(s1, 0, noise=False).image.astype(int)
        b = render_frame(s2, 0, noise=False).image.astype(int)
        assert np.abs(b - 2 * a).max() <= 1


def test_corner_to_center_ratio_follows_vignette():
    s = flat_scene()
    s = dataclasses.replace(s, vignette=type(s.vignette)(-0.3, 0, 0))
    img = render_frame(s, 0, noise=False).image.astype(float)
    r = radius_map(s.shape)
    corner = img[r == r.max()][0]
    h, w = s.shape
    center = img[h // 2, w // 2]
    # each value carries at most half a level of rounding
    assert corner / center == pytest.approx(0.7, abs=1.0 / center)


def test_same_seed_same_scene():
    a = generate_scene(SceneSpec(seed=11, n_frames=8))
    b = generate_scene(SceneSpec(seed=11, n_frames=8))
    np.testing.assert_array_equal(a.exposures, b.exposures)
    for i in range(8):
        np.testing.assert_array_equal(render_frame(a, i).image, render_frame(b, i).image)
        assert np.array_equal(a.poses[i].matrix(), b.poses[i].matrix())


def test_different_seed_different_texture():
    a = render_frame(generate_scene(SceneSpec(seed=1, n_frames=2)), 0, noise=False).image
    b = render_frame(generate_scene(SceneSpec(seed=2, n_frames=2)), 0, noise=False).image
    assert not np.array_equal(a, b)


def test_constant_exposure_range():
    s = generate_scene(SceneSpec(exposure_range=(1.0, 1.0), n_frames=50))
    assert np.all(s.exposures == 1.0)


def test_schedule_spans_range(scene):
    lo, hi = scene.spec.exposure_range
    assert scene.exposures.min() >= lo and scene.exposures.max() <= hi
    assert scene.exposures.max() / scene.exposures.min() > 6


def test_default_scene_mostly_unsaturated(scene, frames):
    for i, f in enumerate(frames):
        assert np.mean(scene.irradiance(i) <= 1.0) >= 0.95
        assert np.mean(f.image < 255) >= 0.95


def test_saturation_violation_reported():
    with pytest.raises(GenerationError, match="below saturation"):
        generate_scene(SceneSpec(peak_irradiance=3.0, n_frames=40))


def test_render_index_checked(scene):
    with pytest.raises(IndexError):
        render_frame(scene, scene.n_frames)


def test_ground_truth_satisfies_model_invariants(scene):
    assert np.all(np.diff(scene.response.lut) >= 0)
    assert scene.response.lut[0] == 0 and scene.response.lut[-1] == 1
    assert scene.vignette(1.0) == pytest.approx(0.6)


def test_relative_pose_convention(scene):
    i, j = 10, 14
    uv = np.array([[40.0, 30.0], [120.0, 90.0]])
    X, _ = scene.intersect(i, uv)
    Xi = scene.poses[i].inverse().apply(X)
    Xj = scene.poses[j].inverse().apply(X)
    np.testing.assert_allclose(scene.relative_pose(i, j).apply(Xi), Xj, atol=1e-12)
