import numpy as np
import pytest
from scipy import ndimage

from photocal.errors import DataError
from photocal.photometry import ExposureRecord, Frame, normalized_radius
from photocal.tracker import (
    SAME_RADIUS,
    FeatureTracker,
    Observation,
    TrackSet,
    detect_corners,
    extract_pairs,
    observe,
    track_points,
)

H, W = 120, 160


def smooth_texture(dx=0.0, dy=0.0):
    """Analytic texture sampled at ``(x - dx, y - dy)``: an exact translation."""
    y, x = np.mgrid[0:H, 0:W].astype(np.float64)
    x, y = x - dx, y - dy
    v = 128 + 50 * np.sin(x / 5.0) * np.cos(y / 7.0) + 30 * np.sin((x + 2 * y) / 9.0) + 20 * np.cos((x - y) / 4.0)
    return np.clip(v, 0, 255)


def as_frame(img, fid=0, e=1.0):
    return Frame(np.round(img).astype(np.uint8), ExposureRecord(fid, 0.1 * fid, e))


# -- corners ------------------------------------------------------------------------


def test_constant_frame_has_no_corners():
    assert len(detect_corners(as_frame(np.full((H, W), 90.0)), 50)) == 0


def test_checkerboard_corners():
    y, x = np.mgrid[0:H, 0:W]
    board = np.where(((x // 16) + (y // 16)) % 2 == 0, 60.0, 190.0)
    pts = detect_corners(as_frame(board), 200)
    assert len(pts) > 20
    # inner corners sit between pixels 16k-1 and 16k
    true = np.array([(16 * a - 0.5, 16 * b - 0.5) for a in range(1, (W - 1) // 16 + 1) for b in range(1, (H - 1) // 16 + 1)])
    d = np.linalg.norm(pts[:, None, :] - true[None], axis=2).min(axis=1)
    assert d.max() <= 1.0


def test_corners_deterministic_and_ordered():
    f = as_frame(smooth_texture())
    a, b = detect_corners(f, 80), detect_corners(f, 80)
    assert np.array_equal(a, b)
    assert len(a) <= 80
    gaps = np.linalg.norm(a[:, None] - a[None], axis=2) + np.eye(len(a)) * 1e9
    assert gaps.min() >= 8.0 - 1.0  # suppression radius, less sub-pixel refinement


def test_max_count_validated():
    with pytest.raises(ValueError):
        detect_corners(as_frame(smooth_texture()), 0)


# -- patch tracking -------------------------------------------------------------------


def test_zero_motion():
    f = as_frame(smooth_texture())
    pts = detect_corners(f, 60)
    res = track_points(f, f, pts)
    assert not res.lost.any()
    np.testing.assert_allclose(res.positions, pts, atol=1e-6)


def test_pure_translation():
    a, b = as_frame(smooth_texture()), as_frame(smooth_texture(dx=3.0), 1)
    pts = detect_corners(a, 60)
    pts = pts[(pts[:, 0] > 10) & (pts[:, 0] < W - 14)]
    res = track_points(a, b, pts)
    ok = ~res.lost
    assert ok.mean() > 0.9
    np.testing.assert_allclose(res.positions[ok] - pts[ok], np.tile([3.0, 0.0], (ok.sum(), 1)), atol=0.5)


def test_translation_under_exposure_change():
    a = as_frame(smooth_texture())
    b = as_frame(0.6 * smooth_texture(dx=2.0, dy=-1.0), 1)
    pts = detect_corners(a, 60)
    pts = pts[(pts[:, 0] > 10) & (pts[:, 0] < W - 12) & (pts[:, 1] > 10) & (pts[:, 1] < H - 10)]
    res = track_points(a, b, pts)
    ok = ~res.lost
    assert ok.mean() > 0.8
    np.testing.assert_allclose(res.positions[ok] - pts[ok], np.tile([2.0, -1.0], (ok.sum(), 1)), atol=0.5)


def test_out_of_view_all_lost():
    img = smooth_texture()
    a = as_frame(img)
    b = as_frame(ndimage.shift(img, (0, W), order=0, cval=0.0), 1)
    res = track_points(a, b, detect_corners(a, 60))
    assert res.lost.all()


def test_forward_backward_consistency():
    a, b = as_frame(smooth_texture()), as_frame(smooth_texture(dx=1.7, dy=0.8), 1)
    pts = detect_corners(a, 60)
    fwd = track_points(a, b, pts)
    bwd = track_points(b, a, fwd.positions)
    ok = ~(fwd.lost | bwd.lost)
    assert ok.sum() > 30
    assert np.linalg.norm(bwd.positions[ok] - pts[ok], axis=1).max() <= 0.5


def test_feature_tracker_on_rendered_sequence(scene, frames):
    tr = FeatureTracker(max_count=100)
    for f in frames[:15]:
        tracks = tr.process(f)
    long = [t for t in tracks.tracks.values() if len(t) >= 5]
    assert len(long) > 30
    # tracked positions agree with the true projection of the first observation
    errs = []
    for obs in long[:30]:
        X, _ = scene.intersect(obs[0].frame_id, np.array([[obs[0].x, obs[0].y]]))
        p, _ = scene.project_world(obs[-1].frame_id, X)
        errs.append(np.linalg.norm(p[0] - [obs[-1].x, obs[-1].y]))
    assert np.median(errs) < 0.5


# -- observations and pairs -----------------------------------------------------------


def test_observation_samples():
    f = as_frame(smooth_texture())
    o = observe(f, 40.25, 30.5)
    assert o.intensity == pytest.approx(
        0.25 * 0.5 * f.image[30, 41] + 0.75 * 0.5 * f.image[30, 40] + 0.25 * 0.5 * f.image[31, 41] + 0.75 * 0.5 * f.image[31, 40]
    )
    assert o.radius == pytest.approx(normalized_radius(40.25, 30.5, (H, W)))
    with pytest.raises(DataError):
        observe(f, -1.0, 3.0)


def test_saturated_stencil_is_nan():
    img = np.full((H, W), 100.0)
    img[30, 41] = 255
    assert np.isnan(observe(as_frame(img), 40.5, 30.5).intensity)


def obs(fid, m, r):
    return Observation(fid, 0.0, 0.0, float(m), float(r))


EXP = {0: 1.0, 1: 2.0, 2: 4.0}


def test_constant_radius_pair_included():
    ts = TrackSet({0: [obs(0, 100, 0.4), obs(1, 150, 0.4)]})
    p = extract_pairs(ts, EXP, "same-radius")
    assert len(p) == 1 and p[0].m1 == 100 and p[0].e2 == 2.0


def test_large_radius_change_excluded():
    ts = TrackSet({0: [obs(0, 100, 0.2), obs(1, 150, 0.5)]})
    assert len(extract_pairs(ts, EXP, "same-radius")) == 0
    assert len(extract_pairs(ts, EXP, "radial-motion")) == 1


def test_pair_count_matches_brute_force():
    rng = np.random.default_rng(0)
    ts = TrackSet()
    for tid in range(40):
        r0 = rng.uniform(0, 1)
        for fid in range(3):
            ts.add(tid, obs(fid, rng.uniform(0, 255), np.clip(r0 + rng.normal(0, 0.03), 0, 1)))
    for mode in ("same-radius", "radial-motion"):
        expected = 0
        for t in ts.tracks.values():
            for a in range(3):
                for b in range(a + 1, 3):
                    o1, o2 = t[a], t[b]
                    sat = all(5 <= o.intensity <= 250 for o in (o1, o2))
                    near = abs(o1.radius - o2.radius) < SAME_RADIUS
                    expected += sat and (near if mode == "same-radius" else not near)
        p = extract_pairs(ts, EXP, mode)
        assert len(p) == expected
        assert np.all((p.m1 >= 5) & (p.m1 <= 250) & (p.m2 >= 5) & (p.m2 <= 250))
        dr = np.abs(p.r1 - p.r2)
        assert np.all(dr < SAME_RADIUS) if mode == "same-radius" else np.all(dr >= SAME_RADIUS)


def test_missing_exposure_is_data_error():
    ts = TrackSet({0: [obs(0, 100, 0.4), obs(7, 150, 0.4)]})
    with pytest.raises(DataError, match="7"):
        extract_pairs(ts, EXP)
    # reported even when the pair would be filtered out
    ts = TrackSet({0: [obs(0, 100, 0.1), obs(7, 150, 0.9)]})
    with pytest.raises(DataError, match="7"):
        extract_pairs(ts, EXP)


def test_records_accepted_as_exposures():
    ts = TrackSet({0: [obs(0, 100, 0.4), obs(2, 150, 0.4)]})
    p = extract_pairs(ts, [ExposureRecord(0, 0.0, 1.5), ExposureRecord(2, 0.2, 3.0)])
    assert p.ratio[0] == 0.5


def test_track_frames_must_increase():
    ts = TrackSet()
    ts.add(1, obs(3, 10, 0.1))
    with pytest.raises(DataError):
        ts.add(1, obs(3, 10, 0.1))
