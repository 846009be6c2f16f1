import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import finite_difference_gradient, kink_free
from photocal.errors import DomainError, EmptyResidualError, UndefinedEnergyError
from photocal.geometry import PinholeCamera, PoseSE3
from photocal.photometry import CalibrationSnapshot, IrradianceImage
from photocal.pose import (
    PATTERN,
    PoseConfig,
    PyramidContext,
    ResidualStats,
    SceneObservation,
    energy_from_residuals,
    energy_gradient,
    geometric_residuals,
    huber,
    huber_derivative,
    joint_energy,
    optimize_pose,
    pair_observation,
    perturb,
    photometric_residuals,
    utility_k,
)

CAM = PinholeCamera(140.0, 140.0, 79.5, 59.5, 160, 120)


@pytest.fixture(scope="module")
def truth(scene):
    return CalibrationSnapshot(scene.response, scene.vignette, frozen=True)


@pytest.fixture(scope="module")
def pair(scene, frames, truth):
    i, j = 40, 41
    return pair_observation(scene, frames[i], frames[j], truth), scene.relative_pose(i, j)


def textured(seed=0):
    rng = np.random.default_rng(seed)
    from scipy.ndimage import gaussian_filter

    v = gaussian_filter(rng.uniform(0, 255, (120, 160)), 2.0)
    return IrradianceImage(v, np.ones_like(v, bool))


def self_observation(n=50, seed=0):
    img = textured(seed)
    rng = np.random.default_rng(seed)
    pts = rng.uniform(10, [150, 110], (n, 2))
    idp = rng.uniform(0.3, 0.6, n)
    return SceneObservation(CAM, img, img, pts, idp, pts[:20], idp[:20], pts[:20])


# -- utility weight ---------------------------------------------------------------


def test_k_midpoint():
    assert utility_k(PyramidContext(0, 30)) == 2.5


def test_k_coarse_level():
    assert utility_k(PyramidContext(2, 30)) == pytest.approx(5 * np.exp(-4) / 2, abs=1e-15)
    # the quoted figure is rounded in its last digit; exact value is 0.0457891
    assert utility_k(PyramidContext(2, 30)) == pytest.approx(0.045790, abs=2e-6)


def test_k_few_matches():
    assert utility_k(PyramidContext(0, 2)) == pytest.approx(5 / (1 + np.exp(7)), abs=1e-15)
    assert utility_k(PyramidContext(0, 2)) == pytest.approx(0.0045553, abs=5e-8)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 6), st.integers(0, 200))
def test_k_bounds_and_monotonicity(level, n):
    k = utility_k(PyramidContext(level, n))
    assert 0 < k <= 5 * np.exp(-2 * level)
    if n < 120:  # beyond this the sigmoid saturates in double precision
        assert k < 5 * np.exp(-2 * level)
        assert utility_k(PyramidContext(level, n + 1)) > k
    assert utility_k(PyramidContext(level + 1, n)) < k


def test_context_validation():
    with pytest.raises(DomainError):
        PyramidContext(-1, 3)
    with pytest.raises(DomainError):
        PyramidContext(0, -1)


# -- Huber and energy -------------------------------------------------------------


def test_huber_quadratic_inside():
    r = np.linspace(-3, 3, 61)
    np.testing.assert_array_equal(huber(r, 3.0), 0.5 * r * r)


def test_huber_c1_at_threshold():
    d, eps = 2.0, 1e-7
    assert huber(d - eps, d) == pytest.approx(huber(d + eps, d), abs=1e-6)
    left = (huber(d, d) - huber(d - eps, d)) / eps
    right = (huber(d + eps, d) - huber(d, d)) / eps
    assert left == pytest.approx(right, abs=1e-6) and right == pytest.approx(d, abs=1e-6)
    assert huber_derivative(5.0, d) == d and huber_derivative(-5.0, d) == -d


def test_energy_zero_residuals():
    stats = ResidualStats(8, 4, 1.0, 1.0)
    assert energy_from_residuals(np.zeros(8), np.zeros((2, 2)), stats, 2.5, 9.0, 3.0) == 0.0


def test_energy_single_residual_at_threshold():
    stats = ResidualStats(1, 0, 1.0, 1.0)
    assert energy_from_residuals([9.0], [], stats, 2.5, 9.0, 3.0) == pytest.approx(81 / 2, abs=1e-12)


def test_energy_linear_in_k():
    rng = np.random.default_rng(1)
    ep, eg = rng.normal(0, 5, 40), rng.normal(0, 2, (10, 2))
    stats = ResidualStats(40, 20, 4.0, 1.5)
    photo = energy_from_residuals(ep, np.zeros((10, 2)), stats, 0.0, 9.0, 3.0)
    e1 = energy_from_residuals(ep, eg, stats, 1.3, 9.0, 3.0)
    e2 = energy_from_residuals(ep, eg, stats, 2.6, 9.0, 3.0)
    assert e2 - photo == pytest.approx(2 * (e1 - photo), rel=1e-14)


def test_energy_permutation_invariant():
    rng = np.random.default_rng(2)
    ep, eg = rng.normal(0, 12, 64), rng.normal(0, 4, (16, 2))
    stats = ResidualStats(64, 32, 20.0, 3.0)
    a = energy_from_residuals(ep, eg, stats, 0.7, 9.0, 3.0)
    b = energy_from_residuals(rng.permutation(ep), rng.permutation(eg), stats, 0.7, 9.0, 3.0)
    assert a == pytest.approx(b, rel=1e-14)


def test_energy_count_checks():
    with pytest.raises(UndefinedEnergyError):
        energy_from_residuals([], [], ResidualStats(0, 0, 1.0, 1.0), 1.0, 9.0, 3.0)
    with pytest.raises(DomainError):
        energy_from_residuals([1.0, 2.0], [], ResidualStats(3, 0, 1.0, 1.0), 1.0, 9.0, 3.0)
    with pytest.raises(DomainError):
        ResidualStats(2, 0, 0.0, 1.0)


# -- residuals --------------------------------------------------------------------


def test_self_comparison_zero_residuals():
    obs = self_observation()
    rp = photometric_residuals(obs, PoseSE3.identity())
    assert len(rp.values) == 50 * len(PATTERN)
    np.testing.assert_allclose(rp.values, 0, atol=1e-9)
    np.testing.assert_allclose(geometric_residuals(obs, PoseSE3.identity()).values, 0, atol=1e-12)


def test_residuals_at_ground_truth(pair):
    obs, gt = pair
    rp = photometric_residuals(obs, gt)
    assert np.sqrt(np.mean(rp.values**2)) <= 2.0


def test_all_points_out_of_view():
    obs = self_observation()
    away = PoseSE3(np.eye(3), np.array([50.0, 0.0, 0.0]))
    with pytest.raises(EmptyResidualError):
        photometric_residuals(obs, away)


def test_geometric_zero_at_exact_projection(pair):
    obs, gt = pair
    X = obs.camera.backproject(obs.keypoints_ref, obs.keypoint_inverse_depth)
    exact = dataclasses.replace(obs, keypoints_obs=obs.camera.project(gt.apply(X)))
    np.testing.assert_allclose(geometric_residuals(exact, gt).values, 0, atol=1e-9)


def test_geometric_disparity():
    # camera moves by +d along x: points shift by -fx * d * inverse_depth
    obs = self_observation()
    d = 0.05
    r = geometric_residuals(obs, PoseSE3(np.eye(3), np.array([-d, 0.0, 0.0]))).values
    np.testing.assert_allclose(r[:, 0], -CAM.fx * d * obs.keypoint_inverse_depth, rtol=1e-12)
    np.testing.assert_allclose(r[:, 1], 0, atol=1e-12)


def test_keypoint_behind_camera_counted():
    obs = self_observation()
    kd = obs.keypoint_inverse_depth.copy()
    kd[:3] = 100.0  # depth 0.01, behind the camera after moving back by 0.02
    obs = dataclasses.replace(obs, keypoint_inverse_depth=kd)
    res = geometric_residuals(obs, PoseSE3(np.eye(3), np.array([0.0, 0.0, -0.02])))
    assert res.dropped == 3 and len(res.values) == 17


def test_geometric_needs_keypoints():
    obs = dataclasses.replace(
        self_observation(), keypoints_ref=np.zeros((0, 2)), keypoint_inverse_depth=np.zeros(0), keypoints_obs=np.zeros((0, 2))
    )
    with pytest.raises(DomainError):
        geometric_residuals(obs, PoseSE3.identity())


def test_observation_validation():
    img = textured()
    with pytest.raises(DomainError):
        SceneObservation(CAM, img, img, np.ones((3, 2)), np.array([1.0, -1.0, 1.0]))
    with pytest.raises(DomainError):
        SceneObservation(CAM, img, img, np.ones((3, 2)), np.ones(2))


# -- gradient and optimization ----------------------------------------------------


@pytest.mark.parametrize("level", [0, 2])
def test_gradient_matches_finite_differences(pair, level):
    obs, gt = pair
    pose = PoseSE3.exp([0.01, 0.005, -0.003, 0.004, -0.002, 0.003]) @ gt
    o = kink_free(obs.at_level(level), pose)
    n_p = len(photometric_residuals(o, pose).values)
    stats = ResidualStats(n_p, 2 * len(o.keypoints_ref), 4.0, 0.5)
    ctx = PyramidContext(level, 40)
    g = energy_gradient(o, pose, stats, ctx)
    fd = finite_difference_gradient(lambda T: joint_energy(o, T, stats, ctx), pose)
    np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-5 * np.abs(fd).max())


def test_optimum_start_is_kept():
    obs = self_observation()
    res = optimize_pose(obs, PoseSE3.identity())
    assert res.report.converged
    np.testing.assert_allclose(res.pose.matrix(), np.eye(4), atol=1e-9)


def test_start_at_ground_truth_stays_close(pair, scene):
    obs, gt = pair
    res = optimize_pose(obs, gt)
    err = res.pose @ gt.inverse()
    assert err.rotation_deg() < 0.2
    assert np.linalg.norm(err.t) < 0.01 * np.mean(scene.depth_map(40))


def test_basin_stability(pair):
    obs, gt = pair
    a = optimize_pose(obs, gt).pose
    b = optimize_pose(obs, PoseSE3.exp([0.002, -0.001, 0.001, 0.001, 0.0005, -0.001]) @ gt).pose
    d = a @ b.inverse()
    assert d.rotation_deg() < 0.01 and np.linalg.norm(d.t) < 1e-3


def test_recovers_perturbed_pose(pair, scene):
    obs, gt = pair
    depth = float(np.mean(scene.depth_map(40)))
    init = perturb(gt, np.random.default_rng(3), 2.0, 0.05 * depth)
    res = optimize_pose(obs, init)
    err = res.pose @ gt.inverse()
    assert res.report.converged
    assert err.rotation_deg() < 0.2 and np.linalg.norm(err.t) < 0.01 * depth


def test_report_format(pair):
    obs, gt = pair
    res = optimize_pose(obs, gt, PoseConfig(levels=2))
    lines = res.report.text().splitlines()
    assert lines[0].startswith("level 1 iter 0 energy ")
    assert all(len(line.split()) == 10 for line in lines[:-1])
    assert lines[-1].startswith("converged")


def test_rejects_non_finite_start():
    with pytest.raises(DomainError):
        optimize_pose(self_observation(), PoseSE3(np.eye(3), np.array([np.nan, 0, 0])))


def test_perturb_magnitudes():
    p = perturb(PoseSE3.identity(), np.random.default_rng(0), 2.0, 0.1)
    assert p.rotation_deg() == pytest.approx(2.0, abs=1e-9)
    assert np.linalg.norm(PoseSE3.exp(p.log()).log()[:3]) > 0
