import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from photocal.errors import AlignmentError, DomainError
from photocal.evaluation import (
    Similarity,
    Trajectory,
    align_trajectories,
    associate,
    ate_rmse,
    cumulative_error_curve,
    drift_errors,
    evaluate_run,
)
from photocal.geometry import PoseSE3


def wander(n=60, seed=0, noise=0.0):
    """Smooth 3-D path with slowly varying orientation."""
    rng = np.random.default_rng(seed)
    s = np.linspace(0, 2 * np.pi, n)
    pos = np.stack([np.cos(s), np.sin(2 * s) * 0.6, 0.3 * s], axis=1) + rng.normal(0, noise, (n, 3))
    rots = Rotation.from_rotvec(np.stack([0.1 * np.sin(s), 0.2 * np.cos(s), 0.5 * s], axis=1)).as_matrix()
    return Trajectory(np.arange(n) * 0.05, tuple(PoseSE3(R, p) for R, p in zip(rots, pos)))


def random_similarity(rng, scale=True):
    R = Rotation.random(random_state=rng).as_matrix()
    return Similarity(R, rng.normal(0, 3, 3), float(rng.uniform(0.5, 2.0)) if scale else 1.0)


def shifted(traj, offset):
    return Trajectory(traj.timestamps, tuple(PoseSE3(p.R, p.t + offset) for p in traj.poses))


def brute_rmse(a, b):
    total = 0.0
    for p, q in zip(a.poses, b.poses):
        total += sum((x - y) ** 2 for x, y in zip(p.t, q.t))
    return (total / len(a)) ** 0.5


# -- alignment --------------------------------------------------------------------


def test_identity_alignment():
    ref = wander()
    T, aligned = align_trajectories(ref, ref, "rigid")
    np.testing.assert_allclose(T.R, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(T.t, 0, atol=1e-12)
    assert ate_rmse(aligned, ref) < 1e-12


def test_translation_recovered():
    ref = wander()
    T, aligned = align_trajectories(shifted(ref, [1.0, 0.0, 0.0]), ref, "rigid")
    np.testing.assert_allclose(T.t, [-1.0, 0.0, 0.0], atol=1e-12)
    assert ate_rmse(aligned, ref) < 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_random_similarity_inverted(seed):
    ref = wander(seed=seed, noise=0.05)
    S = random_similarity(np.random.default_rng(seed))
    _, aligned = align_trajectories(ref.transformed(S), ref, "similarity")
    assert ate_rmse(aligned, ref) < 1e-9


def test_collinear_rejected():
    n = 20
    line = Trajectory(np.arange(n) * 0.1, tuple(PoseSE3(np.eye(3), [0.1 * i, 0, 0]) for i in range(n)))
    with pytest.raises(AlignmentError, match="collinear"):
        align_trajectories(line, line)


def test_too_few_associations():
    ref = wander(10)
    far = Trajectory(ref.timestamps + 100.0, ref.poses)
    with pytest.raises(AlignmentError):
        align_trajectories(far, ref)
    with pytest.raises(AlignmentError):
        align_trajectories(ref.subset([0, 5]), ref)


def test_unknown_mode():
    with pytest.raises(DomainError):
        align_trajectories(wander(), wander(), "affine")


def test_association_tolerance():
    ref = wander(10)
    est = Trajectory(ref.timestamps + np.r_[0.01, 0.03, np.zeros(8)], ref.poses)
    i, j = associate(est, ref)
    assert 1 not in i and 0 in i and len(i) == 9
    np.testing.assert_array_equal(j, i)


def test_trajectory_invariants():
    with pytest.raises(DomainError):
        Trajectory([0.0, 0.0], (PoseSE3.identity(), PoseSE3.identity()))
    with pytest.raises(DomainError):
        Trajectory([0.0], ())


# -- absolute trajectory error ------------------------------------------------------


def test_ate_identical():
    assert ate_rmse(wander(), wander()) == 0.0


def test_ate_constant_offset():
    ref = wander()
    d = np.array([0.3, -0.4, 1.2])
    assert ate_rmse(shifted(ref, d), ref) == pytest.approx(np.linalg.norm(d), abs=1e-12)


def test_ate_matches_direct_summation():
    ref, est = wander(seed=1), wander(seed=2, noise=0.1)
    assert ate_rmse(est, ref) == pytest.approx(brute_rmse(est, ref), rel=1e-12)


def test_ate_invariant_under_common_rigid_transform():
    rng = np.random.default_rng(4)
    ref, est = wander(seed=3), wander(seed=5, noise=0.1)
    T = random_similarity(rng, scale=False)
    assert ate_rmse(est.transformed(T), ref.transformed(T)) == pytest.approx(ate_rmse(est, ref), abs=1e-9)


def test_alignment_is_optimal():
    rng = np.random.default_rng(6)
    ref, est = wander(seed=7), wander(seed=8, noise=0.2)
    T, aligned = align_trajectories(est, ref, "rigid")
    best = ate_rmse(aligned, ref)
    for _ in range(200):
        d = PoseSE3.exp(rng.normal(0, 0.05, 6))
        other = Similarity(d.R @ T.R, d.R @ T.t + d.t)
        assert ate_rmse(est.transformed(other), ref) >= best - 1e-12


# -- drift --------------------------------------------------------------------------


def test_drift_identical():
    ref = wander()
    np.testing.assert_allclose(drift_errors(ref, ref), 0, atol=1e-12)


def test_drift_final_rotation():
    ref = wander()
    Rz = Rotation.from_euler("z", 5, degrees=True).as_matrix()
    last = ref.poses[-1]
    est = Trajectory(ref.timestamps, ref.poses[:-1] + (PoseSE3(last.R @ Rz, last.t),))
    rot, trans = drift_errors(est, ref)
    assert rot == pytest.approx(5.0, abs=1e-6)
    assert trans < 1e-9


def test_drift_scaled_estimate():
    ref = wander()
    est = Trajectory(ref.timestamps, tuple(PoseSE3(p.R, 1.02 * p.t) for p in ref.poses))
    rot, trans = drift_errors(est, ref, "similarity")
    assert rot < 1e-6 and trans < 1e-6


def test_drift_grows_with_accumulated_error():
    ref = wander(80)
    n = len(ref)
    bent = tuple(PoseSE3.exp([0, 0, 0, 0, 0, 0.002 * i]) @ p for i, p in enumerate(ref.poses))
    rot, trans = drift_errors(Trajectory(ref.timestamps, bent), ref, "rigid")
    assert rot > 0.05 and trans > 0
    assert rot < np.degrees(0.002 * n)


def test_evaluate_run_zero_row():
    ref = wander()
    m = evaluate_run("x", ref, ref)
    assert m.run == "x"
    assert m.ate_rmse < 1e-12 and m.rot_drift_deg < 1e-6 and m.trans_drift_pct < 1e-9


def test_cumulative_curve():
    curve = cumulative_error_curve([0.1, 0.5, 0.5, 2.0], [0.0, 0.1, 0.5, 1.0, 3.0])
    np.testing.assert_array_equal(curve, [0.0, 0.25, 0.75, 0.75, 1.0])
    assert np.all(cumulative_error_curve([], [1.0, 2.0]) == 0)
