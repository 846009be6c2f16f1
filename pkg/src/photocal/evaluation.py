"""Trajectory alignment and error metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import AlignmentError, DomainError
from .geometry import PoseSE3, rotation_angle

ASSOCIATION_TOLERANCE = 0.02  # seconds


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Timestamped poses (camera to world), strictly increasing in time."""

    timestamps: np.ndarray
    poses: tuple

    def __post_init__(self):
        ts = np.array(self.timestamps, dtype=np.float64).reshape(-1)
        poses = tuple(self.poses)
        if len(ts) != len(poses):
            raise DomainError("timestamp and pose counts differ")
        if not np.all(np.isfinite(ts)):
            raise DomainError("timestamps must be finite")
        if np.any(np.diff(ts) <= 0):
            raise DomainError("timestamps must be strictly increasing")
        ts.setflags(write=False)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "poses", poses)

    def __len__(self) -> int:
        return len(self.poses)

    @property
    def positions(self) -> np.ndarray:
        return np.array([p.t for p in self.poses]).reshape(-1, 3)

    def path_length(self) -> float:
        return float(np.sum(np.linalg.norm(np.diff(self.positions, axis=0), axis=1)))

    def transformed(self, T: "Similarity") -> "Trajectory":
        return Trajectory(self.timestamps, tuple(T.apply_pose(p) for p in self.poses))

    def subset(self, idx) -> "Trajectory":
        idx = np.asarray(idx, dtype=np.intp)
        return Trajectory(self.timestamps[idx], tuple(self.poses[i] for i in idx))


@dataclass(frozen=True)
class Similarity:
    """``x -> s R x + t``."""

    R: np.ndarray
    t: np.ndarray
    s: float = 1.0

    @classmethod
    def identity(cls) -> "Similarity":
        return cls(np.eye(3), np.zeros(3), 1.0)

    def apply(self, X) -> np.ndarray:
        return self.s * np.asarray(X, dtype=np.float64) @ self.R.T + self.t

    def apply_pose(self, pose: PoseSE3) -> PoseSE3:
        return PoseSE3(self.R @ pose.R, self.apply(pose.t))


def associate(a: Trajectory, b: Trajectory, tolerance: float = ASSOCIATION_TOLERANCE):
    """Index pairs ``(i, j)`` matching each sample of ``a`` to the nearest
    sample of ``b`` when their timestamps differ by at most ``tolerance``."""
    if len(b) == 0 or len(a) == 0:
        return np.zeros(0, np.intp), np.zeros(0, np.intp)
    tb = b.timestamps
    if len(tb) == 1:
        j = np.zeros(len(a), np.intp)
    else:
        j = np.clip(np.searchsorted(tb, a.timestamps), 1, len(tb) - 1)
        left = j - 1
        j = np.where(np.abs(tb[left] - a.timestamps) <= np.abs(tb[j] - a.timestamps), left, j)
    keep = np.abs(tb[j] - a.timestamps) <= tolerance
    return np.nonzero(keep)[0], j[keep]


def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool) -> Similarity:
    """Least-squares ``dst ~ s R src + t``."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if len(src) < 3:
        raise AlignmentError(f"need at least 3 associated samples, got {len(src)}")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    sv = np.linalg.svd(xs, compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-9 * sv[0]:
        raise AlignmentError("associated positions are collinear")
    C = xd.T @ xs / len(src)
    U, D, Vt = np.linalg.svd(C)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = float(np.trace(np.diag(D) @ S) / np.mean(np.sum(xs**2, axis=1))) if with_scale else 1.0
    return Similarity(R, mu_d - s * R @ mu_s, s)


def align_trajectories(
    estimate: Trajectory,
    reference: Trajectory,
    mode: str = "rigid",
    tolerance: float = ASSOCIATION_TOLERANCE,
) -> tuple[Similarity, Trajectory]:
    """Closed-form alignment of ``estimate`` onto ``reference``.

    ``mode`` is ``"rigid"`` or ``"similarity"`` (adds scale, for monocular
    runs). Returns the transform and the transformed estimate.
    """
    if mode not in ("rigid", "similarity"):
        raise DomainError(f"unknown alignment mode {mode!r}")
    i, j = associate(estimate, reference, tolerance)
    T = umeyama(estimate.positions[i], reference.positions[j], mode == "similarity")
    return T, estimate.transformed(T)


def ate_rmse(aligned: Trajectory, reference: Trajectory, tolerance: float = ASSOCIATION_TOLERANCE) -> float:
    """Root mean square position difference over associated samples."""
    i, j = associate(aligned, reference, tolerance)
    if len(i) == 0:
        raise AlignmentError("no samples associate within the timestamp tolerance")
    d = aligned.positions[i] - reference.positions[j]
    return float(np.sqrt(np.mean(np.sum(d * d, axis=1))))


def _pose_alignment(src: Sequence[PoseSE3], dst: Sequence[PoseSE3], with_scale: bool) -> Similarity:
    """Alignment whose rotation is the chordal mean of ``R_dst R_src^T``;
    scale and translation then fit the positions."""
    U, _, Vt = np.linalg.svd(sum(b.R @ a.R.T for a, b in zip(src, dst)))
    S = np.eye(3)
    S[2, 2] = np.sign(np.linalg.det(U @ Vt))
    R = U @ S @ Vt
    ps = np.array([a.t for a in src])
    pd = np.array([b.t for b in dst])
    mu_s, mu_d = ps.mean(axis=0), pd.mean(axis=0)
    xs, xd = (ps - mu_s) @ R.T, pd - mu_d
    s = 1.0
    if with_scale:
        denom = float(np.sum(xs * xs))
        if denom <= 0:
            raise AlignmentError("scale is undetermined: start segment has no spatial extent")
        s = float(np.sum(xs * xd)) / denom
    return Similarity(R, mu_d - s * R @ mu_s, s)


def drift_errors(
    estimate: Trajectory,
    reference: Trajectory,
    mode: str = "similarity",
    segment: int | None = None,
    tolerance: float = ASSOCIATION_TOLERANCE,
) -> tuple[float, float]:
    """Accumulated drift as ``(rotation degrees, translation percent)``.

    The estimate is aligned on its first ``segment`` associated samples
    (default: a fifth of them, at least 3), using orientations for the
    rotation so that short, nearly straight segments still fix it. Drift is
    the remaining discrepancy of the last associated pose: its rotation
    angle, and its position error as a percentage of the reference path
    length.
    """
    if mode not in ("rigid", "similarity"):
        raise DomainError(f"unknown alignment mode {mode!r}")
    i, j = associate(estimate, reference, tolerance)
    if len(i) < 3:
        raise AlignmentError(f"need at least 3 associated samples, got {len(i)}")
    n = segment if segment is not None else max(3, len(i) // 5)
    n = min(max(n, 3), len(i))
    T = _pose_alignment(
        [estimate.poses[k] for k in i[:n]], [reference.poses[k] for k in j[:n]], mode == "similarity"
    )
    end = T.apply_pose(estimate.poses[i[-1]])
    ref = reference.poses[j[-1]]
    rot = float(np.degrees(rotation_angle(ref.R.T @ end.R)))
    length = reference.subset(j).path_length()
    if length <= 0:
        raise AlignmentError("reference path has zero length")
    trans = float(100.0 * np.linalg.norm(end.t - ref.t) / length)
    return rot, trans


class RunMetrics(NamedTuple):
    run: str
    ate_rmse: float
    rot_drift_deg: float
    trans_drift_pct: float


def evaluate_run(run: str, estimate: Trajectory, reference: Trajectory, mode: str = "similarity") -> RunMetrics:
    _, aligned = align_trajectories(estimate, reference, mode)
    rot, trans = drift_errors(estimate, reference, mode)
    return RunMetrics(run, ate_rmse(aligned, reference), rot, trans)


def cumulative_error_curve(errors: Sequence[float], thresholds) -> np.ndarray:
    """Fraction of runs whose error is at most each threshold."""
    e = np.sort(np.asarray(errors, dtype=np.float64))
    t = np.asarray(thresholds, dtype=np.float64)
    if len(e) == 0:
        return np.zeros_like(t)
    return np.searchsorted(e, t, side="right") / len(e)
