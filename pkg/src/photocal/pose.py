"""Joint photometric and geometric pose refinement.

The energy for a relative pose ``T`` (reference camera to target camera) is

    e = sum rho(e_p) / (n_p var_p) + K * sum rho(e_g) / (n_g var_g)

where ``e_p`` are direct intensity residuals over an 8-point pattern around
each reference point, ``e_g`` are keypoint reprojection residuals (one entry
per image axis), ``rho`` is the half-quadratic Huber penalty and ``K`` the
utility weight from :func:`utility_k`. Counts ``n_p`` and ``n_g`` count
residual entries.

Pose increments use the left update ``exp(xi) @ T`` with ``xi = (v, w)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from .errors import EmptyResidualError, UndefinedEnergyError, DomainError
from .geometry import PinholeCamera, PoseSE3
from .photometry import CalibrationSnapshot, Frame, IrradianceImage, rectify_frame
from .synth import SyntheticScene
from .tracker import detect_corners, track_points

log = logging.getLogger(__name__)

# residual pattern around each point (x, y offsets in pixels)
PATTERN = np.array(
    [[0, -2], [-1, -1], [1, -1], [-2, 0], [0, 0], [2, 0], [-1, 1], [0, 2]], dtype=np.float64
)


@dataclass(frozen=True)
class ResidualStats:
    n_p: int
    n_g: int
    var_p: float
    var_g: float

    def __post_init__(self):
        if self.n_p < 0 or self.n_g < 0:
            raise DomainError("residual counts must be >= 0")
        if (self.n_p > 0 and not self.var_p > 0) or (self.n_g > 0 and not self.var_g > 0):
            raise DomainError("variances must be > 0 for non-empty terms")


@dataclass(frozen=True)
class PyramidContext:
    level: int
    n_inliers: int  # current inlier geometric matches

    def __post_init__(self):
        if self.level < 0 or self.n_inliers < 0:
            raise DomainError("level and inlier count must be >= 0")


@dataclass(frozen=True)
class SceneObservation:
    """Everything the pose energy needs for one reference/target pair.

    ``points`` and ``keypoints_ref`` are pixel positions in the reference
    image with their inverse depths; ``keypoints_obs`` are the matching
    positions observed in the target.
    """

    camera: PinholeCamera
    reference: IrradianceImage
    target: IrradianceImage
    points: np.ndarray
    inverse_depth: np.ndarray
    keypoints_ref: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    keypoint_inverse_depth: np.ndarray = field(default_factory=lambda: np.zeros(0))
    keypoints_obs: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        idp = np.asarray(self.inverse_depth, dtype=np.float64).reshape(-1)
        kr = np.asarray(self.keypoints_ref, dtype=np.float64).reshape(-1, 2)
        kd = np.asarray(self.keypoint_inverse_depth, dtype=np.float64).reshape(-1)
        ko = np.asarray(self.keypoints_obs, dtype=np.float64).reshape(-1, 2)
        if len(pts) != len(idp) or not (len(kr) == len(kd) == len(ko)):
            raise DomainError("point and inverse-depth arrays differ in length")
        if np.any(~(idp > 0)) or np.any(~(kd > 0)):
            raise DomainError("inverse depths must be > 0")
        if self.reference.values.shape != self.camera.shape or self.target.values.shape != self.camera.shape:
            raise DomainError("image shape does not match the camera")
        for name, arr in (("points", pts), ("inverse_depth", idp), ("keypoints_ref", kr),
                          ("keypoint_inverse_depth", kd), ("keypoints_obs", ko)):
            object.__setattr__(self, name, arr)

    def at_level(self, level: int) -> "SceneObservation":
        """The same problem on pyramid level ``level`` (2x2 averaging)."""
        if level == 0:
            return self
        s = 0.5**level
        return SceneObservation(
            self.camera.scaled(level),
            downsample(self.reference, level),
            downsample(self.target, level),
            (self.points + 0.5) * s - 0.5,
            self.inverse_depth,
            (self.keypoints_ref + 0.5) * s - 0.5,
            self.keypoint_inverse_depth,
            (self.keypoints_obs + 0.5) * s - 0.5,
        )


def downsample(img: IrradianceImage, level: int) -> IrradianceImage:
    v, ok = img.values, img.valid
    for _ in range(level):
        h, w = (v.shape[0] // 2) * 2, (v.shape[1] // 2) * 2
        v = 0.25 * (v[0:h:2, 0:w:2] + v[1:h:2, 0:w:2] + v[0:h:2, 1:w:2] + v[1:h:2, 1:w:2])
        ok = ok[0:h:2, 0:w:2] & ok[1:h:2, 0:w:2] & ok[0:h:2, 1:w:2] & ok[1:h:2, 1:w:2]
    return IrradianceImage(v, ok)


def sample(img: IrradianceImage, uv):
    """Bilinear value and gradient at ``uv``; ``ok`` is False where any
    stencil pixel is outside the image or masked."""
    uv = np.asarray(uv, dtype=np.float64)
    h, w = img.values.shape
    x, y = uv[..., 0], uv[..., 1]
    ok = np.isfinite(x) & np.isfinite(y) & (x >= 0) & (y >= 0) & (x <= w - 1) & (y <= h - 1)
    xs, ys = np.where(ok, x, 0.0), np.where(ok, y, 0.0)
    x0 = np.minimum(np.floor(xs).astype(np.intp), w - 2)
    y0 = np.minimum(np.floor(ys).astype(np.intp), h - 2)
    fx, fy = xs - x0, ys - y0
    V, M = img.values, img.valid
    a, b = V[y0, x0], V[y0, x0 + 1]
    c, d = V[y0 + 1, x0], V[y0 + 1, x0 + 1]
    ok &= M[y0, x0] & M[y0, x0 + 1] & M[y0 + 1, x0] & M[y0 + 1, x0 + 1]
    val = (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * c + fx * d)
    gx = (1 - fy) * (b - a) + fy * (d - c)
    gy = (1 - fx) * (c - a) + fx * (d - b)
    return val, np.stack([gx, gy], axis=-1), ok


class Residuals(NamedTuple):
    values: np.ndarray  # (n,) photometric or (m, 2) geometric
    jacobian: np.ndarray  # d values / d xi
    dropped: int


def _projection_jacobian(camera: PinholeCamera, Xc: np.ndarray) -> np.ndarray:
    """d(u, v)/d xi for camera-frame points under the left update."""
    x, y, z = Xc[:, 0], Xc[:, 1], Xc[:, 2]
    iz = 1.0 / z
    du = np.zeros((len(Xc), 2, 3))
    du[:, 0, 0] = camera.fx * iz
    du[:, 0, 2] = -camera.fx * x * iz * iz
    du[:, 1, 1] = camera.fy * iz
    du[:, 1, 2] = -camera.fy * y * iz * iz
    dX = np.zeros((len(Xc), 3, 6))
    dX[:, :, :3] = np.eye(3)
    # d(w x X)/dw = -[X]_x
    dX[:, 0, 4], dX[:, 0, 5] = z, -y
    dX[:, 1, 3], dX[:, 1, 5] = -z, x
    dX[:, 2, 3], dX[:, 2, 4] = y, -x
    return du @ dX


def _photometric(obs: SceneObservation, pose: PoseSE3) -> Residuals:
    uv = (obs.points[:, None, :] + PATTERN[None]).reshape(-1, 2)
    idp = np.repeat(obs.inverse_depth, len(PATTERN))
    ref, _, ok_ref = sample(obs.reference, uv)
    Xc = pose.apply(obs.camera.backproject(uv, idp))
    front = Xc[:, 2] > 1e-9
    proj = np.full_like(uv, np.nan)
    proj[front] = obs.camera.project(Xc[front])
    tgt, grad, ok_tgt = sample(obs.target, proj)
    ok = ok_ref & ok_tgt & front
    J = np.einsum("ni,nij->nj", grad[ok], _projection_jacobian(obs.camera, Xc[ok]))
    return Residuals(tgt[ok] - ref[ok], J, int(np.count_nonzero(~ok)))


def _geometric(obs: SceneObservation, pose: PoseSE3) -> Residuals:
    if len(obs.keypoints_ref) == 0:
        return Residuals(np.zeros((0, 2)), np.zeros((0, 2, 6)), 0)
    Xc = pose.apply(obs.camera.backproject(obs.keypoints_ref, obs.keypoint_inverse_depth))
    front = Xc[:, 2] > 1e-9
    r = obs.camera.project(Xc[front]) - obs.keypoints_obs[front]
    return Residuals(r, _projection_jacobian(obs.camera, Xc[front]), int(np.count_nonzero(~front)))


def photometric_residuals(obs: SceneObservation, pose: PoseSE3) -> Residuals:
    """Target minus reference intensity for every valid pattern sample.

    Samples whose warp leaves the target, lands behind the camera or touches
    a masked pixel are dropped and counted in ``dropped``.
    """
    res = _photometric(obs, pose)
    if len(res.values) == 0:
        raise EmptyResidualError("no pattern sample projects into the target image")
    return res


def geometric_residuals(obs: SceneObservation, pose: PoseSE3) -> Residuals:
    """Predicted minus observed keypoint positions; keypoints behind the
    camera are excluded and counted."""
    if len(obs.keypoints_ref) == 0:
        raise DomainError("no keypoints")
    return _geometric(obs, pose)


def utility_k(ctx: PyramidContext) -> float:
    """Weight of the geometric term: ``5 exp(-2 l) / (1 + exp((30 - N_g) / 4))``."""
    return float(5.0 * np.exp(-2.0 * ctx.level) / (1.0 + np.exp((30.0 - ctx.n_inliers) / 4.0)))


def huber(r, delta: float) -> np.ndarray:
    """Half-quadratic Huber penalty: ``r^2/2`` inside ``delta``, linear beyond."""
    a = np.abs(np.asarray(r, dtype=np.float64))
    return np.where(a <= delta, 0.5 * a * a, delta * (a - 0.5 * delta))


def huber_derivative(r, delta: float) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    return np.clip(r, -delta, delta)


def energy_from_residuals(e_p, e_g, stats: ResidualStats, k: float, delta_p: float, delta_g: float) -> float:
    e_p = np.asarray(e_p, dtype=np.float64).reshape(-1)
    e_g = np.asarray(e_g, dtype=np.float64).reshape(-1)
    if stats.n_p != e_p.size or stats.n_g != e_g.size:
        raise DomainError(
            f"stats count ({stats.n_p}, {stats.n_g}) does not match residuals ({e_p.size}, {e_g.size})"
        )
    if stats.n_p == 0 and stats.n_g == 0:
        raise UndefinedEnergyError("both residual terms are empty")
    e = 0.0
    if stats.n_p:
        e += float(np.sum(huber(e_p, delta_p))) / (stats.n_p * stats.var_p)
    if stats.n_g:
        e += k * float(np.sum(huber(e_g, delta_g))) / (stats.n_g * stats.var_g)
    return e


def joint_energy(obs, pose, stats: ResidualStats, ctx: PyramidContext, delta_p: float = 9.0, delta_g: float = 3.0) -> float:
    rp, rg = _photometric(obs, pose), _geometric(obs, pose)
    return energy_from_residuals(rp.values, rg.values, stats, utility_k(ctx), delta_p, delta_g)


def energy_gradient(obs, pose, stats: ResidualStats, ctx: PyramidContext, delta_p: float = 9.0, delta_g: float = 3.0) -> np.ndarray:
    """Analytic d e / d xi at ``xi = 0`` (left update), stats held fixed."""
    rp, rg = _photometric(obs, pose), _geometric(obs, pose)
    energy_from_residuals(rp.values, rg.values, stats, 0.0, delta_p, delta_g)  # count checks
    g = np.zeros(6)
    if stats.n_p:
        g += huber_derivative(rp.values, delta_p) @ rp.jacobian / (stats.n_p * stats.var_p)
    if stats.n_g:
        Jg = rg.jacobian.reshape(-1, 6)
        g += utility_k(ctx) * (huber_derivative(rg.values.reshape(-1), delta_g) @ Jg) / (stats.n_g * stats.var_g)
    return g


@dataclass(frozen=True)
class PoseConfig:
    delta_p: float = 9.0
    delta_g: float = 3.0
    levels: int = 4
    max_iterations: int = 30
    step_tolerance: float = 1e-8
    energy_tolerance: float = 1e-8  # relative decrease that counts as stalled
    damping: float = 1e-3  # initial and smallest Levenberg factor
    max_retries: int = 5
    min_variance: float = 1e-4  # floor for var_p and var_g, as a fraction of delta^2

    def __post_init__(self):
        if not (self.delta_p > 0 and self.delta_g > 0):
            raise ValueError("Huber thresholds must be > 0")
        if not 1 <= self.levels <= 8:
            raise ValueError("levels must be in [1, 8]")
        if self.max_iterations < 1 or self.max_retries < 0:
            raise ValueError("iteration limits out of range")
        if not (self.step_tolerance > 0 and self.energy_tolerance >= 0 and self.damping > 0 and 0 < self.min_variance <= 1):
            raise ValueError("tolerances must be > 0")


@dataclass(frozen=True)
class IterationRecord:
    level: int
    iteration: int
    energy: float
    k: float
    n_inliers: int

    def line(self) -> str:
        return f"level {self.level} iter {self.iteration} energy {self.energy:.9e} K {self.k:.9f} n_g {self.n_inliers}"


@dataclass(frozen=True)
class ConvergenceReport:
    records: tuple = ()
    converged: bool = True
    message: str = ""

    def text(self) -> str:
        lines = [r.line() for r in self.records]
        lines.append(f"converged {'yes' if self.converged else 'no'}" + (f" ({self.message})" if self.message else ""))
        return "\n".join(lines) + "\n"


class PoseResult(NamedTuple):
    pose: PoseSE3
    stats: ResidualStats
    report: ConvergenceReport


def _inlier_variance(r: np.ndarray, delta: float, floor: float, fallback: float) -> float:
    r = r[np.abs(r) < delta]
    if len(r) < 2:
        return fallback
    return max(float(np.var(r)), floor)


def _normal_equations(rp: Residuals, rg: Residuals, stats: ResidualStats, k: float, cfg: PoseConfig):
    H = np.zeros((6, 6))
    g = np.zeros(6)
    if stats.n_p:
        w = np.minimum(1.0, cfg.delta_p / np.maximum(np.abs(rp.values), 1e-300)) / (stats.n_p * stats.var_p)
        H += (rp.jacobian * w[:, None]).T @ rp.jacobian
        g += (w * rp.values) @ rp.jacobian
    if stats.n_g:
        r = rg.values.reshape(-1)
        J = rg.jacobian.reshape(-1, 6)
        w = k * np.minimum(1.0, cfg.delta_g / np.maximum(np.abs(r), 1e-300)) / (stats.n_g * stats.var_g)
        H += (J * w[:, None]).T @ J
        g += (w * r) @ J
    return H, g


def _solve(H, g, lam):
    A = H + lam * np.diag(np.diag(H))
    try:
        return np.linalg.solve(A, -g)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(A, -g, rcond=None)[0]


def optimize_pose(obs: SceneObservation, initial: PoseSE3, config: PoseConfig = PoseConfig()) -> PoseResult:
    """Coarse-to-fine Levenberg-Marquardt on the joint energy.

    At every level the variances restart at ``delta^2`` and are then set to
    the variance of the inlier residuals after each accepted step. ``K`` is
    recomputed each iteration from the level and the number of keypoints
    whose reprojection error norm is below ``delta_g``.
    """
    if not (np.all(np.isfinite(initial.R)) and np.all(np.isfinite(initial.t))):
        raise DomainError("initial pose is not finite")
    cfg = config
    pose = initial
    records: list[IterationRecord] = []
    notes: list[str] = []
    converged = True
    stats = None
    for level in range(cfg.levels - 1, -1, -1):
        o = obs.at_level(level)
        var_p, var_g = cfg.delta_p**2, cfg.delta_g**2
        lam = cfg.damping
        converged = True
        for it in range(cfg.max_iterations):
            rp, rg = _photometric(o, pose), _geometric(o, pose)
            n_in = int(np.count_nonzero(np.linalg.norm(rg.values, axis=1) < cfg.delta_g))
            k = utility_k(PyramidContext(level, n_in))
            stats = ResidualStats(len(rp.values), rg.values.size, var_p, var_g)
            energy = energy_from_residuals(rp.values, rg.values, stats, k, cfg.delta_p, cfg.delta_g)
            records.append(IterationRecord(level, it, energy, k, n_in))
            log.debug(records[-1].line())
            H, g = _normal_equations(rp, rg, stats, k, cfg)
            accepted = done = False
            for _ in range(cfg.max_retries + 1):
                step = _solve(H, g, lam)
                if not np.all(np.isfinite(step)) or np.linalg.norm(step) < cfg.step_tolerance:
                    done = True
                    break
                # below this the energy change drowns in rounding
                predicted = -(g @ step + 0.5 * step @ H @ step)
                if predicted <= 1e-12 * abs(energy):
                    done = True
                    break
                cand = PoseSE3.exp(step) @ pose
                cp, cg = _photometric(o, cand), _geometric(o, cand)
                if len(cp.values) == stats.n_p and cg.values.size == stats.n_g:
                    e_new = energy_from_residuals(cp.values, cg.values, stats, k, cfg.delta_p, cfg.delta_g)
                else:
                    # visibility changed: compare mean energies under a refreshed count
                    s2 = replace(stats, n_p=len(cp.values), n_g=cg.values.size)
                    e_new = energy_from_residuals(cp.values, cg.values, s2, k, cfg.delta_p, cfg.delta_g) if (s2.n_p or s2.n_g) else np.inf
                if e_new < energy:
                    pose, accepted = cand, True
                    done = energy - e_new <= cfg.energy_tolerance * energy
                    lam = max(lam / 10.0, cfg.damping)
                    var_p = _inlier_variance(cp.values, cfg.delta_p, cfg.min_variance * cfg.delta_p**2, var_p)
                    var_g = _inlier_variance(cg.values.reshape(-1), cfg.delta_g, cfg.min_variance * cfg.delta_g**2, var_g)
                    break
                lam *= 10.0
            if done:
                break
            if not accepted:
                converged = False
                notes.append(f"level {level}: energy increased after {cfg.max_retries} damping retries")
                log.info(notes[-1])
                break
        else:
            converged = False
            notes.append(f"level {level}: iteration limit reached")
    if stats is None:
        raise UndefinedEnergyError("no optimization level produced residuals")
    # final stats at the returned pose
    rp, rg = _photometric(obs, pose), _geometric(obs, pose)
    stats = ResidualStats(len(rp.values), rg.values.size, var_p, var_g)
    # the finest level decides; coarser-level trouble is kept as a note
    return PoseResult(pose, stats, ConvergenceReport(tuple(records), converged, "; ".join(notes)))


def smooth(img: IrradianceImage, sigma: float) -> IrradianceImage:
    """Gaussian pre-filter; pixels whose kernel reaches a masked pixel become invalid."""
    if sigma <= 0:
        return img
    v = ndimage.gaussian_filter(np.where(img.valid, img.values, 0.0), sigma, mode="nearest")
    radius = int(np.ceil(2 * sigma))
    ok = ndimage.binary_erosion(img.valid, np.ones((2 * radius + 1,) * 2, bool), border_value=1)
    return IrradianceImage(v, ok)


def select_points(img: IrradianceImage, count: int, border: int = 3) -> np.ndarray:
    """Up to ``count`` high-gradient pixels spread over a regular grid."""
    v = img.values
    h, w = v.shape
    gy, gx = np.gradient(v)
    mag = np.hypot(gx, gy)
    ok = img.valid.copy()
    ok[:border, :] = ok[-border:, :] = False
    ok[:, :border] = ok[:, -border:] = False
    # every pattern sample must be valid
    for dx, dy in PATTERN.astype(int):
        ok &= np.roll(np.roll(img.valid, -dy, axis=0), -dx, axis=1)
    mag = np.where(ok, mag, -1.0)
    block = max(2, int(np.sqrt(h * w / max(count, 1))))
    picks = []
    for y0 in range(0, h, block):
        for x0 in range(0, w, block):
            cell = mag[y0:y0 + block, x0:x0 + block]
            i = int(np.argmax(cell))
            yy, xx = divmod(i, cell.shape[1])
            if cell[yy, xx] > 0:
                picks.append((cell[yy, xx], x0 + xx, y0 + yy))
    picks.sort(key=lambda p: (-p[0], p[2], p[1]))
    return np.array([[x, y] for _, x, y in picks[:count]], dtype=np.float64).reshape(-1, 2)


def pair_observation(
    scene: SyntheticScene,
    ref: Frame,
    tgt: Frame,
    snapshot: CalibrationSnapshot,
    n_points: int = 800,
    n_keypoints: int = 100,
    blur: float = 1.0,
) -> SceneObservation:
    """Build the pose problem for two rendered frames of ``scene``.

    Both frames are rectified with ``snapshot`` and brought to the intensity
    scale of the reference (``255 * e_ref`` times irradiance). Depths come
    from the scene; keypoints are corners of the reference tracked into the
    target.
    """
    i, j = ref.frame_id, tgt.frame_id
    scale = 255.0 * ref.exposure
    a, b = rectify_frame(ref, snapshot), rectify_frame(tgt, snapshot)
    a = smooth(IrradianceImage(a.values * scale, a.valid), blur)
    b = smooth(IrradianceImage(b.values * scale, b.valid), blur)
    pts = select_points(a, n_points)
    corners = detect_corners(ref, n_keypoints)
    tr = track_points(ref.image, tgt.image, corners)
    keep = ~tr.lost
    kr = corners[keep]
    return SceneObservation(
        scene.camera,
        a,
        b,
        pts,
        scene.inverse_depth(i, pts),
        kr,
        scene.inverse_depth(i, kr),
        tr.positions[keep],
    )


def perturb(pose: PoseSE3, rng: np.random.Generator, rotation_deg: float, translation: float) -> PoseSE3:
    """Left-compose a rotation of ``rotation_deg`` about a random axis and a
    translation of length ``translation`` in a random direction."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    return PoseSE3.exp(np.r_[translation * d, np.deg2rad(rotation_deg) * axis]) @ pose
