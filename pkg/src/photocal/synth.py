"""Synthetic image sequences with known radiance, geometry and photometry.

The scene is a textured, slightly tilted plane ``z = depth + tx*x + ty*y``
(world frame) observed by a moving pinhole camera. Radiance is multi-octave
value noise (or a checkerboard) defined on world ``(x, y)``; every rendered
pixel follows ``M = round(f(e * V(r) * L) + noise)``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .errors import GenerationError
from .geometry import PinholeCamera, PoseSE3, so3_exp
from .photometry import (
    ExposureRecord,
    Frame,
    InverseResponse,
    VignetteModel,
    radius_map,
)

FPS = 30.0
# lattice cells per coarsest wavelength repeat; large enough that the
# visited part of the plane never sees the period
_LATTICE = 24


@dataclass(frozen=True)
class SceneSpec:
    width: int = 160
    height: int = 120
    focal: float = 140.0
    n_frames: int = 200
    # texture
    texture: str = "noise"  # "noise" | "checkerboard"
    octaves: int = 4
    persistence: float = 0.7
    wavelength: float = 0.9  # coarsest octave, world units
    checker_size: float = 0.2
    contrast: float = 6.0
    radiance_floor: float = 0.01  # darkest radiance relative to brightest
    peak_irradiance: float = 1.05  # e_max * V(0) * L_max
    # photometry
    exposure_range: tuple[float, float] = (1.0, 8.0)  # milliseconds
    exposure_period: int = 60
    exposure_jitter: float = 0.03  # std of log-exposure jitter
    response: str = "gamma"  # "gamma" | "identity"
    gamma: float = 2.2
    vignette: tuple[float, float, float] = (-0.25, -0.1, -0.05)
    noise_sigma: float = 1.0
    # geometry
    plane_depth: float = 2.0
    plane_tilt: tuple[float, float] = (0.15, -0.1)
    trajectory: str = "lissajous"  # "lissajous" | "line" | "static"
    amplitude: tuple[float, float, float] = (0.9, 0.7, 0.15)
    periods: tuple[float, float, float] = (150.0, 110.0, 80.0)
    rotation_amplitude_deg: float = 3.0
    supersample: int = 1
    seed: int = 0

    def replace(self, **changes) -> "SceneSpec":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown scene keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


def make_response(spec: SceneSpec) -> InverseResponse:
    if spec.response == "identity":
        return InverseResponse.identity()
    if spec.response == "gamma":
        return InverseResponse.gamma(spec.gamma)
    raise GenerationError(f"unknown response family {spec.response!r}")


@dataclass(eq=False)
class SyntheticScene:
    spec: SceneSpec
    camera: PinholeCamera
    poses: list[PoseSE3]  # camera-to-world
    response: InverseResponse
    vignette: VignetteModel
    exposures: np.ndarray  # milliseconds
    timestamps: np.ndarray
    radiance_scale: float
    _tables: list[np.ndarray] = field(repr=False, default_factory=list)

    @property
    def n_frames(self) -> int:
        return len(self.poses)

    @property
    def shape(self):
        return (self.spec.height, self.spec.width)

    def exposure_records(self) -> list[ExposureRecord]:
        return [
            ExposureRecord(i, float(t), float(e))
            for i, (t, e) in enumerate(zip(self.timestamps, self.exposures))
        ]

    # -- geometry ---------------------------------------------------------
    def intersect(self, index: int, uv) -> tuple[np.ndarray, np.ndarray]:
        """World points and camera depths where pixel rays hit the plane."""
        pose = self.poses[index]
        d_cam = self.camera.rays(uv)
        d = d_cam @ pose.R.T
        c = pose.t
        tx, ty = self.spec.plane_tilt
        num = self.spec.plane_depth + tx * c[0] + ty * c[1] - c[2]
        den = d[..., 2] - tx * d[..., 0] - ty * d[..., 1]
        s = num / den
        return c + s[..., None] * d, s

    def depth_map(self, index: int) -> np.ndarray:
        h, w = self.shape
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        _, z = self.intersect(index, np.stack([xs, ys], axis=-1))
        return z

    def inverse_depth(self, index: int, uv) -> np.ndarray:
        _, z = self.intersect(index, uv)
        return 1.0 / z

    def relative_pose(self, i: int, j: int) -> PoseSE3:
        """Transform from camera ``i`` coordinates to camera ``j`` coordinates."""
        return self.poses[j].inverse() @ self.poses[i]

    def project_world(self, index: int, X) -> tuple[np.ndarray, np.ndarray]:
        Xc = self.poses[index].inverse().apply(X)
        return self.camera.project(Xc), Xc[..., 2]

    # -- radiometry -------------------------------------------------------
    def radiance(self, xw, yw) -> np.ndarray:
        xw = np.asarray(xw, dtype=np.float64)
        yw = np.asarray(yw, dtype=np.float64)
        if self.spec.texture == "checkerboard":
            s = self.spec.checker_size
            tex = ((np.floor(xw / s) + np.floor(yw / s)) % 2).astype(np.float64)
        else:
            tex = _value_noise(self._tables, self.spec.wavelength, self.spec.persistence, xw, yw)
            c = self.spec.contrast
            tex = 0.5 + 0.5 * np.tanh(c * (tex - 0.5)) / np.tanh(0.5 * c)
        floor = self.spec.radiance_floor
        return self.radiance_scale * (floor + (1.0 - floor) * tex)

    def irradiance(self, index: int) -> np.ndarray:
        """Noise-free ``e * V(r) * L`` per pixel (exposure in ms)."""
        h, w = self.shape
        k = max(1, int(self.spec.supersample))
        offs = (np.arange(k) + 0.5) / k - 0.5
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        acc = np.zeros((h, w))
        for oy in offs:
            for ox in offs:
                X, _ = self.intersect(index, np.stack([xs + ox, ys + oy], axis=-1))
                acc += self.radiance(X[..., 0], X[..., 1])
        L = acc / (k * k)
        return self.exposures[index] * self.vignette(radius_map(self.shape)) * L

    def radiance_image(self, index: int) -> np.ndarray:
        """Radiance seen by each pixel of frame ``index`` (no exposure, no vignette)."""
        return self.irradiance(index) / (self.exposures[index] * self.vignette(radius_map(self.shape)))


def _value_noise(tables, wavelength, persistence, x, y) -> np.ndarray:
    out = np.zeros(np.broadcast(x, y).shape)
    total = 0.0
    for o, table in enumerate(tables):
        lam = wavelength / 2**o
        amp = persistence**o
        n = table.shape[0]
        gx = x / lam
        gy = y / lam
        ix = np.floor(gx).astype(np.int64)
        iy = np.floor(gy).astype(np.int64)
        fx = _fade(gx - ix)
        fy = _fade(gy - iy)
        x0, x1 = ix % n, (ix + 1) % n
        y0, y1 = iy % n, (iy + 1) % n
        top = table[y0, x0] * (1 - fx) + table[y0, x1] * fx
        bot = table[y1, x0] * (1 - fx) + table[y1, x1] * fx
        out += amp * (top * (1 - fy) + bot * fy)
        total += amp
    return out / total


def _fade(t):
    return t * t * t * (t * (t * 6 - 15) + 10)


def exposure_schedule(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    """Multiplicative sweep over ``exposure_range`` with log-normal jitter."""
    lo, hi = spec.exposure_range
    if lo <= 0 or hi < lo:
        raise GenerationError(f"invalid exposure range {spec.exposure_range}")
    i = np.arange(spec.n_frames)
    phase = 0.5 - 0.5 * np.cos(2 * np.pi * i / spec.exposure_period)
    log_e = np.log(lo) + phase * np.log(hi / lo)
    log_e = log_e + spec.exposure_jitter * rng.standard_normal(spec.n_frames)
    return np.exp(np.clip(log_e, np.log(lo), np.log(hi)))


def _trajectory(spec: SceneSpec) -> list[PoseSE3]:
    i = np.arange(spec.n_frames, dtype=np.float64)
    ax, ay, az = spec.amplitude
    px, py, pz = spec.periods
    rot = np.radians(spec.rotation_amplitude_deg)
    if spec.trajectory == "static":
        return [PoseSE3.identity() for _ in i]
    poses = []
    for k in i:
        if spec.trajectory == "lissajous":
            c = np.array([
                ax * np.sin(2 * np.pi * k / px),
                ay * np.sin(2 * np.pi * k / py + 0.7),
                az * np.sin(2 * np.pi * k / pz),
            ])
            w = rot * np.array([np.sin(2 * np.pi * k / py), np.sin(2 * np.pi * k / px + 1.1), 0.3 * np.sin(2 * np.pi * k / pz)])
        elif spec.trajectory == "line":
            c = np.array([ax * 2 * np.pi / px * k, 0.0, 0.0])
            w = np.zeros(3)
        else:
            raise GenerationError(f"unknown trajectory {spec.trajectory!r}")
        poses.append(PoseSE3(so3_exp(w), c))
    return poses


def generate_scene(spec: SceneSpec = SceneSpec(), check_saturation: bool = True) -> SyntheticScene:
    """Build a deterministic scene from ``spec``.

    Raises GenerationError when fewer than 95% of the pixels of some frame
    keep ``e * V * L <= 1``.
    """
    rng = np.random.default_rng(spec.seed)
    tables = [rng.random((_LATTICE * 2**o, _LATTICE * 2**o)) for o in range(spec.octaves)]
    exposures = exposure_schedule(spec, rng)
    camera = PinholeCamera(
        spec.focal, spec.focal, (spec.width - 1) / 2.0, (spec.height - 1) / 2.0, spec.width, spec.height
    )
    scene = SyntheticScene(
        spec=spec,
        camera=camera,
        poses=_trajectory(spec),
        response=make_response(spec),
        vignette=VignetteModel(*spec.vignette),
        exposures=exposures,
        timestamps=np.arange(spec.n_frames) / FPS,
        radiance_scale=spec.peak_irradiance / spec.exposure_range[1],
        _tables=tables,
    )
    if check_saturation:
        for k in range(scene.n_frames):
            frac = float(np.mean(scene.irradiance(k) <= 1.0))
            if frac < 0.95:
                raise GenerationError(
                    f"frame {k}: only {100 * frac:.1f}% of pixels below saturation (need 95%)"
                )
    return scene


def quantize(x) -> np.ndarray:
    """Round half away from zero and clamp to [0, 255]."""
    x = np.asarray(x, dtype=np.float64)
    q = np.sign(x) * np.floor(np.abs(x) + 0.5)
    return np.clip(q, 0, 255).astype(np.uint8)


def render_frame(scene: SyntheticScene, index: int, noise: bool = True) -> Frame:
    """Render frame ``index``. Noise is seeded from ``(seed, index)``."""
    if not 0 <= index < scene.n_frames:
        raise IndexError(f"frame index {index} outside [0, {scene.n_frames})")
    m = scene.response.forward(scene.irradiance(index))
    sigma = scene.spec.noise_sigma
    if noise and sigma > 0:
        rng = np.random.default_rng([scene.spec.seed, 1, index])
        m = m + sigma * rng.standard_normal(m.shape)
    return Frame(quantize(m), scene.exposure_records()[index])
