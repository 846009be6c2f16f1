"""Image formation model, calibration parameter types and rectification.

An 8-bit intensity ``M`` relates to scene radiance ``L`` through

    M = f(e * V(r) * L)

with ``f`` the camera response, ``e`` the frame exposure and ``V`` the radial
vignette. Calibration recovers ``f^-1`` (as a 256-entry lookup table) and
``V``; rectification inverts the chain.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, ModelError, StateError

N_LEVELS = 256
MAX_LEVEL = 255
# Intensities outside [SAT_LOW, SAT_HIGH] break the ratio model.
SAT_LOW = 5
SAT_HIGH = 250


def saturation_mask(intensity) -> np.ndarray:
    """True where an intensity is usable for estimation."""
    m = np.asarray(intensity)
    return (m >= SAT_LOW) & (m <= SAT_HIGH)


@dataclass(frozen=True, eq=False)
class InverseResponse:
    """Monotone lookup table mapping 8-bit intensity to normalized irradiance."""

    lut: np.ndarray

    def __post_init__(self):
        lut = np.array(self.lut, dtype=np.float64).reshape(-1)
        if lut.shape != (N_LEVELS,):
            raise ModelError(f"inverse response needs {N_LEVELS} entries, got {lut.size}")
        if not np.all(np.isfinite(lut)):
            raise ModelError("inverse response contains non-finite values")
        if np.any(np.diff(lut) < 0):
            raise ModelError("inverse response is not monotone non-decreasing")
        if lut[0] != 0.0 or lut[-1] != 1.0:
            raise ModelError("inverse response must satisfy lut[0] = 0 and lut[255] = 1")
        lut.setflags(write=False)
        object.__setattr__(self, "lut", lut)

    @classmethod
    def identity(cls) -> "InverseResponse":
        return cls(np.arange(N_LEVELS) / MAX_LEVEL)

    @classmethod
    def gamma(cls, g: float) -> "InverseResponse":
        """``lut[M] = (M / 255) ** g``."""
        return cls((np.arange(N_LEVELS) / MAX_LEVEL) ** g)

    def __call__(self, m):
        return eval_inverse_response(self, m)

    def forward(self, irradiance):
        """Continuous response ``f``: normalized irradiance -> intensity in [0, 255].

        Inverts the piecewise-linear table; irradiance outside [0, 1] clamps.
        Flat stretches of the table map to their lowest intensity.
        """
        x = np.clip(np.asarray(irradiance, dtype=np.float64), 0.0, 1.0)
        lut = self.lut
        # right-most segment k with lut[k] <= x < lut[k+1]
        k = np.searchsorted(lut, x, side="right") - 1
        k = np.clip(k, 0, MAX_LEVEL - 1)
        lo = lut[k]
        hi = lut[k + 1]
        span = hi - lo
        with np.errstate(invalid="ignore", divide="ignore"):
            t = np.where(span > 0, (x - lo) / np.where(span > 0, span, 1.0), 0.0)
        out = k + np.clip(t, 0.0, 1.0)
        return np.where(x >= 1.0, np.searchsorted(lut, 1.0, side="left"), out)

    def __eq__(self, other):
        if not isinstance(other, InverseResponse):
            return NotImplemented
        return bool(np.array_equal(self.lut, other.lut))

    __hash__ = None


def eval_inverse_response(ir: InverseResponse, m):
    """Evaluate ``f^-1`` with linear interpolation between table entries.

    Accepts scalars or arrays; fractional intensities are allowed.
    """
    arr = np.asarray(m, dtype=np.float64)
    if np.any(~np.isfinite(arr)) or np.any(arr < 0) or np.any(arr > MAX_LEVEL):
        raise DomainError("intensity must lie in [0, 255]")
    lo = np.minimum(np.floor(arr).astype(np.intp), MAX_LEVEL - 1)
    t = arr - lo
    out = (1.0 - t) * ir.lut[lo] + t * ir.lut[lo + 1]
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class VignetteModel:
    """Radial attenuation ``V(r) = 1 + a2 r^2 + a4 r^4 + a6 r^6`` on r in [0, 1]."""

    a2: float = 0.0
    a4: float = 0.0
    a6: float = 0.0

    # grid used to check attenuation-only behaviour
    _CHECK_R = np.linspace(0.0, 1.0, 1001)

    def __post_init__(self):
        for name in ("a2", "a4", "a6"):
            v = float(getattr(self, name))
            if not np.isfinite(v):
                raise ModelError(f"vignette coefficient {name} is not finite")
            object.__setattr__(self, name, v)
        vals = self._poly(self._CHECK_R)
        if np.any(vals <= 0):
            raise ModelError("vignette attenuation must stay positive on [0, 1]")
        if np.any(vals > 1.0 + 1e-12):
            raise ModelError("vignette must attenuate only (V(r) <= 1 on [0, 1])")

    @property
    def coefficients(self) -> np.ndarray:
        return np.array([self.a2, self.a4, self.a6])

    def _poly(self, r):
        r2 = np.asarray(r, dtype=np.float64) ** 2
        return 1.0 + r2 * (self.a2 + r2 * (self.a4 + r2 * self.a6))

    def __call__(self, r):
        return eval_vignette(self, r)


def eval_vignette(v: VignetteModel, r):
    """Attenuation factor at normalized radius ``r`` (scalar or array)."""
    arr = np.asarray(r, dtype=np.float64)
    if np.any(~np.isfinite(arr)) or np.any(arr < 0) or np.any(arr > 1):
        raise DomainError("normalized radius must lie in [0, 1]")
    out = v._poly(arr)
    if np.any(out <= 0):
        raise ModelError("vignette attenuation is not positive")
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class ExposureRecord:
    frame_id: int
    timestamp: float  # seconds
    exposure: float  # milliseconds

    def __post_init__(self):
        if not np.isfinite(self.exposure) or self.exposure <= 0:
            raise DomainError(f"exposure must be positive, got {self.exposure}")


def check_sequence(records) -> None:
    """Raise if frame ids are not strictly increasing."""
    ids = [r.frame_id for r in records]
    if any(b <= a for a, b in zip(ids, ids[1:])):
        raise DomainError("frame ids must be strictly increasing")


def radius_map(shape, principal_point=None) -> np.ndarray:
    """Normalized radius of every pixel.

    The distance to the principal point is divided by the distance from the
    principal point to the farthest image corner, so values stay in [0, 1].
    Pixel centres sit on integer coordinates.
    """
    h, w = shape
    cx, cy = default_principal_point(shape) if principal_point is None else principal_point
    ys, xs = np.mgrid[0:h, 0:w]
    return normalized_radius(xs, ys, shape, (cx, cy))


def default_principal_point(shape):
    h, w = shape
    return (w - 1) / 2.0, (h - 1) / 2.0


def radius_scale(shape, principal_point) -> float:
    h, w = shape
    cx, cy = principal_point
    corners = np.array([[0, 0], [w - 1, 0], [0, h - 1], [w - 1, h - 1]], dtype=np.float64)
    return float(np.max(np.hypot(corners[:, 0] - cx, corners[:, 1] - cy)))


def normalized_radius(x, y, shape, principal_point=None):
    pp = default_principal_point(shape) if principal_point is None else principal_point
    r = np.hypot(np.asarray(x, np.float64) - pp[0], np.asarray(y, np.float64) - pp[1])
    return np.clip(r / radius_scale(shape, pp), 0.0, 1.0)


@dataclass(frozen=True, eq=False)
class Frame:
    """8-bit grayscale frame plus the metadata needed to rectify it."""

    image: np.ndarray
    exposure_record: ExposureRecord
    principal_point: tuple[float, float] | None = None

    def __post_init__(self):
        img = np.asarray(self.image)
        if img.ndim != 2 or img.shape[0] < 16 or img.shape[1] < 16:
            raise DomainError(f"frame must be a 2-D image of at least 16x16, got {img.shape}")
        if img.dtype != np.uint8:
            if np.any(img < 0) or np.any(img > MAX_LEVEL) or np.any(img != np.round(img)):
                raise DomainError("frame pixels must be integers in [0, 255]")
            img = img.astype(np.uint8)
        img = np.array(img, copy=True)
        img.setflags(write=False)
        object.__setattr__(self, "image", img)
        if self.principal_point is None:
            object.__setattr__(self, "principal_point", default_principal_point(img.shape))
        else:
            object.__setattr__(self, "principal_point", tuple(float(c) for c in self.principal_point))

    @property
    def frame_id(self) -> int:
        return self.exposure_record.frame_id

    @property
    def exposure(self) -> float:
        return self.exposure_record.exposure

    @property
    def shape(self):
        return self.image.shape

    def radii(self) -> np.ndarray:
        return radius_map(self.image.shape, self.principal_point)


@dataclass(frozen=True, eq=False)
class IrradianceImage:
    """Rectified image: radiance estimate per pixel and a validity mask."""

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        if self.values.shape != self.valid.shape:
            raise DomainError("values and mask shapes differ")
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise ModelError("irradiance values must be finite and non-negative")


@dataclass(frozen=True)
class ValidationReport:
    """Outcome of one exposure-ratio check between two frames."""

    k: float
    expected: float
    relative_error: float
    n: int
    pass_rate: float = float("nan")
    frame_ids: tuple[int, int] | None = None


@dataclass(frozen=True)
class CalibrationSnapshot:
    """Calibration parameters. Only frozen snapshots may rectify frames."""

    response: InverseResponse
    vignette: VignetteModel
    report: ValidationReport | None = None
    frozen: bool = False

    @classmethod
    def identity(cls) -> "CalibrationSnapshot":
        return cls(InverseResponse.identity(), VignetteModel(), frozen=True)

    def freeze(self, report: ValidationReport | None = None) -> "CalibrationSnapshot":
        return CalibrationSnapshot(self.response, self.vignette, report or self.report, True)


def rectify_frame(frame: Frame, snapshot: CalibrationSnapshot) -> IrradianceImage:
    """Undo response, vignette and exposure: ``f^-1(M) / (e V(r))``.

    Pixels outside the saturation bounds are computed but flagged invalid.
    """
    if not snapshot.frozen:
        raise StateError("snapshot has not been validated and frozen")
    img = frame.image
    attenuation = eval_vignette(snapshot.vignette, frame.radii())
    irradiance = snapshot.response.lut[img]
    values = irradiance / (frame.exposure * attenuation)
    return IrradianceImage(values, saturation_mask(img))
