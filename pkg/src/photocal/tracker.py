"""Sparse corner tracking and extraction of intensity correspondences.

Tracks feed the calibrator with pairs ``(m1, m2, r1, r2, e1, e2)``: the same
scene point observed in two frames. Patch alignment compensates a per-patch
gain and bias so that exposure changes between frames do not break tracking.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

import numpy as np
from scipy import ndimage

from .errors import DataError
from .photometry import (
    SAT_HIGH,
    SAT_LOW,
    ExposureRecord,
    Frame,
    normalized_radius,
)

NMS_RADIUS = 8.0
PYRAMID_LEVELS = 4
PATCH = 8
MAX_ITERATIONS = 30
LOSS_THRESHOLD = 12.0  # mean absolute patch residual, intensity levels
SAME_RADIUS = 0.02
GAIN_RANGE = (1.0 / 3.0, 3.0)

_OFFSETS = np.stack(
    np.meshgrid(np.arange(PATCH) - (PATCH - 1) / 2.0, np.arange(PATCH) - (PATCH - 1) / 2.0, indexing="xy"),
    axis=-1,
).reshape(-1, 2)


def _image(x) -> np.ndarray:
    return np.asarray(x.image if isinstance(x, Frame) else x, dtype=np.float64)


def bilinear(img: np.ndarray, x, y) -> np.ndarray:
    """Bilinear sample with edge clamping. Pixel centres are integer coordinates."""
    h, w = img.shape
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, w - 1.0)
    y = np.clip(np.asarray(y, dtype=np.float64), 0.0, h - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.intp), w - 2)
    y0 = np.minimum(np.floor(y).astype(np.intp), h - 2)
    fx = x - x0
    fy = y - y0
    return (
        img[y0, x0] * (1 - fx) * (1 - fy)
        + img[y0, x0 + 1] * fx * (1 - fy)
        + img[y0 + 1, x0] * (1 - fx) * fy
        + img[y0 + 1, x0 + 1] * fx * fy
    )


def corner_score(img: np.ndarray) -> np.ndarray:
    """Minimum eigenvalue of the gradient structure tensor over a 3x3 window."""
    gy, gx = np.gradient(img)
    sxx = ndimage.uniform_filter(gx * gx, 3, mode="nearest") * 9
    syy = ndimage.uniform_filter(gy * gy, 3, mode="nearest") * 9
    sxy = ndimage.uniform_filter(gx * gy, 3, mode="nearest") * 9
    half_tr = 0.5 * (sxx + syy)
    disc = np.sqrt(np.maximum(0.25 * (sxx - syy) ** 2 + sxy**2, 0.0))
    return half_tr - disc


def detect_corners(
    frame,
    max_count: int,
    nms_radius: float = NMS_RADIUS,
    border: int = PATCH // 2,
    quality: float = 0.01,
    exclude=None,
) -> np.ndarray:
    """Corner positions ``(n, 2)`` as ``(x, y)``, strongest first.

    Candidates are 3x3 local maxima of the min-eigenvalue score above
    ``quality * max``; greedy suppression keeps corners at least
    ``nms_radius`` apart (also from any ``exclude`` positions). Equal scores
    keep scan order. Positions are refined by a 1-D parabola fit per axis.
    """
    if max_count < 1:
        raise ValueError("max_count must be >= 1")
    img = _image(frame)
    h, w = img.shape
    score = corner_score(img)
    peak = float(score[border:h - border, border:w - border].max(initial=0.0))
    if peak <= 1e-9:
        return np.zeros((0, 2))
    local_max = score >= ndimage.maximum_filter(score, size=3, mode="nearest")
    cand = local_max & (score > quality * peak)
    cand[:border, :] = False
    cand[h - border:, :] = False
    cand[:, :border] = False
    cand[:, w - border:] = False
    ys, xs = np.nonzero(cand)  # scan order
    order = np.argsort(-score[ys, xs], kind="stable")
    ys, xs = ys[order], xs[order]

    taken = [] if exclude is None else [tuple(p) for p in np.asarray(exclude).reshape(-1, 2)]
    out = []
    r2 = nms_radius**2
    for y, x in zip(ys, xs):
        if any((x - tx) ** 2 + (y - ty) ** 2 < r2 for tx, ty in taken):
            continue
        taken.append((x, y))
        out.append(_refine(score, x, y))
        if len(out) >= max_count:
            break
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def _refine(score, x, y):
    def offset(a, b, c):
        den = a - 2 * b + c
        return 0.0 if den >= 0 else float(np.clip(0.5 * (a - c) / den, -0.5, 0.5))

    h, w = score.shape
    dx = offset(score[y, x - 1], score[y, x], score[y, x + 1]) if 0 < x < w - 1 else 0.0
    dy = offset(score[y - 1, x], score[y, x], score[y + 1, x]) if 0 < y < h - 1 else 0.0
    return (x + dx, y + dy)


def build_pyramid(img: np.ndarray, levels: int = PYRAMID_LEVELS) -> list[np.ndarray]:
    """Level 0 is the input; each further level averages 2x2 blocks."""
    pyr = [np.asarray(img, dtype=np.float64)]
    for _ in range(1, levels):
        a = pyr[-1]
        h, w = (a.shape[0] // 2) * 2, (a.shape[1] // 2) * 2
        a = a[:h, :w]
        pyr.append(0.25 * (a[0::2, 0::2] + a[1::2, 0::2] + a[0::2, 1::2] + a[1::2, 1::2]))
    return pyr


@dataclass
class TrackResult:
    positions: np.ndarray  # (n, 2)
    lost: np.ndarray  # (n,) bool
    residual: np.ndarray  # mean absolute compensated residual per point
    gain: np.ndarray

    def __iter__(self):
        for p, l in zip(self.positions, self.lost):
            yield None if l else p


def track_points(prev, next, points, levels: int = PYRAMID_LEVELS) -> TrackResult:
    """Pyramidal patch alignment of ``points`` from ``prev`` into ``next``.

    A point is lost when its gain/bias-compensated mean absolute residual
    exceeds LOSS_THRESHOLD, the gain is implausible, the system is singular,
    or the final position leaves the image.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    a_img, b_img = _image(prev), _image(next)
    h, w = a_img.shape
    if n == 0:
        return TrackResult(np.zeros((0, 2)), np.zeros(0, bool), np.zeros(0), np.zeros(0))
    pa, pb = build_pyramid(a_img, levels), build_pyramid(b_img, levels)
    disp = np.zeros((n, 2))
    singular = np.zeros(n, bool)
    for lvl in range(levels - 1, -1, -1):
        s = 0.5**lvl
        ia, ib = pa[lvl], pb[lvl]
        gy, gx = np.gradient(ia)
        base = (pts + 0.5) * s - 0.5
        qx = base[:, None, 0] + _OFFSETS[None, :, 0]
        qy = base[:, None, 1] + _OFFSETS[None, :, 1]
        T = bilinear(ia, qx, qy)
        G = np.stack([bilinear(gx, qx, qy), bilinear(gy, qx, qy)], axis=-1)
        Tc = T - T.mean(axis=1, keepdims=True)
        varT = np.mean(Tc**2, axis=1)
        d = disp * s
        # Hessian of the template gradients; the gain enters as a square
        H0 = np.einsum("npi,npj->nij", G, G)
        det0 = H0[:, 0, 0] * H0[:, 1, 1] - H0[:, 0, 1] ** 2
        ok = det0 > 1e-9 * (H0[:, 0, 0] + H0[:, 1, 1] + 1e-12) ** 2
        singular |= ~ok
        idx = np.nonzero(ok)[0]
        for _ in range(MAX_ITERATIONS):
            if len(idx) == 0:
                break
            I = bilinear(ib, qx[idx] + d[idx, None, 0], qy[idx] + d[idx, None, 1])
            gain, bias = _gain_bias(T[idx], Tc[idx], varT[idx], I)
            gain = np.where(np.abs(gain) > 1e-3, gain, 1e-3)
            e = I - (gain[:, None] * T[idx] + bias[:, None])
            b = (G[idx] * e[:, :, None]).sum(axis=1) / gain[:, None]
            Hs = H0[idx]
            dt = det0[idx]
            step = -np.stack(
                [(Hs[:, 1, 1] * b[:, 0] - Hs[:, 0, 1] * b[:, 1]) / dt,
                 (Hs[:, 0, 0] * b[:, 1] - Hs[:, 0, 1] * b[:, 0]) / dt],
                axis=-1,
            )
            # cap runaway steps at coarse levels
            norm = np.linalg.norm(step, axis=1)
            step *= np.minimum(1.0, 2.0 / np.maximum(norm, 1e-12))[:, None]
            d[idx] += step
            idx = idx[norm > 0.01]
        disp = d / s
    new = pts + disp
    I = bilinear(b_img, new[:, None, 0] + _OFFSETS[None, :, 0], new[:, None, 1] + _OFFSETS[None, :, 1])
    T = bilinear(a_img, pts[:, None, 0] + _OFFSETS[None, :, 0], pts[:, None, 1] + _OFFSETS[None, :, 1])
    Tc = T - T.mean(axis=1, keepdims=True)
    gain, bias = _gain_bias(T, Tc, np.mean(Tc**2, axis=1), I)
    resid = np.mean(np.abs(I - gain[:, None] * T - bias[:, None]), axis=1)
    inside = (new[:, 0] >= 0) & (new[:, 0] <= w - 1) & (new[:, 1] >= 0) & (new[:, 1] <= h - 1)
    lost = (
        singular
        | ~inside
        | (resid > LOSS_THRESHOLD)
        | (gain < GAIN_RANGE[0])
        | (gain > GAIN_RANGE[1])
        | ~np.all(np.isfinite(new), axis=1)
    )
    return TrackResult(new, lost, resid, gain)


def _gain_bias(T, Tc, varT, I):
    Ic = I - I.mean(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        gain = np.where(varT > 1e-9, np.mean(Tc * Ic, axis=1) / varT, 1.0)
    bias = I.mean(axis=1) - gain * T.mean(axis=1)
    return gain, bias


class Observation(NamedTuple):
    """One track sample. ``intensity`` is NaN when the bilinear stencil
    touches a pixel outside the saturation bounds."""

    frame_id: int
    x: float
    y: float
    intensity: float
    radius: float


@dataclass
class TrackSet:
    """Observations grouped by track id, each list ordered by frame id."""

    tracks: dict[int, list[Observation]] = field(default_factory=dict)

    def add(self, track_id: int, obs: Observation) -> None:
        lst = self.tracks.setdefault(track_id, [])
        if lst and obs.frame_id <= lst[-1].frame_id:
            raise DataError(f"track {track_id}: frame {obs.frame_id} not after {lst[-1].frame_id}")
        lst.append(obs)

    def __len__(self):
        return len(self.tracks)

    def frame_ids(self) -> set[int]:
        return {o.frame_id for obs in self.tracks.values() for o in obs}

    def observations_in(self, frame_id: int) -> dict[int, Observation]:
        out = {}
        for tid, obs in self.tracks.items():
            for o in reversed(obs):
                if o.frame_id == frame_id:
                    out[tid] = o
                    break
                if o.frame_id < frame_id:
                    break
        return out

    def pruned(self, min_length: int = 2) -> "TrackSet":
        return TrackSet({k: v for k, v in self.tracks.items() if len(v) >= min_length})

    @classmethod
    def from_positions(cls, rows: Iterable[tuple[int, int, float, float]], frames: dict[int, Frame]) -> "TrackSet":
        """Build from ``(track_id, frame_id, x, y)`` rows, sampling ``frames``."""
        ts = cls()
        for tid, fid, x, y in sorted(rows, key=lambda r: (r[0], r[1])):
            if fid not in frames:
                raise DataError(f"track {tid} references unknown frame {fid}")
            ts.add(tid, observe(frames[fid], x, y))
        return ts


def observe(frame: Frame, x: float, y: float) -> Observation:
    h, w = frame.shape
    if not (0 <= x <= w - 1 and 0 <= y <= h - 1):
        raise DataError(f"position ({x}, {y}) outside frame {frame.frame_id}")
    img = frame.image
    x0, y0 = min(int(np.floor(x)), w - 2), min(int(np.floor(y)), h - 2)
    stencil = img[y0:y0 + 2, x0:x0 + 2]
    # a clipped pixel in the stencil corrupts the sample
    if stencil.min() < SAT_LOW or stencil.max() > SAT_HIGH:
        m = float("nan")
    else:
        m = float(bilinear(img.astype(np.float64), x, y))
    r = float(normalized_radius(x, y, frame.shape, frame.principal_point))
    return Observation(frame.frame_id, float(x), float(y), m, r)


class FeatureTracker:
    """Incremental tracker: follows corners frame to frame and re-detects.

    Tracks whose forward-backward round trip misses the start by more than
    ``fb_threshold`` pixels are terminated.
    """

    def __init__(self, max_count: int = 150, min_active: int | None = None, fb_threshold: float = 0.5):
        self.max_count = max_count
        self.min_active = max_count * 2 // 3 if min_active is None else min_active
        self.fb_threshold = fb_threshold
        self.tracks = TrackSet()
        self._prev: Frame | None = None
        self._active: dict[int, np.ndarray] = {}
        self._next_id = 0

    def process(self, frame: Frame) -> TrackSet:
        if self._prev is not None and self._active:
            ids = list(self._active)
            pts = np.array([self._active[i] for i in ids])
            fwd = track_points(self._prev, frame, pts)
            lost = fwd.lost.copy()
            if self.fb_threshold is not None:
                bwd = track_points(frame, self._prev, fwd.positions)
                err = np.linalg.norm(bwd.positions - pts, axis=1)
                lost |= bwd.lost | (err > self.fb_threshold)
            self._active = {}
            for tid, p, l in zip(ids, fwd.positions, lost):
                if not l:
                    self._active[tid] = p
                    self.tracks.add(tid, observe(frame, p[0], p[1]))
        if len(self._active) < self.min_active:
            existing = np.array(list(self._active.values())).reshape(-1, 2)
            new = detect_corners(frame, self.max_count - len(self._active), exclude=existing)
            for p in new:
                tid = self._next_id
                self._next_id += 1
                self._active[tid] = p
                self.tracks.add(tid, observe(frame, p[0], p[1]))
        self._prev = frame
        return self.tracks


@dataclass(frozen=True)
class CorrespondencePair:
    m1: float
    m2: float
    r1: float
    r2: float
    e1: float
    e2: float
    frame1: int
    frame2: int


_PAIR_FIELDS = ("m1", "m2", "r1", "r2", "e1", "e2", "frame1", "frame2")


@dataclass(eq=False)
class PairSet:
    """Column-wise storage of correspondence pairs."""

    m1: np.ndarray
    m2: np.ndarray
    r1: np.ndarray
    r2: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    frame1: np.ndarray
    frame2: np.ndarray

    def __post_init__(self):
        for f in _PAIR_FIELDS:
            dt = np.int64 if f.startswith("frame") else np.float64
            setattr(self, f, np.asarray(getattr(self, f), dtype=dt).reshape(-1))

    @classmethod
    def empty(cls) -> "PairSet":
        return cls(*[np.zeros(0)] * 8)

    @classmethod
    def from_pairs(cls, pairs) -> "PairSet":
        if isinstance(pairs, PairSet):
            return pairs
        pairs = list(pairs)
        return cls(*[[getattr(p, f) for p in pairs] for f in _PAIR_FIELDS])

    @classmethod
    def concat(cls, items) -> "PairSet":
        items = [cls.from_pairs(i) for i in items]
        if not items:
            return cls.empty()
        return cls(*[np.concatenate([getattr(i, f) for i in items]) for f in _PAIR_FIELDS])

    def __len__(self):
        return len(self.m1)

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            return CorrespondencePair(*[getattr(self, f)[idx].item() for f in _PAIR_FIELDS])
        return PairSet(*[getattr(self, f)[idx] for f in _PAIR_FIELDS])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @property
    def ratio(self) -> np.ndarray:
        return self.e1 / self.e2


def extract_pairs(
    tracks: TrackSet,
    exposures,
    mode: str = "same-radius",
    rho: float = SAME_RADIUS,
    frame_id: int | None = None,
    max_span: int | None = None,
) -> PairSet:
    """All observation pairs within each track that satisfy ``mode``.

    ``same-radius`` keeps ``|r1 - r2| < rho``; ``radial-motion`` keeps
    ``|r1 - r2| >= rho``. Both intensities must lie in the saturation bounds.
    With ``frame_id`` only pairs whose later observation is in that frame are
    produced; ``max_span`` limits the frame-id gap.
    """
    if mode not in ("same-radius", "radial-motion", "all"):
        raise ValueError(f"unknown pair mode {mode!r}")
    exp = exposures if isinstance(exposures, dict) else {r.frame_id: r.exposure for r in exposures}
    missing = sorted({o.frame_id for obs in tracks.tracks.values() if len(obs) >= 2 for o in obs} - exp.keys())
    if missing:
        raise DataError(f"no exposure record for frame {missing[0]}")
    cols = {f: [] for f in _PAIR_FIELDS}
    for obs in tracks.tracks.values():
        if len(obs) < 2:
            continue
        arr = np.array(obs, dtype=np.float64)
        fids = arr[:, 0].astype(np.int64)
        if frame_id is None:
            i, j = np.triu_indices(len(obs), 1)
        else:
            js = np.nonzero(fids == frame_id)[0]
            if len(js) == 0:
                continue
            j0 = js[0]
            i = np.arange(j0)
            j = np.full(j0, j0)
        if max_span is not None:
            keep = fids[j] - fids[i] <= max_span
            i, j = i[keep], j[keep]
        m, r = arr[:, 3], arr[:, 4]
        keep = (m[i] >= SAT_LOW) & (m[i] <= SAT_HIGH) & (m[j] >= SAT_LOW) & (m[j] <= SAT_HIGH)
        dr = np.abs(r[i] - r[j])
        if mode == "same-radius":
            keep &= dr < rho
        elif mode == "radial-motion":
            keep &= dr >= rho
        i, j = i[keep], j[keep]
        if len(i) == 0:
            continue
        e = np.array([exp[f] for f in fids])
        cols["m1"].append(m[i]); cols["m2"].append(m[j])
        cols["r1"].append(r[i]); cols["r2"].append(r[j])
        cols["e1"].append(e[i]); cols["e2"].append(e[j])
        cols["frame1"].append(fids[i]); cols["frame2"].append(fids[j])
    if not cols["m1"]:
        return PairSet.empty()
    return PairSet(*[np.concatenate(cols[f]) for f in _PAIR_FIELDS])
