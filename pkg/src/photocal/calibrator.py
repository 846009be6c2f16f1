"""Sequential photometric calibration.

Response, vignette and exposure consistency are handled one after another:

1. same-radius pairs (vignette cancels) constrain the inverse response
   through ``f^-1(m1) = (e1/e2) f^-1(m2)``;
2. radial-motion pairs, with the response fixed, constrain the vignette
   through ``f^-1(m1)/f^-1(m2) = (e1/e2) V(r1)/V(r2)``;
3. the mean corrected irradiance ratio ``k`` of each new frame pair is
   compared with the metadata exposure ratio until it agrees often enough,
   at which point the parameters are frozen.
"""

from __future__ import annotations

import dataclasses
import enum
import logging
import queue
import threading
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, sparse
from scipy.optimize import isotonic_regression

from .errors import DataError, NotReadyError, SequenceError, UnobservableError
from .photometry import (
    MAX_LEVEL,
    N_LEVELS,
    CalibrationSnapshot,
    Frame,
    InverseResponse,
    ValidationReport,
    VignetteModel,
)
from .tracker import FeatureTracker, PairSet, TrackSet, extract_pairs

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CalibrationConfig:
    epsilon: float = 0.02  # relative exposure-ratio error accepted by validation
    window: int = 30  # frame pairs considered when deciding to freeze
    pass_fraction: float = 0.9
    rho: float = 0.02  # same-radius threshold on normalized radius
    min_crf_pairs: int = 2000
    min_levels: int = 64
    min_vignette_pairs: int = 2000
    min_coverage: float = 0.7
    smoothness: float = 1e-3
    huber_rounds: int = 3
    retry_every: int = 10  # frames between estimation attempts
    max_span: int = 60  # largest frame gap within a pair
    validation_gap: int = 5
    min_validation_points: int = 10
    max_pairs: int = 200_000  # estimator input cap (deterministic stride)
    tail_count: int = 50  # samples a level needs to anchor the upper tail
    tail_window: int = 64  # levels used to fit the tail power law
    stability: float = 0.005  # max change between consecutive estimates to accept one

    def __post_init__(self):
        checks = [
            (0 < self.epsilon < 1, "epsilon must be in (0, 1)"),
            (self.window >= 1, "window must be >= 1"),
            (0 < self.pass_fraction <= 1, "pass_fraction must be in (0, 1]"),
            (0 < self.rho < 1, "rho must be in (0, 1)"),
            (self.min_crf_pairs >= 1 and self.min_vignette_pairs >= 1, "pair minimums must be >= 1"),
            (2 <= self.min_levels <= N_LEVELS, "min_levels must be in [2, 256]"),
            (0 < self.min_coverage <= 1, "min_coverage must be in (0, 1]"),
            (self.smoothness > 0, "smoothness must be > 0"),
            (self.stability > 0, "stability must be > 0"),
            (self.tail_count >= 1 and 2 <= self.tail_window < MAX_LEVEL, "tail settings out of range"),
            (self.huber_rounds >= 1, "huber_rounds must be >= 1"),
            (self.retry_every >= 1 and self.max_span >= 1 and self.validation_gap >= 1, "frame counts must be >= 1"),
            (self.min_validation_points >= 1, "min_validation_points must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)


def _subsample(pairs: PairSet, cap: int) -> PairSet:
    if len(pairs) <= cap:
        return pairs
    idx = np.linspace(0, len(pairs) - 1, cap).round().astype(np.intp)
    return pairs[idx]


def _interp_matrix(m: np.ndarray) -> sparse.csr_matrix:
    """Rows hold the linear-interpolation weights of ``f^-1`` at ``m``."""
    lo = np.minimum(np.floor(m).astype(np.intp), MAX_LEVEL - 1)
    t = m - lo
    n = len(m)
    rows = np.repeat(np.arange(n), 2)
    cols = np.stack([lo, lo + 1], axis=1).reshape(-1)
    vals = np.stack([1.0 - t, t], axis=1).reshape(-1)
    return sparse.csr_matrix((vals, (rows, cols)), shape=(n, N_LEVELS))


def _second_difference() -> np.ndarray:
    D = np.zeros((N_LEVELS - 2, N_LEVELS))
    i = np.arange(N_LEVELS - 2)
    D[i, i] = 1.0
    D[i, i + 1] = -2.0
    D[i, i + 2] = 1.0
    return D


def _huber_weights(r: np.ndarray) -> np.ndarray:
    delta = 2.0 * np.median(np.abs(r))
    if delta <= 0:
        return np.ones_like(r)
    a = np.abs(r)
    return np.where(a <= delta, 1.0, delta / np.maximum(a, 1e-300))


def estimate_crf(pairs, config: CalibrationConfig = CalibrationConfig()) -> InverseResponse:
    """Recover the inverse response from same-radius pairs.

    Minimizes the Huber-weighted ``sum (f^-1(m1) - (e1/e2) f^-1(m2))^2`` plus
    a second-difference smoothness penalty. Levels above the last one seen
    ``tail_count`` times are replaced by a power law fitted over the
    ``tail_window`` levels below it. During the solve one well
    observed level is pinned so that the ratio-only data cannot shrink the
    table towards zero; the result is then normalized to ``lut[255] = 1``.
    Monotonicity comes from alternating the smoothed solve with an isotonic
    projection until a fixed point.
    """
    pairs = PairSet.from_pairs(pairs)
    if len(pairs) < config.min_crf_pairs:
        raise NotReadyError(f"{len(pairs)} same-radius pairs, need {config.min_crf_pairs}")
    log_ratio = np.log(pairs.ratio)
    if np.max(np.abs(log_ratio)) < 1e-9:
        raise UnobservableError("all pairs share one exposure: the response shape is unobservable")
    levels = np.unique(np.round(np.concatenate([pairs.m1, pairs.m2])))
    if len(levels) < config.min_levels:
        raise NotReadyError(f"pairs span {len(levels)} intensity levels, need {config.min_levels}")
    pairs = _subsample(pairs, config.max_pairs)
    ratio = pairs.ratio
    A = (_interp_matrix(pairs.m1) - sparse.diags(ratio) @ _interp_matrix(pairs.m2)).tocsr()
    base_w = 1.0 / (1.0 + ratio**2)

    cover = np.asarray(abs(A).sum(axis=0)).ravel()
    cover[0] = 0.0
    ref = int(np.argmax(cover))
    D = _second_difference()
    DtD = D.T @ D

    w = base_w.copy()
    x = None
    for _ in range(config.huber_rounds):
        H = (A.T @ sparse.diags(w) @ A).toarray()
        M = H + config.smoothness * np.trace(H) * DtD
        groups = np.arange(N_LEVELS)  # tie-group label per level
        for _ in range(N_LEVELS):
            x = _solve_tied(M, groups, ref)
            y = isotonic_regression(x).x
            merged = _merge_pooled(groups, y)
            if np.array_equal(merged, groups):
                x = y
                break
            groups = merged
        x = np.maximum(x, 0.0)
        if x[ref] <= 0:
            raise UnobservableError("response estimate collapsed to zero")
        x = x / x[ref]
        # residual variance follows the local table slope at both samples
        slope = np.maximum(np.gradient(x), 1e-3 * (x[-1] - x[0]) / MAX_LEVEL)
        s1 = np.interp(pairs.m1, np.arange(N_LEVELS), slope)
        s2 = np.interp(pairs.m2, np.arange(N_LEVELS), slope)
        base_w = 1.0 / (s1**2 + (ratio * s2) ** 2)
        r = (A @ x) * np.sqrt(base_w)
        w = base_w * _huber_weights(r)

    counts = np.bincount(np.round(np.concatenate([pairs.m1, pairs.m2])).astype(np.intp), minlength=N_LEVELS)
    x = _extend_tail(x, counts, config)
    if x[-1] <= 0:
        raise UnobservableError("response estimate has no positive upper end")
    lut = x / x[-1]
    lut = np.clip(np.maximum.accumulate(lut), 0.0, 1.0)
    lut[0], lut[-1] = 0.0, 1.0
    return InverseResponse(lut)


def _extend_tail(x, counts, config):
    # Levels above the last well-observed one are pure extrapolation, and
    # the final normalization divides by x[255]. A power law fitted just
    # below that level extrapolates far better than the smoothness prior.
    well = np.nonzero(counts >= config.tail_count)[0]
    if len(well) == 0 or well[-1] >= MAX_LEVEL:
        return x
    hi = int(well[-1])
    m = np.arange(max(1, hi - config.tail_window), hi + 1)
    m = m[x[m] > 0]
    if len(m) < 2:
        return x
    g, a = np.polyfit(np.log(m), np.log(x[m]), 1)
    if g <= 0:
        return x
    y = x.copy()
    up = np.arange(hi + 1, N_LEVELS)
    y[up] = np.exp(a) * up.astype(np.float64) ** g
    return y


def _powers(r):
    r2 = np.asarray(r, dtype=np.float64) ** 2
    return np.stack([r2, r2**2, r2**3], axis=-1)


def _solve_tied(M, groups, ref):
    """Minimize ``x' M x`` with ``x`` constant on each group.

    The group of level 0 is pinned to 0 and the group of ``ref`` to 1.
    """
    labels, inv = np.unique(groups, return_inverse=True)
    C = np.zeros((N_LEVELS, len(labels)))
    C[np.arange(N_LEVELS), inv] = 1.0
    Mg = C.T @ M @ C
    g0, gr = inv[0], inv[ref]
    if g0 == gr:
        raise UnobservableError("response estimate collapsed to zero")
    free = np.setdiff1d(np.arange(len(labels)), [g0, gr])
    z = np.zeros(len(labels))
    z[gr] = 1.0
    if len(free):
        z[free] = np.linalg.solve(Mg[np.ix_(free, free)], -Mg[free, gr])
    return C @ z


def _merge_pooled(groups, y):
    """Union the current tie groups with the blocks pooled by PAV."""
    out = groups.copy()
    for i in range(1, N_LEVELS):
        if y[i] == y[i - 1] and out[i] != out[i - 1]:
            out[out == out[i]] = out[i - 1]
    return out


def radial_coverage(radii, bins: int = 20) -> float:
    counts, _ = np.histogram(np.clip(radii, 0, 1), bins=bins, range=(0.0, 1.0))
    return float(np.mean(counts > 0))


def estimate_vignette(pairs, ir: InverseResponse, config: CalibrationConfig = CalibrationConfig()) -> VignetteModel:
    """Fit ``(a2, a4, a6)`` to log irradiance ratios of radial-motion pairs.

    With the response fixed, ``log(f^-1(m1)/f^-1(m2)) - log(e1/e2)`` equals
    ``log V(r1) - log V(r2)``. An algebraic linear solve seeds Huber-weighted
    Gauss-Newton in the log domain; ``V(0) = 1`` holds by construction and
    the attenuation-only constraint is enforced when the free fit breaks it.
    """
    pairs = PairSet.from_pairs(pairs)
    if len(pairs) < config.min_vignette_pairs:
        raise NotReadyError(f"{len(pairs)} radial-motion pairs, need {config.min_vignette_pairs}")
    if np.max(np.abs(pairs.r1 - pairs.r2)) < 1e-9:
        raise UnobservableError("no radial motion: vignette ratio is identically 1")
    cov = radial_coverage(np.concatenate([pairs.r1, pairs.r2]))
    if cov < config.min_coverage:
        raise UnobservableError(f"radii cover {100 * cov:.0f}% of [0, 1], need {100 * config.min_coverage:.0f}%")
    pairs = _subsample(pairs, config.max_pairs)
    f1, f2 = ir(pairs.m1), ir(pairs.m2)
    ok = (f1 > 0) & (f2 > 0)
    if not ok.any():
        raise DataError("no pair with positive irradiance")
    y = np.log(f1[ok] / f2[ok]) - np.log(pairs.ratio[ok])
    p1, p2 = _powers(pairs.r1[ok]), _powers(pairs.r2[ok])

    ey = np.exp(y)
    a, *_ = np.linalg.lstsq(p1 - ey[:, None] * p2, ey - 1.0, rcond=None)

    def residual(a):
        v1 = 1.0 + p1 @ a
        v2 = 1.0 + p2 @ a
        if np.any(v1 <= 0) or np.any(v2 <= 0):
            return None, None
        return np.log(v1) - np.log(v2) - y, p1 / v1[:, None] - p2 / v2[:, None]

    w = np.ones(len(y))
    for _ in range(config.huber_rounds):
        for _ in range(50):
            r, J = residual(a)
            if r is None:
                break
            JW = J * w[:, None]
            step = np.linalg.lstsq(JW.T @ J, -JW.T @ r, rcond=None)[0]
            a_new = a + step
            if residual(a_new)[0] is None:
                break
            a = a_new
            if np.max(np.abs(step)) < 1e-12:
                break
        r, _ = residual(a)
        if r is None:
            break
        w = _huber_weights(r)

    grid = np.linspace(0.0, 1.0, 1001)
    if np.all(1.0 + _powers(grid) @ a > 0) and _excess(a) <= 0:
        return VignetteModel(*a)
    return VignetteModel(*_constrained_fit(a, p1, p2, y, w, grid))


def _excess(a) -> float:
    """Maximum over s = r^2 in [0, 1] of ``a2 + a4 s + a6 s^2``.

    ``V(r) = 1 + s q(s)``, so ``V <= 1`` on [0, 1] exactly when this is <= 0.
    """
    a2, a4, a6 = a
    s = [0.0, 1.0]
    if a6 < 0 and 0 < -a4 / (2 * a6) < 1:
        s.append(-a4 / (2 * a6))
    s = np.array(s)
    return float(np.max(a2 + a4 * s + a6 * s * s))


def _constrained_fit(a0, p1, p2, y, w, grid):
    G = _powers(grid)

    def cost(a):
        v1 = np.maximum(1.0 + p1 @ a, 1e-6)
        v2 = np.maximum(1.0 + p2 @ a, 1e-6)
        r = np.log(v1) - np.log(v2) - y
        return float(np.sum(w * r * r))

    cons = [
        {"type": "ineq", "fun": lambda a: -(G @ a)},  # V <= 1
        {"type": "ineq", "fun": lambda a: 1.0 + G @ a - 1e-3},  # V > 0
    ]
    start = np.minimum(a0, 0.0)
    res = optimize.minimize(cost, start, method="SLSQP", constraints=cons, options={"ftol": 1e-14, "maxiter": 500})
    a = res.x.copy()
    excess = _excess(a)
    if excess > 0:
        # lowering a2 by the excess pulls V under one everywhere and keeps V(0) = 1
        a[0] -= excess
    return a


def validate_exposure(pairs, ir: InverseResponse, v: VignetteModel) -> ValidationReport:
    """Mean corrected irradiance ratio ``k`` for the pairs of one frame pair."""
    pairs = PairSet.from_pairs(pairs)
    if len(pairs) == 0:
        raise DataError("no pairs to validate")
    if len(np.unique(pairs.frame1)) > 1 or len(np.unique(pairs.frame2)) > 1:
        raise DataError("validation pairs must come from a single frame pair")
    f1, f2 = ir(pairs.m1), ir(pairs.m2)
    v1, v2 = v._poly(pairs.r1), v._poly(pairs.r2)
    ok = (f2 > 0) & (v1 > 0) & (v2 > 0)
    if not ok.any():
        raise DataError("every validation term was excluded")
    k = float(np.mean(f1[ok] / f2[ok] * v2[ok] / v1[ok]))
    expected = float(pairs.e1[0] / pairs.e2[0])
    return ValidationReport(
        k=k,
        expected=expected,
        relative_error=abs(k - expected) / expected,
        n=int(ok.sum()),
        frame_ids=(int(pairs.frame1[0]), int(pairs.frame2[0])),
    )


class Phase(enum.IntEnum):
    COLLECTING_CRF = 0
    COLLECTING_VIGNETTE = 1
    VALIDATING = 2
    FROZEN = 3

    @property
    def label(self) -> str:
        return self.name.lower().replace("_", "-")


@dataclass(frozen=True)
class CalibrationState:
    """Immutable snapshot of the calibration state machine."""

    config: CalibrationConfig = CalibrationConfig()
    phase: Phase = Phase.COLLECTING_CRF
    exposures: tuple = ()  # ExposureRecords seen so far
    crf_pairs: tuple = ()  # chunks of same-radius PairSets
    vignette_pairs: tuple = ()  # chunks of radial-motion PairSets
    response: InverseResponse | None = None
    vignette: VignetteModel | None = None
    window: tuple = ()  # recent ValidationReports
    snapshot: CalibrationSnapshot | None = None
    last_error: str | None = None
    unobservable: bool = False
    frames_since_attempt: int = 0
    candidate: InverseResponse | VignetteModel | None = None  # last estimate of the active phase

    @property
    def last_frame_id(self) -> int | None:
        return self.exposures[-1].frame_id if self.exposures else None

    def pair_count(self) -> int:
        chunks = self.crf_pairs if self.phase == Phase.COLLECTING_CRF else self.vignette_pairs
        return sum(len(c) for c in chunks)

    def pass_rate(self) -> float:
        if not self.window:
            return 0.0
        return float(np.mean([r.relative_error < self.config.epsilon for r in self.window]))


def feed_frame(state: CalibrationState, frame: Frame, tracks: TrackSet) -> CalibrationState:
    """Advance the calibration with one frame and the tracks observed so far.

    Pairs ending in this frame are accumulated (same-radius pairs for the
    response, radial-motion pairs for the vignette); the active phase's
    estimator runs every ``retry_every`` frames. A frozen state is returned
    unchanged.
    """
    if state.phase == Phase.FROZEN:
        return state
    fid = frame.frame_id
    if state.last_frame_id is not None and fid <= state.last_frame_id:
        raise SequenceError(f"frame {fid} arrived after frame {state.last_frame_id}")
    cfg = state.config
    exposures = state.exposures + (frame.exposure_record,)
    exp_map = {r.frame_id: r.exposure for r in exposures}
    upd = dict(exposures=exposures, frames_since_attempt=state.frames_since_attempt + 1)

    if state.phase == Phase.COLLECTING_CRF:
        new = extract_pairs(tracks, exp_map, "same-radius", cfg.rho, frame_id=fid, max_span=cfg.max_span)
        upd["crf_pairs"] = state.crf_pairs + ((new,) if len(new) else ())
    if state.phase <= Phase.COLLECTING_VIGNETTE:
        new = extract_pairs(tracks, exp_map, "radial-motion", cfg.rho, frame_id=fid, max_span=cfg.max_span)
        upd["vignette_pairs"] = state.vignette_pairs + ((new,) if len(new) else ())
    state = dataclasses.replace(state, **upd)

    if state.phase == Phase.COLLECTING_CRF and state.frames_since_attempt >= cfg.retry_every:
        state = _try_crf(state)
    if state.phase == Phase.COLLECTING_VIGNETTE and state.frames_since_attempt >= cfg.retry_every:
        state = _try_vignette(state)
    if state.phase == Phase.VALIDATING:
        state = _validate(state, tracks, fid, exp_map)

    k_err = state.window[-1].relative_error if state.window else float("nan")
    log.info("phase=%s pairs=%d k_err=%.6f", state.phase.label, state.pair_count(), k_err)
    return state


_GRID = np.linspace(0.0, 1.0, 101)


def _try_crf(state: CalibrationState) -> CalibrationState:
    try:
        ir = estimate_crf(PairSet.concat(state.crf_pairs), state.config)
    except (NotReadyError, UnobservableError) as err:
        return dataclasses.replace(
            state, last_error=str(err), unobservable=isinstance(err, UnobservableError), frames_since_attempt=0
        )
    prev = state.candidate
    if prev is None or np.max(np.abs(ir.lut - prev.lut)) >= state.config.stability:
        return dataclasses.replace(
            state, candidate=ir, last_error="response estimate not yet stable", unobservable=False, frames_since_attempt=0
        )
    # the vignette stage may run on the same frame
    return dataclasses.replace(
        state,
        phase=Phase.COLLECTING_VIGNETTE,
        response=ir,
        candidate=None,
        crf_pairs=(),
        last_error=None,
        unobservable=False,
        frames_since_attempt=state.config.retry_every,
    )


def _try_vignette(state: CalibrationState) -> CalibrationState:
    try:
        v = estimate_vignette(PairSet.concat(state.vignette_pairs), state.response, state.config)
    except (NotReadyError, UnobservableError, DataError) as err:
        return dataclasses.replace(
            state, last_error=str(err), unobservable=isinstance(err, UnobservableError), frames_since_attempt=0
        )
    prev = state.candidate
    if prev is None or np.max(np.abs(v(_GRID) - prev(_GRID))) >= state.config.stability:
        return dataclasses.replace(
            state, candidate=v, last_error="vignette estimate not yet stable", unobservable=False, frames_since_attempt=0
        )
    return dataclasses.replace(
        state, phase=Phase.VALIDATING, vignette=v, candidate=None, vignette_pairs=(), last_error=None, unobservable=False
    )


def _validate(state: CalibrationState, tracks: TrackSet, fid: int, exp_map) -> CalibrationState:
    cfg = state.config
    earlier = [r.frame_id for r in state.exposures if r.frame_id <= fid - cfg.validation_gap]
    if not earlier:
        return state
    partner = earlier[-1]
    pairs = extract_pairs(tracks, exp_map, "all", frame_id=fid, max_span=fid - partner)
    pairs = pairs[pairs.frame1 == partner]
    if len(pairs) < cfg.min_validation_points:
        return state
    try:
        report = validate_exposure(pairs, state.response, state.vignette)
    except DataError as err:
        return dataclasses.replace(state, last_error=str(err))
    window = (state.window + (report,))[-cfg.window:]
    state = dataclasses.replace(state, window=window)
    rate = state.pass_rate()
    report = dataclasses.replace(report, pass_rate=rate)
    state = dataclasses.replace(state, window=window[:-1] + (report,))
    if len(window) >= cfg.window and rate >= cfg.pass_fraction:
        snap = CalibrationSnapshot(state.response, state.vignette, report, frozen=True)
        state = dataclasses.replace(state, phase=Phase.FROZEN, snapshot=snap, last_error=None)
    return state


class OnlineCalibrator:
    """Single-writer driver: tracker feeding the calibration state machine."""

    def __init__(self, config: CalibrationConfig = CalibrationConfig(), tracker: FeatureTracker | None = None):
        self.state = CalibrationState(config=config)
        self.tracker = tracker or FeatureTracker()
        self.phases: list[Phase] = []

    def process(self, frame: Frame) -> CalibrationState:
        if self.state.phase == Phase.FROZEN:
            return self.state
        tracks = self.tracker.process(frame)
        self.state = feed_frame(self.state, frame, tracks)
        self.phases.append(self.state.phase)
        return self.state

    def run(self, frames) -> CalibrationState:
        for f in frames:
            if self.process(f).phase == Phase.FROZEN:
                break
        return self.state

    @property
    def snapshot(self) -> CalibrationSnapshot | None:
        return self.state.snapshot


def run_pipeline(frames, config: CalibrationConfig = CalibrationConfig(), tracker: FeatureTracker | None = None, on_state=None) -> CalibrationState:
    """Track and calibrate on two threads.

    A producer thread runs the tracker and hands each frame's new
    observations to the calling thread, which is the only one that updates
    the calibration state. The result equals :meth:`OnlineCalibrator.run`
    on the same frames. ``on_state(frame, state)`` is called after every
    update.
    """
    tracker = tracker or FeatureTracker()
    handoff: queue.Queue = queue.Queue(maxsize=4)
    stop = threading.Event()
    done = object()

    def put(item):
        while not stop.is_set():
            try:
                handoff.put(item, timeout=0.1)
                return
            except queue.Full:
                continue

    def produce():
        try:
            for frame in frames:
                if stop.is_set():
                    break
                tracks = tracker.process(frame)
                put((frame, tracks.observations_in(frame.frame_id)))
        except BaseException as err:  # re-raised on the consumer side
            put(err)
        put(done)

    worker = threading.Thread(target=produce, name="photocal-tracker", daemon=True)
    worker.start()
    state = CalibrationState(config=config)
    mirror = TrackSet()
    try:
        while True:
            item = handoff.get()
            if item is done:
                break
            if isinstance(item, BaseException):
                raise item
            frame, new = item
            for tid in sorted(new):
                mirror.add(tid, new[tid])
            state = feed_frame(state, frame, mirror)
            if on_state is not None:
                on_state(frame, state)
            if state.phase == Phase.FROZEN:
                break
    finally:
        stop.set()
        worker.join()
    return state
