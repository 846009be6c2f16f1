"""Readers and writers for dataset files.

Text formats are whitespace separated, one record per line. Blank lines and
lines starting with ``#`` are ignored. Floats are written with ``repr`` so
every write-then-read round trip reproduces the values bit for bit.

Binary images use the portable graymap container (``P5``): 8-bit samples,
or 16-bit big-endian samples with maxval 65535.

Every rejection raises a :class:`~photocal.errors.FormatError` subclass
whose message starts with ``path:line`` (text) or ``path:byte N`` (binary).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import DomainError, FormatError, ModelError, ParseError, RecordError
from .evaluation import Trajectory
from .geometry import PinholeCamera, PoseSE3
from .photometry import N_LEVELS, ExposureRecord, Frame, InverseResponse, VignetteModel, radius_map
from .synth import SceneSpec

# -- text helpers -----------------------------------------------------------


def _records(path) -> Iterator[tuple[int, list[str]]]:
    try:
        text = Path(path).read_text(encoding="ascii")
    except UnicodeDecodeError as err:
        raise ParseError(f"not an ASCII text file ({err.reason})", path) from None
    except FileNotFoundError:
        raise ParseError("file not found", path) from None
    for n, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if s and not s.startswith("#"):
            yield n, s.split()


def _float(tok: str, what: str, path, line: int) -> float:
    try:
        v = float(tok)
    except ValueError:
        raise ParseError(f"{what}: cannot parse {tok!r} as a number", path, line) from None
    if not math.isfinite(v):
        raise ParseError(f"{what}: {tok!r} is not finite", path, line)
    return v


def _int(tok: str, what: str, path, line: int) -> int:
    try:
        return int(tok)
    except ValueError:
        raise ParseError(f"{what}: cannot parse {tok!r} as an integer", path, line) from None


def _fields(toks, n: int, layout: str, path, line: int):
    if len(toks) != n:
        raise ParseError(f"expected {n} fields ({layout}), got {len(toks)}", path, line)
    return toks


def _write_lines(path, lines) -> None:
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="ascii")


def _r(x) -> str:
    return repr(float(x))


# -- times ----------------------------------------------------------------------


def read_times(path) -> list[ExposureRecord]:
    """``frame_id timestamp exposure_ms`` per line; ids strictly increasing."""
    out: list[ExposureRecord] = []
    for n, toks in _records(path):
        fid, ts, ex = _fields(toks, 3, "frame_id timestamp exposure_ms", path, n)
        fid = _int(fid, "frame_id", path, n)
        ts = _float(ts, "timestamp", path, n)
        ex = _float(ex, "exposure", path, n)
        if ex <= 0:
            raise RecordError(f"exposure must be positive, got {ex!r}", path, n)
        if fid < 0:
            raise RecordError(f"frame id must be >= 0, got {fid}", path, n)
        if out and fid <= out[-1].frame_id:
            raise RecordError(f"frame id {fid} does not follow {out[-1].frame_id}", path, n)
        out.append(ExposureRecord(fid, ts, ex))
    return out


def write_times(path, records) -> None:
    _write_lines(path, (f"{r.frame_id} {_r(r.timestamp)} {_r(r.exposure)}" for r in records))


# -- response -------------------------------------------------------------------


def read_response(path) -> InverseResponse:
    """256 ascending values, normalized by the last one."""
    vals, where = [], []
    for n, toks in _records(path):
        for t in toks:
            vals.append(_float(t, "response value", path, n))
            where.append(n)
    if len(vals) != N_LEVELS:
        raise FormatError(f"expected {N_LEVELS} response values, got {len(vals)}", path, where[-1] if where else None)
    v = np.array(vals)
    bad = np.nonzero(np.diff(v) < 0)[0]
    if len(bad):
        raise FormatError(f"response decreases at value {bad[0] + 1} ({vals[bad[0]]!r} > {vals[bad[0] + 1]!r})", path, where[bad[0] + 1])
    if v[0] != 0:
        raise FormatError(f"first response value must be 0, got {vals[0]!r}", path, where[0])
    if v[-1] <= 0:
        raise FormatError("last response value must be positive", path, where[-1])
    return InverseResponse(v / v[-1])


def write_response(path, ir: InverseResponse) -> None:
    """One line of 256 values; read back bit-exactly."""
    _write_lines(path, [" ".join(_r(x) for x in ir.lut)])


# -- portable graymap -------------------------------------------------------


def _pgm_header(data: bytes, path):
    pos, toks = 2, []
    while len(toks) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        tok = data[start:pos]
        if not tok:
            raise FormatError("header ends early", path, offset=start)
        if not tok.isdigit():
            raise FormatError(f"header field {tok[:16]!r} is not a decimal integer", path, offset=start)
        toks.append((int(tok), start))
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise FormatError("missing whitespace after maxval", path, offset=pos)
    return toks, pos + 1


def read_pgm(path) -> tuple[np.ndarray, int]:
    """Return ``(image, maxval)``; 16-bit images come back as ``uint16``."""
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise FormatError("file not found", path) from None
    if data[:2] != b"P5":
        raise FormatError(f"bad magic {data[:2]!r}, expected b'P5'", path, offset=0)
    ((w, wo), (h, ho), (maxval, mo)), start = _pgm_header(data, path)
    if w <= 0:
        raise FormatError("width must be positive", path, offset=wo)
    if h <= 0:
        raise FormatError("height must be positive", path, offset=ho)
    if not 0 < maxval < 65536:
        raise FormatError(f"maxval {maxval} outside [1, 65535]", path, offset=mo)
    size = 1 if maxval < 256 else 2
    need = w * h * size
    have = len(data) - start
    if have < need:
        raise FormatError(f"pixel data truncated: {have} of {need} bytes", path, offset=len(data))
    if have > need:
        raise FormatError(f"{have - need} trailing bytes after pixel data", path, offset=start + need)
    dtype = np.dtype(np.uint8) if size == 1 else np.dtype(">u2")
    img = np.frombuffer(data, dtype=dtype, count=w * h, offset=start).reshape(h, w)
    over = np.nonzero(img.reshape(-1) > maxval)[0]
    if len(over):
        raise FormatError(f"sample {int(img.reshape(-1)[over[0]])} exceeds maxval {maxval}", path, offset=start + int(over[0]) * size)
    return img.astype(np.uint8 if size == 1 else np.uint16), maxval


def write_pgm(path, image, maxval: int | None = None) -> None:
    img = np.asarray(image)
    if img.ndim != 2:
        raise DomainError("image must be 2-D")
    if maxval is None:
        maxval = 255 if img.dtype == np.uint8 else 65535
    if not 0 < maxval < 65536:
        raise DomainError("maxval must be in [1, 65535]")
    if img.size and (img.min() < 0 or img.max() > maxval):
        raise DomainError("sample outside [0, maxval]")
    h, w = img.shape
    body = img.astype(np.uint8 if maxval < 256 else ">u2").tobytes()
    Path(path).write_bytes(f"P5\n{w} {h}\n{maxval}\n".encode("ascii") + body)


# -- vignette image -----------------------------------------------------------


def fit_vignette(dense: np.ndarray, bins: int = 100, principal_point=None) -> VignetteModel:
    """Least-squares even polynomial through radius-binned attenuation.

    Pixels equal to zero carry no attenuation data and are left out.
    """
    dense = np.asarray(dense, dtype=np.float64)
    r = radius_map(dense.shape, principal_point).reshape(-1)
    v = dense.reshape(-1)
    keep = v > 0
    r, v = r[keep], v[keep]
    if len(v) == 0:
        raise ModelError("vignette map has no positive pixels")
    idx = np.minimum((r * bins).astype(np.intp), bins - 1)
    cnt = np.bincount(idx, minlength=bins)
    has = cnt > 0
    rb = np.bincount(idx, r, bins)[has] / cnt[has]
    vb = np.bincount(idx, v, bins)[has] / cnt[has]
    sw = np.sqrt(cnt[has].astype(np.float64))
    A = np.stack([rb**2, rb**4, rb**6], axis=1)
    coef, *_ = np.linalg.lstsq(A * sw[:, None], (vb - 1.0) * sw, rcond=None)
    return VignetteModel(*map(float, coef))


def read_vignette_image(path) -> tuple[np.ndarray, VignetteModel]:
    """Dense attenuation (``values / 65535``) and its fitted model."""
    img, maxval = read_pgm(path)
    if maxval != 65535:
        raise FormatError(f"vignette image must be 16-bit with maxval 65535, got maxval {maxval}", path, offset=0)
    dense = img.astype(np.float64) / 65535.0
    try:
        model = fit_vignette(dense)
    except ModelError as err:
        raise FormatError(f"vignette fit failed: {err}", path) from None
    return dense, model


def vignette_image(v: VignetteModel, shape) -> np.ndarray:
    """``V(r)`` over an image, quantized to 16 bits."""
    q = np.floor(v(radius_map(shape)) * 65535.0 + 0.5)
    return np.clip(q, 0, 65535).astype(np.uint16)


def write_vignette_image(path, dense_or_model, shape=None) -> None:
    if isinstance(dense_or_model, VignetteModel):
        if shape is None:
            raise DomainError("shape is required when writing a vignette model")
        img = vignette_image(dense_or_model, shape)
    else:
        d = np.asarray(dense_or_model, dtype=np.float64)
        if np.any(~np.isfinite(d)) or d.min() < 0 or d.max() > 1:
            raise DomainError("dense vignette values must lie in [0, 1]")
        img = np.floor(d * 65535.0 + 0.5).astype(np.uint16)
    write_pgm(path, img, 65535)


# -- tracks ---------------------------------------------------------------------


def read_tracks(path) -> list[tuple[int, int, float, float]]:
    """Rows ``(track_id, frame_id, x, y)``; frames increase within a track."""
    rows = []
    last: dict[int, int] = {}
    for n, toks in _records(path):
        tid, fid, x, y = _fields(toks, 4, "track_id frame_id x y", path, n)
        tid, fid = _int(tid, "track_id", path, n), _int(fid, "frame_id", path, n)
        x, y = _float(x, "x", path, n), _float(y, "y", path, n)
        if tid in last and fid <= last[tid]:
            raise RecordError(f"track {tid}: frame {fid} does not follow frame {last[tid]}", path, n)
        last[tid] = fid
        rows.append((tid, fid, x, y))
    return rows


def write_tracks(path, tracks) -> None:
    """``tracks`` is a TrackSet or an iterable of rows."""
    if hasattr(tracks, "tracks"):
        rows = [(tid, o.frame_id, o.x, o.y) for tid in sorted(tracks.tracks) for o in tracks.tracks[tid]]
    else:
        rows = list(tracks)
    _write_lines(path, (f"{t} {f} {_r(x)} {_r(y)}" for t, f, x, y in rows))


# -- trajectories -------------------------------------------------------------

QUATERNION_TOLERANCE = 1e-6


def read_trajectory(path) -> Trajectory:
    """``timestamp tx ty tz qx qy qz qw``; quaternions must be unit length."""
    ts, poses = [], []
    for n, toks in _records(path):
        toks = _fields(toks, 8, "timestamp tx ty tz qx qy qz qw", path, n)
        v = [_float(t, name, path, n) for t, name in zip(toks, ("timestamp", "tx", "ty", "tz", "qx", "qy", "qz", "qw"))]
        q = np.array(v[4:])
        norm = float(np.linalg.norm(q))
        if abs(norm - 1.0) > QUATERNION_TOLERANCE:
            raise RecordError(f"quaternion norm {norm!r} is not 1", path, n)
        if ts and v[0] <= ts[-1]:
            raise RecordError(f"timestamp {v[0]!r} does not follow {ts[-1]!r}", path, n)
        ts.append(v[0])
        poses.append(PoseSE3.from_quaternion(v[1:4], q))
    return Trajectory(np.array(ts), tuple(poses))


def write_trajectory(path, traj: Trajectory) -> None:
    lines = []
    for t, p in zip(traj.timestamps, traj.poses):
        vals = [t, *p.t, *p.quaternion()]
        lines.append(" ".join(_r(x) for x in vals))
    _write_lines(path, lines)


# -- camera -----------------------------------------------------------------------


def read_camera(path) -> PinholeCamera:
    """One line ``fx fy cx cy width height``."""
    recs = list(_records(path))
    if len(recs) != 1:
        raise ParseError(f"expected one camera line, got {len(recs)}", path, recs[1][0] if len(recs) > 1 else None)
    n, toks = recs[0]
    fx, fy, cx, cy, w, h = _fields(toks, 6, "fx fy cx cy width height", path, n)
    vals = [_float(t, k, path, n) for t, k in ((fx, "fx"), (fy, "fy"), (cx, "cx"), (cy, "cy"))]
    w, h = _int(w, "width", path, n), _int(h, "height", path, n)
    if vals[0] <= 0 or vals[1] <= 0 or w <= 0 or h <= 0:
        raise RecordError("focal lengths and image size must be positive", path, n)
    return PinholeCamera(*vals, w, h)


def write_camera(path, cam: PinholeCamera) -> None:
    _write_lines(path, [f"{_r(cam.fx)} {_r(cam.fy)} {_r(cam.cx)} {_r(cam.cy)} {cam.width} {cam.height}"])


# -- scene description ----------------------------------------------------------


def read_scene_spec(path) -> SceneSpec:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ParseError("file not found", path) from None
    except json.JSONDecodeError as err:
        raise ParseError(f"invalid JSON: {err.msg} (column {err.colno})", path, err.lineno) from None
    if not isinstance(d, dict):
        raise FormatError("scene description must be a JSON object", path, 1)
    try:
        return SceneSpec.from_dict(d)
    except (TypeError, ValueError) as err:
        raise RecordError(str(err), path) from None


def write_scene_spec(path, spec: SceneSpec) -> None:
    Path(path).write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- dataset layout ---------------------------------------------------------------


@dataclass(frozen=True)
class DatasetLayout:
    """``images/NNNNN.pgm``, ``times.txt`` and optional calibration files."""

    root: Path

    @property
    def image_dir(self) -> Path:
        return Path(self.root) / "images"

    @property
    def times(self) -> Path:
        return Path(self.root) / "times.txt"

    @property
    def response(self) -> Path:
        return Path(self.root) / "pcalib.txt"

    @property
    def vignette(self) -> Path:
        return Path(self.root) / "vignette.pgm"

    @property
    def camera(self) -> Path:
        return Path(self.root) / "camera.txt"

    def image_path(self, frame_id: int) -> Path:
        return self.image_dir / f"{frame_id:05d}.pgm"

    def write_frame(self, frame: Frame) -> None:
        os.makedirs(self.image_dir, exist_ok=True)
        write_pgm(self.image_path(frame.frame_id), frame.image, 255)

    def read_frames(self) -> list[Frame]:
        """Frames in times-file order; image and times counts must agree."""
        records = read_times(self.times)
        names = sorted(p.name for p in self.image_dir.glob("*.pgm")) if self.image_dir.is_dir() else []
        expected = {self.image_path(r.frame_id).name for r in records}
        if len(names) != len(records) or set(names) != expected:
            extra = sorted(set(names) - expected)
            missing = sorted(expected - set(names))
            detail = f"missing {missing[:3]}" if missing else f"unexpected {extra[:3]}"
            raise RecordError(
                f"{len(records)} frames in times file but {len(names)} images ({detail})", self.times
            )
        frames = []
        for r in records:
            path = self.image_path(r.frame_id)
            img, maxval = read_pgm(path)
            if maxval != 255:
                raise FormatError(f"frame images must be 8-bit, got maxval {maxval}", path, offset=0)
            try:
                frames.append(Frame(img, r))
            except (DomainError, ValueError) as err:
                raise FormatError(str(err), path) from None
        return frames
