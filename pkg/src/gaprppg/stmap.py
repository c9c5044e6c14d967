"""ROI traces -> normalized, windowed, row-resized spatio-temporal maps.

Also owns the on-disk ``STM1`` binary format and its JSON sidecar.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline

from ._validation import ValidationError, check_positive, check_series

TARGET_FPS = 30.0
STM1_MAGIC = b"STM1"
TASKS = ("bvp", "hr", "rr", "spo2")

_LABEL_RANGES = {"hr": (30.0, 240.0), "rr": (4.0, 60.0), "spo2": (50.0, 100.0)}


@dataclass
class RoiTraceClip:
    """Per-ROI RGB channel means, shape ``(R, F, 3)``."""

    traces: np.ndarray
    fps: float
    subject_id: str = ""
    domain_id: str = ""

    def __post_init__(self):
        self.traces = np.asarray(self.traces, dtype=np.float64)
        if self.traces.ndim != 3 or self.traces.shape[2] != 3:
            raise ValidationError(f"traces must be R x F x 3, got {self.traces.shape}")
        if self.traces.shape[0] < 1 or self.traces.shape[1] < 2:
            raise ValidationError("need at least one ROI and two frames")
        self.fps = check_positive(self.fps, "fps")
        if not np.all(np.isfinite(self.traces)):
            raise ValidationError("traces contain non-finite values")


@dataclass
class STMap:
    """A ``T x W x 3`` map. ``degenerate`` marks (row, channel) slices that were constant."""

    data: np.ndarray
    fps: float = TARGET_FPS
    clip_id: str = ""
    start_index: int = 0
    degenerate: np.ndarray | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def T(self) -> int:
        return self.data.shape[0]

    @property
    def W(self) -> int:
        return self.data.shape[1]


@dataclass
class VitalLabels:
    bvp: np.ndarray | None = None
    hr_bpm: float | None = None
    rr_bpm: float | None = None
    spo2_pct: float | None = None

    def __post_init__(self):
        if self.bvp is not None:
            self.bvp = check_series(self.bvp, min_length=1, name="bvp")
        for key, attr in (("hr", "hr_bpm"), ("rr", "rr_bpm"), ("spo2", "spo2_pct")):
            value = getattr(self, attr)
            if value is None:
                continue
            lo, hi = _LABEL_RANGES[key]
            value = float(value)
            if not (lo <= value <= hi):
                raise ValidationError(f"{attr}={value} outside [{lo}, {hi}]")
            setattr(self, attr, value)

    @property
    def mask(self) -> tuple[bool, bool, bool, bool]:
        return (self.bvp is not None, self.hr_bpm is not None, self.rr_bpm is not None, self.spo2_pct is not None)

    def value(self, task: str):
        return {"bvp": self.bvp, "hr": self.hr_bpm, "rr": self.rr_bpm, "spo2": self.spo2_pct}[task]

    def to_json(self) -> dict:
        out = {}
        if self.hr_bpm is not None:
            out["hr_bpm"] = self.hr_bpm
        if self.rr_bpm is not None:
            out["rr_bpm"] = self.rr_bpm
        if self.spo2_pct is not None:
            out["spo2_pct"] = self.spo2_pct
        if self.bvp is not None:
            out["bvp"] = [float(v) for v in self.bvp]
        return out

    @classmethod
    def from_json(cls, labels: dict, mask=None) -> "VitalLabels":
        out = cls(
            bvp=np.asarray(labels["bvp"], dtype=np.float64) if "bvp" in labels else None,
            hr_bpm=labels.get("hr_bpm"),
            rr_bpm=labels.get("rr_bpm"),
            spo2_pct=labels.get("spo2_pct"),
        )
        if mask is not None and tuple(bool(m) for m in mask) != out.mask:
            raise ValidationError(f"sidecar mask {list(mask)} disagrees with present labels {list(out.mask)}")
        return out


def resample_to_30fps(series, fps: float) -> np.ndarray:
    """Cubic-spline resample onto a uniform grid at (approximately) 30 samples/s.

    The grid has ``round(n * 30 / fps)`` points spanning the original first and
    last sample times exactly, so endpoints are preserved and a 30 fps input
    comes back unchanged.
    """
    x = check_series(series, min_length=4, name="series")
    fps = check_positive(fps, "fps")
    if abs(fps - TARGET_FPS) < 1e-12:
        return x.copy()
    t = np.arange(x.size) / fps
    n_out = max(2, int(round(x.size * TARGET_FPS / fps)))
    grid = np.linspace(t[0], t[-1], n_out)
    out = CubicSpline(t, x)(grid)
    out[0], out[-1] = x[0], x[-1]
    return out


def resample_traces(traces: np.ndarray, fps: float) -> np.ndarray:
    """Resample an ``(R, F, 3)`` block along frames; returns ``(F', R, 3)``."""
    traces = np.asarray(traces, dtype=np.float64)
    R, F, C = traces.shape
    if abs(fps - TARGET_FPS) < 1e-12:
        return np.ascontiguousarray(traces.transpose(1, 0, 2))
    if F < 4:
        raise ValidationError("need at least 4 frames to resample")
    t = np.arange(F) / fps
    n_out = max(2, int(round(F * TARGET_FPS / fps)))
    grid = np.linspace(t[0], t[-1], n_out)
    flat = traces.transpose(1, 0, 2).reshape(F, R * C)
    out = CubicSpline(t, flat, axis=0)(grid)
    out[0], out[-1] = flat[0], flat[-1]
    return out.reshape(n_out, R, C)


def minmax_normalize(data: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per (row, channel) min-max over time. Constant slices become 0.5 and are flagged."""
    lo = data.min(axis=0, keepdims=True)
    hi = data.max(axis=0, keepdims=True)
    span = hi - lo
    degenerate = span[0] <= 1e-12 * np.maximum(1.0, np.abs(hi[0]))
    safe = np.where(degenerate[None], 1.0, span)
    out = (data - lo) / safe
    out = np.where(degenerate[None], 0.5, out)
    return np.clip(out, 0.0, 1.0), degenerate


def traces_to_stmap(clip: RoiTraceClip, *, normalize: bool = True, clip_id: str = "") -> STMap:
    """Full-length STMap (T = resampled frames, W = ROIs), min-max normalized over the whole clip.

    ``normalize=False`` keeps raw resampled channel means, which the classical
    RoR and pulse methods need.
    """
    data = resample_traces(clip.traces, clip.fps)
    degenerate = np.zeros(data.shape[1:], dtype=bool)
    if normalize:
        data, degenerate = minmax_normalize(data)
        if degenerate.any():
            warnings.warn(f"{int(degenerate.sum())} constant row/channel slices set to 0.5", stacklevel=2)
    return STMap(data=data, fps=TARGET_FPS, clip_id=clip_id, start_index=0, degenerate=degenerate)


def window_starts(T: int, window: int = 256, stride: int = 10) -> list[int]:
    if T < window:
        return []
    return list(range(0, T - window + 1, stride))


def window_stmap(stmap: STMap, window: int = 256, stride: int = 10) -> list[STMap]:
    if window < 1 or stride < 1:
        raise ValidationError("window and stride must be positive")
    starts = window_starts(stmap.T, window, stride)
    if not starts:
        warnings.warn(f"map length {stmap.T} shorter than window {window}: no windows", stacklevel=2)
    return [
        STMap(
            data=stmap.data[s : s + window],
            fps=stmap.fps,
            clip_id=stmap.clip_id,
            start_index=stmap.start_index + s,
            degenerate=stmap.degenerate,
        )
        for s in starts
    ]


def resize_rows_array(data: np.ndarray, rows: int = 64) -> np.ndarray:
    """Linear interpolation along axis 1 of a ``(T, W, C)`` array."""
    data = np.asarray(data, dtype=np.float64)
    W = data.shape[1]
    if W < 2:
        raise ValidationError("row resize needs at least 2 input rows")
    pos = np.linspace(0.0, W - 1.0, rows)
    lo = np.minimum(np.floor(pos).astype(int), W - 2)
    frac = (pos - lo)[None, :, None]
    out = data[:, lo, :] * (1.0 - frac) + data[:, lo + 1, :] * frac
    return out


def resize_rows(stmap, rows: int = 64):
    """Resize the ROI axis to ``rows`` (default 64) and clamp to [0, 1]."""
    if isinstance(stmap, STMap):
        out = np.clip(resize_rows_array(stmap.data, rows), 0.0, 1.0)
        return STMap(data=out, fps=stmap.fps, clip_id=stmap.clip_id, start_index=stmap.start_index)
    arr = np.asarray(stmap, dtype=np.float64)
    if arr.ndim != 3:
        raise ValidationError(f"expected T x W x C, got {arr.shape}")
    return np.clip(resize_rows_array(arr, rows), 0.0, 1.0)


# --------------------------------------------------------------------------- STM1 I/O


def write_stm1(path, data: np.ndarray) -> None:
    data = np.asarray(data)
    if data.ndim != 3:
        raise ValidationError(f"STM1 payload must be 3-D, got {data.shape}")
    T, W, C = data.shape
    with open(path, "wb") as fh:
        fh.write(STM1_MAGIC)
        fh.write(struct.pack("<III", T, W, C))
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def read_stm1(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != STM1_MAGIC:
        raise ValidationError(f"{path}: bad magic {blob[:4]!r}")
    T, W, C = struct.unpack("<III", blob[4:16])
    payload = blob[16:]
    if len(payload) != 4 * T * W * C:
        raise ValidationError(f"{path}: payload size {len(payload)} does not match header {T}x{W}x{C}")
    return np.frombuffer(payload, dtype="<f4").reshape(T, W, C).astype(np.float64)


@dataclass
class Sidecar:
    subject_id: str
    domain_id: str
    fps: float
    start_index: int
    labels: VitalLabels = field(default_factory=VitalLabels)

    def to_json(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "domain_id": self.domain_id,
            "fps": self.fps,
            "start_index": self.start_index,
            "labels": self.labels.to_json(),
            "mask": list(self.labels.mask),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Sidecar":
        try:
            return cls(
                subject_id=str(obj["subject_id"]),
                domain_id=str(obj["domain_id"]),
                fps=float(obj["fps"]),
                start_index=int(obj.get("start_index", 0)),
                labels=VitalLabels.from_json(obj.get("labels", {}), obj.get("mask")),
            )
        except KeyError as exc:
            raise ValidationError(f"sidecar missing field {exc}") from None


def write_sidecar(path, sidecar: Sidecar) -> None:
    with open(path, "w") as fh:
        json.dump(sidecar.to_json(), fh, sort_keys=True)
        fh.write("\n")


def read_sidecar(path) -> Sidecar:
    with open(path) as fh:
        return Sidecar.from_json(json.load(fh))


def save_stmap(stem, data: np.ndarray, sidecar: Sidecar) -> None:
    """Write ``<stem>.stm`` and ``<stem>.json``."""
    stem = Path(stem)
    write_stm1(stem.with_suffix(".stm"), data)
    write_sidecar(stem.with_suffix(".json"), sidecar)
