"""Classical pulse extraction (GREEN, CHROM, POS) and ratio-of-ratios SpO2.

The pulse methods and RoR expect *un-normalized* channel means (e.g.
``traces_to_stmap(clip, normalize=False)`` or a dataset's ``.raw.stm``); min-max
normalized maps destroy the channel ratios these methods rely on.
"""

from __future__ import annotations

import math
import warnings
from pathlib import Path
from dataclasses import dataclass

import numpy as np
from scipy import signal as sps
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import DegenerateSignalError, ValidationError, check_stmap_array
from .dsp import EPS_NORM, HR_BAND, RR_BAND, bandpass, power_spectrum
from .stmap import TARGET_FPS

# in-band power fraction within +-PEAK_HALF_WIDTH Hz of the peak; below this the estimate is flagged
CONFIDENCE_THRESHOLD = 0.5
PEAK_HALF_WIDTH = 0.12


@dataclass
class PulseEstimate:
    signal: np.ndarray
    hr_bpm: float
    method: str
    confidence: float = 1.0

    @property
    def low_confidence(self) -> bool:
        return self.confidence < CONFIDENCE_THRESHOLD


@dataclass
class SpO2Calibration:
    intercept: float
    slope: float
    fit_r2: float

    def apply(self, ror):
        return apply_calibration(self, ror)


def _roi_mean(stmap, min_length=32) -> np.ndarray:
    data = check_stmap_array(stmap, min_length=min_length)
    degenerate = getattr(stmap, "degenerate", None)
    if degenerate is not None and np.size(degenerate) and np.all(degenerate):
        raise DegenerateSignalError("all rows are degenerate")
    return data.mean(axis=1)


def _estimate(pulse: np.ndarray, fps: float, method: str) -> PulseEstimate:
    pulse = pulse - pulse.mean()
    spec = power_spectrum(pulse, fps, band=HR_BAND, zero_pad=8, normalize=True)
    if spec.degenerate:
        raise DegenerateSignalError(f"{method}: no pulsatile component")
    peak = spec.peak_frequency()
    near = np.abs(spec.freqs - peak) <= PEAK_HALF_WIDTH
    confidence = float(spec.power[near].sum())
    return PulseEstimate(signal=pulse, hr_bpm=60.0 * peak, method=method, confidence=confidence)


def green_pulse(stmap, fps: float = TARGET_FPS) -> PulseEstimate:
    """ROI-averaged green channel, detrended and band-passed to the HR band."""
    g = _roi_mean(stmap)[:, 1]
    if np.ptp(g) <= EPS_NORM * max(1.0, abs(g.mean())):
        raise DegenerateSignalError("green: constant trace")
    g = sps.detrend(g)
    return _estimate(bandpass(g, fps, HR_BAND), fps, "green")


def _windows(n: int, win: int, step: int):
    start = 0
    while start + win <= n:
        yield start
        start += step


def chrom_pulse(stmap, fps: float = TARGET_FPS, win_s: float = 1.6) -> PulseEstimate:
    """Chrominance projection, Hann-weighted overlap-add over half-overlapping windows."""
    rgb = _roi_mean(stmap, min_length=48)
    n = rgb.shape[0]
    win = int(math.ceil(win_s * fps))
    win += win % 2
    nyq = fps / 2.0
    b, a = sps.butter(3, [HR_BAND[0] / nyq, min(HR_BAND[1], 0.99 * nyq) / nyq], btype="bandpass")
    out = np.zeros(n)
    hann = np.hanning(win)
    for s in _windows(n, win, win // 2):
        seg = rgb[s : s + win]
        base = seg.mean(axis=0)
        if np.any(base <= 0):
            warnings.warn(f"chrom: non-positive channel mean in window at {s}; skipped", stacklevel=2)
            continue
        norm = seg / base - 1.0
        x = 3 * norm[:, 0] - 2 * norm[:, 1]
        y = 1.5 * norm[:, 0] + norm[:, 1] - 1.5 * norm[:, 2]
        xf = sps.filtfilt(b, a, x, padlen=min(9, win - 1))
        yf = sps.filtfilt(b, a, y, padlen=min(9, win - 1))
        sy = yf.std()
        if sy <= EPS_NORM:
            warnings.warn(f"chrom: zero sigma_Y in window at {s}; skipped", stacklevel=2)
            continue
        out[s : s + win] += (xf - (xf.std() / sy) * yf) * hann
    if not np.any(out):
        raise DegenerateSignalError("chrom: every window was skipped")
    return _estimate(bandpass(sps.detrend(out), fps, HR_BAND), fps, "chrom")


_POS_PROJECTION = np.array([[0.0, 1.0, -1.0], [-2.0, 1.0, 1.0]])


def pos_pulse(stmap, fps: float = TARGET_FPS, win_s: float = 1.6) -> PulseEstimate:
    """Plane-orthogonal-to-skin projection with step-1 overlap-add."""
    rgb = _roi_mean(stmap, min_length=48)
    n = rgb.shape[0]
    win = int(math.ceil(win_s * fps))
    out = np.zeros(n)
    skipped = 0
    for s in range(0, n - win + 1):
        seg = rgb[s : s + win]
        base = seg.mean(axis=0)
        if np.any(base <= 0):
            skipped += 1
            continue
        proj = _POS_PROJECTION @ (seg / base).T
        s2 = proj[1].std()
        if s2 <= EPS_NORM:
            skipped += 1
            continue
        h = proj[0] + (proj[0].std() / s2) * proj[1]
        out[s : s + win] += h - h.mean()
    if skipped:
        warnings.warn(f"pos: skipped {skipped} windows with zero sigma or non-positive mean", stacklevel=2)
    if not np.any(out):
        raise DegenerateSignalError("pos: every window was skipped")
    return _estimate(bandpass(sps.detrend(out), fps, HR_BAND), fps, "pos")


PULSE_METHODS = {"green": green_pulse, "chrom": chrom_pulse, "pos": pos_pulse}


def ror_series(stmap, fps: float = TARGET_FPS, window_s: float = 1.0, channels=(0, 2)) -> np.ndarray:
    """Per-window ratio of ratios on the ROI-averaged raw trace.

    AC is the within-window standard deviation and DC the mean of each
    channel; non-overlapping windows of ``window_s`` seconds.
    """
    rgb = _roi_mean(stmap, min_length=1)
    n_win = int(round(window_s * fps))
    if n_win < max(2, int(math.ceil(0.5 * fps))):
        raise ValidationError(f"RoR window of {n_win} samples is shorter than 0.5 s")
    if rgb.shape[0] < n_win:
        raise ValidationError("map shorter than one RoR window")
    c1, c2 = channels
    n = (rgb.shape[0] // n_win) * n_win
    a = rgb[:n, c1].reshape(-1, n_win)
    b = rgb[:n, c2].reshape(-1, n_win)
    dc_a, dc_b = a.mean(axis=1), b.mean(axis=1)
    ac_a, ac_b = a.std(axis=1), b.std(axis=1)
    ok = (dc_a > 0) & (dc_b > 0) & (ac_b > 0)
    if not ok.all():
        warnings.warn(f"ror: dropped {int((~ok).sum())} windows with DC <= 0 or AC = 0", stacklevel=2)
    return (ac_a[ok] / dc_a[ok]) / (ac_b[ok] / dc_b[ok])


def fit_spo2_calibration(pairs) -> SpO2Calibration:
    """Ordinary least squares SpO2 = intercept + slope * RoR."""
    arr = np.asarray(pairs, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValidationError("pairs must be an (n, 2) array of (RoR, SpO2)")
    ror, spo2 = arr[:, 0], arr[:, 1]
    if np.unique(ror).size < 2:
        raise ValidationError("calibration needs at least 2 distinct RoR values (rank deficient)")
    design = np.column_stack([np.ones_like(ror), ror])
    coef, _, rank, _ = np.linalg.lstsq(design, spo2, rcond=None)
    if rank < 2:
        raise ValidationError("rank-deficient calibration fit")
    resid = spo2 - design @ coef
    ss_tot = float(np.sum((spo2 - spo2.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return SpO2Calibration(intercept=float(coef[0]), slope=float(coef[1]), fit_r2=r2)


def apply_calibration(calibration: SpO2Calibration, ror):
    out = np.clip(calibration.intercept + calibration.slope * np.asarray(ror, dtype=np.float64), 50.0, 100.0)
    return float(out) if out.ndim == 0 else out


class PulseRateEstimator(BaseEstimator):
    """Stateless HR estimator over a batch of raw maps; ``fit`` is a no-op."""

    def __init__(self, method: str = "pos", fps: float = TARGET_FPS):
        self.method = method
        self.fps = fps

    def fit(self, X=None, y=None):
        if self.method not in PULSE_METHODS:
            raise ValidationError(f"unknown method {self.method!r}; choose from {sorted(PULSE_METHODS)}")
        self.method_ = PULSE_METHODS[self.method]
        return self

    def predict(self, X) -> np.ndarray:
        if not hasattr(self, "method_"):
            self.fit()
        return np.array([self.method_(x, self.fps).hr_bpm for x in X])


class RoRSpO2Regressor(RegressorMixin, BaseEstimator):
    """Per-subject linear RoR -> SpO2 law."""

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64).reshape(-1)
        self.calibration_ = fit_spo2_calibration(np.column_stack([X, np.asarray(y, dtype=np.float64)]))
        self.intercept_ = self.calibration_.intercept
        self.coef_ = np.array([self.calibration_.slope])
        return self

    def predict(self, X):
        check_is_fitted(self, "calibration_")
        return np.atleast_1d(apply_calibration(self.calibration_, np.asarray(X, dtype=np.float64).reshape(-1)))


def respiratory_rate(stmap, fps: float = TARGET_FPS) -> float:
    """Breaths per minute from the dominant respiratory-band frequency of the ROI-mean green trace."""
    g = _roi_mean(stmap, min_length=int(fps * 8))[:, 1]
    spec = power_spectrum(sps.detrend(g), fps, band=RR_BAND, zero_pad=8, normalize=True)
    if spec.degenerate:
        raise DegenerateSignalError("no respiratory component")
    return 60.0 * spec.peak_frequency()


def run_baselines(root, methods=("green", "chrom", "pos"), calibration_clips: int = 2, domains=None) -> list:
    """Per-clip classical estimates over an STM1 dataset (un-normalized ``.raw.stm`` maps).

    SpO2 uses a per-subject RoR law fitted on the subject's first ``calibration_clips``
    SpO2-labeled clips; those clips are reported with ``calibration=1``.
    """
    from .dataset import read_manifest
    from .stmap import read_sidecar, read_stm1

    root = Path(root)
    manifest = read_manifest(root)
    rows = []
    for entry in manifest["domains"]:
        if domains is not None and entry["domain_id"] not in domains:
            continue
        by_subject = {}
        for rel in entry["clips"]:
            side = read_sidecar(root / f"{rel}.json")
            raw = read_stm1(root / f"{rel}.raw.stm")
            by_subject.setdefault(side.subject_id, []).append((rel, side, raw))
        for subject, clips in by_subject.items():
            rors = [float(np.mean(ror_series(raw, side.fps))) for _, side, raw in clips]
            labeled = [i for i, (_, side, _) in enumerate(clips) if side.labels.spo2_pct is not None]
            calib_idx = labeled[:calibration_clips]
            calibration = None
            if len(calib_idx) >= 2:
                try:
                    calibration = fit_spo2_calibration([(rors[i], clips[i][1].labels.spo2_pct) for i in calib_idx])
                except ValidationError:
                    calibration = None
            for i, (rel, side, raw) in enumerate(clips):
                lab = side.labels
                try:
                    rr = respiratory_rate(raw, side.fps)
                except (DegenerateSignalError, ValidationError):
                    rr = math.nan
                spo2 = calibration.apply(rors[i]) if calibration is not None else math.nan
                for method in methods:
                    if method not in PULSE_METHODS:
                        raise ValidationError(f"unknown method {method!r}")
                    try:
                        with warnings.catch_warnings():
                            warnings.simplefilter("ignore")
                            est = PULSE_METHODS[method](raw, side.fps)
                        hr, conf = est.hr_bpm, est.confidence
                    except DegenerateSignalError:
                        hr, conf = math.nan, 0.0
                    rows.append({
                        "domain": side.domain_id, "subject": subject, "clip": Path(rel).name, "method": method,
                        "hr": hr, "rr": rr, "spo2": spo2, "ror": rors[i], "confidence": conf,
                        "calibration": int(i in calib_idx and calibration is not None),
                        "hr_true": math.nan if lab.hr_bpm is None else lab.hr_bpm,
                        "rr_true": math.nan if lab.rr_bpm is None else lab.rr_bpm,
                        "spo2_true": math.nan if lab.spo2_pct is None else lab.spo2_pct,
                    })
    return rows
