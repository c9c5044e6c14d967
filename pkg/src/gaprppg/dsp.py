"""Spectral and temporal analysis kernels.

Everything here is numpy/scipy and side-effect free. The differentiable
counterparts used by the training losses live in :mod:`gaprppg.losses`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import integrate
from scipy import signal as sps
from scipy.interpolate import CubicSpline

from ._validation import DegenerateSignalError, ValidationError, check_positive, check_series

# Numerical floors, reused by the torch losses.
EPS_LOG = 1e-8
EPS_NORM = 1e-12

HR_BAND = (0.66, 4.0)
RR_BAND = (0.1, 0.5)
LF_BAND = (0.04, 0.15)
HF_BAND = (0.15, 0.4)


@dataclass
class Spectrum:
    freqs: np.ndarray
    power: np.ndarray
    band: tuple[float, float]
    normalized: bool
    degenerate: bool = False

    def peak_frequency(self) -> float:
        if self.degenerate:
            raise DegenerateSignalError("flat spectrum: no dominant frequency")
        # np.argmax returns the first maximum, i.e. ties go to the lower frequency
        return float(self.freqs[int(np.argmax(self.power))])


@dataclass
class SelfSimilarityMatrix:
    m: np.ndarray
    s: int
    zero_windows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def has_zero_windows(self) -> bool:
        return bool(self.zero_windows.any())


def bandpass(x, fps: float, band=HR_BAND, order: int = 2) -> np.ndarray:
    """Zero-phase Butterworth band-pass."""
    x = check_series(x, min_length=16)
    fps = check_positive(fps, "fps")
    nyq = fps / 2.0
    lo, hi = band
    hi = min(hi, 0.99 * nyq)
    b, a = sps.butter(order, [lo / nyq, hi / nyq], btype="bandpass")
    return sps.filtfilt(b, a, x, padlen=min(3 * max(len(a), len(b)), x.size - 1))


def power_spectrum(x, fps: float, band=HR_BAND, zero_pad: int = 8, normalize: bool = True) -> Spectrum:
    """Hann-windowed periodogram of the linearly detrended signal, restricted to ``band``.

    The FFT length is ``zero_pad * len(x)``; padding refines the peak location
    without adding resolution.
    """
    x = check_series(x, min_length=32, name="signal")
    fps = check_positive(fps, "fps")
    if zero_pad < 1:
        raise ValidationError("zero_pad must be >= 1")
    detrended = sps.detrend(x, type="linear")
    degenerate = bool(np.std(detrended) <= 1e-10 * max(1.0, float(np.max(np.abs(x)))))
    y = detrended * np.hanning(x.size)
    n_fft = x.size * int(zero_pad)
    power = np.abs(np.fft.rfft(y, n=n_fft)) ** 2
    freqs = np.fft.rfftfreq(n_fft, d=1.0 / fps)
    lo, hi = band
    keep = (freqs >= lo) & (freqs <= hi)
    if not keep.any():
        raise ValidationError(f"band {band} contains no frequency bins at fps={fps}")
    freqs, power = freqs[keep], power[keep]
    total = power.sum()
    degenerate = degenerate or bool(total <= 0.0)
    if normalize:
        power = power / (total + EPS_NORM)
    return Spectrum(freqs=freqs, power=power, band=(float(lo), float(hi)), normalized=normalize, degenerate=degenerate)


def spectrum_kl(qa, qo) -> float:
    """KL(qa || qo) summed over bins; 2-D inputs are averaged over the leading (batch) axis.

    Accepts :class:`Spectrum` objects or plain arrays of normalized power.
    """
    if isinstance(qa, Spectrum) or isinstance(qo, Spectrum):
        if not (isinstance(qa, Spectrum) and isinstance(qo, Spectrum)):
            raise ValidationError("both arguments must be Spectrum objects or both arrays")
        if qa.freqs.shape != qo.freqs.shape or not np.allclose(qa.freqs, qo.freqs):
            raise ValidationError("spectra are on different frequency grids")
        pa, po = qa.power, qo.power
    else:
        pa, po = np.asarray(qa, dtype=np.float64), np.asarray(qo, dtype=np.float64)
        if pa.shape != po.shape:
            raise ValidationError(f"grid mismatch: {pa.shape} vs {po.shape}")
    pa = np.maximum(pa, EPS_LOG)
    po = np.maximum(po, EPS_LOG)
    kl = np.sum(pa * (np.log(pa) - np.log(po)), axis=-1)
    return float(np.mean(kl))


def dominant_frequency(x, fps: float, band=HR_BAND, zero_pad: int = 8) -> float:
    spec = power_spectrum(x, fps, band=band, zero_pad=zero_pad, normalize=False)
    return spec.peak_frequency()


def sliding_windows(x: np.ndarray, s: int) -> np.ndarray:
    return np.lib.stride_tricks.sliding_window_view(x, s)


def self_similarity(x, s: int = 30) -> SelfSimilarityMatrix:
    """Cosine similarity between every pair of length-``s`` windows (step 1)."""
    x = check_series(x, min_length=1, name="signal")
    if s < 2:
        raise ValidationError("window length s must be >= 2")
    if x.size < s:
        raise ValidationError(f"signal length {x.size} shorter than window {s}")
    u = sliding_windows(x, s)
    norms = np.linalg.norm(u, axis=1)
    zero = norms <= EPS_NORM
    unit = np.where(zero[:, None], 0.0, u / np.where(zero, 1.0, norms)[:, None])
    m = unit @ unit.T
    np.clip(m, -1.0, 1.0, out=m)
    return SelfSimilarityMatrix(m=m, s=int(s), zero_windows=zero)


def detect_peaks(bvp, fps: float, *, max_hr_bpm: float = 240.0, prominence: float = 0.3) -> np.ndarray:
    """Systolic peak times in seconds.

    Peaks are local maxima at least ``60 / max_hr_bpm`` s apart whose prominence
    exceeds ``prominence`` times the signal's standard deviation. Locations are
    refined by parabolic interpolation.
    """
    x = check_series(bvp, min_length=3, name="bvp")
    fps = check_positive(fps, "fps")
    x = x - x.mean()
    sd = x.std()
    if sd <= EPS_NORM:
        return np.zeros(0)
    distance = max(1, int(np.floor(fps * 60.0 / max_hr_bpm)))
    idx, _ = sps.find_peaks(x, distance=distance, prominence=prominence * sd)
    idx = idx[(idx > 0) & (idx < x.size - 1)]
    left, mid, right = x[idx - 1], x[idx], x[idx + 1]
    denom = left - 2 * mid + right
    with np.errstate(divide="ignore", invalid="ignore"):
        offset = np.where(np.abs(denom) > EPS_NORM, 0.5 * (left - right) / denom, 0.0)
    return (idx + np.clip(offset, -0.5, 0.5)) / fps


def hrv_from_ibi(ibi_s, beat_times_s=None, resample_hz: float = 4.0) -> dict:
    """LF/HF analysis of an inter-beat-interval series (seconds).

    ``beat_times_s`` defaults to the cumulative sum of the intervals.
    """
    ibi = check_series(ibi_s, min_length=2, name="ibi")
    times = np.cumsum(ibi) if beat_times_s is None else check_series(beat_times_s, min_length=2)
    if times.size != ibi.size:
        raise ValidationError("beat_times_s and ibi_s differ in length")
    if ibi.size < 4:
        ibi = np.interp(np.linspace(times[0], times[-1], 4), times, ibi)
        times = np.linspace(times[0], times[-1], 4)
    grid = np.arange(times[0], times[-1], 1.0 / resample_hz)
    if grid.size < 8:
        raise ValidationError("IBI series too short for spectral HRV")
    series = CubicSpline(times, ibi)(grid)
    series = sps.detrend(series, type="linear")
    freqs, pxx = sps.periodogram(series, fs=resample_hz, window="hann", nfft=max(1024, grid.size))

    def band_power(band):
        sel = (freqs >= band[0]) & (freqs < band[1])
        return float(integrate.trapezoid(pxx[sel], freqs[sel])) if sel.sum() > 1 else float(pxx[sel].sum())

    lf, hf = band_power(LF_BAND), band_power(HF_BAND)
    total = lf + hf
    if total < 1e-10:
        raise DegenerateSignalError("insufficient variability: LF+HF power below 1e-10")
    return {
        "LF": lf,
        "HF": hf,
        "LFnu": lf / total,
        "HFnu": hf / total,
        "LF_over_HF": lf / hf if hf > 0 else float("inf"),
        "HR": 60.0 / float(np.mean(ibi)),
    }


def hrv_metrics(bvp, fps: float) -> dict:
    """LFnu, HFnu and LF/HF from a BVP waveform via peak-to-peak intervals."""
    peaks = detect_peaks(bvp, fps)
    if peaks.size < 3:
        raise ValidationError(f"need at least 2 inter-beat intervals, found {max(peaks.size - 1, 0)}")
    ibi = np.diff(peaks)
    return hrv_from_ibi(ibi, beat_times_s=peaks[1:])
