import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gaprppg._validation import DegenerateSignalError, ValidationError
from gaprppg.dsp import (
    bandpass,
    detect_peaks,
    dominant_frequency,
    hrv_from_ibi,
    hrv_metrics,
    power_spectrum,
    self_similarity,
    spectrum_kl,
)
from gaprppg.synth import synth_bvp


def test_sinusoid_peak():
    t = np.arange(256) / 30.0
    spec = power_spectrum(np.sin(2 * np.pi * 1.2 * t), 30.0)
    assert abs(spec.peak_frequency() - 1.2) <= 0.015
    assert abs(spec.power.sum() - 1.0) < 1e-9
    assert np.all(np.diff(spec.freqs) > 0)


def test_offset_invariance(rng):
    x = rng.standard_normal(256)
    np.testing.assert_allclose(power_spectrum(x + 5.0, 30.0).power, power_spectrum(x, 30.0).power, atol=1e-12)


def test_empty_band_error():
    with pytest.raises(ValidationError):
        power_spectrum(np.random.default_rng(0).random(64), 30.0, band=(20.0, 25.0))


def test_flat_signal_is_degenerate():
    with pytest.raises(DegenerateSignalError):
        dominant_frequency(np.ones(256), 30.0)


def test_kl_two_bin_and_asymmetry():
    assert spectrum_kl([0.5, 0.5], [0.25, 0.75]) == pytest.approx(0.5 * math.log(2) + 0.5 * math.log(2 / 3), abs=1e-12)
    assert spectrum_kl([0.5, 0.5], [0.25, 0.75]) == pytest.approx(0.1438, abs=1e-4)
    assert spectrum_kl([0.5, 0.5], [0.5, 0.5]) == 0.0
    assert spectrum_kl([0.5, 0.5], [0.25, 0.75]) != pytest.approx(spectrum_kl([0.25, 0.75], [0.5, 0.5]))


def test_kl_grid_mismatch():
    with pytest.raises(ValidationError):
        spectrum_kl([0.5, 0.5], [1.0])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 8, elements=st.floats(0.01, 1.0)), arrays(np.float64, 8, elements=st.floats(0.01, 1.0)))
def test_kl_gibbs(a, b):
    assert spectrum_kl(a / a.sum(), b / b.sum()) >= -1e-12


def test_dominant_frequency_hr84():
    bvp = synth_bvp(84, 15, 256 / 30.0)
    assert abs(dominant_frequency(bvp, 30.0) - 1.4) <= 30.0 / (8 * 256) + 1e-9


def test_ssm_example():
    m = self_similarity([1.0, 0.0, 1.0, 0.0], s=2).m
    np.testing.assert_allclose(m, [[1, 0, 1], [0, 1, 0], [1, 0, 1]], atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, 40, elements=st.floats(0.1, 10.0)))
def test_ssm_properties(x):
    m = self_similarity(x, s=5).m
    np.testing.assert_allclose(m, m.T, atol=1e-12)
    np.testing.assert_allclose(np.diag(m), 1.0, atol=1e-9)
    np.testing.assert_allclose(self_similarity(3 * x, s=5).m, m, atol=1e-9)


def test_ssm_zero_windows_flagged():
    ssm = self_similarity(np.zeros(10), s=3)
    assert ssm.has_zero_windows and np.all(ssm.m == 0)


def test_ssm_short_signal():
    with pytest.raises(ValidationError):
        self_similarity([1.0, 2.0], s=3)


def test_bandpass_keeps_in_band():
    t = np.arange(600) / 30.0
    x = np.sin(2 * np.pi * 1.5 * t) + 2.0 * np.sin(2 * np.pi * 8.0 * t)
    y = bandpass(x, 30.0)
    assert abs(dominant_frequency(y, 30.0) - 1.5) < 0.02
    assert np.std(y[100:-100]) < 1.0


def test_detect_peaks_on_clean_bvp():
    bvp = synth_bvp(60, 15, 20.0)
    peaks = detect_peaks(bvp, 30.0)
    assert abs(len(peaks) - 20) <= 1
    np.testing.assert_allclose(np.median(np.diff(peaks)), 1.0, atol=0.02)


def test_hrv_lf_modulated_ibi():
    n = 300
    times = np.cumsum(np.full(n, 0.8))
    ibi = 0.8 + 0.05 * np.sin(2 * np.pi * 0.10 * times)
    out = hrv_from_ibi(ibi)
    assert out["LFnu"] > 0.9
    assert abs(out["LFnu"] + out["HFnu"] - 1.0) < 1e-9


def test_hrv_constant_ibi_errors():
    with pytest.raises(DegenerateSignalError, match="insufficient variability"):
        hrv_from_ibi(np.full(100, 0.8))


@settings(max_examples=25, deadline=None)
@given(st.floats(0.04, 0.4), st.floats(0.01, 0.1), st.integers(0, 1000))
def test_hrv_normalized_powers_sum_to_one(freq, amp, seed):
    rng = np.random.default_rng(seed)
    times = np.cumsum(np.full(200, 0.8))
    ibi = 0.8 + amp * np.sin(2 * np.pi * freq * times) + 0.005 * rng.standard_normal(200)
    try:
        out = hrv_from_ibi(ibi)
    except DegenerateSignalError:
        return
    assert abs(out["LFnu"] + out["HFnu"] - 1.0) < 1e-9


def test_hrv_metrics_needs_peaks():
    with pytest.raises(ValidationError):
        hrv_metrics(np.zeros(100), 30.0)
