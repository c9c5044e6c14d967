"""Synthetic multi-domain, multi-subject ROI-trace generator with known vitals.

Each subject carries a linear SpO2 = intercept + slope * RoR law; the red/blue
pulsatile amplitudes of a clip are solved so that the clean ROI-averaged
traces reproduce the RoR implied by the target SpO2.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize
from scipy import signal as sps

from ._validation import ValidationError, check_range
from .stmap import TARGET_FPS, RoiTraceClip, Sidecar, VitalLabels, minmax_normalize, write_sidecar, write_stm1

# Skin reflectance means (R, G, B) in [0, 1] pixel units, and pulsatile depths.
BASE_DC = np.array([0.55, 0.40, 0.30])
RED_AC = 0.008
GREEN_AC = 0.024
RESP_DRIFT = 0.004
FEASIBLE_ROR = (0.1, 2.5)
# sampled subjects stay where green is the strongest pulsatile channel
SAMPLED_ROR = (0.4, 1.1)


@dataclass
class SubjectProfile:
    subject_id: str
    spo2_intercept: float = 110.0
    spo2_slope: float = -25.0
    channel_gains: tuple[float, float, float] = (1.0, 1.0, 1.0)
    bvp_harmonic_phase: float = 0.0
    baseline_hr_bpm: float = 72.0
    baseline_rr_bpm: float = 15.0

    def __post_init__(self):
        if self.spo2_slope >= 0:
            raise ValidationError("spo2_slope must be negative")
        if len(self.channel_gains) != 3 or min(self.channel_gains) <= 0:
            raise ValidationError("channel_gains must be three positive values")
        self.channel_gains = tuple(float(g) for g in self.channel_gains)

    def ror_for(self, spo2: float) -> float:
        return (spo2 - self.spo2_intercept) / self.spo2_slope


@dataclass
class DomainProfile:
    domain_id: str
    illumination_gain: float = 1.0
    gamma: float = 1.0
    noise_std: float = 0.0
    motion_rate: float = 0.0
    label_mask: tuple[bool, bool, bool, bool] = (True, True, True, True)
    # std of common-mode in-band illumination flicker (relative)
    illumination_flicker: float = 0.0

    def __post_init__(self):
        if self.illumination_gain <= 0:
            raise ValidationError("illumination_gain must be positive")
        check_range(self.gamma, 0.5, 2.5, "gamma")
        if self.noise_std < 0 or self.motion_rate < 0 or self.illumination_flicker < 0:
            raise ValidationError("noise_std, motion_rate and illumination_flicker must be >= 0")
        if len(self.label_mask) != 4:
            raise ValidationError("label_mask needs 4 entries (bvp, hr, rr, spo2)")
        self.label_mask = tuple(bool(m) for m in self.label_mask)


@dataclass
class Vitals:
    hr_bpm: float
    rr_bpm: float
    spo2_pct: float = 97.0


def synth_bvp(hr_bpm: float, rr_bpm: float, duration_s: float, fps: float = TARGET_FPS, phase: float = 0.0) -> np.ndarray:
    """Two-harmonic pulse with respiratory amplitude modulation, zero mean."""
    check_range(hr_bpm, 30, 240, "hr_bpm")
    check_range(rr_bpm, 4, 60, "rr_bpm")
    n = int(round(duration_s * fps))
    if n < 2:
        raise ValidationError("duration too short")
    t = np.arange(n) / fps
    f_hr, f_rr = hr_bpm / 60.0, rr_bpm / 60.0
    s = (1.0 + 0.25 * np.sin(2 * np.pi * f_rr * t)) * (
        np.sin(2 * np.pi * f_hr * t) + 0.35 * np.sin(4 * np.pi * f_hr * t + phase)
    )
    return s - s.mean()


def window_ror(red: np.ndarray, blue: np.ndarray, n_win: int) -> np.ndarray:
    n = (red.size // n_win) * n_win
    r = red[:n].reshape(-1, n_win)
    b = blue[:n].reshape(-1, n_win)
    return (r.std(axis=1) / r.mean(axis=1)) / (b.std(axis=1) / b.mean(axis=1))


def _flicker(rng: np.random.Generator, n: int, fps: float, std: float) -> np.ndarray:
    if std <= 0:
        return np.zeros(n)
    b, a = sps.butter(2, [0.7 / (fps / 2), 3.0 / (fps / 2)], btype="bandpass")
    x = sps.filtfilt(b, a, rng.standard_normal(n + 200))[100:-100]
    return std * x / (x.std() + 1e-12)


def _solve_blue_ac(pulse: np.ndarray, drift: np.ndarray, target: float, fps: float) -> float:
    n_win = int(round(fps))

    def residual(a_blue):
        red = 1.0 + RED_AC * pulse + RESP_DRIFT * drift
        blue = 1.0 + a_blue * pulse + RESP_DRIFT * drift
        return float(np.mean(window_ror(red, blue, n_win))) - target

    guess = RED_AC / target
    lo, hi = guess / 4, guess * 4
    return float(optimize.brentq(residual, lo, hi, xtol=1e-12))


def generate_clip(
    subject: SubjectProfile,
    domain: DomainProfile,
    vitals: Vitals,
    duration_s: float = 20.0,
    *,
    n_rois: int = 25,
    fps: float = TARGET_FPS,
    rng=None,
    return_clean: bool = False,
):
    """One synthetic clip: ``(RoiTraceClip, VitalLabels)`` (plus clean traces on request).

    Per ROI r and channel c the clean trace is
    ``DC_c * m_r * (1 + k_r * (a_c * pulse + drift))``, then illumination gain
    and flicker, camera gamma, row-permuting motion events and additive noise.
    """
    if duration_s < 9:
        raise ValidationError("duration must be >= 9 s")
    rng = np.random.default_rng(rng)
    target = subject.ror_for(vitals.spo2_pct)
    if not (FEASIBLE_ROR[0] <= target <= FEASIBLE_ROR[1]):
        raise ValidationError(
            f"SpO2 {vitals.spo2_pct} needs RoR {target:.3f} under subject {subject.subject_id}'s law; "
            f"feasible range is {FEASIBLE_ROR}"
        )

    bvp = synth_bvp(vitals.hr_bpm, vitals.rr_bpm, duration_s, fps, subject.bvp_harmonic_phase)
    pulse = bvp / bvp.std()
    n = bvp.size
    t = np.arange(n) / fps
    drift = np.sin(2 * np.pi * vitals.rr_bpm / 60.0 * t + rng.uniform(0, 2 * np.pi))

    a_blue = _solve_blue_ac(pulse, drift, target, fps)
    ac = np.array([RED_AC, GREEN_AC, a_blue])
    dc = BASE_DC * np.asarray(subject.channel_gains)
    m = rng.uniform(0.85, 1.15, size=n_rois)
    k = rng.uniform(0.6, 1.4, size=n_rois)

    rel = ac[None, None, :] * pulse[None, :, None] + RESP_DRIFT * drift[None, :, None]
    clean = dc[None, None, :] * m[:, None, None] * (1.0 + k[:, None, None] * rel)
    light = domain.illumination_gain * (1.0 + _flicker(rng, n, fps, domain.illumination_flicker))
    clean = np.clip(clean * light[None, :, None], 1e-6, None) ** domain.gamma

    traces = clean.copy()
    n_events = rng.poisson(domain.motion_rate * duration_s / 60.0) if domain.motion_rate > 0 else 0
    span = max(1, int(round(0.5 * fps)))
    for _ in range(n_events):
        start = int(rng.integers(0, max(1, n - span)))
        block = int(rng.integers(2, n_rois + 1)) if n_rois > 1 else 1
        first = int(rng.integers(0, n_rois - block + 1))
        rows = np.arange(first, first + block)
        traces[rows, start : start + span] = traces[rng.permutation(rows), start : start + span]
    if domain.noise_std > 0:
        traces = traces + rng.normal(0.0, domain.noise_std, size=traces.shape)

    mask = domain.label_mask
    labels = VitalLabels(
        bvp=bvp if mask[0] else None,
        hr_bpm=float(vitals.hr_bpm) if mask[1] else None,
        rr_bpm=float(vitals.rr_bpm) if mask[2] else None,
        spo2_pct=float(vitals.spo2_pct) if mask[3] else None,
    )
    clip = RoiTraceClip(traces=traces, fps=fps, subject_id=subject.subject_id, domain_id=domain.domain_id)
    if return_clean:
        return clip, labels, clean
    return clip, labels


# --------------------------------------------------------------------------- datasets

DEFAULT_DOMAINS = (
    DomainProfile("dom0", illumination_gain=1.0, gamma=1.0, noise_std=0.0005, motion_rate=2.0),
    DomainProfile("dom1", illumination_gain=0.8, gamma=1.3, noise_std=0.0008, motion_rate=4.0,
                  label_mask=(True, True, False, True)),
    DomainProfile("dom2", illumination_gain=1.2, gamma=0.8, noise_std=0.0005, motion_rate=3.0,
                  label_mask=(True, True, True, False)),
    DomainProfile("dom3", illumination_gain=0.9, gamma=1.6, noise_std=0.001, motion_rate=6.0),
)


@dataclass
class DatasetSpec:
    n_domains: int = 4
    n_subjects: int = 5
    n_clips: int = 6
    duration_s: float = 20.0
    n_rois: int = 25
    domains: list[DomainProfile] | None = None
    hr_range: tuple[float, float] = (55.0, 110.0)
    spo2_range: tuple[float, float] = (92.0, 99.5)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("n_domains", "n_subjects", "n_clips"):
            if int(getattr(self, name)) < 1:
                raise ValidationError(f"{name} must be positive")

    def domain_profiles(self) -> list[DomainProfile]:
        if self.domains is not None:
            if len(self.domains) != self.n_domains:
                raise ValidationError("len(domains) must equal n_domains")
            return list(self.domains)
        out = []
        for d in range(self.n_domains):
            base = DEFAULT_DOMAINS[d % len(DEFAULT_DOMAINS)]
            if d < len(DEFAULT_DOMAINS):
                out.append(base)
            else:
                out.append(DomainProfile(**{**asdict(base), "domain_id": f"dom{d}"}))
        return out


def sample_subject(subject_id: str, rng: np.random.Generator, hr_range=(55.0, 110.0)) -> SubjectProfile:
    lo, hi = hr_range
    return SubjectProfile(
        subject_id=subject_id,
        spo2_intercept=float(rng.uniform(106.0, 114.0)),
        spo2_slope=float(rng.uniform(-20.0, -12.0)),
        channel_gains=tuple(float(g) for g in rng.uniform(0.8, 1.2, size=3)),
        bvp_harmonic_phase=float(rng.uniform(0, 2 * np.pi)),
        baseline_hr_bpm=float(rng.uniform(lo + 8, hi - 8)),
        baseline_rr_bpm=float(rng.uniform(10.0, 20.0)),
    )


def sample_vitals(subject: SubjectProfile, rng: np.random.Generator, hr_range=(55.0, 110.0), spo2_range=(92.0, 99.5)) -> Vitals:
    lo, hi = hr_range
    hr = float(np.clip(subject.baseline_hr_bpm + rng.uniform(-12, 12), lo, hi))
    rr = float(np.clip(subject.baseline_rr_bpm + rng.uniform(-3, 3), 6, 30))
    lo_s = max(spo2_range[0], subject.spo2_intercept + subject.spo2_slope * SAMPLED_ROR[1])
    hi_s = min(spo2_range[1], subject.spo2_intercept + subject.spo2_slope * SAMPLED_ROR[0])
    if lo_s >= hi_s:
        lo_s, hi_s = sorted((subject.spo2_intercept + subject.spo2_slope * r for r in SAMPLED_ROR))
    return Vitals(hr_bpm=hr, rr_bpm=rr, spo2_pct=float(rng.uniform(lo_s, hi_s)))


def generate_dataset(spec: DatasetSpec, out_dir, seed: int = 0) -> Path:
    """Write an STM1 dataset; returns the manifest path.

    Layout: ``<out>/<domain>/<subject>/clip_XX.stm`` (normalized map, W = ROIs),
    ``clip_XX.raw.stm`` (un-normalized 30 fps traces) and ``clip_XX.json``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"format": "STM1", "seed": int(seed), "fps": TARGET_FPS, "spec": {
        "n_domains": spec.n_domains, "n_subjects": spec.n_subjects, "n_clips": spec.n_clips,
        "duration_s": spec.duration_s, "n_rois": spec.n_rois}, "domains": []}

    for d, domain in enumerate(spec.domain_profiles()):
        entry = {**asdict(domain), "label_mask": list(domain.label_mask), "subjects": [], "clips": []}
        for s in range(spec.n_subjects):
            subject_rng = np.random.default_rng([seed, d, s])
            subject = sample_subject(f"{domain.domain_id}_s{s:02d}", subject_rng, spec.hr_range)
            entry["subjects"].append({**asdict(subject), "channel_gains": list(subject.channel_gains)})
            sub_dir = out / domain.domain_id / subject.subject_id
            sub_dir.mkdir(parents=True, exist_ok=True)
            for c in range(spec.n_clips):
                clip_rng = np.random.default_rng([seed, d, s, c, 1])
                vitals = sample_vitals(subject, clip_rng, spec.hr_range, spec.spo2_range)
                clip, labels = generate_clip(subject, domain, vitals, spec.duration_s, n_rois=spec.n_rois, rng=clip_rng)
                raw = clip.traces.transpose(1, 0, 2)
                norm, _ = minmax_normalize(raw)
                stem = sub_dir / f"clip_{c:02d}"
                write_stm1(f"{stem}.stm", norm)
                write_stm1(f"{stem}.raw.stm", raw)
                write_sidecar(f"{stem}.json", Sidecar(subject.subject_id, domain.domain_id, TARGET_FPS, 0, labels))
                entry["clips"].append(str(stem.relative_to(out)))
        manifest["domains"].append(entry)

    path = out / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path
