import json

import numpy as np
import pytest

from gaprppg._validation import ValidationError
from gaprppg.classical import ror_series
from gaprppg.dsp import RR_BAND, dominant_frequency
from gaprppg.synth import (
    DatasetSpec,
    DomainProfile,
    SubjectProfile,
    Vitals,
    generate_clip,
    generate_dataset,
    synth_bvp,
)


def test_bvp_zero_mean_and_frequency():
    bvp = synth_bvp(84, 15, 20.0)
    assert abs(bvp.mean()) < 1e-12
    assert abs(dominant_frequency(bvp, 30.0) - 1.4) < 30.0 / (8 * bvp.size) + 1e-9


def test_bvp_envelope_carries_respiration():
    from scipy.signal import hilbert

    bvp = synth_bvp(72, 15, 30.0)
    env = np.abs(hilbert(bvp))
    assert abs(dominant_frequency(env, 30.0, band=RR_BAND) - 0.25) < 30.0 / (8 * env.size) + 0.01


def test_clip_ror_matches_subject_law():
    subject = SubjectProfile("s")
    clip, labels = generate_clip(subject, DomainProfile("d"), Vitals(72, 15, 97.0), rng=0)
    assert subject.ror_for(97.0) == pytest.approx(0.52)
    raw = np.transpose(clip.traces, (1, 0, 2))
    assert abs(np.mean(ror_series(raw, 30.0)) - 0.52) < 0.01
    assert labels.spo2_pct == 97.0 and labels.hr_bpm == 72


def test_label_mask_hides_labels():
    dom = DomainProfile("d", label_mask=(True, True, False, False))
    _, labels = generate_clip(SubjectProfile("s"), dom, Vitals(72, 15, 97.0), rng=0)
    assert labels.rr_bpm is None and labels.spo2_pct is None
    assert labels.mask == (True, True, False, False)


def test_infeasible_spo2_rejected():
    with pytest.raises(ValidationError):
        generate_clip(SubjectProfile("s"), DomainProfile("d"), Vitals(72, 15, 108.0), rng=0)


def test_profiles_validate():
    with pytest.raises(ValidationError):
        SubjectProfile("s", spo2_slope=1.0)
    with pytest.raises(ValidationError):
        DomainProfile("d", gamma=5.0)
    with pytest.raises(ValidationError):
        DomainProfile("d", illumination_gain=0.0)


def test_clip_is_deterministic():
    a, _ = generate_clip(SubjectProfile("s"), DomainProfile("d", noise_std=0.01, motion_rate=10), Vitals(70, 12), rng=5)
    b, _ = generate_clip(SubjectProfile("s"), DomainProfile("d", noise_std=0.01, motion_rate=10), Vitals(70, 12), rng=5)
    np.testing.assert_array_equal(a.traces, b.traces)


def test_dataset_layout(tmp_path):
    path = generate_dataset(DatasetSpec(n_domains=4, n_subjects=5, n_clips=6, duration_s=10.0, n_rois=4), tmp_path, seed=0)
    sidecars = [p for p in tmp_path.rglob("*.json") if p.name != "manifest.json"]
    assert len(sidecars) == 120
    manifest = json.loads(path.read_text())
    assert manifest["seed"] == 0 and len(manifest["domains"]) == 4
    masks = {d["domain_id"]: d["label_mask"] for d in manifest["domains"]}
    assert masks["dom1"][2] is False and masks["dom2"][3] is False


def test_dataset_reproducible(tmp_path):
    spec = DatasetSpec(n_domains=2, n_subjects=1, n_clips=1, duration_s=10.0, n_rois=3)
    generate_dataset(spec, tmp_path / "a", seed=7)
    generate_dataset(spec, tmp_path / "b", seed=7)
    for f in (tmp_path / "a").rglob("*.stm"):
        assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()
