"""Label-preserving STMap augmentations: temporal offset, ROI permutation, component scaling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import ValidationError, check_random_state

SCALING_MODES = ("as_written", "ratio_preserving")


@dataclass
class AugmentConfig:
    delta_t_max: int = 30
    gamma_min: float = 0.8
    gamma_max: float = 2.2
    p_offset: float = 1.0
    p_perm: float = 1.0
    p_scale: float = 1.0
    scaling_mode: str = "as_written"

    def __post_init__(self):
        if self.scaling_mode not in SCALING_MODES:
            raise ValidationError(f"scaling_mode must be one of {SCALING_MODES}")
        if not (0 < self.gamma_min <= self.gamma_max):
            raise ValidationError("need 0 < gamma_min <= gamma_max")
        if self.delta_t_max < 0:
            raise ValidationError("delta_t_max must be >= 0")
        for name in ("p_offset", "p_perm", "p_scale"):
            if not (0.0 <= getattr(self, name) <= 1.0):
                raise ValidationError(f"{name} must be a probability")


@dataclass
class AugmentationRecord:
    delta_t: int = 0
    perm: np.ndarray | None = None
    gamma: float = 1.0
    applied: dict = field(default_factory=lambda: {"offset": False, "perm": False, "scale": False})
    clamped: bool = False
    skipped_rows: np.ndarray | None = None


@dataclass
class AugmentedPair:
    xo: np.ndarray
    xa: np.ndarray
    record: AugmentationRecord
    labels: object = None


def temporal_offset(clip_map: np.ndarray, start: int, window: int, delta_t: int) -> tuple[np.ndarray, int, bool]:
    """Re-cut ``clip_map[start + delta_t : ... + window]``.

    Returns ``(window, effective_delta_t, clamped)``; the shift is clamped so the
    window stays inside the clip.
    """
    T = clip_map.shape[0]
    if start < 0 or start + window > T:
        raise ValidationError(f"window [{start}, {start + window}) outside clip of length {T}")
    room = T - window - start
    eff = int(min(max(delta_t, 0), room))
    return clip_map[start + eff : start + eff + window], eff, eff != delta_t


def check_permutation(perm, W: int) -> np.ndarray:
    perm = np.asarray(perm)
    if perm.shape != (W,) or not np.array_equal(np.sort(perm), np.arange(W)):
        raise ValidationError(f"not a permutation of range({W})")
    return perm.astype(int)


def spatial_permutation(x: np.ndarray, perm) -> np.ndarray:
    """Row ``i`` of the input moves to row ``perm[i]``."""
    perm = check_permutation(perm, x.shape[1])
    out = np.empty_like(x)
    out[:, perm] = x
    return out


def component_scaling(x: np.ndarray, gamma: float, mode: str = "as_written") -> tuple[np.ndarray, np.ndarray]:
    """Per (row, channel) rescaling; returns ``(scaled, skipped_mask)``.

    ``as_written``: ``gamma * (x - mu) / sigma + gamma * mu`` so each slice ends up
    with mean ``gamma * mu`` and standard deviation ``gamma``.
    ``ratio_preserving``: ``gamma * x``.
    Slices with ``sigma <= 1e-12`` are left untouched and reported.
    """
    x = np.asarray(x, dtype=np.float64)
    if mode == "ratio_preserving":
        return gamma * x, np.zeros(x.shape[1:], dtype=bool)
    if mode != "as_written":
        raise ValidationError(f"unknown scaling mode {mode!r}")
    mu = x.mean(axis=0, keepdims=True)
    sigma = x.std(axis=0, keepdims=True)
    skipped = sigma[0] <= 1e-12
    safe = np.where(skipped[None], 1.0, sigma)
    out = gamma * (x - mu) / safe + gamma * mu
    out = np.where(skipped[None], x, out)
    return out, skipped


def make_pair(clip_map: np.ndarray, start: int, window: int, config: AugmentConfig | None = None, rng=None, labels=None) -> AugmentedPair:
    """Cut ``xo`` at ``start`` and derive ``xa`` by offset -> permutation -> scaling."""
    config = config or AugmentConfig()
    rng = check_random_state(rng)
    xo = clip_map[start : start + window]
    if xo.shape[0] != window:
        raise ValidationError("window runs past the end of the clip")
    record = AugmentationRecord(perm=np.arange(clip_map.shape[1]))

    # draw every variate unconditionally so the stream does not depend on the probabilities
    u = rng.random(3)
    delta_t = int(rng.integers(0, config.delta_t_max + 1))
    perm = rng.permutation(clip_map.shape[1])
    gamma = float(rng.uniform(config.gamma_min, config.gamma_max))

    xa = xo
    if u[0] < config.p_offset:
        xa, eff, clamped = temporal_offset(clip_map, start, window, delta_t)
        record.delta_t, record.clamped = eff, clamped
        record.applied["offset"] = True
    if u[1] < config.p_perm:
        xa = spatial_permutation(xa, perm)
        record.perm = perm
        record.applied["perm"] = True
    if u[2] < config.p_scale:
        xa, skipped = component_scaling(xa, gamma, config.scaling_mode)
        record.gamma = gamma
        record.skipped_rows = skipped
        record.applied["scale"] = True
    return AugmentedPair(xo=xo, xa=np.array(xa, dtype=np.float64, copy=True), record=record, labels=labels)


class PriorAugmenter(TransformerMixin, BaseEstimator):
    """Transformer form of :func:`make_pair` over full clip maps.

    ``transform`` takes a list of full-length maps and returns the augmented
    first windows, one per map.
    """

    def __init__(self, window=256, delta_t_max=30, gamma_min=0.8, gamma_max=2.2, p_offset=1.0, p_perm=1.0,
                 p_scale=1.0, scaling_mode="as_written", random_state=None):
        self.window = window
        self.delta_t_max = delta_t_max
        self.gamma_min = gamma_min
        self.gamma_max = gamma_max
        self.p_offset = p_offset
        self.p_perm = p_perm
        self.p_scale = p_scale
        self.scaling_mode = scaling_mode
        self.random_state = random_state

    def fit(self, X=None, y=None):
        self.config_ = AugmentConfig(self.delta_t_max, self.gamma_min, self.gamma_max, self.p_offset,
                                     self.p_perm, self.p_scale, self.scaling_mode)
        self.rng_ = check_random_state(self.random_state)
        return self

    def transform(self, X):
        if not hasattr(self, "config_"):
            self.fit()
        return np.stack([make_pair(np.asarray(x, dtype=np.float64), 0, self.window, self.config_, self.rng_).xa for x in X])
