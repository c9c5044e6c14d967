"""scikit-learn style wrappers around the preprocessing pipeline and the GAP network."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import ValidationError
from .augment import AugmentConfig
from .losses import LossWeights, SCALAR_TASKS
from .model import load_checkpoint, save_checkpoint
from .stmap import RoiTraceClip, resize_rows_array, traces_to_stmap, window_starts


class STMapTransformer(TransformerMixin, BaseEstimator):
    """Raw per-ROI traces -> stacked model-ready windows ``(N, window, rows, 3)``.

    ``X`` is a sequence of :class:`RoiTraceClip` or ``(rois, frames, 3)`` arrays
    sampled at ``fps``. Clips are resampled to 30 fps, min-max normalized per
    clip, row-resized and cut into windows.
    """

    def __init__(self, fps: float = 30.0, window: int = 256, stride: int = 10, rows: int = 64, normalize: bool = True):
        self.fps = fps
        self.window = window
        self.stride = stride
        self.rows = rows
        self.normalize = normalize

    def fit(self, X=None, y=None):
        if self.window < 1 or self.stride < 1 or self.rows < 1:
            raise ValidationError("window, stride and rows must be positive")
        self.n_windows_ = None
        return self

    def transform(self, X) -> np.ndarray:
        out = []
        for clip in X:
            if not isinstance(clip, RoiTraceClip):
                clip = RoiTraceClip(np.asarray(clip, dtype=np.float64), fps=self.fps)
            data = traces_to_stmap(clip, normalize=self.normalize).data
            data = np.clip(resize_rows_array(data, self.rows), 0.0, 1.0) if self.normalize else resize_rows_array(data, self.rows)
            out.extend(data[s : s + self.window] for s in window_starts(data.shape[0], self.window, self.stride))
        if not out:
            raise ValidationError(f"no clip is long enough for a {self.window}-frame window")
        self.n_windows_ = len(out)
        return np.stack(out)


class GAPEstimator(RegressorMixin, BaseEstimator):
    """Multi-task estimator trained with the MSSDG objective.

    ``fit(X)`` takes a dataset root directory (the STM1 layout written by
    :func:`gaprppg.synth.generate_dataset`); the held-out domain, if given, is
    never read. ``predict(X)`` takes windows ``(N, T, W, 3)`` and returns an
    ``(N, 3)`` array of ``[hr, rr, spo2]``; :meth:`predict_bvp` returns ``(N, T)``.
    """

    def __init__(self, preset="desk", iterations=1500, batch_size=8, lr=1e-3, seed=0, heldout_domain=None,
                 source_domains=None, ablation=False, window=256, stride=10, rows=64, eval_every=150,
                 adapt_lr=1e-5):
        self.preset = preset
        self.iterations = iterations
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed
        self.heldout_domain = heldout_domain
        self.source_domains = source_domains
        self.ablation = ablation
        self.window = window
        self.stride = stride
        self.rows = rows
        self.eval_every = eval_every
        self.adapt_lr = adapt_lr

    def _mssdg_config(self):
        from .protocols import MssdgConfig

        kw = dict(heldout_domain=self.heldout_domain, source_domains=self.source_domains, batch_size=self.batch_size,
                  iterations=self.iterations, lr=self.lr, seed=self.seed, eval_every=self.eval_every,
                  preset=self.preset, window=self.window, stride=self.stride, rows=self.rows)
        if self.ablation:
            return MssdgConfig.supervised_only(**kw)
        weights = LossWeights.desk() if self.preset == "desk" else LossWeights()
        return MssdgConfig(weights=weights, aug=AugmentConfig(), **kw)

    def fit(self, X, y=None, run_dir=None):
        from .protocols import train_mssdg

        if y is not None:
            raise ValidationError("labels are read from the dataset sidecars; pass y=None")
        result = train_mssdg(X, self._mssdg_config(), run_dir=run_dir)
        self.model_ = result.model
        self.identities_ = result.identities
        self.best_step_ = result.best_step
        self.training_log_ = result.log
        self.heldout_accesses_ = result.heldout_accesses
        return self

    def _predict(self, X, mode="MSSDG") -> dict:
        from .protocols import predict_windows

        check_is_fitted(self, "model_")
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 3:
            X = X[None]
        if X.ndim != 4 or X.shape[1:] != (self.window, self.rows, 3):
            raise ValidationError(f"expected windows of shape (N, {self.window}, {self.rows}, 3), got {X.shape}")
        return predict_windows(self.model_, X, mode=mode)

    def predict(self, X) -> np.ndarray:
        preds = self._predict(X)
        return np.column_stack([preds[t] for t in SCALAR_TASKS])

    def predict_bvp(self, X) -> np.ndarray:
        return self._predict(X)["bvp"]

    def score(self, X, y, sample_weight=None):
        """Negative mean absolute error over the labeled (non-NaN) entries of ``y`` ``(N, 3)``."""
        pred = self.predict(X)
        y = np.asarray(y, dtype=np.float64).reshape(pred.shape)
        ok = ~np.isnan(y)
        if not ok.any():
            raise ValidationError("no labeled targets to score")
        return -float(np.mean(np.abs(pred[ok] - y[ok])))

    def adapt(self, root, domain, run_dir=None, subjects=None):
        """Per-subject test-time adaptation on ``domain``; the fitted model is left unchanged."""
        from .protocols import TtpaConfig, adapt_ttpa

        check_is_fitted(self, "model_")
        weights = LossWeights.desk() if self.preset == "desk" else LossWeights()
        cfg = TtpaConfig(lr=self.adapt_lr, seed=self.seed, subjects=subjects, weights=weights)
        return adapt_ttpa(root, domain, self.model_, cfg, run_dir, window=self.window, stride=self.stride, rows=self.rows)

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        save_checkpoint(path, self.model_, seed=self.seed, step=self.best_step_,
                        extra={"identities": self.identities_, "params": self.get_params()})

    @classmethod
    def load(cls, path) -> "GAPEstimator":
        model, meta = load_checkpoint(path)
        est = cls(**meta["extra"].get("params", {}))
        est.model_ = model
        est.identities_ = meta["extra"].get("identities", [])
        est.best_step_ = meta["step"]
        est.training_log_ = []
        est.heldout_accesses_ = []
        return est
