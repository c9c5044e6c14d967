"""Multi-task remote physiological measurement from spatio-temporal maps.

BVP, HR, RR and SpO2 estimation with multi-source domain-generalized training
and per-subject test-time adaptation, plus classical baselines, a synthetic
data generator, and evaluation tooling.
"""

from ._validation import DegenerateSignalError, NumericalError, ValidationError
from .augment import AugmentConfig, PriorAugmenter, make_pair
from .classical import PulseRateEstimator, RoRSpO2Regressor
from .estimator import GAPEstimator, STMapTransformer
from .losses import LossWeights
from .model import GAPNet, ModelConfig, build_model
from .protocols import MssdgConfig, TtpaConfig, adapt_ttpa, train_mssdg

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig",
    "DegenerateSignalError",
    "GAPEstimator",
    "GAPNet",
    "LossWeights",
    "ModelConfig",
    "MssdgConfig",
    "NumericalError",
    "PriorAugmenter",
    "PulseRateEstimator",
    "RoRSpO2Regressor",
    "STMapTransformer",
    "TtpaConfig",
    "ValidationError",
    "adapt_ttpa",
    "build_model",
    "make_pair",
    "train_mssdg",
]
