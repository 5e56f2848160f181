"""Federated segmentation at desk scale.

Implements federated fingerprint extraction (one-shot dataset-summary
exchange so every center self-configures the same architecture) and
asymmetric federated averaging (per-round averaging restricted to layers
shared by identifier and dimensions), on top of a minimal float64 tensor
core and a synthetic multi-center segmentation harness.
"""

from .errors import (ChannelClosedError, ConfigError, EncodingError,
                     FederationAbort, FramingError, InternalError,
                     NumericError, ProtocolError, ShapeError, UsageError,
                     VersionError)
from .fingerprint import (Fingerprint, GlobalFingerprint, TrainingPlan,
                          aggregate_fingerprints, extract_fingerprint,
                          make_plan)
from .metrics import MetricsReport, dsc, hd95
from .model import SegModel
from .statedict import (CompatibleSet, StateDict, aggregate_asym,
                        apply_update, match_layers)
from .tensor import (Tensor, conv2d, dice_bce_loss, downsample2x, grad_check,
                     relu, sigmoid, upsample2x)

__all__ = [
    "ChannelClosedError", "CompatibleSet", "ConfigError", "EncodingError",
    "FederationAbort", "Fingerprint", "FramingError", "GlobalFingerprint",
    "InternalError", "MetricsReport", "NumericError", "ProtocolError",
    "SegModel", "ShapeError", "StateDict", "Tensor", "TrainingPlan",
    "UsageError", "VersionError", "aggregate_asym", "aggregate_fingerprints",
    "apply_update", "conv2d", "dice_bce_loss", "downsample2x", "dsc",
    "extract_fingerprint", "grad_check", "hd95", "make_plan", "match_layers",
    "relu", "sigmoid", "upsample2x",
]

__version__ = "0.1.0"
