"""Two-stage multiple instance self-training for weakly supervised video anomaly detection."""

from mist.core import HyperParams, VideoRecord, load_config, save_config
from mist.errors import (
    AlignmentError,
    ConfigError,
    FormatError,
    MistError,
    ShapeError,
    UndefinedMetricError,
    ValidationError,
)

__version__ = "0.1.0"

__all__ = [
    "AlignmentError",
    "ConfigError",
    "FormatError",
    "HyperParams",
    "MistError",
    "ShapeError",
    "UndefinedMetricError",
    "ValidationError",
    "VideoRecord",
    "load_config",
    "save_config",
]
