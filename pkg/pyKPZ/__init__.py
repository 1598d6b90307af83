from .config import ExperimentConfig, load_config, validate
from .disk_archive import InDiskArchive
from .errors import (
    ConfigError,
    InvalidArgumentError,
    InvariantViolation,
    KPZError,
    MisalignmentError,
    NumericOverflowError,
    PositivityLossError,
    QuadratureError,
)
from .memory_archive import InMemoryArchive
from .mollifier import CovarianceKernel, MollifierSpec
from .noise import NoiseField, NoiseTransform, TransformedField, TransformMode

Archive = InMemoryArchive
LargeArchive = InDiskArchive

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig",
    "load_config",
    "validate",
    "InMemoryArchive",
    "InDiskArchive",
    "Archive",
    "LargeArchive",
    "CovarianceKernel",
    "MollifierSpec",
    "NoiseField",
    "NoiseTransform",
    "TransformedField",
    "TransformMode",
    "KPZError",
    "ConfigError",
    "MisalignmentError",
    "InvalidArgumentError",
    "InvariantViolation",
    "PositivityLossError",
    "QuadratureError",
    "NumericOverflowError",
]
