"""Learned image immunization: protect images so tampering can be localized
and the original content recovered after common distortions."""

from .config import (
    AttackConfig,
    BackboneConfig,
    DatasetConfig,
    EvalGridConfig,
    MaskSpec,
    RunConfig,
    TrainConfig,
)
from .errors import (
    CheckpointError,
    ConfigurationError,
    ContractError,
    ShapeError,
    TrainingDiverged,
)
from .models import ImmunizerModel, build_models, immunize, recover, verify

__all__ = [
    "AttackConfig",
    "BackboneConfig",
    "CheckpointError",
    "ConfigurationError",
    "ContractError",
    "DatasetConfig",
    "EvalGridConfig",
    "ImmunizerModel",
    "MaskSpec",
    "RunConfig",
    "ShapeError",
    "TrainConfig",
    "TrainingDiverged",
    "build_models",
    "immunize",
    "recover",
    "verify",
]

__version__ = "0.1.0"
