"""Variable-length 1D discrete image tokenizer with tail token drop."""

from onedpiece.config import Config, ModelConfig, TrainConfig, TTDConfig
from onedpiece.errors import (
    ConfigurationError,
    CorruptStreamError,
    IngestionError,
    InvalidInputError,
    InvalidTokenError,
    ModelMismatchError,
    NumericError,
    OneDPieceError,
    TrainingDivergedError,
    UnsupportedVersionError,
)
from onedpiece.model import OneDPiece, load_checkpoint, save_checkpoint
from onedpiece.tail_drop import DropPolicy, sample_keep_length, truncate

__version__ = "0.1.0"

__all__ = [
    "Config",
    "ModelConfig",
    "TrainConfig",
    "TTDConfig",
    "OneDPiece",
    "DropPolicy",
    "sample_keep_length",
    "truncate",
    "load_checkpoint",
    "save_checkpoint",
    "OneDPieceError",
    "InvalidInputError",
    "InvalidTokenError",
    "ConfigurationError",
    "NumericError",
    "TrainingDivergedError",
    "IngestionError",
    "CorruptStreamError",
    "UnsupportedVersionError",
    "ModelMismatchError",
]
