"""Exception hierarchy shared by every onedpiece module."""


class OneDPieceError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(OneDPieceError, ValueError):
    """Shape, length or range precondition violated."""


class InvalidTokenError(OneDPieceError, ValueError):
    """A token id is outside the codebook (or outside the bit budget)."""


class ConfigurationError(OneDPieceError, ValueError):
    pass


class NumericError(OneDPieceError, ArithmeticError):
    """Non-finite activations or losses."""


class TrainingDivergedError(NumericError):
    def __init__(self, step: int, lr: float, kept_length: int, detail: str = ""):
        self.step = step
        self.lr = lr
        self.kept_length = kept_length
        msg = f"non-finite loss at step={step} lr={lr:.3e} kept_length={kept_length}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class IngestionError(OneDPieceError, OSError):
    """No usable images could be read."""


class CorruptStreamError(OneDPieceError, ValueError):
    pass


class UnsupportedVersionError(CorruptStreamError):
    pass


class ModelMismatchError(OneDPieceError):
    """Token stream was produced by a different checkpoint."""
