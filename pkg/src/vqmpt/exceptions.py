"""Exception types shared across the package."""


class VQMPTError(Exception):
    """Base class for all package errors."""


class DimensionError(VQMPTError, ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(VQMPTError, ValueError):
    """A hyperparameter or structural setting is invalid."""


class DegenerateInputError(VQMPTError, ValueError):
    """Input has no well-defined result (e.g. normalizing a zero vector)."""


class PositiveDefinitenessError(VQMPTError, ValueError):
    """A covariance factor is not positive definite."""


class DomainError(VQMPTError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class GenerationError(VQMPTError, RuntimeError):
    """A rejection-sampling generator exhausted its attempt budget."""


class InfeasibleProblemError(GenerationError):
    """No valid start/goal pair could be drawn."""


class PreconditionError(VQMPTError, ValueError):
    """A planner was called with an invalid start state."""


class EmptyPredictionError(VQMPTError, ValueError):
    """An index sequence contains no sampling region."""


class TrainingDivergedError(VQMPTError, FloatingPointError):
    """A training loss or gradient became non-finite."""


class CheckpointError(VQMPTError, IOError):
    """Base class for container load failures."""


class FormatError(CheckpointError):
    """Magic bytes or version do not match."""


class TruncationError(CheckpointError):
    """File ended before the declared content."""


class ShapeMismatchError(CheckpointError):
    """Shape table disagrees with the payload or the expected layout."""


class VersionError(FormatError):
    """Container written by an unsupported format version."""
