"""Exception hierarchy shared across the package."""


class NilmError(Exception):
    """Base class for all package errors."""


class ConfigError(NilmError, ValueError):
    """Invalid hyper-parameter, manifest field or option."""


class DimensionError(NilmError, ValueError):
    """Tensor shapes do not agree."""


class GeometryError(NilmError, ValueError):
    """Sequence length, kernel or pooling geometry is inconsistent."""


class EvaluationError(NilmError, ArithmeticError):
    """An objective evaluated to a non-finite value."""


class DivergenceError(NilmError, ArithmeticError):
    """Training produced a non-finite loss or gradient."""


class DataIntegrityError(NilmError, ValueError):
    """Input series violate monotonicity or sign constraints."""


class ParseError(NilmError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class AlignmentError(NilmError, ValueError):
    """Channels share no usable time range."""


class InstrumentationError(NilmError, RuntimeError):
    """Timer begin/end events are not paired."""


class CheckpointError(NilmError, ValueError):
    """Checkpoint container is corrupt or incompatible."""
