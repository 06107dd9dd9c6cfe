"""Exception hierarchy shared across the package."""


class LoopPEError(Exception):
    """Base class for all package errors."""


class ShapeError(LoopPEError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(LoopPEError, ArithmeticError):
    """An operation was evaluated outside its domain (e.g. division by zero)."""


class NonFiniteError(LoopPEError, FloatingPointError):
    """An operation produced NaN or Inf."""


class ContractError(LoopPEError, ValueError):
    """A documented precondition was violated."""


class SingularityError(LoopPEError, ValueError):
    """A matrix that must have full row rank does not."""


class MarginError(LoopPEError, ValueError):
    """The tightened instance used for the interior point is infeasible."""


class CheckpointError(LoopPEError, ValueError):
    """A checkpoint file is malformed or has an unsupported version."""


class TrainingDivergence(LoopPEError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, sample_id=None):
        super().__init__(message)
        self.sample_id = sample_id
