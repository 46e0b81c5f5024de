"""Exception types shared across the package."""


class MindloopError(Exception):
    """Base class for all package errors."""


class ShapeError(MindloopError):
    """Tensor shapes are incompatible with the requested operation."""


class ContractError(MindloopError):
    """A documented precondition was violated by the caller."""


class ConfigError(MindloopError):
    """Configuration is malformed or inconsistent."""


class NumericError(MindloopError):
    """Numerical failure: non-finite values, singular systems, divergence."""


class StageError(MindloopError):
    """A pipeline stage failed; carries the stage name for diagnostics."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage


class DegenerateDataWarning(UserWarning):
    """A statistic was requested on constant data; a neutral value is returned."""
