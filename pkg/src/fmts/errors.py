"""Exception hierarchy shared by every module.

Each class carries the process exit code the CLI maps it to.
"""


class FmtsError(Exception):
    exit_code = 4


class ConfigError(FmtsError, ValueError):
    """Invalid or unparseable configuration / command-line usage."""

    exit_code = 1


class IngestionError(FmtsError):
    """A data file could not be read or parsed."""

    exit_code = 2


class DivergenceError(FmtsError, ArithmeticError):
    """Base for numeric divergence during training or sampling."""

    exit_code = 3


class TrainingDiverged(DivergenceError):
    pass


class SamplingDiverged(DivergenceError):
    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"non-finite values at sampling step {step}")


class ContractError(FmtsError):
    """A caller violated a documented precondition."""

    exit_code = 4


class ShapeError(ContractError, ValueError):
    pass


class DomainError(ContractError, ValueError):
    """An argument is outside the mathematical domain of an operation."""


class MetricError(ContractError):
    pass


class DegenerateDataError(MetricError):
    pass


class AxisError(ContractError, IndexError):
    pass
