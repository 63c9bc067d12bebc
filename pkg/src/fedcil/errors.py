"""Exception hierarchy shared by every module of the package."""


class FedcilError(Exception):
    """Base class for all package errors."""


class DimensionError(FedcilError, ValueError):
    """Operand shapes do not agree."""


class ContractError(FedcilError, ValueError):
    """A precondition of an operation was violated."""


class TapeStateError(FedcilError, RuntimeError):
    """The autodiff tape is in the wrong state for the requested action."""


class LabelRangeError(FedcilError, ValueError):
    """A class label is unknown to the model or outside the task."""


class ConfigurationError(FedcilError, ValueError):
    """An experiment or stream configuration is infeasible or invalid."""


class ProtocolError(FedcilError, RuntimeError):
    """Server/client exchange received something it cannot aggregate."""


class EvaluationError(FedcilError, ValueError):
    """Nothing to evaluate, or the evaluated model cannot cover the labels."""


class UsageError(FedcilError, ValueError):
    """Bad argument at the user-facing surface (CLI, export kinds)."""
