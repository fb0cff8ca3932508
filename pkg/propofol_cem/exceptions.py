from pyramid.exceptions import ConfigurationError

__all__ = [
    'CheckpointError', 'ConfigurationError', 'DegenerateSampleError',
    'IncompleteLogError', 'NumericalError', 'ParameterError',
    'TrainingAborted', 'WorkbenchError']


class WorkbenchError(Exception):
    """Base class for runtime failures of the workbench."""


class ParameterError(ConfigurationError, ValueError):
    """A configuration value or a patient parameter is out of range."""


class NumericalError(WorkbenchError, ArithmeticError):
    """Non-finite values showed up in the network, loss or gradient."""


class CheckpointError(WorkbenchError):
    """A weight checkpoint is missing, malformed or has wrong dimensions."""


class IncompleteLogError(WorkbenchError, ValueError):
    """An episode log does not hold the full number of steps."""


class DegenerateSampleError(WorkbenchError, ValueError):
    """A statistic is undefined for the given sample."""


class TrainingAborted(WorkbenchError):
    """Training stopped on a numeric failure.

    ``checkpoint`` is the path of the last checkpoint written (or
    ``None``) and ``batch`` the index of the batch that failed.
    """

    def __init__(self, message, checkpoint=None, batch=None):
        super(TrainingAborted, self).__init__(message)
        self.checkpoint = checkpoint
        self.batch = batch
