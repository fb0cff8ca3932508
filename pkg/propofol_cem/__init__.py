"""Closed-loop propofol dosing workbench.

A virtual patient simulator, a cross-entropy trained dosing policy, a PID
baseline and the tools to compare them on paired test campaigns.
"""

__version__ = '0.1.0'

from .agent import (  # noqa: E402
    ActionMode, PolicyWeights, load_checkpoint, policy_forward,
    save_checkpoint)
from .evaluation import (  # noqa: E402
    episode_metrics, paired_t_test, policy_map, run_test_campaign)
from .exceptions import (  # noqa: E402
    CheckpointError, ConfigurationError, NumericalError, ParameterError,
    WorkbenchError)
from .pid import PidParams  # noqa: E402
from .pkpd_env import (  # noqa: E402
    EnvironmentSettings, PatientParams, PatientRanges, sample_patient)
from .settings import WorkbenchConfig, load_config  # noqa: E402
from .trainer import TrainConfig, train  # noqa: E402

__all__ = [
    'ActionMode', 'CheckpointError', 'ConfigurationError',
    'EnvironmentSettings', 'NumericalError', 'ParameterError',
    'PatientParams', 'PatientRanges', 'PidParams', 'PolicyWeights',
    'TrainConfig', 'WorkbenchConfig', 'WorkbenchError', 'episode_metrics',
    'load_checkpoint', 'load_config', 'paired_t_test', 'policy_forward',
    'policy_map', 'run_test_campaign', 'sample_patient', 'save_checkpoint',
    'train']
