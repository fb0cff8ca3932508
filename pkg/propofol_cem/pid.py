"""Discrete PID baseline with integral clamping and a lagged derivative."""

import logging
import math

from dataclasses import dataclass

import numpy as np

from .exceptions import ParameterError

logger = logging.getLogger(__name__)

__all__ = ['PidController', 'PidParams', 'PidState', 'pid_step']


@dataclass(frozen=True)
class PidParams(object):
    """Gains, clamp interval of the error sum and derivative lag.

    Without an explicit ``integral_clamp`` the error sum is kept in
    ``[0, 1/ki]``, so the integral term spans the actuator range.
    """

    kp: float = 9.0
    ki: float = 0.9
    kd: float = 22.5
    integral_clamp: tuple = None
    derivative_lag: int = 6

    def __post_init__(self):
        for name in ('kp', 'ki', 'kd'):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ParameterError(
                    '%s must be nonnegative, got %r' % (name, value))
        if self.integral_clamp is None:
            hi = 1.0 / self.ki if self.ki > 0 else 0.0
            object.__setattr__(self, 'integral_clamp', (0.0, hi))
        lo, hi = self.integral_clamp
        if not lo <= hi:
            raise ParameterError(
                'integral clamp %r is not ordered' % (self.integral_clamp,))
        object.__setattr__(self, 'integral_clamp', (float(lo), float(hi)))
        if self.derivative_lag < 1:
            raise ParameterError('derivative_lag must be at least 1')


@dataclass(frozen=True)
class PidState(object):
    """Clamped error sum and the errors of the last ``lag + 1`` steps."""

    integral: float = 0.0
    errors: tuple = ()
    step: int = 0


def pid_step(state, y_tilde, y_star, params):
    """One controller update, returning ``(action, new_state)``.

    Works elementwise on arrays of parallel episodes.  Before the lag
    window is full the oldest error stands in for ``e[k - lag]``.
    """
    error = np.subtract(y_star, y_tilde)
    lo, hi = params.integral_clamp
    integral = np.clip(state.integral + error, lo, hi)
    errors = (state.errors + (error,))[-(params.derivative_lag + 1):]
    derivative = (error - errors[0]) / params.derivative_lag
    raw = params.kp * error + params.ki * integral + params.kd * derivative
    action = np.clip(raw, 0.0, 1.0)
    if not np.ndim(action):
        action, integral = float(action), float(integral)
    return action, PidState(integral, errors, state.step + 1)


class PidController(object):
    """Rollout controller wrapping :func:`pid_step`."""

    name = 'pid'

    def __init__(self, params=None):
        self.params = params or PidParams()
        self.state = PidState()

    def reset(self, n):
        self.state = PidState(np.zeros(n))

    def act(self, obs, y_tilde, target, uniforms):
        action, self.state = pid_step(self.state, y_tilde, target,
                                      self.params)
        return action
