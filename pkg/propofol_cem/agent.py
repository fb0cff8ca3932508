"""The dosing agent: observation vector, policy network, action modes.

The agent never sees the simulated patient.  It keeps a PK model with
generic parameters that is driven by its own actions, and combines the
predicted effect-site change with the measured LoU history into a four
variable observation.
"""

import json
import logging
import math
import os

from collections import deque
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .exceptions import CheckpointError, NumericalError
from .pkpd_env import PatientState, step_patient

logger = logging.getLogger(__name__)

__all__ = [
    'ActionMode', 'CHECKPOINT_FORMAT_VERSION', 'InternalModel', 'LAYER_DIMS',
    'Observation', 'ObservationBuilder', 'PolicyController', 'PolicyWeights',
    'build_observation', 'load_checkpoint', 'policy_forward',
    'predict_effect_site_delta', 'save_checkpoint', 'select_action',
    'update_internal_model']

N_INPUTS = 4
N_HIDDEN = 128
N_OUTPUTS = 2
LAYER_DIMS = (N_INPUTS, N_HIDDEN, N_OUTPUTS)
N_PARAMETERS = (N_INPUTS + 1) * N_HIDDEN + (N_HIDDEN + 1) * N_OUTPUTS

#: Steps covering the 30 second look-ahead and history windows.
HORIZON_STEPS = 6

CHECKPOINT_FORMAT_VERSION = 1


class ActionMode(str, Enum):
    STOCHASTIC = 'stochastic'
    DETERMINISTIC = 'deterministic'
    CONTINUOUS = 'continuous'


@dataclass(frozen=True)
class Observation(object):
    """Measured error, predicted effect-site change, LoU trend, target."""

    o1: float
    o2: float
    o3: float
    o4: float

    def as_array(self):
        return np.array([self.o1, self.o2, self.o3, self.o4])


@dataclass(frozen=True, eq=False)
class InternalModel(object):
    """The agent's own estimate of compartment and effect-site levels."""

    generic_model: object
    x_hat: np.ndarray
    x_e_hat: float = 0.0

    @classmethod
    def initial(cls, generic_model):
        return cls(generic_model, np.zeros(3), 0.0)

    def _as_state(self):
        return PatientState(self.x_hat, self.x_e_hat, 0)


def update_internal_model(internal, action):
    """Fold one emitted action into the internal model."""
    state = step_patient(internal.generic_model, internal._as_state(), action)
    return replace(internal, x_hat=state.x, x_e_hat=state.x_e)


def predict_effect_site_delta(internal, steps=HORIZON_STEPS):
    """Effect-site change over ``steps`` if no further drug is given."""
    state = internal._as_state()
    for _ in range(steps):
        state = step_patient(internal.generic_model, state, 0.0)
    return state.x_e - internal.x_e_hat


def prediction_weights(model, steps=HORIZON_STEPS):
    """Linear form ``(c, d)`` with ``delta = c . x + d * x_e``.

    Equivalent to :func:`predict_effect_site_delta` but without stepping,
    for use inside vectorized rollouts.
    """
    # after n zero-input steps
    # x_e = alpha^n x_e + beta * sum_j alpha^(n-1-j) (A^j x)_1
    c = np.zeros(3)
    power = np.eye(3)
    for j in range(steps):
        c += model.beta * model.alpha ** (steps - 1 - j) * power[0]
        power = model.a_matrix.dot(power)
    return c, model.alpha ** steps - 1.0


def build_observation(y_tilde_history, action_history, target, internal,
                      horizon=HORIZON_STEPS):
    """Observation at step ``k = len(y_tilde_history) - 1``.

    ``internal`` is the agent's model before ``action_history`` was
    applied; it is replayed on a copy, so the caller's model is left as
    it is.  Readings before the first one count as the first one.
    """
    y_tilde = np.asarray(y_tilde_history, dtype=float)
    if y_tilde.size == 0:
        raise ValueError('at least one measurement is needed')
    for action in action_history:
        internal = update_internal_model(internal, action)
    k = y_tilde.size - 1
    current = y_tilde[k]
    past = y_tilde[max(k - horizon, 0)]
    return Observation(
        o1=float(current - target),
        o2=float(predict_effect_site_delta(internal, horizon)),
        o3=float(current - past),
        o4=float(target))


class ObservationBuilder(object):
    """Vectorized observation builder for ``n`` parallel episodes."""

    def __init__(self, generic_model, n, horizon=HORIZON_STEPS):
        self.model = generic_model
        self.horizon = horizon
        self.x_hat = np.zeros((n, 3))
        self.x_e_hat = np.zeros(n)
        # readings k - horizon .. k
        self.history = deque(maxlen=horizon + 1)
        self.coef, self.decay = prediction_weights(generic_model, horizon)

    def observe(self, y_tilde, target):
        self.history.append(y_tilde)
        past = self.history[0]
        obs = np.empty((y_tilde.shape[0], N_INPUTS))
        obs[:, 0] = y_tilde - target
        obs[:, 1] = self.x_hat.dot(self.coef) + self.decay * self.x_e_hat
        obs[:, 2] = y_tilde - past
        obs[:, 3] = target
        return obs

    def update(self, actions):
        model = self.model
        x_e = model.alpha * self.x_e_hat + model.beta * self.x_hat[:, 0]
        self.x_hat = (self.x_hat.dot(model.a_matrix.T)
                      + np.outer(actions, model.b_vector))
        self.x_e_hat = x_e


@dataclass(frozen=True, eq=False)
class PolicyWeights(object):
    """Parameters of the 4-128-2 policy network."""

    hidden_weights: np.ndarray
    hidden_bias: np.ndarray
    output_weights: np.ndarray
    output_bias: np.ndarray

    def __post_init__(self):
        expected = ((N_HIDDEN, N_INPUTS), (N_HIDDEN,),
                    (N_OUTPUTS, N_HIDDEN), (N_OUTPUTS,))
        for array, shape in zip(self._arrays(), expected):
            if array.shape != shape:
                raise ValueError(
                    'weight array of shape %r, expected %r'
                    % (array.shape, shape))

    def _arrays(self):
        return (self.hidden_weights, self.hidden_bias,
                self.output_weights, self.output_bias)

    @classmethod
    def initialize(cls, rng):
        """Uniform in +-1/sqrt(fan_in) per layer."""
        bound = 1.0 / math.sqrt(N_INPUTS)
        hidden_weights = rng.uniform(-bound, bound, (N_HIDDEN, N_INPUTS))
        hidden_bias = rng.uniform(-bound, bound, N_HIDDEN)
        bound = 1.0 / math.sqrt(N_HIDDEN)
        output_weights = rng.uniform(-bound, bound, (N_OUTPUTS, N_HIDDEN))
        output_bias = rng.uniform(-bound, bound, N_OUTPUTS)
        return cls(hidden_weights, hidden_bias, output_weights, output_bias)

    @classmethod
    def zeros(cls):
        return cls.from_flat(np.zeros(N_PARAMETERS))

    @classmethod
    def from_flat(cls, vector):
        vector = np.asarray(vector, dtype=float)
        if vector.shape != (N_PARAMETERS,):
            raise ValueError('expected %d parameters, got %r'
                             % (N_PARAMETERS, vector.shape))
        arrays = []
        offset = 0
        for shape in ((N_HIDDEN, N_INPUTS), (N_HIDDEN,),
                      (N_OUTPUTS, N_HIDDEN), (N_OUTPUTS,)):
            size = int(np.prod(shape))
            arrays.append(vector[offset:offset + size].reshape(shape).copy())
            offset += size
        return cls(*arrays)

    def flatten(self):
        return np.concatenate([a.ravel() for a in self._arrays()])

    @property
    def parameter_count(self):
        return sum(a.size for a in self._arrays())

    def is_finite(self):
        return all(np.all(np.isfinite(a)) for a in self._arrays())


def policy_activations(weights, obs):
    """Forward pass keeping hidden pre-activations and outputs."""
    obs = np.asarray(obs, dtype=float)
    if not (weights.is_finite() and np.all(np.isfinite(obs))):
        raise NumericalError('non-finite policy weights or observation')
    pre = obs.dot(weights.hidden_weights.T) + weights.hidden_bias
    hidden = np.maximum(pre, 0.0)
    logits = hidden.dot(weights.output_weights.T) + weights.output_bias
    logits = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(logits)
    probs = exp / exp.sum(axis=-1, keepdims=True)
    if not np.all(np.isfinite(probs)):
        raise NumericalError('policy network overflowed')
    return pre, hidden, probs


def policy_forward(weights, obs):
    """Action probabilities ``(p_no_infuse, p_infuse)`` for ``obs``.

    ``obs`` may be an :class:`Observation`, a 4-vector or an ``(n, 4)``
    array.
    """
    if isinstance(obs, Observation):
        obs = obs.as_array()
    return policy_activations(weights, obs)[2]


def _actions_from_draws(probs, mode, uniforms):
    p_infuse = probs[..., 1]
    mode = ActionMode(mode)
    if mode is ActionMode.STOCHASTIC:
        return (uniforms < p_infuse).astype(float)
    if mode is ActionMode.DETERMINISTIC:
        # a tie does not infuse
        return (p_infuse > probs[..., 0]).astype(float)
    return p_infuse.astype(float)


def select_action(probs, mode, rng=None):
    """Turn action probabilities into a normalized infusion."""
    probs = np.asarray(probs, dtype=float)
    uniforms = None
    if ActionMode(mode) is ActionMode.STOCHASTIC:
        uniforms = rng.random(probs.shape[:-1])
    action = _actions_from_draws(probs, mode, uniforms)
    return action if np.ndim(action) else float(action)


class PolicyController(object):
    """Rollout controller acting with the policy network."""

    def __init__(self, weights, mode=ActionMode.STOCHASTIC):
        self.weights = weights
        self.mode = ActionMode(mode)
        self.name = self.mode.value

    def reset(self, n):
        pass

    def act(self, obs, y_tilde, target, uniforms):
        probs = policy_forward(self.weights, obs)
        return _actions_from_draws(probs, self.mode, uniforms)


def save_checkpoint(path, weights, metadata=None):
    """Write ``weights`` as a JSON document.

    Floats are written with their shortest round-trip repr, so loading a
    checkpoint gives back the exact weights.
    """
    layers = []
    for w, b in ((weights.hidden_weights, weights.hidden_bias),
                 (weights.output_weights, weights.output_bias)):
        layers.append(dict(weights=[float(v) for v in w.ravel()],
                           bias=[float(v) for v in b]))
    document = dict(
        format_version=CHECKPOINT_FORMAT_VERSION,
        layer_dims=list(LAYER_DIMS),
        layers=layers,
        metadata=dict(metadata or {}))
    tmp_path = '%s.tmp' % path
    with open(tmp_path, 'w') as f:
        json.dump(document, f, indent=1, sort_keys=True)
        f.write('\n')
    os.replace(tmp_path, path)
    logger.debug('wrote checkpoint %s', path)
    return path


def load_checkpoint(path):
    """Read a checkpoint, returning ``(weights, metadata)``."""
    try:
        with open(path) as f:
            document = json.load(f)
    except (OSError, ValueError) as e:
        raise CheckpointError('cannot read checkpoint %s: %s' % (path, e))
    try:
        version = document['format_version']
        dims = document['layer_dims']
        layers = document['layers']
    except (KeyError, TypeError):
        raise CheckpointError('%s is not a policy checkpoint' % (path,))
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            'unsupported checkpoint format %r in %s' % (version, path))
    if list(dims) != list(LAYER_DIMS) or len(layers) != 2:
        raise CheckpointError(
            'checkpoint %s has layer dims %r, expected %r'
            % (path, dims, list(LAYER_DIMS)))
    try:
        flat = []
        for index, layer in enumerate(layers):
            n_in, n_out = LAYER_DIMS[index], LAYER_DIMS[index + 1]
            if (len(layer['weights']) != n_in * n_out
                    or len(layer['bias']) != n_out):
                raise CheckpointError(
                    'layer %d of checkpoint %s does not match %dx%d'
                    % (index, path, n_out, n_in))
            flat.extend(layer['weights'])
            flat.extend(layer['bias'])
        vector = np.array(flat, dtype=float)
    except (KeyError, TypeError, ValueError):
        raise CheckpointError('malformed layer in checkpoint %s' % (path,))
    if vector.size != N_PARAMETERS:
        raise CheckpointError(
            'checkpoint %s holds %d parameters, expected %d'
            % (path, vector.size, N_PARAMETERS))
    try:
        weights = PolicyWeights.from_flat(vector)
    except ValueError as e:
        raise CheckpointError('checkpoint %s: %s' % (path, e))
    if not weights.is_finite():
        raise CheckpointError('checkpoint %s holds non-finite weights' % path)
    return weights, document.get('metadata', {})
