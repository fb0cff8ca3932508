"""Cross-entropy training of the dosing policy.

Each batch samples one patient and one target schedule, simulates ``N``
stochastic episodes on them, keeps the best episodes by reward and takes
one gradient step that makes the policy more likely to repeat the
actions of those elite episodes.
"""

import logging
import math
import os

from collections import namedtuple
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd

from .agent import (
    ActionMode, ObservationBuilder, PolicyController, PolicyWeights,
    policy_activations, save_checkpoint)
from .exceptions import (
    NumericalError, ParameterError, TrainingAborted, WorkbenchError)
from .pkpd_env import (
    DEFAULT_RANGES, EnvironmentSettings, PatientState, hill_response,
    sample_patient)

logger = logging.getLogger(__name__)

__all__ = [
    'BatchResult', 'EpisodeLog', 'TraceRow', 'TrainConfig',
    'cross_entropy_loss', 'episode_reward', 'generate_episode_targets',
    'random_stream', 'run_batch', 'run_episode', 'select_elite',
    'sgd_step', 'simulate', 'train', 'write_trace']

#: Clamp on probabilities inside the log loss.
LOSS_EPSILON = 1e-7

# spawn-key namespaces of the master seed
INIT_STREAM = 0
BATCH_STREAM = 1
CAMPAIGN_STREAM = 2
SIMULATE_STREAM = 3


def random_stream(seed, *key):
    """Independent generator for ``key`` under the master ``seed``."""
    sequence = np.random.SeedSequence(seed, spawn_key=tuple(key))
    return np.random.Generator(np.random.PCG64(sequence))


@dataclass(frozen=True)
class TrainConfig(object):
    batch_size: int = 16
    elite_percentile: float = 70.0
    max_batches: int = 4000
    min_mean_reward: float = None
    learning_rate: float = 0.01
    episode_steps: int = 2000
    targets_per_episode: int = 4
    target_min: float = 0.25
    target_max: float = 0.75
    master_seed: int = 0
    checkpoint_every: int = 100
    log_every: int = 50

    def __post_init__(self):
        if self.batch_size < 1:
            raise ParameterError('batch_size must be at least 1')
        if not 0 < self.elite_percentile < 100:
            raise ParameterError(
                'elite_percentile must lie strictly between 0 and 100, '
                'got %r' % (self.elite_percentile,))
        if self.max_batches < 0:
            raise ParameterError('max_batches must be nonnegative')
        if not self.learning_rate >= 0:
            raise ParameterError('learning_rate must be nonnegative')
        if self.episode_steps < 1 or self.targets_per_episode < 1:
            raise ParameterError(
                'episode_steps and targets_per_episode must be positive')
        if self.episode_steps % self.targets_per_episode:
            raise ParameterError(
                'episode_steps %d is not divisible by targets_per_episode %d'
                % (self.episode_steps, self.targets_per_episode))
        if not 0 < self.target_min <= self.target_max < 1:
            raise ParameterError(
                'target range [%r, %r] must lie inside (0, 1)'
                % (self.target_min, self.target_max))
        if self.master_seed < 0:
            raise ParameterError('master_seed must be nonnegative')
        if self.checkpoint_every < 1 or self.log_every < 1:
            raise ParameterError(
                'checkpoint_every and log_every must be positive')

    @property
    def elite_count(self):
        return elite_count(self.batch_size, self.elite_percentile)


@dataclass(frozen=True, eq=False)
class EpisodeLog(object):
    """Step-by-step record of one closed-loop episode."""

    targets: np.ndarray
    y: np.ndarray
    y_tilde: np.ndarray
    observations: np.ndarray
    actions: np.ndarray
    infused: np.ndarray
    states: np.ndarray
    effect_site: np.ndarray
    patient: object
    reward: float
    controller: str = ''
    dose: float = 8.35
    delta_t: float = 5.0

    @property
    def n_steps(self):
        return len(self.targets)

    def is_complete(self, expected_steps=None):
        n = self.n_steps
        arrays = (self.y, self.y_tilde, self.observations, self.actions,
                  self.infused, self.states, self.effect_site)
        if any(len(a) != n for a in arrays):
            return False
        return expected_steps is None or n == expected_steps


TraceRow = namedtuple('TraceRow', 'batch_index mean_reward loss')


@dataclass(frozen=True, eq=False)
class BatchResult(object):
    logs: list
    rewards: np.ndarray
    mean_reward: float
    elite: np.ndarray
    loss: float = float('nan')


def episode_reward(targets, y):
    """Cumulative negative absolute tracking error."""
    return -float(np.sum(np.abs(np.subtract(targets, y))))


def generate_episode_targets(rng, config):
    """Piecewise-constant target schedule of ``episode_steps`` values."""
    values = rng.uniform(config.target_min, config.target_max,
                         config.targets_per_episode)
    hold = config.episode_steps // config.targets_per_episode
    return np.repeat(values, hold)


def simulate(patients, targets, controller, settings, noise, uniforms,
             generic_model, initial_states=None):
    """Run one closed-loop episode per patient, all in lockstep.

    ``targets``, ``noise`` and ``uniforms`` are ``(n, K)`` arrays of the
    target schedules, measurement noise and the uniform draws used by
    stochastic action selection.  Every episode owns its rows, so the
    result of an episode does not depend on the others.
    """
    targets = np.atleast_2d(targets)
    n, n_steps = targets.shape
    models = [settings.build(p) for p in patients]
    a_matrices = np.stack([m.a_matrix for m in models])
    b_vectors = np.stack([m.b_vector for m in models])
    alpha = np.array([m.alpha for m in models])
    beta = np.array([m.beta for m in models])
    gamma = np.array([m.gamma for m in models])
    c50 = np.array([m.c50 for m in models])

    if initial_states is None:
        initial_states = [PatientState.initial()] * n
    x = np.stack([np.asarray(s.x, dtype=float) for s in initial_states])
    x_e = np.array([s.x_e for s in initial_states], dtype=float)

    builder = ObservationBuilder(generic_model, n)
    controller.reset(n)

    y_log = np.empty((n, n_steps))
    y_tilde_log = np.empty((n, n_steps))
    obs_log = np.empty((n, n_steps, 4))
    action_log = np.empty((n, n_steps))
    state_log = np.empty((n, n_steps, 3))
    effect_log = np.empty((n, n_steps))

    for k in range(n_steps):
        y = hill_response(x_e, gamma, c50)
        y_tilde = np.clip(y + noise[:, k], 0.0, 1.0)
        obs = builder.observe(y_tilde, targets[:, k])
        actions = np.asarray(
            controller.act(obs, y_tilde, targets[:, k], uniforms[:, k]),
            dtype=float)
        if not np.all(np.isfinite(actions)):
            raise NumericalError(
                'controller %s produced non-finite actions at step %d'
                % (controller.name, k))

        y_log[:, k] = y
        y_tilde_log[:, k] = y_tilde
        obs_log[:, k] = obs
        action_log[:, k] = actions
        state_log[:, k] = x
        effect_log[:, k] = x_e

        x_next = np.einsum('nij,nj->ni', a_matrices, x)
        x_next += b_vectors * actions[:, None]
        x_e = alpha * x_e + beta * x[:, 0]
        x = x_next
        builder.update(actions)

    logs = []
    for i, model in enumerate(models):
        logs.append(EpisodeLog(
            targets=targets[i].copy(), y=y_log[i], y_tilde=y_tilde_log[i],
            observations=obs_log[i], actions=action_log[i],
            infused=action_log[i] * model.dose, states=state_log[i],
            effect_site=effect_log[i], patient=patients[i],
            reward=episode_reward(targets[i], y_log[i]),
            controller=controller.name, dose=model.dose,
            delta_t=model.delta_t))
    return logs


def episode_draws(rng, settings, n_steps):
    """Measurement noise then action uniforms for one episode."""
    noise = settings.measurement.sample_noise(rng, n_steps)
    uniforms = rng.random(n_steps)
    return noise, uniforms


def generic_model_for(settings, ranges=DEFAULT_RANGES):
    return settings.build(ranges.generic_patient())


def run_episode(patient, targets, weights, mode, rng, settings=None,
                ranges=DEFAULT_RANGES, controller=None):
    """Simulate one closed-loop episode and return its log."""
    settings = settings or EnvironmentSettings()
    targets = np.asarray(targets, dtype=float)
    noise, uniforms = episode_draws(rng, settings, targets.size)
    if controller is None:
        controller = PolicyController(weights, mode)
    return simulate(
        [patient], targets[None, :], controller, settings, noise[None, :],
        uniforms[None, :], generic_model_for(settings, ranges))[0]


def elite_count(n, percentile):
    # rounded so that e.g. 30% of 10 is 3 and not 3.0000000000000004
    return max(1, int(math.ceil(round((100.0 - percentile) * n / 100.0, 9))))


def select_elite(rewards, p):
    """Indices of the top ``(100 - p)`` percent of episodes by reward.

    Equal rewards rank by episode index; the indices come back sorted.
    """
    rewards = np.asarray(rewards, dtype=float)
    if rewards.size < 1:
        raise ValueError('no rewards to select from')
    order = np.lexsort((np.arange(rewards.size), -rewards))
    return np.sort(order[:elite_count(rewards.size, p)])


def _stack_logs(logs):
    obs = np.concatenate([log.observations for log in logs])
    actions = np.concatenate([log.actions for log in logs])
    return obs, actions


def elite_loss(logs, weights, eps=LOSS_EPSILON):
    return _loss_and_gradient(logs, weights, eps, gradient=False)[0]


def _loss_and_gradient(logs, weights, eps, gradient=True):
    obs, actions = _stack_logs(logs)
    pre, hidden, probs = policy_activations(weights, obs)
    p_infuse = probs[:, 1]
    clamped = np.clip(p_infuse, eps, 1.0 - eps)
    loss = -float(np.sum(actions * np.log(clamped)
                         + (1.0 - actions) * np.log(1.0 - clamped)))
    if not gradient:
        return loss, None

    inside = (p_infuse > eps) & (p_infuse < 1.0 - eps)
    d_p = (-actions / clamped + (1.0 - actions) / (1.0 - clamped)) * inside
    # two-way softmax: dp1/dz1 = -dp1/dz0 = p0 * p1
    d_z1 = d_p * probs[:, 0] * p_infuse
    d_logits = np.stack([-d_z1, d_z1], axis=1)
    output_weights = d_logits.T.dot(hidden)
    output_bias = d_logits.sum(axis=0)
    d_pre = d_logits.dot(weights.output_weights) * (pre > 0)
    hidden_weights = d_pre.T.dot(obs)
    hidden_bias = d_pre.sum(axis=0)
    grad = PolicyWeights(hidden_weights, hidden_bias, output_weights,
                         output_bias)
    return loss, grad


def cross_entropy_loss(elite_logs, weights, eps=LOSS_EPSILON):
    """Summed cross-entropy of the elite actions and its gradient.

    Returns ``(loss, gradient)`` with the gradient shaped like
    ``weights``.  Probabilities are clamped to ``[eps, 1 - eps]``.
    """
    if not elite_logs:
        raise ValueError('no elite episodes')
    return _loss_and_gradient(elite_logs, weights, eps)


def sgd_step(weights, gradient, learning_rate):
    """Plain gradient descent step ``w - lr * g``."""
    if learning_rate < 0:
        raise ParameterError('learning rate must be nonnegative')
    g = gradient.flatten()
    if not np.all(np.isfinite(g)):
        raise NumericalError('non-finite gradient')
    return PolicyWeights.from_flat(weights.flatten() - learning_rate * g)


def run_batch(weights, config, batch_index, settings=None,
              ranges=DEFAULT_RANGES, generic_model=None):
    """Simulate one training batch and pick its elite episodes."""
    settings = settings or EnvironmentSettings()
    if generic_model is None:
        generic_model = generic_model_for(settings, ranges)
    seed = config.master_seed
    rng = random_stream(seed, BATCH_STREAM, batch_index, 0)
    patient = sample_patient(rng, ranges)
    targets = generate_episode_targets(rng, config)

    n = config.batch_size
    noise = np.empty((n, config.episode_steps))
    uniforms = np.empty((n, config.episode_steps))
    for i in range(n):
        episode_rng = random_stream(seed, BATCH_STREAM, batch_index, i + 1)
        noise[i], uniforms[i] = episode_draws(
            episode_rng, settings, config.episode_steps)

    logs = simulate(
        [patient] * n, np.tile(targets, (n, 1)),
        PolicyController(weights, ActionMode.STOCHASTIC), settings,
        noise, uniforms, generic_model)
    rewards = np.array([log.reward for log in logs])
    elite = select_elite(rewards, config.elite_percentile)
    return BatchResult(logs=logs, rewards=rewards,
                       mean_reward=float(rewards.mean()), elite=elite)


def train_step(weights, config, batch_index, settings=None,
               ranges=DEFAULT_RANGES, generic_model=None):
    """Simulate a batch and update on its elite, returning
    ``(new_weights, batch)`` with the elite loss after the update."""
    batch = run_batch(weights, config, batch_index, settings, ranges,
                      generic_model)
    elite_logs = [batch.logs[i] for i in batch.elite]
    loss_before, gradient = cross_entropy_loss(elite_logs, weights)
    weights = sgd_step(weights, gradient, config.learning_rate)
    loss = elite_loss(elite_logs, weights)
    logger.debug('batch %d: elite %r, loss %r -> %r', batch_index,
                 batch.elite.tolist(), loss_before, loss)
    return weights, replace(batch, loss=loss)


def _checkpoint_path(directory, batch_index):
    return os.path.join(directory, 'checkpoint-%05d.json' % batch_index)


def train(config, settings=None, ranges=DEFAULT_RANGES, weights=None,
          checkpoint_dir=None, start_batch=0):
    """Cross-entropy training loop.

    Returns ``(weights, trace)`` where ``trace`` is a list of
    :class:`TraceRow`.  Stops after ``max_batches`` batches or once the
    batch mean reward reaches ``min_mean_reward``.  Checkpoints go to
    ``checkpoint_dir`` every ``checkpoint_every`` batches and at the end.
    """
    settings = settings or EnvironmentSettings()
    if weights is None:
        weights = PolicyWeights.initialize(
            random_stream(config.master_seed, INIT_STREAM))
    generic_model = generic_model_for(settings, ranges)
    trace = []
    last_checkpoint = None
    mean_reward = -math.inf

    def checkpoint(batch_index, final=False):
        if checkpoint_dir is None:
            return None
        metadata = dict(batches=batch_index, seed=config.master_seed,
                        final_mean_reward=(
                            trace[-1].mean_reward if trace else None))
        path = save_checkpoint(
            _checkpoint_path(checkpoint_dir, batch_index), weights, metadata)
        if final:
            save_checkpoint(os.path.join(checkpoint_dir, 'policy.json'),
                            weights, metadata)
        logger.info('checkpoint after %d batches: %s', batch_index, path)
        return path

    batch_index = start_batch
    while batch_index < config.max_batches and not (
            config.min_mean_reward is not None
            and mean_reward >= config.min_mean_reward):
        try:
            weights, batch = train_step(weights, config, batch_index,
                                        settings, ranges, generic_model)
        except WorkbenchError as e:
            logger.error('batch %d failed: %s', batch_index, e,
                         exc_info=True)
            raise TrainingAborted(
                'training aborted in batch %d: %s' % (batch_index, e),
                checkpoint=last_checkpoint, batch=batch_index)
        mean_reward, loss = batch.mean_reward, batch.loss
        trace.append(TraceRow(batch_index, mean_reward, loss))
        batch_index += 1
        if batch_index % config.log_every == 0:
            logger.info('batch %d/%d: mean reward %.2f, elite loss %.2f',
                        batch_index, config.max_batches, mean_reward, loss)
        if batch_index % config.checkpoint_every == 0:
            last_checkpoint = checkpoint(batch_index)

    checkpoint(batch_index, final=True)
    return weights, trace


def trace_frame(trace):
    return pd.DataFrame(list(trace), columns=list(TraceRow._fields))


def write_trace(path, trace):
    """Write the convergence trace as CSV."""
    trace_frame(trace).to_csv(path, index=False)
    return path
