"""Performance metrics and head-to-head test campaigns.

Performance error is measured on the true (noise-free) LoU as a percent
of the target.  A campaign runs every controller on the same sampled
patients, target schedules and measurement noise, so their metrics can
be compared pairwise.
"""

import itertools
import logging

from collections import namedtuple
from dataclasses import dataclass

import numpy as np
import pandas as pd

from scipy import stats

from .agent import ActionMode, PolicyController, policy_forward
from .exceptions import (
    CheckpointError, DegenerateSampleError, IncompleteLogError,
    NumericalError, ParameterError)
from .pid import PidController
from .pkpd_env import DEFAULT_RANGES, EnvironmentSettings, sample_patient
from .trainer import (
    CAMPAIGN_STREAM, TrainConfig, episode_draws, generate_episode_targets,
    generic_model_for, random_stream, simulate)

logger = logging.getLogger(__name__)

__all__ = [
    'CONTROLLERS', 'ComparisonResult', 'EpisodeMetrics', 'PolicyMapGrid',
    'compare_controllers', 'episode_metrics', 'paired_t_test',
    'parameter_association', 'performance_error', 'policy_map',
    'representative_episodes', 'run_test_campaign', 'summarize',
    'trajectory_frame']

PID = 'pid'
CONTROLLERS = tuple(m.value for m in ActionMode) + (PID,)

METRIC_COLUMNS = (
    'mape', 'mpe', 'oob', 'induction_mg', 'maintenance_mg_min', 'total_mg')
PATIENT_COLUMNS = ('age', 'height', 'weight', 'sex', 'ke0', 'gamma', 'c50')

# slack on the inclusive out-of-bounds threshold for rounding in PE
_THRESHOLD_SLACK = 1e-9


@dataclass(frozen=True)
class EpisodeMetrics(object):
    mape: float
    mpe: float
    oob_fraction: float
    induction_mass: float
    maintenance_rate: float
    total_mass: float

    def as_row(self):
        return dict(
            mape=self.mape, mpe=self.mpe, oob=self.oob_fraction,
            induction_mg=self.induction_mass,
            maintenance_mg_min=self.maintenance_rate,
            total_mg=self.total_mass)


@dataclass(frozen=True, eq=False)
class ComparisonResult(object):
    differences: np.ndarray
    statistic: float
    pvalue: float
    n: int


@dataclass(frozen=True)
class PolicyMapGrid(object):
    o1_min: float = -0.5
    o1_max: float = 0.5
    o1_points: int = 201
    o2_min: float = -0.3
    o2_max: float = 0.3
    o2_points: int = 201
    o3_values: tuple = (-0.1, 0.0, 0.1)
    o4: float = 0.5

    def __post_init__(self):
        if self.o1_points < 1 or self.o2_points < 1:
            raise ParameterError('policy map needs at least one grid point')
        values = (self.o1_min, self.o1_max, self.o2_min, self.o2_max,
                  self.o4) + tuple(self.o3_values)
        if not np.all(np.isfinite(values)):
            raise ParameterError('policy map grid must be finite')
        if not self.o3_values:
            raise ParameterError('policy map needs at least one o3 slice')

    @property
    def size(self):
        return self.o1_points * self.o2_points * len(self.o3_values)


@dataclass(frozen=True)
class EvaluationSettings(object):
    n_episodes: int = 1000
    seed: int = 1
    modes: tuple = CONTROLLERS
    oob_threshold: float = 5.0
    settle_steps: int = 6
    chunk_size: int = 100
    grid: PolicyMapGrid = PolicyMapGrid()

    def __post_init__(self):
        if self.n_episodes < 1:
            raise ParameterError('n_episodes must be at least 1')
        if self.seed < 0:
            raise ParameterError('seed must be nonnegative')
        unknown = set(self.modes) - set(CONTROLLERS)
        if unknown or not self.modes:
            raise ParameterError('modes must be chosen from %s, got %r'
                                 % (', '.join(CONTROLLERS), self.modes))
        if self.oob_threshold <= 0 or self.settle_steps < 1:
            raise ParameterError(
                'oob_threshold and settle_steps must be positive')
        if self.chunk_size < 1:
            raise ParameterError('chunk_size must be at least 1')


def performance_error(y, y_star):
    """Signed error of ``y`` in percent of the target ``y_star``."""
    y_star = np.asarray(y_star, dtype=float)
    if np.any(y_star <= 0):
        raise NumericalError('performance error needs a positive target')
    pe = 100.0 * (np.asarray(y, dtype=float) - y_star) / y_star
    return pe if np.ndim(pe) else float(pe)


def _settle_point(in_band, start, stop, settle_steps):
    """First step of ``[start, stop)`` opening a run of ``settle_steps``
    in-band steps inside the segment, or ``stop`` when there is none."""
    window = in_band[start:stop]
    if window.size < settle_steps:
        return stop
    runs = np.lib.stride_tricks.sliding_window_view(
        window, settle_steps).all(axis=1)
    hits = np.flatnonzero(runs)
    return start + int(hits[0]) if hits.size else stop


def episode_metrics(log, oob_threshold=5.0, settle_steps=6,
                    expected_steps=None):
    """Tracking and drug-usage metrics of one episode.

    Induction lasts from step 0 until the LoU first stays inside the
    ``oob_threshold`` band for ``settle_steps`` steps.  After each target
    change the same rule marks a re-induction; maintenance is everything
    else, and its rate is in mg per minute of maintenance time (NaN when
    the episode never reaches maintenance).
    """
    if not log.is_complete(expected_steps):
        raise IncompleteLogError(
            'episode log has %d steps, expected %r with aligned arrays'
            % (log.n_steps, expected_steps))
    if log.n_steps == 0:
        raise IncompleteLogError('episode log is empty')
    pe = performance_error(log.y, log.targets)
    abs_pe = np.abs(pe)
    in_band = abs_pe < oob_threshold - _THRESHOLD_SLACK

    changes = np.flatnonzero(np.diff(log.targets) != 0) + 1
    starts = np.concatenate([[0], changes])
    stops = np.concatenate([changes, [log.n_steps]])
    transition = np.zeros(log.n_steps, dtype=bool)
    settled = []
    for start, stop in zip(starts, stops):
        end = _settle_point(in_band, start, stop, settle_steps)
        transition[start:end] = True
        settled.append(end)

    induction_mass = float(np.sum(log.infused[:settled[0]]))
    maintenance = ~transition
    maintenance_minutes = maintenance.sum() * log.delta_t / 60.0
    if maintenance_minutes > 0:
        maintenance_rate = float(
            np.sum(log.infused[maintenance]) / maintenance_minutes)
    else:
        maintenance_rate = float('nan')

    return EpisodeMetrics(
        mape=float(np.median(abs_pe)),
        mpe=float(np.median(pe)),
        oob_fraction=float(
            100.0 * np.count_nonzero(~in_band) / log.n_steps),
        induction_mass=induction_mass,
        maintenance_rate=maintenance_rate,
        total_mass=float(log.dose * np.sum(log.actions)))


CampaignEpisode = namedtuple(
    'CampaignEpisode', 'episode_id patient targets noise uniforms')


def campaign_episode(seed, episode_id, config=None, settings=None,
                     ranges=DEFAULT_RANGES):
    """Inputs of test episode ``episode_id``, shared by all controllers.

    The test streams live in their own namespace of the seed, apart from
    the training streams.
    """
    config = config or TrainConfig()
    settings = settings or EnvironmentSettings()
    rng = random_stream(seed, CAMPAIGN_STREAM, episode_id)
    patient = sample_patient(rng, ranges)
    targets = generate_episode_targets(rng, config)
    noise, uniforms = episode_draws(rng, settings, config.episode_steps)
    return CampaignEpisode(episode_id, patient, targets, noise, uniforms)


def make_controller(name, weights=None, pid_params=None):
    if name == PID:
        return PidController(pid_params)
    if weights is None:
        raise CheckpointError(
            'controller %r needs policy weights; no checkpoint given'
            % (name,))
    return PolicyController(weights, name)


def build_controllers(modes, weights=None, pid_params=None):
    """Controllers for ``modes``, in order; fails before any rollout."""
    unknown = set(modes) - set(CONTROLLERS)
    if unknown:
        raise ParameterError('unknown controllers %s' % sorted(unknown))
    return [make_controller(m, weights, pid_params) for m in modes]


def run_episodes(episodes, controller, settings=None, ranges=DEFAULT_RANGES):
    """Run ``controller`` on prepared campaign episodes."""
    settings = settings or EnvironmentSettings()
    return simulate(
        [e.patient for e in episodes],
        np.stack([e.targets for e in episodes]), controller, settings,
        np.stack([e.noise for e in episodes]),
        np.stack([e.uniforms for e in episodes]),
        generic_model_for(settings, ranges))


def run_test_campaign(weights, pid_params, n_patients, modes, seed,
                      config=None, settings=None, ranges=DEFAULT_RANGES,
                      evaluation=None):
    """Paired test of the requested controllers on ``n_patients`` cases.

    Returns a DataFrame with one row per episode and controller holding
    the episode metrics and the patient parameters.
    """
    if n_patients < 1:
        raise ParameterError('a campaign needs at least one patient')
    controllers = build_controllers(modes, weights, pid_params)
    evaluation = evaluation or EvaluationSettings()
    config = config or TrainConfig()

    rows = [[] for _ in controllers]
    chunk = evaluation.chunk_size
    for first in range(0, n_patients, chunk):
        ids = range(first, min(first + chunk, n_patients))
        episodes = [campaign_episode(seed, i, config, settings, ranges)
                    for i in ids]
        for controller, table in zip(controllers, rows):
            logs = run_episodes(episodes, controller, settings, ranges)
            for episode, log in zip(episodes, logs):
                metrics = episode_metrics(
                    log, evaluation.oob_threshold, evaluation.settle_steps,
                    config.episode_steps)
                row = dict(episode_id=episode.episode_id,
                           controller=controller.name)
                row.update(metrics.as_row())
                row.update(episode.patient.as_dict())
                table.append(row)
        logger.info('campaign: %d/%d episodes done', ids[-1] + 1, n_patients)
    columns = ('episode_id', 'controller') + METRIC_COLUMNS + PATIENT_COLUMNS
    # controller by controller in the order of modes, episodes ascending
    return pd.DataFrame([row for table in rows for row in table],
                        columns=list(columns))


def paired_t_test(metric_a, metric_b):
    """Two-sided paired t-test of ``metric_a`` against ``metric_b``."""
    a = np.asarray(metric_a, dtype=float)
    b = np.asarray(metric_b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError('paired samples must be 1-d and of equal length')
    if a.size < 2:
        raise DegenerateSampleError('a paired t-test needs n >= 2')
    differences = a - b
    if np.all(differences == differences[0]):
        raise DegenerateSampleError(
            'paired differences have zero variance')
    result = stats.ttest_rel(a, b)
    return ComparisonResult(
        differences=differences, statistic=float(result.statistic),
        pvalue=float(result.pvalue), n=int(a.size))


def _pivot(table, metric):
    return table.pivot(index='episode_id', columns='controller',
                       values=metric)


def compare_controllers(table, metrics=('mape', 'mpe')):
    """Pairwise paired t-tests between all controllers in ``table``."""
    rows = []
    for metric in metrics:
        wide = _pivot(table, metric)
        for first, second in itertools.combinations(wide.columns, 2):
            try:
                result = paired_t_test(wide[first], wide[second])
            except DegenerateSampleError as e:
                logger.warning('no t-test of %s for %s vs %s: %s',
                               metric, first, second, e)
                continue
            rows.append(dict(metric=metric, first=first, second=second,
                             mean_difference=result.differences.mean(),
                             statistic=result.statistic,
                             pvalue=result.pvalue, n=result.n))
    return pd.DataFrame(rows, columns=[
        'metric', 'first', 'second', 'mean_difference', 'statistic',
        'pvalue', 'n'])


def summarize(table):
    """Median of every metric per controller."""
    return table.groupby('controller', sort=False)[
        list(METRIC_COLUMNS)].median()


def parameter_association(table, controller, metric='mape',
                          parameters=('age', 'height', 'weight', 'ke0',
                                      'gamma', 'c50')):
    """Linear trend of ``metric`` against each patient parameter."""
    subset = table[table['controller'] == controller]
    if len(subset) < 3:
        raise DegenerateSampleError(
            'need at least 3 episodes of %r for a trend' % (controller,))
    rows = []
    for name in parameters:
        fit = stats.linregress(subset[name], subset[metric])
        rows.append(dict(parameter=name, slope=fit.slope,
                         intercept=fit.intercept, r=fit.rvalue,
                         pvalue=fit.pvalue))
    return pd.DataFrame(rows, columns=[
        'parameter', 'slope', 'intercept', 'r', 'pvalue'])


def representative_episodes(table, controller, metric='mape'):
    """Episode ids of the worst, median and best case of ``controller``."""
    subset = table[table['controller'] == controller].sort_values(
        [metric, 'episode_id'], kind='mergesort')
    if subset.empty:
        raise DegenerateSampleError('no episodes of %r' % (controller,))
    ids = subset['episode_id'].tolist()
    return dict(worst=ids[-1], median=ids[(len(ids) - 1) // 2], best=ids[0])


def policy_map(weights, o3_values=None, o4_fixed=None, grid=None):
    """Infusion probability over an (o1, o2) grid for each o3 slice.

    Rows run over o3 slices, then o1, then o2.
    """
    grid = grid or PolicyMapGrid()
    o3_values = tuple(grid.o3_values if o3_values is None else o3_values)
    o4 = grid.o4 if o4_fixed is None else o4_fixed
    o1 = np.linspace(grid.o1_min, grid.o1_max, grid.o1_points)
    o2 = np.linspace(grid.o2_min, grid.o2_max, grid.o2_points)
    g3, g1, g2 = np.meshgrid(np.asarray(o3_values, dtype=float), o1, o2,
                             indexing='ij')
    obs = np.column_stack([g1.ravel(), g2.ravel(), g3.ravel(),
                           np.full(g1.size, o4)])
    p_infuse = policy_forward(weights, obs)[:, 1]
    return pd.DataFrame(dict(o1=obs[:, 0], o2=obs[:, 1], o3=obs[:, 2],
                             p_infuse=p_infuse),
                        columns=['o1', 'o2', 'o3', 'p_infuse'])


def trajectory_frame(log):
    """Per-step table of an episode, for trajectory plots."""
    steps = np.arange(log.n_steps)
    frame = pd.DataFrame(dict(
        step=steps, t_seconds=steps * log.delta_t, y_star=log.targets,
        y=log.y, y_tilde=log.y_tilde, action=log.actions,
        x1=log.states[:, 0], x2=log.states[:, 1], x3=log.states[:, 2],
        xe=log.effect_site, o1=log.observations[:, 0],
        o2=log.observations[:, 1], o3=log.observations[:, 2],
        o4=log.observations[:, 3]))
    return frame
