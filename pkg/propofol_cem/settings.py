"""Workbench configuration from a PasteDeploy-style INI file.

Each concern reads one section of the file::

    [environment]   simulation constants (:class:`EnvironmentSettings`)
    [patients]      generic values and sampling ranges (:class:`PatientRanges`)
    [agent]         action mode and checkpoint used by default
    [trainer]       cross-entropy training (:class:`TrainConfig`)
    [pid]           PID baseline (:class:`PidParams`)
    [evaluation]    test campaigns and policy maps

A missing section or key keeps its default.  Any value that does not
parse or validate raises :exc:`propofol_cem.exceptions.ParameterError`.
"""

import datetime
import json
import logging
import math
import os

from dataclasses import dataclass, field, fields, replace

import plaster

from pyramid.settings import asbool, aslist

from .agent import ActionMode
from .evaluation import EvaluationSettings, PolicyMapGrid
from .exceptions import ParameterError
from .pid import PidParams
from .pkpd_env import (
    PARAMETER_NAMES, EnvironmentSettings, ParameterRange, PatientRanges)
from .trainer import TrainConfig

logger = logging.getLogger(__name__)

__all__ = [
    'AgentSettings', 'RunManifest', 'SECTIONS', 'WorkbenchConfig',
    'apply_overrides', 'load_config', 'load_settings', 'read_manifest']

SECTIONS = ('environment', 'patients', 'agent', 'trainer', 'pid',
            'evaluation')


@dataclass(frozen=True)
class AgentSettings(object):
    mode: str = ActionMode.CONTINUOUS.value
    checkpoint: str = None

    def __post_init__(self):
        try:
            ActionMode(self.mode)
        except ValueError:
            raise ParameterError('unknown action mode %r' % (self.mode,))


def _parse(section, key, value, kind):
    if value is None or not isinstance(value, str):
        return value
    text = value.strip()
    try:
        if text.lower() == 'none' or (not text and kind is not str):
            return None
        if kind is bool:
            return asbool(text)
        if kind is tuple:
            return tuple(aslist(text))
        if kind is int:
            return int(text)
        if kind is float:
            number = float(text)
            if math.isnan(number):
                raise ValueError('nan')
            return number
        return text
    except ValueError:
        raise ParameterError(
            '[%s] %s = %r is not a valid %s'
            % (section, key, value, kind.__name__))


def _build(cls, section, values, skip=()):
    """Instantiate the dataclass ``cls`` from string ``values``."""
    kinds = {f.name: f.type for f in fields(cls) if f.name not in skip}
    unknown = set(values) - set(kinds)
    if unknown:
        raise ParameterError('unknown setting(s) in [%s]: %s'
                             % (section, ', '.join(sorted(unknown))))
    kwargs = {key: _parse(section, key, value, kinds[key])
              for key, value in values.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        if isinstance(e, ParameterError):
            raise
        raise ParameterError('invalid [%s] settings: %s' % (section, e))


def _split_dotted(section, values):
    groups = {}
    for key, value in values.items():
        head, dot, tail = key.partition('.')
        if not dot:
            raise ParameterError(
                'setting %r in [%s] must be dotted, e.g. %s.min'
                % (key, section, key))
        groups.setdefault(head, {})[tail] = value
    return groups


def _patient_ranges(values):
    groups = _split_dotted('patients', values)
    defaults = PatientRanges()
    kwargs = {}
    for name in PARAMETER_NAMES:
        current = getattr(defaults, name)
        given = groups.pop(name, {})
        merged = dict(generic=current.generic, min=current.min,
                      max=current.max)
        merged.update(given)
        kwargs[name] = _build(ParameterRange, 'patients', merged)
    sex = groups.pop('sex', {})
    unknown = set(sex) - {'generic', 'randomize'}
    if groups or unknown:
        raise ParameterError('unknown setting(s) in [patients]: %s' % (
            ', '.join(sorted(list(groups) + ['sex.' + k for k in unknown]))))
    if 'generic' in sex:
        kwargs['sex'] = sex['generic'].strip()
    if 'randomize' in sex:
        kwargs['randomize_sex'] = _parse(
            'patients', 'sex.randomize', sex['randomize'], bool)
    ranges = PatientRanges(**kwargs)
    for name in PARAMETER_NAMES:
        r = getattr(ranges, name)
        if not r.contains(r.generic):
            logger.warning('generic %s %r lies outside [%r, %r]',
                           name, r.generic, r.min, r.max)
    return ranges


def _numbers(section, key, value):
    if not isinstance(value, str):
        return tuple(value)
    return tuple(_parse(section, key, v, float) for v in aslist(value))


def _evaluation(values):
    grid_values = {}
    plain = {}
    for key, value in values.items():
        if key.startswith('grid.'):
            grid_values[key[len('grid.'):]] = value
        else:
            plain[key] = value
    if 'o3_values' in grid_values:
        grid_values['o3_values'] = _numbers(
            'evaluation', 'grid.o3_values', grid_values['o3_values'])
    grid = _build(PolicyMapGrid, 'evaluation', grid_values)
    evaluation = _build(EvaluationSettings, 'evaluation', plain,
                        skip=('grid',))
    return replace(evaluation, grid=grid)


def _pid(values):
    clamp = values.get('integral_clamp')
    if clamp is not None and _parse('pid', 'integral_clamp', clamp,
                                    tuple) is not None:
        clamp = _numbers('pid', 'integral_clamp', clamp)
        if len(clamp) != 2:
            raise ParameterError(
                '[pid] integral_clamp needs two numbers, got %r'
                % (values['integral_clamp'],))
        values = dict(values, integral_clamp=clamp)
    return _build(PidParams, 'pid', values)


def _format(value):
    if value is None:
        return 'none'
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, (tuple, list)):
        return ' '.join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, ActionMode):
        return value.value
    return str(value)


def _flatten(obj, prefix=''):
    items = {}
    for f in fields(obj):
        value = getattr(obj, f.name)
        if hasattr(value, '__dataclass_fields__'):
            items.update(_flatten(value, prefix + f.name + '.'))
        else:
            items[prefix + f.name] = _format(value)
    return items


@dataclass(frozen=True)
class WorkbenchConfig(object):
    environment: EnvironmentSettings = EnvironmentSettings()
    patients: PatientRanges = PatientRanges()
    agent: AgentSettings = AgentSettings()
    trainer: TrainConfig = TrainConfig()
    pid: PidParams = field(default_factory=PidParams)
    evaluation: EvaluationSettings = EvaluationSettings()

    @classmethod
    def from_settings(cls, settings):
        """Build from ``{section: {key: string value}}``."""
        settings = dict(settings or {})
        unknown = set(settings) - set(SECTIONS)
        if unknown:
            raise ParameterError(
                'unknown section(s): %s' % ', '.join(sorted(unknown)))

        def section(name):
            return dict(settings.get(name) or {})

        return cls(
            environment=_build(
                EnvironmentSettings, 'environment', section('environment')),
            patients=_patient_ranges(section('patients')),
            agent=_build(AgentSettings, 'agent', section('agent')),
            trainer=_build(TrainConfig, 'trainer', section('trainer')),
            pid=_pid(section('pid')),
            evaluation=_evaluation(section('evaluation')))

    def as_settings(self):
        """Snapshot as ``{section: {key: string}}``; feeding it back to
        :meth:`from_settings` rebuilds an equal configuration."""
        snapshot = {name: _flatten(getattr(self, name))
                    for name in SECTIONS}
        patients = {}
        for key, value in snapshot['patients'].items():
            if key == 'sex':
                key = 'sex.generic'
            elif key == 'randomize_sex':
                key = 'sex.randomize'
            patients[key] = value
        snapshot['patients'] = patients
        return snapshot


def load_settings(config_uri):
    """Read the workbench sections of ``config_uri`` as raw strings."""
    settings = {}
    for name in SECTIONS:
        try:
            values = plaster.get_settings(config_uri, name)
        except plaster.PlasterError as e:
            raise ParameterError(
                'cannot read %s: %s' % (config_uri, e))
        settings[name] = dict(values)
    logger.debug('settings from %s: %r', config_uri, settings)
    return settings


def apply_overrides(settings, overrides):
    """Merge ``section.key=value`` overrides into raw ``settings``.

    The key may itself be dotted, as in ``patients.age.max=80``.
    """
    merged = {name: dict(values) for name, values in settings.items()}
    for item in overrides or ():
        target, eq, value = item.partition('=')
        section, dot, key = target.strip().partition('.')
        if not (eq and dot and key):
            raise ParameterError(
                'override %r is not of the form section.key=value' % item)
        if section not in SECTIONS:
            raise ParameterError('unknown section %r in override %r'
                                 % (section, item))
        merged.setdefault(section, {})[key] = value.strip()
    return merged


def load_config(config_uri=None, overrides=()):
    """Defaults, then ``config_uri`` if given, then ``overrides``."""
    settings = load_settings(config_uri) if config_uri else {}
    return WorkbenchConfig.from_settings(apply_overrides(settings, overrides))


@dataclass
class RunManifest(object):
    """Everything needed to repeat a run: command, configuration, seed."""

    command: str
    config: dict
    seed: int
    version: str
    checkpoint: str = None
    out: str = None
    started: str = None
    finished: str = None
    options: dict = field(default_factory=dict)

    @staticmethod
    def now():
        return datetime.datetime.now(datetime.timezone.utc).isoformat()

    def write(self, path):
        tmp_path = '%s.tmp' % path
        with open(tmp_path, 'w') as f:
            json.dump(self.__dict__, f, indent=1, sort_keys=True)
            f.write('\n')
        os.replace(tmp_path, path)
        return path

    def workbench_config(self):
        return WorkbenchConfig.from_settings(self.config)


def read_manifest(path):
    try:
        with open(path) as f:
            document = json.load(f)
        return RunManifest(**document)
    except (OSError, ValueError, TypeError) as e:
        raise ParameterError('cannot read manifest %s: %s' % (path, e))
