"""``propofol-cem`` command line: train, evaluate, simulate, policy-map.

Every command writes ``manifest.json`` into its output directory before
computing anything.  Exit status is 0 on success, 1 for invalid
configuration, arguments or checkpoints and 2 for runtime failures.
"""

import argparse
import hashlib
import json
import logging
import os
import sys

from dataclasses import replace

import numpy as np

from pyramid.paster import setup_logging
from pyramid.settings import aslist

from . import __version__
from .agent import load_checkpoint
from .evaluation import (
    CONTROLLERS, PID, build_controllers, campaign_episode,
    compare_controllers, make_controller, policy_map, representative_episodes,
    run_episodes, run_test_campaign, summarize, trajectory_frame)
from .exceptions import (
    CheckpointError, ConfigurationError, ParameterError, TrainingAborted,
    WorkbenchError)
from .pid import PidController
from .pkpd_env import FEMALE, MALE, PatientDemographics, PatientParams
from .settings import RunManifest, load_config, read_manifest
from .trainer import (
    SIMULATE_STREAM, generate_episode_targets, random_stream, run_episode,
    train, write_trace)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_FAILED = 2

MANIFEST_NAME = 'manifest.json'


class UsageError(ConfigurationError):
    """Bad command line arguments."""


class ArgumentParser(argparse.ArgumentParser):

    def error(self, message):
        raise UsageError('%s: %s' % (self.prog, message))


def config_digest(snapshot):
    text = json.dumps(snapshot, sort_keys=True, separators=(',', ':'))
    return hashlib.md5(text.encode('utf-8')).hexdigest()


def _prepare_out(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as e:
        raise ParameterError('cannot create output directory %s: %s'
                             % (path, e))
    if not os.access(path, os.W_OK):
        raise ParameterError('output directory %s is not writable' % path)
    return path


def start_run(command, config, seed, out, checkpoint=None, **options):
    """Write the run manifest and return it."""
    _prepare_out(out)
    snapshot = config.as_settings()
    manifest = RunManifest(
        command=command, config=snapshot, seed=seed, version=__version__,
        checkpoint=checkpoint, out=out, started=RunManifest.now(),
        options=dict(options, config_md5=config_digest(snapshot)))
    manifest.write(os.path.join(out, MANIFEST_NAME))
    logger.info('%s: manifest written to %s', command, out)
    return manifest


def finish_run(manifest):
    manifest.finished = RunManifest.now()
    manifest.write(os.path.join(manifest.out, MANIFEST_NAME))


def _load_weights(path):
    if not path:
        return None
    weights, metadata = load_checkpoint(path)
    logger.debug('loaded %s: %r', path, metadata)
    return weights, metadata


def cmd_train(args, config):
    weights = None
    start_batch = 0
    checkpoint = args.checkpoint
    seed = config.trainer.master_seed
    if args.manifest:
        manifest = read_manifest(args.manifest)
        config = manifest.workbench_config()
        seed = manifest.seed
        checkpoint = checkpoint or manifest.checkpoint
    elif args.seed is not None:
        seed = args.seed
    config = replace(config, trainer=replace(config.trainer,
                                             master_seed=seed))
    if checkpoint:
        weights, metadata = _load_weights(checkpoint)
        start_batch = int(metadata.get('batches', 0))

    manifest = start_run('train', config, seed, args.out,
                         checkpoint=checkpoint, start_batch=start_batch)
    try:
        weights, trace = train(
            config.trainer, config.environment, config.patients,
            weights=weights, checkpoint_dir=args.out,
            start_batch=start_batch)
    except TrainingAborted as e:
        logger.error('%s (last checkpoint: %s)', e, e.checkpoint)
        raise
    write_trace(os.path.join(args.out, 'trace.csv'), trace)
    finish_run(manifest)
    if trace:
        print('trained %d batches, final mean reward %.3f'
              % (len(trace), trace[-1].mean_reward))
    return EXIT_OK


def _modes(value):
    return tuple(aslist(value.replace(',', ' ')))


def cmd_evaluate(args, config):
    evaluation = config.evaluation
    seed = evaluation.seed if args.seed is None else args.seed
    n = args.n_episodes
    if n is None:
        n = evaluation.n_episodes
    modes = _modes(args.modes) if args.modes else evaluation.modes
    evaluation = replace(evaluation, seed=seed, n_episodes=n, modes=modes)
    config = replace(config, evaluation=evaluation)

    checkpoint = args.checkpoint or config.agent.checkpoint
    loaded = _load_weights(checkpoint)
    weights = loaded[0] if loaded else None
    if n < 1:
        raise ParameterError('--n-episodes must be at least 1')
    build_controllers(modes, weights, config.pid)

    manifest = start_run('evaluate', config, seed, args.out,
                         checkpoint=checkpoint,
                         trajectories=args.trajectories)
    table = run_test_campaign(
        weights, config.pid, n, modes, seed, config=config.trainer,
        settings=config.environment, ranges=config.patients,
        evaluation=evaluation)
    table.to_csv(os.path.join(args.out, 'metrics.csv'), index=False)
    summary = summarize(table)
    summary.to_csv(os.path.join(args.out, 'summary.csv'))
    if len(modes) > 1 and n > 1:
        compare_controllers(table).to_csv(
            os.path.join(args.out, 'comparisons.csv'), index=False)
    if args.trajectories:
        export_representatives(table, weights, config, seed, args.out)
    finish_run(manifest)
    print(summary[['mape', 'mpe']].to_string())
    return EXIT_OK


def export_representatives(table, weights, config, seed, out):
    """Trajectories of the worst, median and best episode by MAPE."""
    for name in table['controller'].unique():
        picks = representative_episodes(table, name)
        controller = make_controller(name, weights, config.pid)
        for label, episode_id in sorted(picks.items()):
            episode = campaign_episode(
                seed, episode_id, config.trainer, config.environment,
                config.patients)
            log = run_episodes([episode], controller, config.environment,
                               config.patients)[0]
            path = os.path.join(
                out, 'trajectory-%s-%s.csv' % (name, label))
            trajectory_frame(log).to_csv(path, index=False)


PATIENT_KEYS = ('age', 'height', 'weight', 'sex', 'ke0', 'gamma', 'c50')


def parse_patient(items, ranges, allow_out_of_range=False):
    """Generic patient of ``ranges`` with ``key=value`` changes."""
    values = ranges.generic_patient().as_dict()
    for item in items or ():
        key, eq, value = item.partition('=')
        key = key.strip()
        if not eq or key not in PATIENT_KEYS:
            raise ParameterError(
                'patient setting %r must be key=value with key in %s'
                % (item, ', '.join(PATIENT_KEYS)))
        if key == 'sex':
            values[key] = value.strip().lower()
            if values[key] not in (MALE, FEMALE):
                raise ParameterError('unknown sex %r' % (value,))
            continue
        try:
            values[key] = float(value)
        except ValueError:
            raise ParameterError('patient %s=%r is not a number'
                                 % (key, value))
    demographics = PatientDemographics(
        age=values['age'], height=values['height'], weight=values['weight'],
        sex=values['sex'])
    demographics.check_physical()
    patient = PatientParams(demographics, ke0=values['ke0'],
                            gamma=values['gamma'], c50=values['c50'])
    if not (allow_out_of_range or ranges.contains(patient)):
        raise ParameterError(
            'patient %r lies outside the configured ranges; pass '
            '--allow-out-of-range to simulate it anyway'
            % (patient.as_dict(),))
    return patient


def parse_targets(value, trainer):
    """Target schedule from comma separated values, held equally long."""
    try:
        levels = [float(v) for v in aslist(value.replace(',', ' '))]
    except ValueError:
        raise ParameterError('targets must be numbers, got %r' % (value,))
    if not levels:
        raise ParameterError('no targets given')
    if any(not 0 <= v < 1 for v in levels):
        raise ParameterError('targets must lie in [0, 1), got %r' % levels)
    steps = trainer.episode_steps
    if steps % len(levels):
        raise ParameterError(
            '%d targets do not divide an episode of %d steps'
            % (len(levels), steps))
    return np.repeat(levels, steps // len(levels))


def cmd_simulate(args, config):
    seed = config.evaluation.seed if args.seed is None else args.seed
    name = args.controller or config.agent.mode
    if name not in CONTROLLERS:
        raise UsageError('unknown controller %r' % (name,))
    patient = parse_patient(args.patient, config.patients,
                            args.allow_out_of_range)
    checkpoint = args.checkpoint or config.agent.checkpoint
    weights = None
    if name != PID:
        loaded = _load_weights(checkpoint)
        if loaded is None:
            raise CheckpointError(
                'controller %r needs a checkpoint' % (name,))
        weights = loaded[0]

    manifest = start_run('simulate', config, seed, args.out,
                         checkpoint=checkpoint, controller=name,
                         patient=patient.as_dict(), targets=args.targets,
                         allow_out_of_range=args.allow_out_of_range)
    rng = random_stream(seed, SIMULATE_STREAM)
    if args.targets:
        targets = parse_targets(args.targets, config.trainer)
    else:
        targets = generate_episode_targets(rng, config.trainer)
    controller = PidController(config.pid) if name == PID else None
    log = run_episode(patient, targets, weights, name, rng,
                      settings=config.environment, ranges=config.patients,
                      controller=controller)
    path = os.path.join(args.out, 'trajectory.csv')
    trajectory_frame(log).to_csv(path, index=False)
    finish_run(manifest)
    print('%s: %d steps, reward %.3f -> %s'
          % (name, log.n_steps, log.reward, path))
    return EXIT_OK


def cmd_policy_map(args, config):
    checkpoint = args.checkpoint or config.agent.checkpoint
    loaded = _load_weights(checkpoint)
    if loaded is None:
        raise CheckpointError('policy-map needs a checkpoint')
    grid = config.evaluation.grid
    manifest = start_run('policy-map', config, config.evaluation.seed,
                         args.out, checkpoint=checkpoint)
    frame = policy_map(loaded[0], grid=grid)
    path = os.path.join(args.out, 'policy_map.csv')
    frame.to_csv(path, index=False)
    finish_run(manifest)
    print('%d grid points -> %s' % (len(frame), path))
    return EXIT_OK


def build_parser():
    parser = ArgumentParser(
        prog='propofol-cem',
        description='Closed-loop propofol dosing workbench.')
    parser.add_argument('--version', action='version', version=__version__)
    common = ArgumentParser(add_help=False)
    common.add_argument('--config', metavar='INI',
                        help='workbench INI file (also configures logging)')
    common.add_argument('--set', action='append', default=[],
                        metavar='SECTION.KEY=VALUE',
                        help='override one setting; may be repeated')
    common.add_argument('--seed', type=int, help='master seed of the run')
    common.add_argument('--out', required=True, metavar='DIR',
                        help='output directory')
    common.add_argument('--checkpoint', metavar='JSON',
                        help='policy checkpoint')
    common.add_argument('-v', '--verbose', action='store_true',
                        help='debug logging for the workbench')
    commands = parser.add_subparsers(dest='command', metavar='COMMAND')
    commands.required = True

    train_parser = commands.add_parser(
        'train', parents=[common], help='cross-entropy training')
    train_parser.add_argument(
        '--manifest', metavar='JSON',
        help='repeat the run recorded in a manifest')
    train_parser.set_defaults(handler=cmd_train)

    evaluate = commands.add_parser(
        'evaluate', parents=[common], help='paired test campaign')
    evaluate.add_argument('--n-episodes', type=int, metavar='N')
    evaluate.add_argument(
        '--modes', help='controllers, from %s' % ', '.join(CONTROLLERS))
    evaluate.add_argument(
        '--trajectories', action='store_true',
        help='export worst, median and best trajectories')
    evaluate.set_defaults(handler=cmd_evaluate)

    simulate = commands.add_parser(
        'simulate', parents=[common], help='one logged episode')
    simulate.add_argument('--controller', choices=CONTROLLERS)
    simulate.add_argument('--patient', action='append', default=[],
                          metavar='KEY=VALUE',
                          help='patient parameter; may be repeated')
    simulate.add_argument('--targets', metavar='Y1,Y2,...',
                          help='target LoU levels held for equal spans')
    simulate.add_argument('--allow-out-of-range', action='store_true')
    simulate.set_defaults(handler=cmd_simulate)

    policy = commands.add_parser(
        'policy-map', parents=[common], help='policy output over a grid')
    policy.add_argument('--grid', action='append', default=[],
                        metavar='KEY=VALUE',
                        help='grid setting such as o1_points=51')
    policy.set_defaults(handler=cmd_policy_map)
    return parser


def configure_logging(args):
    if args.config:
        setup_logging(args.config)
    else:
        logging.basicConfig(
            level=logging.INFO,
            format='%(asctime)s %(levelname)-5.5s [%(name)s] %(message)s')
    if args.verbose:
        logging.getLogger('propofol_cem').setLevel(logging.DEBUG)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        configure_logging(args)
        overrides = list(args.set)
        overrides.extend('evaluation.grid.%s' % item
                         for item in getattr(args, 'grid', ()))
        config = load_config(args.config, overrides)
        return args.handler(args, config)
    except (ConfigurationError, CheckpointError) as e:
        sys.stderr.write('error: %s\n' % (e,))
        return EXIT_INVALID
    except (WorkbenchError, OSError) as e:
        logger.debug('run failed', exc_info=True)
        sys.stderr.write('failed: %s\n' % (e,))
        return EXIT_FAILED


if __name__ == '__main__':  # pragma: no cover
    sys.exit(main())
