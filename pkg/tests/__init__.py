import contextlib
import io
import os
import shutil
import tempfile
import unittest

from unittest import TestCase

import numpy as np

from pyramid.exceptions import ConfigurationError

__all__ = [
    'ConfigurationError', 'DummyController', 'TempDirMixin', 'TestCase',
    'captured_output', 'make_log', 'slow', 'small_config']

slow = unittest.skipUnless(
    os.environ.get('PROPOFOL_CEM_SLOW_TESTS') == '1',
    'set PROPOFOL_CEM_SLOW_TESTS=1 to run long checks')


class DummyController(object):
    """Emits a fixed action (scalar or one per lane) and records calls."""

    name = 'dummy'

    def __init__(self, action=0.0):
        self.action = action
        self.calls = []
        self.n = None

    def reset(self, n):
        self.n = n
        self.calls = []

    def act(self, obs, y_tilde, target, uniforms):
        self.calls.append((np.array(obs), np.array(y_tilde),
                           np.array(target), np.array(uniforms)))
        return np.broadcast_to(
            np.asarray(self.action, dtype=float), (self.n,)).copy()


def make_log(targets, y, actions=None, observations=None, dose=8.35,
             delta_t=5.0):
    from propofol_cem.trainer import EpisodeLog, episode_reward
    targets = np.asarray(targets, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(targets)
    if actions is None:
        actions = np.zeros(n)
    actions = np.asarray(actions, dtype=float)
    if observations is None:
        observations = np.zeros((n, 4))
    return EpisodeLog(
        targets=targets, y=y, y_tilde=y.copy(), observations=observations,
        actions=actions, infused=actions * dose, states=np.zeros((n, 3)),
        effect_site=np.zeros(n), patient=None,
        reward=episode_reward(targets, y), controller='dummy', dose=dose,
        delta_t=delta_t)


def small_config(**kw):
    from propofol_cem.trainer import TrainConfig
    settings = dict(batch_size=4, elite_percentile=50.0, max_batches=2,
                    episode_steps=40, targets_per_episode=2,
                    checkpoint_every=1, log_every=1)
    settings.update(kw)
    return TrainConfig(**settings)


class TempDirMixin(object):

    def setUp(self):
        self.tmpdir = tempfile.mkdtemp(prefix='propofol-cem-')

    def tearDown(self):
        shutil.rmtree(self.tmpdir, ignore_errors=True)

    def path(self, *parts):
        return os.path.join(self.tmpdir, *parts)


@contextlib.contextmanager
def captured_output():
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        yield out, err
