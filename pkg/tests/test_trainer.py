import math
import os

from fractions import Fraction

import numpy as np

from . import (
    DummyController, TempDirMixin, TestCase, make_log, slow, small_config)


def _patient(age=None, **kw):
    from dataclasses import replace
    from propofol_cem.pkpd_env import DEFAULT_RANGES
    patient = DEFAULT_RANGES.generic_patient()
    if age is not None:
        kw['demographics'] = replace(patient.demographics, age=age)
    return replace(patient, **kw)


def _weights(seed=0):
    from propofol_cem.agent import PolicyWeights
    return PolicyWeights.initialize(np.random.default_rng(seed))


class TestTrainConfig(TestCase):

    def _makeOne(self, **kw):
        from propofol_cem.trainer import TrainConfig
        return TrainConfig(**kw)

    def test_defaults(self):
        inst = self._makeOne()
        self.assertEqual(inst.batch_size, 16)
        self.assertEqual(inst.elite_percentile, 70.0)
        self.assertEqual(inst.max_batches, 4000)
        self.assertIsNone(inst.min_mean_reward)
        self.assertEqual(inst.episode_steps, 2000)
        self.assertEqual(inst.elite_count, 5)

    def test_invalid(self):
        from propofol_cem.exceptions import ParameterError
        for kw in (dict(elite_percentile=0.0), dict(elite_percentile=100.0),
                   dict(batch_size=0), dict(episode_steps=1999),
                   dict(target_min=0.0), dict(target_max=1.0),
                   dict(learning_rate=-0.1), dict(master_seed=-1)):
            self.assertRaises(ParameterError, self._makeOne, **kw)


class TestEpisodeReward(TestCase):

    def _callFUT(self, targets, y):
        from propofol_cem.trainer import episode_reward
        return episode_reward(targets, y)

    def test_perfect_tracking(self):
        self.assertEqual(self._callFUT([0.5, 0.6], [0.5, 0.6]), 0.0)

    def test_negative(self):
        self.assertAlmostEqual(
            self._callFUT([0.5, 0.5], [0.4, 0.7]), -0.3, 12)
        rng = np.random.default_rng(0)
        for _ in range(100):
            targets = rng.random(30)
            y = targets.copy()
            y[rng.integers(30)] += 1e-6
            self.assertLess(self._callFUT(targets, y), 0.0)


class TestGenerateEpisodeTargets(TestCase):

    def _callFUT(self, seed, config):
        from propofol_cem.trainer import generate_episode_targets
        return generate_episode_targets(np.random.default_rng(seed), config)

    def test_piecewise_constant(self):
        from propofol_cem.trainer import TrainConfig
        targets = self._callFUT(3, TrainConfig())
        self.assertEqual(targets.shape, (2000,))
        levels = targets.reshape(4, 500)
        self.assertTrue(np.all(levels == levels[:, :1]))
        self.assertTrue(np.all((targets >= 0.25) & (targets <= 0.75)))
        self.assertEqual(len(np.unique(targets)), 4)

    def test_level_moments(self):
        from propofol_cem.trainer import TrainConfig
        levels = self._callFUT(
            4, TrainConfig(episode_steps=10000, targets_per_episode=10000))
        self.assertEqual(levels.shape, (10000,))
        self.assertAlmostEqual(levels.mean(), 0.5, delta=0.01)
        self.assertTrue(np.all((levels >= 0.25) & (levels <= 0.75)))


class TestSelectElite(TestCase):

    def _callFUT(self, rewards, p):
        from propofol_cem.trainer import select_elite
        return select_elite(rewards, p)

    def test_examples(self):
        from propofol_cem.trainer import elite_count
        self.assertEqual(elite_count(16, 70), 5)
        self.assertEqual(elite_count(10, 70), 3)
        self.assertEqual(elite_count(2, 99), 1)
        rewards = [-3.0, -1.0, -2.0, -1.0]
        self.assertEqual(self._callFUT(rewards, 50).tolist(), [1, 3])
        self.assertEqual(self._callFUT(rewards, 75).tolist(), [1])

    def test_sort_oracle(self):
        rng = np.random.default_rng(12)
        for _ in range(1000):
            n = int(rng.integers(1, 41))
            p = int(rng.choice([10, 25, 30, 50, 70, 75, 90]))
            rewards = rng.integers(-5, 1, n).astype(float)
            count = max(1, math.ceil(Fraction((100 - p) * n, 100)))
            ranked = sorted(range(n), key=lambda i: (-rewards[i], i))
            expected = sorted(ranked[:count])
            self.assertEqual(self._callFUT(rewards, p).tolist(), expected)

    def test_empty(self):
        self.assertRaises(ValueError, self._callFUT, [], 70)


def _random_logs(rng, weights, n_logs=2, steps=10):
    from propofol_cem.agent import policy_activations
    logs = []
    for _ in range(n_logs):
        while True:
            obs = rng.normal(0.0, 0.5, (steps, 4))
            pre = policy_activations(weights, obs)[0]
            # keep finite differences away from ReLU kinks
            if np.abs(pre).min() > 1e-4:
                break
        actions = rng.integers(0, 2, steps).astype(float)
        if rng.random() < 0.5:
            actions = rng.random(steps)
        logs.append(make_log(np.full(steps, 0.5), np.full(steps, 0.5),
                             actions=actions, observations=obs))
    return logs


class TestCrossEntropyLoss(TestCase):

    def _callFUT(self, logs, weights):
        from propofol_cem.trainer import cross_entropy_loss
        return cross_entropy_loss(logs, weights)

    def test_uniform_policy(self):
        from propofol_cem.agent import PolicyWeights
        rng = np.random.default_rng(0)
        logs = _random_logs(rng, _weights(), n_logs=2, steps=25)
        loss, gradient = self._callFUT(logs, PolicyWeights.zeros())
        self.assertAlmostEqual(loss, 50 * math.log(2.0), 10)
        self.assertEqual(gradient.parameter_count, 898)

    def test_no_elite(self):
        self.assertRaises(ValueError, self._callFUT, [], _weights())

    def test_gradient_matches_finite_differences(self):
        from propofol_cem.agent import PolicyWeights
        from propofol_cem.trainer import elite_loss
        rng = np.random.default_rng(21)
        h = 1e-5
        for instance in range(100):
            weights = _weights(instance)
            logs = _random_logs(rng, weights)
            _, gradient = self._callFUT(logs, weights)
            flat = weights.flatten()
            picks = rng.choice(898, 30, replace=False)
            analytic = gradient.flatten()[picks]
            numeric = np.empty(len(picks))
            for j, index in enumerate(picks):
                up, down = flat.copy(), flat.copy()
                up[index] += h
                down[index] -= h
                numeric[j] = (
                    elite_loss(logs, PolicyWeights.from_flat(up))
                    - elite_loss(logs, PolicyWeights.from_flat(down))
                ) / (2 * h)
            scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric),
                        1e-3)
            error = np.linalg.norm(analytic - numeric) / scale
            self.assertLess(error, 1e-4, 'instance %d' % instance)

    def test_clamped_probabilities_have_no_gradient(self):
        from propofol_cem.agent import PolicyWeights
        zeros = PolicyWeights.zeros()
        weights = PolicyWeights(zeros.hidden_weights, zeros.hidden_bias,
                                zeros.output_weights, np.array([0.0, 40.0]))
        log = make_log([0.5] * 3, [0.5] * 3, actions=[0.0, 0.0, 0.0])
        loss, gradient = self._callFUT([log], weights)
        self.assertAlmostEqual(loss, -3 * math.log(1e-7), 6)
        np.testing.assert_array_equal(gradient.flatten(), np.zeros(898))


class TestSgdStep(TestCase):

    def _callFUT(self, weights, gradient, lr):
        from propofol_cem.trainer import sgd_step
        return sgd_step(weights, gradient, lr)

    def test_lowers_loss(self):
        from propofol_cem.trainer import cross_entropy_loss, elite_loss
        rng = np.random.default_rng(4)
        weights = _weights()
        logs = _random_logs(rng, weights, n_logs=3, steps=20)
        before, gradient = cross_entropy_loss(logs, weights)
        after = elite_loss(logs, self._callFUT(weights, gradient, 1e-3))
        self.assertLess(after, before)

    def test_zero_rate(self):
        weights = _weights()
        np.testing.assert_array_equal(
            self._callFUT(weights, weights, 0.0).flatten(),
            weights.flatten())

    def test_non_finite_gradient(self):
        from propofol_cem.agent import PolicyWeights
        from propofol_cem.exceptions import NumericalError
        gradient = PolicyWeights.from_flat(np.full(898, np.inf))
        self.assertRaises(NumericalError, self._callFUT, _weights(),
                          gradient, 0.01)

    def test_negative_rate(self):
        from propofol_cem.exceptions import ParameterError
        self.assertRaises(ParameterError, self._callFUT, _weights(),
                          _weights(), -0.01)


class TestSimulate(TestCase):

    def _callFUT(self, patients, targets, controller, noise=None,
                 uniforms=None, settings=None, initial_states=None):
        from propofol_cem.pkpd_env import EnvironmentSettings
        from propofol_cem.trainer import generic_model_for, simulate
        settings = settings or EnvironmentSettings()
        targets = np.atleast_2d(targets)
        if noise is None:
            noise = np.zeros(targets.shape)
        if uniforms is None:
            uniforms = np.full(targets.shape, 0.5)
        return simulate(patients, targets, controller, settings, noise,
                        uniforms, generic_model_for(settings),
                        initial_states)

    def test_no_drug(self):
        controller = DummyController(0.0)
        noise = np.random.default_rng(0).normal(0.0, 0.02, (1, 30))
        log, = self._callFUT([_patient()], np.full(30, 0.5), controller,
                             noise=noise)
        np.testing.assert_array_equal(log.y, np.zeros(30))
        self.assertGreaterEqual(log.y_tilde.min(), 0.0)
        np.testing.assert_array_equal(log.y_tilde,
                                      np.clip(noise[0], 0.0, 1.0))
        self.assertAlmostEqual(log.reward, -15.0, 12)
        self.assertTrue(log.is_complete(30))
        self.assertEqual(controller.n, 1)
        self.assertEqual(len(controller.calls), 30)

    def test_full_infusion(self):
        log, = self._callFUT([_patient()], np.full(20, 0.5),
                             DummyController(1.0))
        np.testing.assert_array_equal(log.infused, np.full(20, 8.35))
        self.assertEqual(log.states[0].tolist(), [0.0, 0.0, 0.0])
        self.assertEqual(log.states[1, 0], 8.35)
        self.assertEqual(log.effect_site[1], 0.0)
        self.assertGreater(log.effect_site[2], 0.0)
        self.assertTrue(np.all(np.diff(log.y[2:]) > 0))

    def test_lanes_independent(self):
        patients = [_patient(), _patient(age=70.0, c50=4.0)]
        rng = np.random.default_rng(1)
        targets = rng.uniform(0.25, 0.75, (2, 25))
        noise = rng.normal(0.0, 0.02, (2, 25))
        actions = np.array([0.3, 0.8])
        both = self._callFUT(patients, targets, DummyController(actions),
                             noise=noise)
        for lane in range(2):
            alone, = self._callFUT(
                [patients[lane]], targets[lane],
                DummyController(actions[lane]), noise=noise[lane:lane + 1])
            np.testing.assert_allclose(both[lane].y, alone.y, atol=1e-12)
            np.testing.assert_allclose(both[lane].observations,
                                       alone.observations, atol=1e-12)

    def test_controller_sees_draws(self):
        controller = DummyController(0.0)
        uniforms = np.random.default_rng(2).random((1, 5))
        self._callFUT([_patient()], np.full(5, 0.4), controller,
                      uniforms=uniforms)
        for k, call in enumerate(controller.calls):
            obs, _, target, draws = call
            self.assertEqual(obs.shape, (1, 4))
            self.assertEqual(target[0], 0.4)
            self.assertEqual(draws[0], uniforms[0, k])

    def test_non_finite_action(self):
        from propofol_cem.exceptions import NumericalError
        self.assertRaises(NumericalError, self._callFUT, [_patient()],
                          np.full(5, 0.4), DummyController(np.nan))


class TestRunEpisode(TestCase):

    def _callFUT(self, seed, mode='stochastic'):
        from propofol_cem.trainer import run_episode
        return run_episode(_patient(), np.full(50, 0.5), _weights(), mode,
                           np.random.default_rng(seed))

    def test_deterministic(self):
        first, second = self._callFUT(7), self._callFUT(7)
        np.testing.assert_array_equal(first.actions, second.actions)
        np.testing.assert_array_equal(first.y_tilde, second.y_tilde)
        self.assertEqual(first.controller, 'stochastic')

    def test_modes(self):
        self.assertTrue(set(np.unique(self._callFUT(1).actions))
                        <= {0.0, 1.0})
        continuous = self._callFUT(1, 'continuous').actions
        self.assertTrue(np.all((continuous > 0) & (continuous < 1)))


class TestRunBatch(TestCase):

    def _callFUT(self, weights, config, batch_index):
        from propofol_cem.trainer import run_batch
        return run_batch(weights, config, batch_index)

    def test_shared_patient_and_targets(self):
        config = small_config()
        batch = self._callFUT(_weights(), config, 0)
        self.assertEqual(len(batch.logs), 4)
        self.assertEqual(len(batch.elite), config.elite_count)
        first = batch.logs[0]
        for log in batch.logs[1:]:
            self.assertIs(log.patient, first.patient)
            np.testing.assert_array_equal(log.targets, first.targets)
        self.assertFalse(np.array_equal(batch.logs[0].y_tilde,
                                        batch.logs[1].y_tilde))
        self.assertAlmostEqual(batch.mean_reward, batch.rewards.mean(), 12)

    def test_deterministic(self):
        config = small_config()
        first = self._callFUT(_weights(), config, 3)
        second = self._callFUT(_weights(), config, 3)
        np.testing.assert_array_equal(first.rewards, second.rewards)
        np.testing.assert_array_equal(first.elite, second.elite)
        other = self._callFUT(_weights(), config, 4)
        self.assertFalse(np.array_equal(first.rewards, other.rewards))


class TestTrain(TempDirMixin, TestCase):

    def _callFUT(self, config, **kw):
        from propofol_cem.trainer import train
        return train(config, **kw)

    def test_trace_and_checkpoints(self):
        config = small_config(max_batches=3, checkpoint_every=2)
        weights, trace = self._callFUT(config, checkpoint_dir=self.tmpdir)
        self.assertEqual([row.batch_index for row in trace], [0, 1, 2])
        self.assertTrue(all(row.mean_reward <= 0 for row in trace))
        self.assertTrue(all(np.isfinite(row.loss) for row in trace))
        self.assertEqual(sorted(os.listdir(self.tmpdir)), [
            'checkpoint-00002.json', 'checkpoint-00003.json',
            'policy.json'])
        self.assertEqual(weights.parameter_count, 898)

    def test_bit_deterministic(self):
        from propofol_cem.agent import load_checkpoint
        config = small_config()
        for name in ('a', 'b'):
            os.mkdir(self.path(name))
            self._callFUT(config, checkpoint_dir=self.path(name))
        with open(self.path('a', 'policy.json'), 'rb') as f:
            first = f.read()
        with open(self.path('b', 'policy.json'), 'rb') as f:
            second = f.read()
        self.assertEqual(first, second)
        _, metadata = load_checkpoint(self.path('a', 'policy.json'))
        self.assertEqual(metadata['batches'], 2)

    def test_seed_changes_result(self):
        first, _ = self._callFUT(small_config(master_seed=1))
        second, _ = self._callFUT(small_config(master_seed=2))
        self.assertFalse(np.array_equal(first.flatten(), second.flatten()))

    def test_resume_from_checkpoint(self):
        from propofol_cem.agent import load_checkpoint
        config = small_config(max_batches=3)
        full, trace = self._callFUT(config, checkpoint_dir=self.tmpdir)
        weights, metadata = load_checkpoint(
            self.path('checkpoint-00001.json'))
        resumed, rest = self._callFUT(
            config, weights=weights, start_batch=metadata['batches'])
        np.testing.assert_array_equal(resumed.flatten(), full.flatten())
        self.assertEqual(rest, trace[1:])

    def test_stops_at_reward_threshold(self):
        _, trace = self._callFUT(small_config(max_batches=10,
                                              min_mean_reward=-1e9))
        self.assertEqual(len(trace), 1)

    def test_aborts_on_numeric_failure(self):
        from propofol_cem.agent import PolicyWeights
        from propofol_cem.exceptions import TrainingAborted
        weights = PolicyWeights.from_flat(np.full(898, np.nan))
        try:
            self._callFUT(small_config(), weights=weights)
        except TrainingAborted as e:
            self.assertIsNone(e.checkpoint)
            self.assertEqual(e.batch, 0)
        else:  # pragma: no cover
            self.fail('TrainingAborted not raised')

    def test_write_trace(self):
        import pandas as pd
        from propofol_cem.trainer import write_trace
        _, trace = self._callFUT(small_config())
        path = write_trace(self.path('trace.csv'), trace)
        frame = pd.read_csv(path)
        self.assertEqual(list(frame.columns),
                         ['batch_index', 'mean_reward', 'loss'])
        self.assertEqual(len(frame), 2)

    @slow
    def test_learning_progress(self):
        from propofol_cem.trainer import TrainConfig
        _, trace = self._callFUT(TrainConfig(max_batches=500))
        rewards = np.array([row.mean_reward for row in trace])
        self.assertGreater(rewards[-50:].mean(), rewards[:50].mean())
