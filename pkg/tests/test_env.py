import csv

import numpy as np
import pytest

from backflow.dynamics import KET0, KET1, PropagationConfig, ReservoirParams, propagate_pair
from backflow.env import BackflowEnv, EnvConfig, rollout, step_reward
from backflow.exceptions import EpisodeFinishedError
from backflow.measure import n_total


class LinearPolicy:
    """Deterministic affine feedback ``a = w . obs + b`` used as a random test policy."""

    def __init__(self, seed):
        rng = np.random.default_rng(seed)
        self.w = rng.normal(scale=1.0, size=5)
        self.b = rng.normal(scale=0.5)

    def __call__(self, obs):
        return float(self.w @ obs + self.b)


def test_reset_observation():
    env = BackflowEnv(EnvConfig(random_initial_amplitude=False, initial_amplitude=1.5))
    obs = env.reset()
    assert np.array_equal(obs, [0.0, 1.0, 0.0, 0.0, 1.5])


def test_reset_random_amplitude_is_seeded():
    a = BackflowEnv(EnvConfig(), seed=3).reset()
    b = BackflowEnv(EnvConfig(), seed=3).reset()
    assert a[4] == b[4]
    assert -5.0 <= a[4] <= 5.0
    c = BackflowEnv(EnvConfig()).reset(seed=4)
    assert c[4] != a[4]


def test_step_reward_examples():
    assert step_reward(0.50, 0.52, 0.1) == pytest.approx(0.2)
    assert step_reward(0.50, 0.48, 0.1) == 0.0
    assert step_reward(0.50, 0.52, 0.1, increment=1.0, omega=2.0, alpha=0.1,
                       beta=0.01) == pytest.approx(0.2 - 0.1 - 0.04)


def test_step_clips_the_field():
    env = BackflowEnv(EnvConfig(random_initial_amplitude=False, initial_amplitude=4.0))
    env.reset()
    obs, _, _ = env.step(2.0)
    assert obs[4] == 5.0
    obs, _, _ = env.step(-20.0)
    assert obs[4] == -5.0


def test_constant_field_episode_is_bit_exact_with_propagation():
    params, prop = ReservoirParams(), PropagationConfig()
    env = BackflowEnv(EnvConfig(params, prop, random_initial_amplitude=False,
                                initial_amplitude=1.25))
    transitions, n_tot = rollout(lambda obs: 0.0, env)
    rec = propagate_pair(KET1, KET0, np.full(70, 1.25), params, prop)
    assert len(transitions) == 70
    assert np.array_equal(np.array(env.distances), rec.distances)
    assert n_tot == rec.n_total


def test_reward_sum_equals_n_total():
    env = BackflowEnv(EnvConfig(), seed=0)
    for seed in range(20):
        transitions, n_tot = rollout(LinearPolicy(seed), env, seed=seed)
        total = sum(t.reward for t in transitions) * env.dt
        assert abs(total - n_tot) < 1e-12
        assert n_tot == n_total(env.distances, env.dt)


def test_episode_length_and_done_flag():
    env = BackflowEnv(EnvConfig(), seed=1)
    transitions, _ = rollout(LinearPolicy(1), env)
    assert [t.done for t in transitions] == [False] * 69 + [True]
    with pytest.raises(EpisodeFinishedError):
        env.step(0.0)
    with pytest.raises(EpisodeFinishedError):
        BackflowEnv(EnvConfig()).step(0.0)


def test_observations_are_finite_and_bounded():
    env = BackflowEnv(EnvConfig(), seed=2)
    for seed in range(5):
        transitions, _ = rollout(LinearPolicy(seed + 50), env)
        for t in transitions:
            obs = t.next_state
            assert np.all(np.isfinite(obs))
            assert 0.0 <= obs[1] <= 1.0 + 1e-9
            assert -5.0 <= obs[4] <= 5.0
            assert t.reward >= 0.0


def test_penalties_lower_rewards():
    free = BackflowEnv(EnvConfig(random_initial_amplitude=False))
    penalized = BackflowEnv(EnvConfig(random_initial_amplitude=False, alpha=0.1, beta=0.01))
    a, _ = rollout(LinearPolicy(3), free)
    b, _ = rollout(LinearPolicy(3), penalized)
    assert all(y.reward <= x.reward for x, y in zip(a, b))


def test_rollouts_are_deterministic():
    a, na = rollout(LinearPolicy(4), BackflowEnv(EnvConfig(), seed=9))
    b, nb = rollout(LinearPolicy(4), BackflowEnv(EnvConfig(), seed=9))
    assert na == nb
    assert all(np.array_equal(x.next_state, y.next_state) for x, y in zip(a, b))


def test_environments_do_not_share_state():
    config = EnvConfig(random_initial_amplitude=False)
    first, second = BackflowEnv(config), BackflowEnv(config)
    first.reset()
    second.reset()
    first.step(3.0)
    _, n_second = rollout(lambda obs: 0.0, second)
    _, n_fresh = rollout(lambda obs: 0.0, BackflowEnv(config))
    assert n_second == n_fresh


def test_pulse_and_episode_csv(tmp_path):
    env = BackflowEnv(EnvConfig(), seed=5)
    transitions, n_tot = rollout(LinearPolicy(5), env)
    pulse = env.pulse()
    assert pulse.n_bins == 70
    rec = propagate_pair(KET1, KET0, pulse, ReservoirParams(), PropagationConfig())
    assert np.array_equal(rec.distances[1:], np.array(env.distances[1:]))
    path = tmp_path / "episode.csv"
    env.write_episode_csv(path)
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["k", "t", "Omega", "D", "Ddot", "gamma", "reward"]
    assert len(rows) == 71
    assert float(rows[3]["reward"]) == transitions[3].reward
    assert sum(float(r["reward"]) for r in rows) * env.dt == pytest.approx(n_tot, abs=1e-12)


def test_env_config_validation():
    with pytest.raises(ValueError):
        EnvConfig(alpha=-1.0)
    with pytest.raises(ValueError):
        EnvConfig(initial_amplitude=7.0)
    env = BackflowEnv(EnvConfig())
    env.reset()
    with pytest.raises(ValueError):
        env.step(float("nan"))
