"""Episodic control environment: one step per control bin.

Observation ``(t_k / T, D_k, Ddot_{k-1}, gamma_k, Omega_k)``.  The action is
an increment of the field, ``Omega_{k+1} = clip(Omega_k + a)``, which is then
held for one bin.  The reward is the positive part of the trace-distance
slope, optionally penalized by the field increment and amplitude.
"""

import csv
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .dynamics import KET0, KET1, PropagationConfig, ReservoirParams, decay_rate, get_propagator
from .exceptions import EpisodeFinishedError
from .measure import n_total
from .pulse import DEFAULT_BOUNDS, Pulse, apply_increment
from .validation import as_generator, check_bounds, check_scalar

OBS_DIM = 5
ACT_DIM = 1


@dataclass(frozen=True)
class EnvConfig:
    """Physical model, field bounds and reward regularizers of an episode."""

    params: ReservoirParams = field(default_factory=ReservoirParams)
    propagation: PropagationConfig = field(default_factory=PropagationConfig)
    bounds: tuple = DEFAULT_BOUNDS
    action_bounds: tuple = DEFAULT_BOUNDS
    alpha: float = 0.0
    beta: float = 0.0
    random_initial_amplitude: bool = True
    initial_amplitude: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "bounds", check_bounds(self.bounds))
        object.__setattr__(self, "action_bounds", check_bounds(self.action_bounds))
        object.__setattr__(self, "alpha", check_scalar(self.alpha, "alpha", min_val=0.0))
        object.__setattr__(self, "beta", check_scalar(self.beta, "beta", min_val=0.0))
        lo, hi = self.bounds
        check_scalar(self.initial_amplitude, "initial_amplitude", min_val=lo, max_val=hi)

    @property
    def episode_length(self):
        return self.propagation.control_bins


def step_reward(d_prev, d_next, dt, increment=0.0, omega=0.0, alpha=0.0, beta=0.0):
    """``max(0, (d_next - d_prev) / dt) - alpha * increment**2 - beta * omega**2``."""
    return max(0.0, (d_next - d_prev) / dt) - alpha * increment * increment - beta * omega * omega


class Transition(NamedTuple):
    state: np.ndarray
    action: float
    reward: float
    next_state: np.ndarray
    done: bool


class BackflowEnv:
    """Gym-style environment around the pair propagation.

    ``step`` returns ``(observation, reward, done)``.  Randomness (only the
    initial amplitude) comes from the generator seeded in :meth:`reset`.
    """

    observation_dim = OBS_DIM
    action_dim = ACT_DIM

    def __init__(self, config=None, seed=None):
        self.config = config if config is not None else EnvConfig()
        self._prop = get_propagator(self.config.params, self.config.propagation)
        self._times = self.config.propagation.times
        self._gammas = decay_rate(self.config.params, self._times)
        self.rng = as_generator(seed)
        self._k = None

    @property
    def dt(self):
        return self.config.propagation.bin_width

    @property
    def done(self):
        return self._k is not None and self._k >= self.config.episode_length

    def reset(self, seed=None, initial_amplitude=None):
        """Start an episode from ``(|1><1|, |0><0|)``; returns the first observation."""
        if seed is not None:
            self.rng = as_generator(seed)
        lo, hi = self.config.bounds
        if initial_amplitude is not None:
            omega0 = float(check_scalar(initial_amplitude, "initial_amplitude", min_val=lo,
                                        max_val=hi))
        elif self.config.random_initial_amplitude:
            omega0 = float(self.rng.uniform(lo, hi))
        else:
            omega0 = self.config.initial_amplitude
        self._state = self._prop.initial(KET1, KET0)
        d0 = self._prop.distance(self._prop.reduced(self._state))
        self._k = 0
        self.omegas = [omega0]
        self.distances = [d0]
        self.slopes = []
        self.rewards = []
        return self._observation(0, d0, 0.0, omega0)

    def _observation(self, k, distance, slope, omega):
        return np.array([self._times[k] / self.config.propagation.horizon, distance, slope,
                         self._gammas[k], omega])

    def step(self, action):
        if self._k is None:
            raise EpisodeFinishedError("call reset() before step()")
        if self.done:
            raise EpisodeFinishedError("episode finished; call reset()")
        a = float(np.asarray(action, dtype=float).reshape(-1)[0])
        if not np.isfinite(a):
            raise ValueError(f"action must be finite, got {a}")
        k = self._k
        omega_prev = self.omegas[-1]
        omega = apply_increment(omega_prev, a, self.config.bounds)
        self._state, coords = self._prop.advance(self._state, k, omega)
        distance = self._prop.distance(coords)
        slope = (distance - self.distances[-1]) / self.dt
        reward = step_reward(self.distances[-1], distance, self.dt, omega - omega_prev, omega,
                             self.config.alpha, self.config.beta)
        self._k = k + 1
        self.omegas.append(omega)
        self.distances.append(distance)
        self.slopes.append(slope)
        self.rewards.append(reward)
        return self._observation(k + 1, distance, slope, omega), reward, self.done

    def pulse(self):
        """Amplitudes applied so far, one per completed bin."""
        return Pulse(np.array(self.omegas[1:]), self.config.propagation.horizon, self.config.bounds)

    def n_total(self):
        return n_total(self.distances, self.dt)

    def write_episode_csv(self, path):
        """Rows ``(k, t, Omega, D, Ddot, gamma, reward)``.

        Row ``k < N`` describes bin ``k``: the amplitude held on it, the
        distance at its start, its slope and reward.  The final row carries
        the terminal distance and repeats the last amplitude and slope with
        zero reward.
        """
        n = len(self.slopes)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["k", "t", "Omega", "D", "Ddot", "gamma", "reward"])
            for k in range(n + 1):
                j = min(k, n - 1)
                row = (self._times[k], self.omegas[j + 1], self.distances[k], self.slopes[j],
                       self._gammas[k], self.rewards[k] if k < n else 0.0)
                writer.writerow([k] + [f"{v:.17g}" for v in row])


def rollout(policy, env, seed=None, initial_amplitude=None):
    """Run one full episode with ``policy(observation) -> action``.

    Returns the list of :class:`Transition` and the episode's ``N_Tot``.
    """
    obs = env.reset(seed=seed, initial_amplitude=initial_amplitude)
    transitions = []
    done = False
    while not done:
        action = float(np.asarray(policy(obs), dtype=float).reshape(-1)[0])
        next_obs, reward, done = env.step(action)
        transitions.append(Transition(obs, action, reward, next_obs, done))
        obs = next_obs
    return transitions, env.n_total()
