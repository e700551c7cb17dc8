"""scikit-learn style wrappers around the PPO and SAC trainers."""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from ..dynamics import PropagationConfig, ReservoirParams
from ..env import OBS_DIM, EnvConfig
from ..oct import BackflowObjective
from ..pulse import DEFAULT_BOUNDS
from .common import evaluate_policy
from .ppo import PPOConfig, default_env_factory, ppo_train
from .sac import SACConfig, sac_train


class _Controller(BaseEstimator):
    """``fit`` trains on the environment built from the constructor arguments.

    After fitting, ``policy_``, ``history_``, ``pulse_`` (deterministic
    evaluation from a zero initial field) and ``n_total_`` are available;
    ``predict`` maps observations ``(n, 5)`` to mean actions.
    """

    def _env_config(self, random_initial):
        params = ReservoirParams(self.gamma_coupling, self.lambda_width, self.detuning)
        prop = PropagationConfig(self.horizon, self.control_bins, self.substeps)
        return EnvConfig(params, prop, self.bounds, self.bounds, self.alpha, self.beta,
                         random_initial)

    def _train(self, factory, eval_config):
        raise NotImplementedError

    def fit(self, X=None, y=None):
        """Train the agent.  ``X`` and ``y`` are ignored."""
        eval_config = self._env_config(False)
        self.policy_, self.history_ = self._train(default_env_factory(self._env_config(True)),
                                                  eval_config)
        self.n_total_, env = evaluate_policy(self.policy_, eval_config)
        self.pulse_ = env.pulse()
        objective = BackflowObjective(eval_config.params, eval_config.propagation, self.bounds)
        self.uncontrolled_n_total_ = objective(np.zeros(self.control_bins))
        return self

    def predict(self, X):
        check_is_fitted(self, "policy_")
        X = check_array(X, ensure_2d=True)
        if X.shape[1] != OBS_DIM:
            raise ValueError(f"observations must have {OBS_DIM} columns, got {X.shape[1]}")
        return np.array([self.policy_.deterministic(row)[0] for row in X])

    def score(self, X=None, y=None):
        check_is_fitted(self, "policy_")
        return self.n_total_


class PPOController(_Controller):
    def __init__(self, gamma_coupling=5.0, lambda_width=1.0, detuning=1.0, horizon=7.0,
                 control_bins=70, substeps=20, bounds=DEFAULT_BOUNDS, alpha=0.0, beta=0.0,
                 total_steps=20_000, learning_rate=6e-4, clip_eps=0.2, discount=0.99,
                 gae_lambda=0.95, epochs=10, minibatch_size=64, rollout_episodes=8,
                 hidden_sizes=(64, 64), random_state=42):
        self.gamma_coupling = gamma_coupling
        self.lambda_width = lambda_width
        self.detuning = detuning
        self.horizon = horizon
        self.control_bins = control_bins
        self.substeps = substeps
        self.bounds = bounds
        self.alpha = alpha
        self.beta = beta
        self.total_steps = total_steps
        self.learning_rate = learning_rate
        self.clip_eps = clip_eps
        self.discount = discount
        self.gae_lambda = gae_lambda
        self.epochs = epochs
        self.minibatch_size = minibatch_size
        self.rollout_episodes = rollout_episodes
        self.hidden_sizes = hidden_sizes
        self.random_state = random_state

    def _train(self, factory, eval_config):
        config = PPOConfig(clip_eps=self.clip_eps, discount=self.discount,
                           gae_lambda=self.gae_lambda, epochs=self.epochs,
                           minibatch_size=self.minibatch_size, learning_rate=self.learning_rate,
                           rollout_episodes=self.rollout_episodes, total_steps=self.total_steps,
                           hidden_sizes=tuple(self.hidden_sizes))
        return ppo_train(factory, config, self.random_state, eval_config)


class SACController(_Controller):
    def __init__(self, gamma_coupling=5.0, lambda_width=1.0, detuning=1.0, horizon=7.0,
                 control_bins=70, substeps=20, bounds=DEFAULT_BOUNDS, alpha=0.0, beta=0.0,
                 total_steps=20_000, learning_rate=3e-4, temperature=0.2, target_rate=0.005,
                 discount=0.99, batch_size=256, buffer_capacity=300_000, warmup_steps=1000,
                 hidden_sizes=(256, 256), random_state=42):
        self.gamma_coupling = gamma_coupling
        self.lambda_width = lambda_width
        self.detuning = detuning
        self.horizon = horizon
        self.control_bins = control_bins
        self.substeps = substeps
        self.bounds = bounds
        self.alpha = alpha
        self.beta = beta
        self.total_steps = total_steps
        self.learning_rate = learning_rate
        self.temperature = temperature
        self.target_rate = target_rate
        self.discount = discount
        self.batch_size = batch_size
        self.buffer_capacity = buffer_capacity
        self.warmup_steps = warmup_steps
        self.hidden_sizes = hidden_sizes
        self.random_state = random_state

    def _train(self, factory, eval_config):
        config = SACConfig(temperature=self.temperature, target_rate=self.target_rate,
                           discount=self.discount, buffer_capacity=self.buffer_capacity,
                           batch_size=self.batch_size, learning_rate=self.learning_rate,
                           warmup_steps=self.warmup_steps, total_steps=self.total_steps,
                           hidden_sizes=tuple(self.hidden_sizes))
        return sac_train(factory, config, self.random_state, eval_config)
