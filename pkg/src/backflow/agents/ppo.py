"""Proximal policy optimization with a clipped surrogate and GAE."""

import math
from dataclasses import dataclass

import numpy as np

from ..env import ACT_DIM, OBS_DIM, BackflowEnv, EnvConfig
from ..exceptions import DivergenceError
from ..nn import AdamState, DenseNet, GaussianPolicy, adam_step
from ..validation import check_scalar
from .common import ConvergenceHistory, evaluate_policy, spawn_generators


@dataclass(frozen=True)
class PPOConfig:
    clip_eps: float = 0.2
    discount: float = 0.99
    gae_lambda: float = 0.95
    epochs: int = 10
    minibatch_size: int = 64
    learning_rate: float = 6e-4
    rollout_episodes: int = 8
    total_steps: int = 500_000
    entropy_coef: float = 0.0
    value_coef: float = 0.5
    hidden_sizes: tuple = (64, 64)
    init_log_std: float = 0.0
    eval_interval: int = 2000

    def __post_init__(self):
        check_scalar(self.clip_eps, "clip_eps", min_val=0.0, max_val=1.0, include_min=False,
                     include_max=False)
        check_scalar(self.discount, "discount", min_val=0.0, max_val=1.0)
        check_scalar(self.gae_lambda, "gae_lambda", min_val=0.0, max_val=1.0)
        check_scalar(self.learning_rate, "learning_rate", min_val=0.0, include_min=False)
        check_scalar(self.entropy_coef, "entropy_coef", min_val=0.0)
        check_scalar(self.value_coef, "value_coef", min_val=0.0, include_min=False)
        check_scalar(self.init_log_std, "init_log_std")
        for name in ("epochs", "minibatch_size", "rollout_episodes", "total_steps",
                     "eval_interval"):
            check_scalar(getattr(self, name), name, min_val=1, integer=True)
        object.__setattr__(self, "hidden_sizes",
                           tuple(check_scalar(h, "hidden size", min_val=1, integer=True)
                                 for h in self.hidden_sizes))


def compute_gae(rewards, values, bootstrap, discount, gae_lambda):
    """Advantages by the backward GAE recursion, and returns ``A + V``.

    ``values`` holds one entry per visited state; ``bootstrap`` is the value
    after the last reward (0 for a finished episode).  ``values`` may also
    carry the bootstrap as an extra final entry, in which case ``bootstrap``
    must be ``None``.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    if bootstrap is None:
        values, bootstrap = values[:-1], float(values[-1])
    if values.shape != rewards.shape:
        raise ValueError(f"{rewards.shape[0]} rewards but {values.shape[0]} values")
    adv = np.empty_like(rewards)
    last = 0.0
    next_value = float(bootstrap)
    for k in range(rewards.shape[0] - 1, -1, -1):
        delta = rewards[k] + discount * next_value - values[k]
        last = delta + discount * gae_lambda * last
        adv[k] = last
        next_value = values[k]
    return adv, adv + values


def clipped_surrogate(ratio, advantages, clip_eps):
    """Per-sample ``min(r A, clip(r, 1 - eps, 1 + eps) A)``."""
    ratio = np.asarray(ratio, dtype=float)
    advantages = np.asarray(advantages, dtype=float)
    return np.minimum(ratio * advantages, np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * advantages)


def normalize_advantages(adv):
    adv = np.asarray(adv, dtype=float)
    return (adv - adv.mean()) / max(float(adv.std()), 1e-8)


def ppo_loss(policy, states, actions, old_log_probs, advantages, clip_eps):
    """Clipped surrogate (to be maximized) and its parameter gradients.

    Returns ``(L, diagnostics)``; ``diagnostics["grads"]`` holds the gradient
    of ``L`` with respect to ``policy.params``.
    """
    log_probs, cache = policy.log_prob(states, np.asarray(actions, dtype=float).reshape(-1, ACT_DIM))
    with np.errstate(over="ignore"):
        ratio = np.exp(log_probs - old_log_probs)
    if not np.all(np.isfinite(ratio)):
        raise DivergenceError("non-finite probability ratio")
    surr = clipped_surrogate(ratio, advantages, clip_eps)
    n = ratio.shape[0]
    unclipped_active = ratio * advantages <= np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * advantages
    d_logp = np.where(unclipped_active, ratio * advantages, 0.0) / n
    grads = policy.backward_log_prob(cache, d_logp)
    diag = {
        "grads": grads,
        "ratio": ratio,
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > clip_eps)),
        "approx_kl": float(np.mean(old_log_probs - log_probs)),
    }
    return float(np.mean(surr)), diag


class PPOAgent:
    """Policy and value networks plus their optimizers."""

    def __init__(self, config, rng_policy, rng_value, obs_dim=OBS_DIM, act_dim=ACT_DIM):
        hidden = list(config.hidden_sizes)
        self.policy = GaussianPolicy([obs_dim] + hidden + [act_dim], seed=rng_policy,
                                     init_log_std=config.init_log_std)
        self.value = DenseNet([obs_dim] + hidden + [1], seed=rng_value)
        self.policy_opt = AdamState(self.policy.params, lr=config.learning_rate)
        self.value_opt = AdamState(self.value.params, lr=config.learning_rate)

    def value_of(self, states):
        return self.value.forward(states)[..., 0]

    def update(self, config, batch, rng):
        """Several epochs of minibatch updates on one rollout batch; returns the update count."""
        states, actions, old_logp, adv, returns = batch
        n = states.shape[0]
        count = 0
        for _ in range(config.epochs):
            order = rng.permutation(n)
            for start in range(0, n, config.minibatch_size):
                idx = order[start:start + config.minibatch_size]
                surr, diag = ppo_loss(self.policy, states[idx], actions[idx], old_logp[idx],
                                      adv[idx], config.clip_eps)
                # ascend the surrogate (plus entropy bonus): descend its negative
                grads = [-g for g in diag["grads"]]
                if config.entropy_coef:
                    grads[-1] = grads[-1] - config.entropy_coef * (
                        (self.policy.log_std > -20.0) & (self.policy.log_std < 2.0))
                v, cache = self.value.forward(states[idx], return_cache=True)
                err = v[:, 0] - returns[idx]
                v_loss = float(np.mean(err * err))
                if not (math.isfinite(surr) and math.isfinite(v_loss)):
                    raise DivergenceError("non-finite PPO loss")
                v_grads, _ = self.value.backward(
                    cache, (config.value_coef * 2.0 * err / idx.shape[0])[:, None])
                adam_step(self.policy.params, grads, self.policy_opt)
                adam_step(self.value.params, v_grads, self.value_opt)
                count += 1
        return count


def _collect(agent, env, n_episodes, rng):
    obs_buf, act_buf, logp_buf, adv_buf, ret_buf = [], [], [], [], []
    steps = 0
    for _ in range(n_episodes):
        obs = env.reset()
        states, actions, logps, rewards = [], [], [], []
        done = False
        while not done:
            action, logp = agent.policy.sample(obs, rng)
            next_obs, reward, done = env.step(action[0])
            states.append(obs)
            actions.append(action[0])
            logps.append(logp)
            rewards.append(reward)
            obs = next_obs
        states = np.array(states)
        values = agent.value_of(states)
        adv, ret = compute_gae(rewards, values, 0.0, agent.discount, agent.gae_lambda)
        obs_buf.append(states)
        act_buf.append(actions)
        logp_buf.append(logps)
        adv_buf.append(adv)
        ret_buf.append(ret)
        steps += len(rewards)
    return (np.concatenate(obs_buf), np.concatenate(act_buf), np.concatenate(logp_buf),
            np.concatenate(adv_buf), np.concatenate(ret_buf)), steps


def ppo_train(env_factory, config=None, seed=42, eval_env_config=None, evaluate=None):
    """Train a PPO agent; returns ``(policy, ConvergenceHistory)``.

    ``env_factory(rng)`` must build a fresh environment drawing its randomness
    from ``rng``.  Evaluation uses the mean action from a zero initial field.
    """
    config = config or PPOConfig()
    rng_policy, rng_value, rng_env, rng_act, rng_batch = spawn_generators(seed, 5)
    env = env_factory(rng_env)
    if evaluate is None:
        eval_config = eval_env_config or env.config

        def evaluate(policy):
            return evaluate_policy(policy, eval_config)[0]

    agent = PPOAgent(config, rng_policy, rng_value, env.observation_dim, env.action_dim)
    agent.discount, agent.gae_lambda = config.discount, config.gae_lambda
    history = ConvergenceHistory()
    steps = episodes = updates = 0
    next_eval = 0
    while True:
        if steps >= next_eval:
            history.append(steps, episodes, updates, evaluate(agent.policy))
            next_eval += config.eval_interval
        if steps >= config.total_steps:
            break
        batch, n = _collect(agent, env, config.rollout_episodes, rng_act)
        steps += n
        episodes += config.rollout_episodes
        states, actions, logp, adv, ret = batch
        try:
            updates += agent.update(config, (states, actions, logp, normalize_advantages(adv), ret),
                                    rng_batch)
        except DivergenceError as exc:
            raise DivergenceError(f"PPO diverged after {steps} environment steps: {exc}",
                                  step=steps) from exc
    if history.env_steps[-1] != steps:
        history.append(steps, episodes, updates, evaluate(agent.policy))
    history.rng_state = rng_act.bit_generator.state
    return agent.policy, history


def default_env_factory(env_config=None):
    """Factory building :class:`BackflowEnv` instances with a given generator."""
    env_config = env_config or EnvConfig()

    def factory(rng):
        return BackflowEnv(env_config, seed=rng)

    return factory
