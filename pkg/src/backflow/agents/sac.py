"""Soft actor-critic with twin Q-networks, target networks and a replay buffer."""

import math
from dataclasses import dataclass

import numpy as np

from ..env import ACT_DIM, OBS_DIM
from ..exceptions import DivergenceError
from ..nn import AdamState, DenseNet, SquashedGaussianPolicy, adam_step
from ..validation import check_scalar
from .common import ConvergenceHistory, evaluate_policy, spawn_generators


@dataclass(frozen=True)
class SACConfig:
    temperature: float = 0.2
    target_rate: float = 0.005
    discount: float = 0.99
    buffer_capacity: int = 300_000
    batch_size: int = 256
    learning_rate: float = 3e-4
    gradient_steps: int = 1
    warmup_steps: int = 1000
    total_steps: int = 500_000
    hidden_sizes: tuple = (256, 256)
    eval_interval: int = 2000

    def __post_init__(self):
        check_scalar(self.temperature, "temperature", min_val=0.0, include_min=False)
        check_scalar(self.target_rate, "target_rate", min_val=0.0, max_val=1.0, include_min=False)
        check_scalar(self.discount, "discount", min_val=0.0, max_val=1.0)
        check_scalar(self.learning_rate, "learning_rate", min_val=0.0, include_min=False)
        for name in ("buffer_capacity", "batch_size", "gradient_steps", "total_steps",
                     "eval_interval"):
            check_scalar(getattr(self, name), name, min_val=1, integer=True)
        check_scalar(self.warmup_steps, "warmup_steps", min_val=0, integer=True)
        if self.buffer_capacity < self.batch_size:
            raise ValueError("buffer_capacity must be at least batch_size")
        object.__setattr__(self, "hidden_sizes",
                           tuple(check_scalar(h, "hidden size", min_val=1, integer=True)
                                 for h in self.hidden_sizes))


class ReplayBuffer:
    """Fixed-capacity ring store; the oldest transition is overwritten first."""

    def __init__(self, capacity, obs_dim=OBS_DIM, act_dim=ACT_DIM):
        self.capacity = check_scalar(capacity, "capacity", min_val=1, integer=True)
        self.states = np.zeros((self.capacity, obs_dim))
        self.actions = np.zeros((self.capacity, act_dim))
        self.rewards = np.zeros(self.capacity)
        self.next_states = np.zeros((self.capacity, obs_dim))
        self.dones = np.zeros(self.capacity)
        self.size = 0
        self.cursor = 0

    def __len__(self):
        return self.size

    def add(self, state, action, reward, next_state, done):
        i = self.cursor
        self.states[i] = state
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_states[i] = next_state
        self.dones[i] = float(done)
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size, rng):
        if self.size < batch_size:
            raise ValueError(f"buffer holds {self.size} transitions, need {batch_size}")
        idx = rng.integers(0, self.size, size=batch_size)
        return (self.states[idx], self.actions[idx], self.rewards[idx], self.next_states[idx],
                self.dones[idx])


def soft_bellman_target(rewards, dones, next_q1, next_q2, next_log_probs, temperature, discount):
    """``r + discount * (min(Q1', Q2') - temperature * log pi')``; ``r`` on terminal steps."""
    soft_value = np.minimum(next_q1, next_q2) - temperature * next_log_probs
    return rewards + discount * (1.0 - dones) * soft_value


def _q_input(states, actions):
    return np.concatenate([states, actions], axis=-1)


def sac_target(batch, target_q1, target_q2, policy, temperature, discount, noise):
    """Bootstrap targets with ``a' ~ pi(.|s')`` drawn from the given standard-normal ``noise``."""
    _, _, rewards, next_states, dones = batch
    next_actions, next_logp, _ = policy.rsample(next_states, noise)
    q_in = _q_input(next_states, next_actions)
    return soft_bellman_target(rewards, dones, target_q1.forward(q_in)[:, 0],
                               target_q2.forward(q_in)[:, 0], next_logp, temperature, discount)


def soft_update(target, source, rate):
    """``target <- rate * source + (1 - rate) * target``, in place."""
    for pt, ps in zip(target.params, source.params):
        pt *= 1.0 - rate
        pt += rate * ps


def q_loss_and_grads(q, states, actions, targets):
    out, cache = q.forward(_q_input(states, actions), return_cache=True)
    err = out[:, 0] - targets
    grads, _ = q.backward(cache, (2.0 * err / err.shape[0])[:, None])
    return float(np.mean(err * err)), grads


def policy_loss_and_grads(policy, q1, q2, states, noise, temperature):
    """Mean of ``temperature * log pi(a|s) - min_i Q_i(s, a)`` with reparameterized ``a``."""
    actions, logp, cache = policy.rsample(states, noise)
    q_in = _q_input(states, actions)
    v1, c1 = q1.forward(q_in, return_cache=True)
    v2, c2 = q2.forward(q_in, return_cache=True)
    n = states.shape[0]
    use_first = (v1[:, 0] <= v2[:, 0])[:, None]
    q_min = np.where(use_first, v1, v2)[:, 0]
    loss = float(np.mean(temperature * logp - q_min))
    # dQ/da through whichever twin supplies the minimum
    _, g_in1 = q1.backward(c1, np.where(use_first, 1.0, 0.0), param_grads=False)
    _, g_in2 = q2.backward(c2, np.where(use_first, 0.0, 1.0), param_grads=False)
    d_action = -(g_in1 + g_in2)[:, states.shape[1]:] / n
    grads = policy.backward(cache, d_action, np.full(n, temperature / n))
    return loss, grads


class SACAgent:
    def __init__(self, config, rngs, obs_dim=OBS_DIM, act_dim=ACT_DIM, action_bounds=(-5.0, 5.0)):
        hidden = list(config.hidden_sizes)
        self.policy = SquashedGaussianPolicy([obs_dim] + hidden + [act_dim], *action_bounds,
                                             seed=rngs[0])
        self.q1 = DenseNet([obs_dim + act_dim] + hidden + [1], seed=rngs[1])
        self.q2 = DenseNet([obs_dim + act_dim] + hidden + [1], seed=rngs[2])
        self.q1_target = self.q1.copy()
        self.q2_target = self.q2.copy()
        lr = config.learning_rate
        self.policy_opt = AdamState(self.policy.params, lr=lr)
        self.q1_opt = AdamState(self.q1.params, lr=lr)
        self.q2_opt = AdamState(self.q2.params, lr=lr)


def sac_update(batch, agent, config, rng):
    """One gradient step on both critics and the actor, then the target update."""
    states, actions, _, next_states, _ = batch
    act_dim = actions.shape[1]
    y = sac_target(batch, agent.q1_target, agent.q2_target, agent.policy, config.temperature,
                   config.discount, rng.standard_normal((next_states.shape[0], act_dim)))
    l1, g1 = q_loss_and_grads(agent.q1, states, actions, y)
    l2, g2 = q_loss_and_grads(agent.q2, states, actions, y)
    lp, gp = policy_loss_and_grads(agent.policy, agent.q1, agent.q2, states,
                                   rng.standard_normal((states.shape[0], act_dim)),
                                   config.temperature)
    if not all(math.isfinite(v) for v in (l1, l2, lp)):
        raise DivergenceError("non-finite SAC loss")
    adam_step(agent.q1.params, g1, agent.q1_opt)
    adam_step(agent.q2.params, g2, agent.q2_opt)
    adam_step(agent.policy.params, gp, agent.policy_opt)
    soft_update(agent.q1_target, agent.q1, config.target_rate)
    soft_update(agent.q2_target, agent.q2, config.target_rate)
    return {"q1_loss": l1, "q2_loss": l2, "policy_loss": lp}


def sac_train(env_factory, config=None, seed=42, eval_env_config=None, evaluate=None):
    """Train a SAC agent; returns ``(policy, ConvergenceHistory)``."""
    config = config or SACConfig()
    rngs = spawn_generators(seed, 6)
    env = env_factory(rngs[3])
    rng_act, rng_update = rngs[4], rngs[5]
    if evaluate is None:
        eval_config = eval_env_config or env.config

        def evaluate(policy):
            return evaluate_policy(policy, eval_config)[0]

    lo, hi = env.config.action_bounds
    agent = SACAgent(config, rngs[:3], env.observation_dim, env.action_dim, (lo, hi))
    buffer = ReplayBuffer(config.buffer_capacity, env.observation_dim, env.action_dim)
    history = ConvergenceHistory()
    steps = episodes = updates = 0
    obs = env.reset()
    history.append(0, 0, 0, evaluate(agent.policy))
    while steps < config.total_steps:
        if steps < config.warmup_steps:
            action = rng_act.uniform(lo, hi, size=env.action_dim)
        else:
            action, _ = agent.policy.sample(obs, rng_act)
        next_obs, reward, done = env.step(action[0])
        buffer.add(obs, action, reward, next_obs, done)
        steps += 1
        obs = next_obs
        if done:
            episodes += 1
            obs = env.reset()
        if steps >= config.warmup_steps and len(buffer) >= config.batch_size:
            for _ in range(config.gradient_steps):
                try:
                    sac_update(buffer.sample(config.batch_size, rng_update), agent, config,
                               rng_update)
                except DivergenceError as exc:
                    raise DivergenceError(f"SAC diverged after {steps} environment steps: {exc}",
                                          step=steps) from exc
                updates += 1
        if steps % config.eval_interval == 0 or steps == config.total_steps:
            history.append(steps, episodes, updates, evaluate(agent.policy))
    history.rng_state = rng_act.bit_generator.state
    return agent.policy, history
