"""Pieces shared by the PPO and SAC trainers."""

import csv
from dataclasses import dataclass, field

import numpy as np

from ..env import BackflowEnv, rollout


@dataclass
class ConvergenceHistory:
    """Deterministic-evaluation ``N_Tot`` against the three training counters."""

    env_steps: list = field(default_factory=list)
    episodes: list = field(default_factory=list)
    updates: list = field(default_factory=list)
    eval_n_tot: list = field(default_factory=list)
    rng_state: dict = None

    def append(self, env_steps, episodes, updates, value):
        for name, prev in (("env_steps", env_steps), ("episodes", episodes), ("updates", updates)):
            seq = getattr(self, name)
            if seq and prev < seq[-1]:
                raise ValueError(f"{name} counter decreased")
        self.env_steps.append(int(env_steps))
        self.episodes.append(int(episodes))
        self.updates.append(int(updates))
        self.eval_n_tot.append(float(value))

    def __len__(self):
        return len(self.env_steps)

    def rows(self):
        return zip(self.env_steps, self.episodes, self.updates, self.eval_n_tot)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["env_steps", "episodes", "updates", "eval_n_tot"])
            for steps, eps, upd, val in self.rows():
                writer.writerow([steps, eps, upd, f"{val:.17g}"])


def evaluate_policy(policy, env_config, initial_amplitude=0.0):
    """Deterministic episode (mean action, fixed initial field).

    Returns ``(N_Tot, env)``; the env still holds the episode for export.
    """
    env = BackflowEnv(env_config)
    _, value = rollout(policy.deterministic, env, initial_amplitude=initial_amplitude)
    return value, env


def spawn_generators(seed, n):
    """``n`` independent generators derived from one integer seed."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def save_policy(path, policy, rng=None, meta=None):
    """Checkpoint a PPO or SAC policy head (plus an optional RNG state)."""
    from ..nn import SquashedGaussianPolicy, save_checkpoint

    meta = dict(meta or {})
    if isinstance(policy, SquashedGaussianPolicy):
        meta.update(kind="sac", low=policy.low, high=policy.high)
        save_checkpoint(path, {"policy": policy.net}, rng=rng, meta=meta)
    else:
        meta.update(kind="ppo")
        save_checkpoint(path, {"policy": policy.net}, {"log_std": policy.log_std}, rng=rng,
                        meta=meta)


def load_policy(path):
    """Inverse of :func:`save_policy`; returns ``(policy, rng, meta)``."""
    from ..nn import GaussianPolicy, SquashedGaussianPolicy, load_checkpoint

    networks, arrays, rng, meta = load_checkpoint(path)
    net = networks["policy"]
    if meta.get("kind") == "sac":
        policy = object.__new__(SquashedGaussianPolicy)
        policy.net = net
        policy.act_dim = net.sizes[-1] // 2
        policy.low, policy.high = float(meta["low"]), float(meta["high"])
    elif meta.get("kind") == "ppo":
        policy = object.__new__(GaussianPolicy)
        policy.net = net
        policy.log_std = arrays["log_std"]
    else:
        raise ValueError(f"unknown policy kind {meta.get('kind')!r} in {path}")
    return policy, rng, meta
