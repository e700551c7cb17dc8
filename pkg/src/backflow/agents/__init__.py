"""Reinforcement-learning controllers (PPO and SAC) for the backflow environment."""

from .common import ConvergenceHistory, evaluate_policy, load_policy, save_policy
from .estimators import PPOController, SACController
from .ppo import PPOConfig, compute_gae, ppo_loss, ppo_train
from .sac import ReplayBuffer, SACConfig, sac_target, sac_train, sac_update

__all__ = [
    "ConvergenceHistory", "evaluate_policy", "load_policy", "save_policy", "PPOController",
    "SACController", "PPOConfig", "compute_gae", "ppo_loss", "ppo_train", "ReplayBuffer",
    "SACConfig", "sac_target", "sac_train", "sac_update",
]
