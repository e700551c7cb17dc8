"""Non-Markovian information backflow in a driven qubit: simulation, measure and control."""

from .dynamics import (KET0, KET1, PairPropagator, PropagationConfig, ReservoirParams, decay_rate,
                       lindblad_rhs, negativity_windows, propagate_pair)
from .env import BackflowEnv, EnvConfig, rollout
from .exceptions import (BackflowError, ConfigError, DivergenceError, EpisodeFinishedError,
                         PoleError, PositivityError)
from .measure import TrajectoryRecord, n_loc_series, n_total, trace_distance
from .oct import (BackflowObjective, LBFGSBPulseOptimizer, OCTConfig, ObjectiveHistory,
                  PowellPulseOptimizer, fd_gradient, lbfgsb_optimize, line_search_1d,
                  powell_optimize)
from .pulse import Pulse, apply_increment, random_pulse, sample

__version__ = "0.1.0"

__all__ = [
    "KET0", "KET1", "PairPropagator", "PropagationConfig", "ReservoirParams", "decay_rate",
    "lindblad_rhs", "negativity_windows", "propagate_pair", "BackflowEnv", "EnvConfig", "rollout",
    "BackflowError", "ConfigError", "DivergenceError", "EpisodeFinishedError", "PoleError",
    "PositivityError", "TrajectoryRecord", "n_loc_series", "n_total", "trace_distance",
    "BackflowObjective", "LBFGSBPulseOptimizer", "OCTConfig", "ObjectiveHistory",
    "PowellPulseOptimizer", "fd_gradient", "lbfgsb_optimize", "line_search_1d", "powell_optimize",
    "Pulse", "apply_increment", "random_pulse", "sample",
]
