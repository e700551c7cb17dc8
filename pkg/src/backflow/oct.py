"""Optimal-control baselines: Powell and L-BFGS-B maximization of N_Tot.

Both optimizers maximize a scalar objective over a box.  The objective for
the physical problem is :class:`BackflowObjective`, which propagates the
orthogonal pair ``(|1><1|, |0><0|)`` and returns the total backflow.
"""

import csv
import json
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .dynamics import (KET0, KET1, PropagationConfig, ReservoirParams, _distance_from_coords,
                       get_propagator)
from .exceptions import ConfigError, DivergenceError
from .measure import n_total
from .pulse import DEFAULT_BOUNDS, Pulse, random_pulse, sample
from .validation import as_generator, check_amplitudes, check_bounds, check_scalar

GOLDEN = 0.5 * (3.0 - math.sqrt(5.0))
CURVATURE_EPS = 1e-10


@dataclass(frozen=True)
class OCTConfig:
    """Budgets and tolerances shared by the two optimizers.

    ``fd_step=None`` selects ``1e-3 * (hi - lo)`` of the amplitude bounds and
    ``initial_step=None`` a first L-BFGS trial step of length ``hi - lo``.
    """

    max_outer_iterations: int = 50
    line_search_tol: float = 1e-4
    ftol: float = 1e-10
    xtol: float = 1e-10
    fd_step: float = None
    gtol: float = 1e-8
    memory: int = 10
    max_iterations: int = 200
    max_backtracks: int = 30
    armijo: float = 1e-4
    initial_step: float = None

    def __post_init__(self):
        check_scalar(self.max_outer_iterations, "max_outer_iterations", min_val=1, integer=True)
        check_scalar(self.max_iterations, "max_iterations", min_val=1, integer=True)
        check_scalar(self.memory, "memory", min_val=1, integer=True)
        check_scalar(self.line_search_tol, "line_search_tol", min_val=0.0, max_val=1.0,
                     include_min=False)
        check_scalar(self.max_backtracks, "max_backtracks", min_val=1, integer=True)
        for name in ("ftol", "xtol", "gtol"):
            check_scalar(getattr(self, name), name, min_val=0.0)
        check_scalar(self.armijo, "armijo", min_val=0.0, max_val=1.0, include_min=False,
                     include_max=False)
        for name in ("fd_step", "initial_step"):
            if getattr(self, name) is not None:
                check_scalar(getattr(self, name), name, min_val=0.0, include_min=False)

    def resolved_initial_step(self, bounds):
        """Length of the first quasi-Newton trial step: the box width unless set."""
        if self.initial_step is not None:
            return self.initial_step
        if bounds is None or bounds[1] <= bounds[0]:
            return 1.0
        return bounds[1] - bounds[0]

    def resolved_fd_step(self, bounds):
        if self.fd_step is not None:
            return self.fd_step
        if bounds is None:
            return 1e-3
        lo, hi = bounds
        return 1e-3 * (hi - lo) if hi > lo else 1e-3


@dataclass
class ObjectiveHistory:
    """Per-iteration log: ``(iteration, value, amplitudes, cumulative evaluations)``."""

    iterations: list = field(default_factory=list)
    values: list = field(default_factory=list)
    amplitudes: list = field(default_factory=list)
    evaluations: list = field(default_factory=list)
    termination_reason: str = ""

    def append(self, iteration, value, x, evals):
        self.iterations.append(int(iteration))
        self.values.append(float(value))
        self.amplitudes.append(np.array(x, dtype=float, copy=True))
        self.evaluations.append(int(evals))

    def __len__(self):
        return len(self.iterations)

    @property
    def best_value(self):
        return max(self.values)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["iteration", "n_tot", "evals"])
            for it, val, ev in zip(self.iterations, self.values, self.evaluations):
                writer.writerow([it, f"{val:.17g}", ev])

    def summary(self):
        return {
            "final_n_tot": self.values[-1],
            "final_amplitudes": [float(v) for v in self.amplitudes[-1]],
            "evaluations": self.evaluations[-1],
            "iterations": self.iterations[-1],
            "termination_reason": self.termination_reason,
        }

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


class CountingObjective:
    """Wraps an objective, counts calls and rejects non-finite values."""

    def __init__(self, func):
        self.func = func
        self.count = 0

    def __call__(self, x):
        self.count += 1
        value = float(self.func(x))
        if not math.isfinite(value):
            raise DivergenceError(f"objective returned {value} at evaluation {self.count}",
                                  step=self.count)
        return value


class BackflowObjective:
    """``N_Tot`` of the orthogonal pair as a function of the amplitude vector.

    Consecutive calls that share a prefix of amplitudes resume propagation
    from the first changed bin; the arithmetic is identical to a fresh
    :func:`~backflow.dynamics.propagate_pair`, so values are bit-identical.
    An instance is meant to be owned by one optimizer at a time.
    """

    def __init__(self, params=None, config=None, bounds=DEFAULT_BOUNDS, states=(KET1, KET0)):
        self.params = params if params is not None else ReservoirParams()
        self.config = config if config is not None else PropagationConfig()
        self.bounds = check_bounds(bounds)
        self.states = states
        self._propagator = get_propagator(self.params, self.config)
        self._last_x = None
        self._states = None
        self._samples = None

    @property
    def n_bins(self):
        return self.config.control_bins

    def samples(self, x):
        x = check_amplitudes(x, n=self.n_bins, bounds=self.bounds)
        prop = self._propagator
        if self._last_x is None:
            state = prop.initial(*self.states)
            self._states = [state] + [None] * self.n_bins
            self._samples = np.empty((self.n_bins + 1, 4, 2))
            self._samples[0] = prop.reduced(state)
            start = 0
        else:
            changed = np.flatnonzero(x != self._last_x)
            start = int(changed[0]) if changed.size else self.n_bins
        for k in range(start, self.n_bins):
            self._states[k + 1], self._samples[k + 1] = prop.advance(self._states[k], k, x[k])
        self._last_x = x
        return self._samples.copy()

    def __call__(self, x):
        samples = self.samples(x)
        return n_total(_distance_from_coords(samples), self.config.bin_width)

    def trajectory(self, x):
        """Full :class:`~backflow.measure.TrajectoryRecord` for amplitudes ``x``."""
        x = np.asarray(x, dtype=float)
        return self._propagator.record(self.samples(x), x)


def line_search_1d(phi, interval, tol=1e-4, f0=None):
    """Maximize ``phi`` on ``interval`` by golden-section search.

    The bracket is shrunk to ``tol`` times the initial width, then one
    parabolic step through the best probe and its neighbours refines the
    result.  Only points inside the interval are evaluated.  ``f0`` is the
    known value at ``lambda = 0`` (when 0 is feasible); it takes part in the
    comparison so the result never falls below it.

    Returns ``(lambda_best, value_best)``.
    """
    a, b = float(interval[0]), float(interval[1])
    if b < a:
        raise ValueError(f"empty interval ({a}, {b})")
    if b - a == 0.0:
        return 0.0, (f0 if f0 is not None else float(phi(0.0)))

    probes = {}

    def probe(lam):
        if lam not in probes:
            probes[lam] = float(phi(lam))
        return probes[lam]

    width = b - a
    lo, hi = a, b
    c = lo + GOLDEN * (hi - lo)
    d = hi - GOLDEN * (hi - lo)
    fc, fd = probe(c), probe(d)
    while hi - lo > tol * width:
        if fc >= fd:
            hi, d, fd = d, c, fc
            c = lo + GOLDEN * (hi - lo)
            fc = probe(c)
        else:
            lo, c, fc = c, d, fd
            d = hi - GOLDEN * (hi - lo)
            fd = probe(d)
    # the maximizer may sit on an end of the interval
    for end in (lo, hi):
        if end in (a, b):
            probe(end)

    pts = sorted(probes)
    i = max(range(len(pts)), key=lambda j: probes[pts[j]])
    if 0 < i < len(pts) - 1:
        x0, x1, x2 = pts[i - 1], pts[i], pts[i + 1]
        f0_, f1, f2 = probes[x0], probes[x1], probes[x2]
        den = (x1 - x0) * (f1 - f2) - (x1 - x2) * (f1 - f0_)
        if den != 0.0:
            vertex = x1 - 0.5 * ((x1 - x0) ** 2 * (f1 - f2) - (x1 - x2) ** 2 * (f1 - f0_)) / den
            if x0 < vertex < x2 and math.isfinite(vertex):
                probe(vertex)

    best = max(probes, key=lambda lam: probes[lam])
    if f0 is not None and a <= 0.0 <= b and f0 >= probes[best]:
        return 0.0, float(f0)
    return best, probes[best]


def feasible_interval(x, direction, bounds):
    """Range of ``lambda`` keeping ``x + lambda * direction`` inside the box."""
    lo, hi = bounds
    lam_lo, lam_hi = -math.inf, math.inf
    for xj, dj in zip(x, direction):
        if dj == 0.0:
            continue
        t1, t2 = (lo - xj) / dj, (hi - xj) / dj
        if t1 > t2:
            t1, t2 = t2, t1
        lam_lo, lam_hi = max(lam_lo, t1), min(lam_hi, t2)
    if not math.isfinite(lam_lo) or not math.isfinite(lam_hi):
        return 0.0, 0.0
    return min(lam_lo, 0.0), max(lam_hi, 0.0)


def _powell_line_step(f, x, fx, d, bounds, tol):
    """Improve ``x`` along ``d`` within the box; keeps ``x`` unless the value rises."""
    lo, hi = bounds

    def phi(lam):
        return f(np.clip(x + lam * d, lo, hi))

    lam, val = line_search_1d(phi, feasible_interval(x, d, bounds), tol=tol, f0=fx)
    if val > fx:
        return np.clip(x + lam * d, lo, hi), val
    return x, fx


def powell_optimize(objective, x0, bounds, config=None):
    """Maximize ``objective`` over the box with Powell's direction-set method.

    Each outer iteration line-searches along every direction in turn, then
    replaces the oldest direction by the net displacement of the iteration.
    Moves are accepted only when they improve the objective.  When an
    iteration stalls on a mixed direction set, which may have become nearly
    linearly dependent, the set is reset to the coordinate axes; the
    tolerances end the run only when a sweep along the axes stalls too.

    Returns ``(x_best, ObjectiveHistory)``.
    """
    config = config or OCTConfig()
    bounds = check_bounds(bounds)
    lo, hi = bounds
    x = check_amplitudes(x0, bounds=bounds, name="x0")
    f = CountingObjective(objective)
    n = x.shape[0]
    axes = [np.eye(n)[j] for j in range(n)]
    directions = list(axes)
    on_axes = True

    fx = f(x)
    history = ObjectiveHistory()
    history.append(0, fx, x, f.count)
    history.termination_reason = "max_outer_iterations"

    for it in range(1, config.max_outer_iterations + 1):
        x_start, f_start = x.copy(), fx
        for d in directions:
            x, fx = _powell_line_step(f, x, fx, d, bounds, config.line_search_tol)
        d_new = x - x_start
        step = float(np.linalg.norm(d_new))
        stalled = ("ftol" if fx - f_start < config.ftol
                   else "xtol" if step < config.xtol else None)
        if stalled is None:
            directions.pop(0)
            directions.append(d_new / step)
            on_axes = False
            # as in Powell's method, the new direction is searched right away
            x, fx = _powell_line_step(f, x, fx, directions[-1], bounds, config.line_search_tol)
        history.append(it, fx, x, f.count)
        if stalled and on_axes:
            history.termination_reason = stalled
            break
        if stalled:
            directions, on_axes = list(axes), True
    return x, history


def fd_gradient(objective, x, eps, bounds=None, f0=None):
    """Forward-difference gradient with the perturbed point clipped to ``bounds``.

    A component whose perturbation is fully clipped (``x_j`` on its upper
    bound) comes out as 0.  Uses ``len(x) + 1`` evaluations, or ``len(x)``
    when ``f0 = objective(x)`` is supplied.
    """
    eps = check_scalar(eps, "eps", min_val=0.0, include_min=False)
    x = np.asarray(x, dtype=float)
    fx = float(objective(x)) if f0 is None else f0
    grad = np.empty_like(x)
    for j in range(x.shape[0]):
        xp = x.copy()
        xp[j] += eps
        if bounds is not None:
            xp = np.clip(xp, bounds[0], bounds[1])
        grad[j] = (float(objective(xp)) - fx) / eps
    return grad


def _two_loop(grad, pairs):
    """Apply the L-BFGS inverse-Hessian estimate to ``grad``."""
    q = grad.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        alpha = rho * np.dot(s, q)
        q -= alpha * y
        alphas.append(alpha)
    if pairs:
        s, y, _ = pairs[-1]
        q *= np.dot(s, y) / np.dot(y, y)
    for (s, y, rho), alpha in zip(pairs, reversed(alphas)):
        beta = rho * np.dot(y, q)
        q += (alpha - beta) * s
    return q


def lbfgsb_optimize(objective, x0, bounds, config=None, gradient=None):
    """Maximize ``objective`` with a projected limited-memory BFGS method.

    ``gradient`` defaults to clipped forward differences of ``objective``.
    Pass ``bounds=None`` for the unconstrained method.  Every iterate is
    projected onto the box, so it is feasible exactly.

    Returns ``(x_best, ObjectiveHistory)``.
    """
    config = config or OCTConfig()
    if bounds is not None:
        bounds = check_bounds(bounds)
        lo, hi = bounds
    x = check_amplitudes(x0, bounds=bounds, name="x0")
    f = CountingObjective(objective)
    eps = config.resolved_fd_step(bounds)
    first_step = config.resolved_initial_step(bounds)

    def project(z):
        return z if bounds is None else np.clip(z, lo, hi)

    def grad(z, fz):
        g = (fd_gradient(f, z, eps, bounds, f0=fz) if gradient is None
             else np.asarray(gradient(z), dtype=float))
        if not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient", step=f.count)
        return g

    fx = f(x)
    g = grad(x, fx)
    pairs = deque(maxlen=config.memory)
    history = ObjectiveHistory()
    history.append(0, fx, x, f.count)
    history.termination_reason = "max_iterations"

    for it in range(1, config.max_iterations + 1):
        if bounds is None:
            free = np.ones_like(x, dtype=bool)
        else:
            free = ~(((x <= lo) & (g < 0)) | ((x >= hi) & (g > 0)))
        pg = np.where(free, g, 0.0)
        if np.max(np.abs(pg)) <= config.gtol:
            history.termination_reason = "gtol"
            break
        p = np.where(free, _two_loop(pg, list(pairs)), 0.0)
        if np.dot(p, pg) <= 0.0:
            pairs.clear()
            p = pg
        # without curvature information the first trial step spans the box
        t = 1.0 if pairs else min(first_step / float(np.linalg.norm(p)), 1e10)
        for _ in range(config.max_backtracks):
            x_new = project(x + t * p)
            f_new = f(x_new)
            if f_new >= fx + config.armijo * np.dot(g, x_new - x) and f_new >= fx:
                break
            t *= 0.5
        else:
            history.termination_reason = "line_search"
            break
        g_new = grad(x_new, f_new)
        s = x_new - x
        y = g - g_new
        sy = float(np.dot(s, y))
        if sy > CURVATURE_EPS:
            pairs.append((s, y, 1.0 / sy))
        change = f_new - fx
        x, fx, g = x_new, f_new, g_new
        history.append(it, fx, x, f.count)
        if abs(change) < config.ftol:
            history.termination_reason = "ftol"
            break
    return x, history


def _initial_guess(init, n_bins, bounds, horizon, random_state):
    if isinstance(init, str):
        if init == "zero":
            return np.clip(np.zeros(n_bins), *bounds)
        if init == "random":
            return random_pulse(random_state, bounds, n_bins, horizon).amplitudes.copy()
        raise ConfigError(f"init must be 'zero', 'random' or an array, got {init!r}")
    return check_amplitudes(init, n=n_bins, bounds=bounds, name="init")


class _PulseOptimizer(BaseEstimator):
    """Shared plumbing of the OCT estimators.

    ``fit`` solves the control problem described by the constructor
    arguments; ``predict`` samples the optimized field at given times.
    """

    def __init__(self, gamma_coupling=5.0, lambda_width=1.0, detuning=1.0, horizon=7.0,
                 control_bins=70, substeps=20, engine="pseudomode", mode_cutoff=4,
                 bounds=DEFAULT_BOUNDS, init="zero", random_state=None):
        self.gamma_coupling = gamma_coupling
        self.lambda_width = lambda_width
        self.detuning = detuning
        self.horizon = horizon
        self.control_bins = control_bins
        self.substeps = substeps
        self.engine = engine
        self.mode_cutoff = mode_cutoff
        self.bounds = bounds
        self.init = init
        self.random_state = random_state

    def _problem(self):
        params = ReservoirParams(self.gamma_coupling, self.lambda_width, self.detuning)
        config = PropagationConfig(self.horizon, self.control_bins, self.substeps, self.engine,
                                   self.mode_cutoff)
        return BackflowObjective(params, config, self.bounds)

    def _oct_config(self):
        raise NotImplementedError

    def _optimize(self, objective, x0, config):
        raise NotImplementedError

    def fit(self, X=None, y=None):
        """Optimize the pulse.  ``X`` and ``y`` are ignored."""
        objective = self._problem()
        bounds = objective.bounds
        rng = as_generator(self.random_state)
        x0 = _initial_guess(self.init, objective.n_bins, bounds, self.horizon, rng)
        self.objective_ = objective
        self.initial_n_total_ = objective(x0)
        x, history = self._optimize(objective, x0, self._oct_config())
        self.pulse_ = Pulse(x, self.horizon, bounds)
        self.history_ = history
        self.n_total_ = objective(x)
        self.n_evaluations_ = history.evaluations[-1]
        return self

    def predict(self, X):
        """Field amplitude at each time in ``X``."""
        check_is_fitted(self, "pulse_")
        times = np.atleast_1d(np.asarray(X, dtype=float)).ravel()
        return np.array([sample(self.pulse_, t) for t in times])

    def score(self, X=None, y=None):
        check_is_fitted(self, "pulse_")
        return self.n_total_

    def trajectory(self):
        check_is_fitted(self, "pulse_")
        return self.objective_.trajectory(self.pulse_.amplitudes)


class PowellPulseOptimizer(_PulseOptimizer):
    """Powell direction-set maximization of the total backflow."""

    def __init__(self, gamma_coupling=5.0, lambda_width=1.0, detuning=1.0, horizon=7.0,
                 control_bins=70, substeps=20, engine="pseudomode", mode_cutoff=4,
                 bounds=DEFAULT_BOUNDS, init="zero", random_state=None,
                 max_outer_iterations=50, line_search_tol=1e-4, ftol=1e-10, xtol=1e-10):
        super().__init__(gamma_coupling, lambda_width, detuning, horizon, control_bins, substeps,
                         engine, mode_cutoff, bounds, init, random_state)
        self.max_outer_iterations = max_outer_iterations
        self.line_search_tol = line_search_tol
        self.ftol = ftol
        self.xtol = xtol

    def _oct_config(self):
        return OCTConfig(max_outer_iterations=self.max_outer_iterations,
                         line_search_tol=self.line_search_tol, ftol=self.ftol, xtol=self.xtol)

    def _optimize(self, objective, x0, config):
        return powell_optimize(objective, x0, objective.bounds, config)


class LBFGSBPulseOptimizer(_PulseOptimizer):
    """Projected L-BFGS maximization with finite-difference gradients."""

    def __init__(self, gamma_coupling=5.0, lambda_width=1.0, detuning=1.0, horizon=7.0,
                 control_bins=70, substeps=20, engine="pseudomode", mode_cutoff=4,
                 bounds=DEFAULT_BOUNDS, init="zero", random_state=None,
                 max_iterations=200, memory=10, fd_step=None, gtol=1e-8, ftol=1e-10):
        super().__init__(gamma_coupling, lambda_width, detuning, horizon, control_bins, substeps,
                         engine, mode_cutoff, bounds, init, random_state)
        self.max_iterations = max_iterations
        self.memory = memory
        self.fd_step = fd_step
        self.gtol = gtol
        self.ftol = ftol

    def _oct_config(self):
        return OCTConfig(max_iterations=self.max_iterations, memory=self.memory,
                         fd_step=self.fd_step, gtol=self.gtol, ftol=self.ftol)

    def _optimize(self, objective, x0, config):
        return lbfgsb_optimize(objective, x0, objective.bounds, config)
