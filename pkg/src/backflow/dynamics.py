"""Driven two-level system coupled to a Lorentzian reservoir.

Conventions: the computational basis is ``(|0>, |1>)`` with ``|1>`` the
excited state, ``sigma_minus |1> = |0>`` and ``sigma_z = |1><1| - |0><0|``.

Two propagation engines share one interface:

``"pseudomode"`` (default)
    The qubit is coupled to a single damped mode (rate ``2*lambda``,
    coupling ``sqrt(Gamma*lambda/2)``).  With the drive switched off this
    reproduces the time-local master equation with the Lorentzian decay rate
    exactly, while staying completely positive when the drive is on.  Inside
    a bin the generator is constant, so the RK4 step is a fixed matrix; a
    few steps are fused into one cached operator and applied repeatedly.

``"tcl"``
    Integrates :func:`lindblad_rhs` directly.  The dissipative flow of a step
    is applied in closed form (an integrating-factor RK4), which carries the
    solution across the poles of the decay rate.  Under strong drive in the
    non-Markovian regime this equation itself loses positivity; the engine
    then raises :class:`~backflow.exceptions.PositivityError`.
"""

import functools
import logging
import math
import threading
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError, PoleError, PositivityError
from .measure import TrajectoryRecord
from .validation import check_density_matrix, check_scalar

logger = logging.getLogger(__name__)

SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Z = np.array([[-1, 0], [0, 1]], dtype=complex)
SIGMA_MINUS = np.array([[0, 1], [0, 0]], dtype=complex)
SIGMA_PLUS = SIGMA_MINUS.T.copy()
KET0 = np.array([[1, 0], [0, 0]], dtype=complex)  # ground state |0><0|
KET1 = np.array([[0, 0], [0, 1]], dtype=complex)  # excited state |1><1|

POSITIVITY_TOL = 1e-6
TRACE_DRIFT_TOL = 1e-12
SERIES_THRESHOLD = 1e-6
ENGINES = ("pseudomode", "tcl")


@dataclass(frozen=True)
class ReservoirParams:
    """Lorentzian reservoir (coupling ``Gamma``, width ``lambda``) plus qubit detuning."""

    gamma_coupling: float = 5.0
    lambda_width: float = 1.0
    detuning: float = 1.0

    def __post_init__(self):
        for name in ("gamma_coupling", "lambda_width"):
            object.__setattr__(self, name, check_scalar(getattr(self, name), name, min_val=0.0,
                                                        include_min=False))
        object.__setattr__(self, "detuning", check_scalar(self.detuning, "detuning"))

    @property
    def d(self):
        """``sqrt(lambda**2 - 2*Gamma*lambda)``, real or purely imaginary."""
        lam = self.lambda_width
        return complex(np.sqrt(complex(lam * lam - 2.0 * self.gamma_coupling * lam)))

    @property
    def regime(self):
        half = 0.5 * self.lambda_width
        if self.gamma_coupling < half:
            return "markovian"
        if self.gamma_coupling > half:
            return "non-markovian"
        return "critical"

    @property
    def mode_coupling(self):
        return float(np.sqrt(0.5 * self.gamma_coupling * self.lambda_width))

    @property
    def mode_damping(self):
        return 2.0 * self.lambda_width


@dataclass(frozen=True)
class PropagationConfig:
    """Time grid of a propagation: ``control_bins`` bins of ``substeps`` RK4 steps each."""

    horizon: float = 7.0
    control_bins: int = 70
    substeps: int = 20
    engine: str = "pseudomode"
    mode_cutoff: int = 4

    def __post_init__(self):
        object.__setattr__(self, "horizon", check_scalar(self.horizon, "horizon", min_val=0.0,
                                                         include_min=False))
        object.__setattr__(self, "control_bins",
                           check_scalar(self.control_bins, "control_bins", min_val=1, integer=True))
        object.__setattr__(self, "substeps",
                           check_scalar(self.substeps, "substeps", min_val=1, integer=True))
        object.__setattr__(self, "mode_cutoff",
                           check_scalar(self.mode_cutoff, "mode_cutoff", min_val=2, integer=True))
        if self.engine not in ENGINES:
            raise ConfigError(f"engine must be one of {ENGINES}, got {self.engine!r}")

    @property
    def bin_width(self):
        return self.horizon / self.control_bins

    @property
    def step(self):
        return self.horizon / (self.control_bins * self.substeps)

    @property
    def times(self):
        return np.arange(self.control_bins + 1) * self.bin_width


def _as_times(t):
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0) or not np.all(np.isfinite(t_arr)):
        raise ValueError("decay rate is defined for finite t >= 0 only")
    return t_arr


def decay_rate(params, t):
    """Time-dependent decay rate ``gamma(t)`` of the Lorentzian reservoir.

    Evaluated in complex arithmetic so that the same expression covers real
    ``d`` (weak coupling) and imaginary ``d`` (strong coupling).  Accepts a
    scalar or an array of times.
    """
    t_arr = _as_times(t)
    gam, lam, d = params.gamma_coupling, params.lambda_width, params.d
    x = 0.5 * d * t_arr
    with np.errstate(over="ignore", invalid="ignore"):
        num = 2.0 * gam * lam * np.sinh(x)
        den = d * np.cosh(x) + lam * np.sinh(x)
    small = np.abs(d * t_arr) < SERIES_THRESHOLD
    series = 2.0 * gam * lam * (0.5 * t_arr) / (1.0 + 0.5 * lam * t_arr)
    if np.any(~small & (np.abs(den) < 1e-300)):
        raise PoleError(f"decay rate sampled on a pole (Gamma={gam}, lambda={lam})")
    with np.errstate(divide="ignore", invalid="ignore"):
        exact = np.where(small, 0.0, num / np.where(small, 1.0, den)).real
    out = np.where(small, series, exact)
    return float(out) if out.ndim == 0 else out


def excited_amplitude(params, t):
    """Undriven excited-state amplitude ``c(t)`` (real), with ``gamma = -d/dt ln c**2``.

    ``c`` changes sign at every pole of the decay rate; the integrating-factor
    engine uses the signed ratio ``c(t_b)/c(t_a)`` to continue across them.
    """
    t_arr = _as_times(t)
    lam, d = params.lambda_width, params.d
    x = 0.5 * d * t_arr
    with np.errstate(invalid="ignore", divide="ignore"):
        sinhc = np.where(np.abs(x) > 1e-8, np.sinh(x) / np.where(x == 0, 1.0, x), 1.0 + x * x / 6.0)
    out = (np.exp(-0.5 * lam * t_arr) * (np.cosh(x) + 0.5 * lam * t_arr * sinhc)).real
    return float(out) if out.ndim == 0 else out


def negativity_windows(params, horizon, grid=2000):
    """Maximal runs of grid points on ``[0, horizon]`` where ``gamma(t) < 0``.

    Returns a list of ``(t_start, t_end)`` pairs given by the first and last
    negative grid point of each run.
    """
    grid = check_scalar(grid, "grid", min_val=100, integer=True)
    t = np.linspace(0.0, float(horizon), grid)
    neg = decay_rate(params, t) < 0.0
    edges = np.flatnonzero(np.diff(np.concatenate(([0], neg.astype(np.int8), [0]))))
    return [(float(t[s]), float(t[e - 1])) for s, e in zip(edges[::2], edges[1::2])]


def hamiltonian(omega, params):
    return 0.5 * params.detuning * SIGMA_Z + 0.5 * omega * SIGMA_X


def lindblad_rhs(rho, t, omega, params):
    """Right-hand side of the time-local master equation at time ``t``."""
    h = hamiltonian(omega, params)
    g = decay_rate(params, t)
    jump = SIGMA_MINUS @ rho @ SIGMA_PLUS
    n_exc = SIGMA_PLUS @ SIGMA_MINUS
    return -1j * (h @ rho - rho @ h) + g * (jump - 0.5 * (n_exc @ rho + rho @ n_exc))


def _distance_from_coords(coords):
    """Trace distance between the two states of reduced coordinates ``(..., 4, 2)``.

    The rows are ``(p00, p11, Re rho01, Im rho01)``, the last axis the pair.
    """
    delta = coords[..., 1] - coords[..., 0]
    a = 0.5 * (delta[..., 0] - delta[..., 1])
    return np.sqrt(a * a + (delta[..., 2] * delta[..., 2] + delta[..., 3] * delta[..., 3]))


def _min_eigenvalue(coords):
    p00, p11, re01, im01 = coords[..., 0, :], coords[..., 1, :], coords[..., 2, :], coords[..., 3, :]
    half_gap = 0.5 * (p00 - p11)
    return 0.5 * (p00 + p11) - np.sqrt(half_gap * half_gap + re01 * re01 + im01 * im01)


class _PseudomodeEngine:
    """Qubit plus damped mode, propagated in a real Hermitian-operator basis."""

    cache_size = 1024

    def __init__(self, params, config):
        n = config.mode_cutoff
        dim = 2 * n
        self.dim = dim
        self.n_mode = n
        self.substeps = config.substeps
        self.step = config.step

        a = np.diag(np.sqrt(np.arange(1, n)), 1).astype(complex)
        big_a = np.kron(np.eye(2), a)
        big_sm = np.kron(SIGMA_MINUS, np.eye(n))
        num_a = big_a.conj().T @ big_a
        h0 = (0.5 * params.detuning * np.kron(SIGMA_Z, np.eye(n)) + params.detuning * num_a
              + params.mode_coupling * (big_sm.conj().T @ big_a + big_sm @ big_a.conj().T))
        h1 = 0.5 * np.kron(SIGMA_X, np.eye(n))
        kappa = params.mode_damping
        eye = np.eye(dim)

        def commutator_super(h):
            # column-stacking: vec(A X B) = kron(B.T, A) vec(X)
            return -1j * (np.kron(eye, h) - np.kron(h.T, eye))

        diss = kappa * (np.kron(big_a.conj(), big_a) - 0.5 * np.kron(eye, num_a)
                        - 0.5 * np.kron(num_a.T, eye))

        self._basis, self._coords = self._hermitian_basis(dim)
        u = self._basis
        self.gen0 = (u.conj().T @ (commutator_super(h0) + diss) @ u).real
        self.gen1 = (u.conj().T @ commutator_super(h1) @ u).real

        diag = self._coords["diag"]
        sym = self._coords["sym"]
        asym = self._coords["asym"]
        # rows: p00, p11, Re rho01, Im rho01 of the reduced qubit state
        reduce = np.zeros((4, dim * dim))
        r = 1.0 / np.sqrt(2.0)
        for m in range(n):
            reduce[0, diag[m]] = 1.0
            reduce[1, diag[n + m]] = 1.0
            reduce[2, sym[(m, n + m)]] = r
            reduce[3, asym[(m, n + m)]] = -r
        self._reduce = reduce

        # RK4 on a constant linear generator is its 4th-order Taylor polynomial;
        # with hL = A + Omega B that step is a quartic in Omega.
        a, b = self.step * self.gen0, self.step * self.gen1
        words = [np.eye(dim * dim)]
        coeffs = [np.eye(dim * dim)] + [np.zeros_like(a) for _ in range(4)]
        for order in range(1, 5):
            nxt = []
            for j in range(order + 1):
                w = np.zeros_like(a)
                if j < order:
                    w += words[j] @ a
                if j > 0:
                    w += words[j - 1] @ b
                nxt.append(w)
            words = nxt
            for j, w in enumerate(words):
                coeffs[j] += w / math.factorial(order)
        self._step_coeffs = np.stack(coeffs).reshape(5, -1)
        # fuse up to four steps: two squarings per new amplitude, fewer
        # matrix-vector products per bin
        self.fused = next(f for f in (4, 2, 1) if self.substeps % f == 0)
        self.repeats = self.substeps // self.fused

        self._cache = OrderedDict()
        self._lock = threading.Lock()

    @staticmethod
    def _hermitian_basis(dim):
        cols = []
        diag, sym, asym = {}, {}, {}
        for i in range(dim):
            e = np.zeros((dim, dim), dtype=complex)
            e[i, i] = 1.0
            diag[i] = len(cols)
            cols.append(e)
        r = 1.0 / np.sqrt(2.0)
        for i in range(dim):
            for j in range(i + 1, dim):
                e = np.zeros((dim, dim), dtype=complex)
                e[i, j] = e[j, i] = r
                sym[(i, j)] = len(cols)
                cols.append(e)
                e = np.zeros((dim, dim), dtype=complex)
                e[i, j], e[j, i] = -1j * r, 1j * r
                asym[(i, j)] = len(cols)
                cols.append(e)
        basis = np.stack([c.reshape(-1, order="F") for c in cols], axis=1)
        return basis, {"diag": diag, "sym": sym, "asym": asym}

    def embed(self, rho):
        """Coordinates of ``rho (x) |0><0|_mode``."""
        n = self.n_mode
        v = np.zeros(self.dim * self.dim)
        for i in range(2):
            v[self._coords["diag"][i * n]] = rho[i, i].real
        k = self._coords["sym"][(0, n)]
        v[k] = np.sqrt(2.0) * rho[0, 1].real
        k = self._coords["asym"][(0, n)]
        v[k] = -np.sqrt(2.0) * rho[0, 1].imag
        return v

    def full_state(self, v):
        return (self._basis @ v).reshape(self.dim, self.dim, order="F")

    def initial(self, rho1, rho2):
        return np.stack([self.embed(rho1), self.embed(rho2)], axis=1)

    def step_operator(self, omega):
        """``fused`` RK4 steps at amplitude ``omega`` as one matrix (LRU-cached)."""
        key = float(omega)
        with self._lock:
            m = self._cache.get(key)
            if m is not None:
                self._cache.move_to_end(key)
                return m
        powers = np.array([1.0, key, key * key, key ** 3, key ** 4])
        m = (powers @ self._step_coeffs).reshape(self.dim * self.dim, -1)
        for _ in range(self.fused.bit_length() - 1):
            m = m @ m
        with self._lock:
            self._cache[key] = m
            if len(self._cache) > self.cache_size:
                self._cache.popitem(last=False)
        return m

    def advance(self, x, k, omega):
        m = self.step_operator(omega)
        for _ in range(self.repeats):
            x = m @ x
        return x

    def reduced(self, x):
        """Rows ``(p00, p11, Re rho01, Im rho01)`` of the reduced qubit states."""
        return self._reduce @ x

    def renormalize(self, x, tr):
        return x / tr


class _TCLEngine:
    """Integrating-factor RK4 for the qubit-only master equation."""

    def __init__(self, params, config):
        self.params = params
        self.substeps = config.substeps
        self.step = config.step
        self.bin_width = config.bin_width

    def initial(self, rho1, rho2):
        return np.stack([rho1, rho2]).astype(complex)

    def _flow(self, rho, ratio):
        q = ratio * ratio
        out = rho.copy()
        out[..., 1, 1] = q * rho[..., 1, 1]
        out[..., 0, 0] = rho[..., 0, 0] + (1.0 - q) * rho[..., 1, 1]
        out[..., 0, 1] = ratio * rho[..., 0, 1]
        out[..., 1, 0] = ratio * rho[..., 1, 0]
        return out

    def _ratio(self, c_b, c_a, t_a):
        if abs(c_a) < 1e-300:
            raise PoleError(f"integration grid point t={t_a} lies on a pole of the decay rate")
        return c_b / c_a

    def advance(self, rhos, k, omega):
        h = self.step
        ham = hamiltonian(omega, self.params)

        def drive(r):
            return -1j * (ham @ r - r @ ham)

        t0 = k * self.bin_width
        ts = t0 + h * np.arange(2 * self.substeps + 1) / 2.0
        amps = excited_amplitude(self.params, ts)
        for j in range(self.substeps):
            t = ts[2 * j]
            c0, c_half, c1 = amps[2 * j], amps[2 * j + 1], amps[2 * j + 2]
            e_half = self._ratio(c_half, c0, t)
            e_full = self._ratio(c1, c0, t)
            e_second = self._ratio(c1, c_half, t + 0.5 * h)
            k1 = drive(rhos)
            k2 = drive(self._flow(rhos + 0.5 * h * k1, e_half))
            k3 = drive(self._flow(rhos, e_half) + 0.5 * h * k2)
            k4 = drive(self._flow(rhos, e_full) + h * self._flow(k3, e_second))
            rhos = (self._flow(rhos, e_full)
                    + (h / 6.0) * (self._flow(k1, e_full) + 2.0 * self._flow(k2 + k3, e_second) + k4))
            rhos = 0.5 * (rhos + np.conj(np.swapaxes(rhos, -1, -2)))
            mins = _min_eigenvalue(self.reduced(rhos))
            if np.min(mins) < -POSITIVITY_TOL:
                raise PositivityError(
                    f"state lost positivity at t={t + h:.6g} (min eigenvalue {np.min(mins):.3g})")
        return rhos

    def reduced(self, rhos):
        return np.stack([rhos[..., 0, 0].real, rhos[..., 1, 1].real,
                         rhos[..., 0, 1].real, rhos[..., 0, 1].imag])

    def renormalize(self, rhos, tr):
        return rhos / tr[:, None, None]


class PairPropagator:
    """Propagates a pair of qubit states bin by bin under a piecewise-constant drive.

    Instances are reusable and cache per-amplitude bin maps (pseudomode
    engine), which makes repeated objective evaluations cheap.
    """

    def __init__(self, params, config):
        self.params = params
        self.config = config
        if config.engine == "pseudomode":
            self._engine = _PseudomodeEngine(params, config)
        else:
            self._engine = _TCLEngine(params, config)
        self.trace_corrections = 0

    def initial(self, rho1, rho2):
        return self._engine.initial(check_density_matrix(rho1), check_density_matrix(rho2))

    def reduced(self, state):
        """Reduced qubit coordinates ``(p00, p11, Re rho01, Im rho01)`` x pair."""
        return self._engine.reduced(state)

    def density_matrices(self, state):
        """The two reduced qubit density matrices of ``state``."""
        c = self._engine.reduced(state)
        out = np.empty((2, 2, 2), dtype=complex)
        out[:, 0, 0] = c[0]
        out[:, 1, 1] = c[1]
        out[:, 0, 1] = c[2] + 1j * c[3]
        out[:, 1, 0] = c[2] - 1j * c[3]
        return out

    def distance(self, coords):
        return float(_distance_from_coords(coords))

    def advance(self, state, k, omega):
        """Propagate ``state`` across bin ``k`` at constant amplitude ``omega``.

        Returns the new state and its reduced coordinates.
        """
        state = self._engine.advance(state, k, omega)
        coords = self._engine.reduced(state)
        tr = coords[0] + coords[1]
        if abs(tr[0] - 1.0) > TRACE_DRIFT_TOL or abs(tr[1] - 1.0) > TRACE_DRIFT_TOL:
            self.trace_corrections += 1
            logger.debug("renormalised trace drift %s after bin %d", tr - 1.0, k)
            state = self._engine.renormalize(state, tr)
            coords = self._engine.reduced(state)
        # scalar arithmetic: numpy call overhead dominates on two 2x2 states
        (p00a, p00b), (p11a, p11b), (rea, reb), (ima, imb) = coords.tolist()
        lowest = min(
            0.5 * (p00a + p11a) - math.sqrt(0.25 * (p00a - p11a) ** 2 + rea * rea + ima * ima),
            0.5 * (p00b + p11b) - math.sqrt(0.25 * (p00b - p11b) ** 2 + reb * reb + imb * imb))
        if lowest < -POSITIVITY_TOL:
            raise PositivityError(
                f"state lost positivity after bin {k} (min eigenvalue {lowest:.3g}); "
                "reduce the integrator step")
        return state, coords

    def run(self, rho1, rho2, amplitudes):
        """Propagate through all bins; returns the ``(N_c + 1, 4, 2)`` coordinate samples."""
        amplitudes = np.asarray(amplitudes, dtype=float)
        if amplitudes.shape != (self.config.control_bins,):
            raise ValueError(f"expected {self.config.control_bins} amplitudes, got {amplitudes.shape}")
        state = self.initial(rho1, rho2)
        samples = np.empty((amplitudes.shape[0] + 1, 4, 2))
        samples[0] = self._engine.reduced(state)
        for k, omega in enumerate(amplitudes):
            state, samples[k + 1] = self.advance(state, k, omega)
        return samples

    def record(self, samples, amplitudes):
        times = self.config.times
        return TrajectoryRecord.from_samples(times, _distance_from_coords(samples),
                                             decay_rate(self.params, times), amplitudes)

    def propagate(self, rho1, rho2, amplitudes):
        """Run all bins and return the sampled :class:`TrajectoryRecord`."""
        return self.record(self.run(rho1, rho2, amplitudes), amplitudes)


@functools.lru_cache(maxsize=16)
def get_propagator(params, config):
    """Shared :class:`PairPropagator` for a ``(params, config)`` pair."""
    return PairPropagator(params, config)


def propagate_pair(rho1, rho2, pulse, params, config):
    """Propagate two states under ``pulse`` and sample the BLP quantities.

    ``pulse`` may be a :class:`~backflow.pulse.Pulse` or a plain amplitude
    vector of length ``config.control_bins``.
    """
    amplitudes = getattr(pulse, "amplitudes", pulse)
    horizon = getattr(pulse, "horizon", config.horizon)
    if not np.isclose(horizon, config.horizon, rtol=1e-12, atol=0.0):
        raise ValueError(f"pulse horizon {horizon} does not match config horizon {config.horizon}")
    return get_propagator(params, config).propagate(rho1, rho2, amplitudes)
