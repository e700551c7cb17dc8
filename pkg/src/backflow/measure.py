"""Trace distance and the BLP non-Markovianity functionals.

The total measure is discretised as a left Riemann sum over control-bin
boundaries, so that it coincides with the summed RL reward::

    N_tot = sum_k max(0, D[k+1] - D[k])
"""

from dataclasses import dataclass

import numpy as np


def trace_distance(rho1, rho2):
    """Half the trace norm of ``rho1 - rho2`` for 2x2 density matrices.

    Uses the closed form for a traceless Hermitian difference with diagonal
    ``(a, -a)`` and off-diagonal ``b``: ``sqrt(a**2 + |b|**2)``.
    """
    delta = np.asarray(rho1, dtype=complex) - np.asarray(rho2, dtype=complex)
    a = 0.5 * (delta[0, 0].real - delta[1, 1].real)
    return float(np.sqrt(a * a + abs(delta[0, 1]) ** 2))


def _check_distances(distances, dt):
    d = np.asarray(distances, dtype=float)
    if d.ndim != 1 or d.shape[0] < 2:
        raise ValueError("need at least two distance samples")
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    return d


def n_loc_series(distances, dt):
    """Instantaneous rates ``max(0, (D[k+1] - D[k]) / dt)``, one per bin."""
    d = _check_distances(distances, dt)
    return np.maximum(0.0, np.diff(d) / dt)


def n_total(distances, dt):
    """Total backflow: the sum of positive increments of ``distances``.

    ``dt`` only participates in argument validation; the increments already
    carry the factor ``dt`` of the Riemann sum.
    """
    d = _check_distances(distances, dt)
    return float(np.sum(np.maximum(0.0, np.diff(d))))


@dataclass(frozen=True, eq=False)
class TrajectoryRecord:
    """Samples of a propagated state pair at the ``N_c + 1`` bin boundaries.

    Attributes
    ----------
    times, distances, ddot, gamma_samples, omega_samples, n_loc : ndarray
        One entry per bin boundary.  ``ddot[k]`` is the forward difference
        ``(D[k+1] - D[k]) / dt``; the last sample repeats the previous one.
        ``omega_samples[k]`` is the amplitude of the bin starting at
        ``times[k]`` (the last bin for the final sample).
    n_total : float
        Left Riemann sum of ``n_loc`` over the ``N_c`` bins.
    """

    times: np.ndarray
    distances: np.ndarray
    ddot: np.ndarray
    gamma_samples: np.ndarray
    omega_samples: np.ndarray
    n_loc: np.ndarray
    n_total: float

    @property
    def dt(self):
        return float(self.times[1] - self.times[0])

    @property
    def n_bins(self):
        return self.times.shape[0] - 1

    @classmethod
    def from_samples(cls, times, distances, gamma_samples, amplitudes):
        times = np.asarray(times, dtype=float)
        distances = np.asarray(distances, dtype=float)
        amplitudes = np.asarray(amplitudes, dtype=float)
        dt = float(times[1] - times[0])
        slopes = np.diff(distances) / dt
        ddot = np.append(slopes, slopes[-1])
        omega = np.append(amplitudes, amplitudes[-1])
        return cls(
            times=times,
            distances=distances,
            ddot=ddot,
            gamma_samples=np.asarray(gamma_samples, dtype=float),
            omega_samples=omega,
            n_loc=np.maximum(0.0, ddot),
            n_total=n_total(distances, dt),
        )

    def rows(self):
        """Yield ``(k, t, Omega, D, Ddot, gamma, n_loc)`` tuples for CSV export."""
        for k in range(self.times.shape[0]):
            yield (k, self.times[k], self.omega_samples[k], self.distances[k],
                   self.ddot[k], self.gamma_samples[k], self.n_loc[k])
