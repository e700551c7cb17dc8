"""Input validation helpers.

These mirror the ``sklearn.utils.validation`` style: every helper returns a
cleaned copy of its input or raises ``ValueError`` (usually a ``ConfigError``).
"""

import numbers

import numpy as np

from .exceptions import ConfigError


def check_scalar(value, name, *, min_val=None, max_val=None, include_min=True,
                 include_max=True, integer=False):
    """Validate a scalar hyperparameter and return it as float or int."""
    if isinstance(value, bool) or not isinstance(value, numbers.Real):
        raise ConfigError(f"{name} must be a real number, got {value!r}")
    if integer:
        if int(value) != value:
            raise ConfigError(f"{name} must be an integer, got {value!r}")
        value = int(value)
    else:
        value = float(value)
        if not np.isfinite(value):
            raise ConfigError(f"{name} must be finite, got {value!r}")
    if min_val is not None:
        if value < min_val or (not include_min and value == min_val):
            op = ">=" if include_min else ">"
            raise ConfigError(f"{name} must be {op} {min_val}, got {value!r}")
    if max_val is not None:
        if value > max_val or (not include_max and value == max_val):
            op = "<=" if include_max else "<"
            raise ConfigError(f"{name} must be {op} {max_val}, got {value!r}")
    return value


def check_bounds(bounds, *, strict=False):
    """Return ``(lo, hi)`` as floats, requiring ``lo <= hi`` (``lo < hi`` if strict)."""
    try:
        lo, hi = bounds
    except (TypeError, ValueError):
        raise ConfigError(f"bounds must be a pair (lo, hi), got {bounds!r}") from None
    lo = check_scalar(lo, "bounds[0]")
    hi = check_scalar(hi, "bounds[1]")
    if hi < lo or (strict and hi == lo):
        raise ConfigError(f"invalid bounds ({lo}, {hi})")
    return lo, hi


def check_amplitudes(x, *, n=None, bounds=None, name="amplitudes"):
    """Validate a 1-D finite float vector, optionally its length and box."""
    arr = np.array(x, dtype=float, copy=True)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if n is not None and arr.shape[0] != n:
        raise ValueError(f"{name} must have length {n}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if bounds is not None:
        lo, hi = bounds
        if np.any(arr < lo) or np.any(arr > hi):
            raise ValueError(f"{name} violate bounds [{lo}, {hi}]")
    return arr


def check_density_matrix(rho, *, atol=1e-9):
    """Validate a 2x2 density matrix and return it as a complex array.

    Checks Hermiticity (1e-12), unit trace and positivity (both to ``atol``).
    """
    rho = np.array(rho, dtype=complex)
    if rho.shape != (2, 2):
        raise ValueError(f"density matrix must be 2x2, got shape {rho.shape}")
    if not np.all(np.isfinite(rho)):
        raise ValueError("density matrix contains non-finite entries")
    if abs(rho[1, 0] - np.conj(rho[0, 1])) > 1e-12 or np.any(abs(np.diag(rho).imag) > 1e-12):
        raise ValueError("density matrix is not Hermitian")
    if abs(np.trace(rho).real - 1.0) > atol:
        raise ValueError(f"density matrix trace is {np.trace(rho).real}, expected 1")
    if np.linalg.eigvalsh(rho).min() < -atol:
        raise ValueError("density matrix is not positive semidefinite")
    return rho


def as_generator(seed):
    """Turn ``None``, an int or a Generator into a ``numpy.random.Generator``."""
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None or isinstance(seed, (numbers.Integral, np.random.SeedSequence)):
        return np.random.default_rng(seed)
    raise ConfigError(f"cannot build a random generator from {seed!r}")
