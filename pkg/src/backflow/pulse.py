"""Piecewise-constant control pulses."""

import csv
from dataclasses import dataclass, field

import numpy as np

from .validation import as_generator, check_amplitudes, check_bounds, check_scalar

DEFAULT_BOUNDS = (-5.0, 5.0)


@dataclass(frozen=True, eq=False)
class Pulse:
    """Control field held constant on ``len(amplitudes)`` equal bins of ``[0, horizon]``.

    The amplitude array is copied and made read-only so a Pulse can be shared
    between threads and optimizers without defensive copies.
    """

    amplitudes: np.ndarray
    horizon: float
    bounds: tuple = field(default=DEFAULT_BOUNDS)

    def __post_init__(self):
        bounds = check_bounds(self.bounds)
        amps = check_amplitudes(self.amplitudes, bounds=bounds)
        if amps.size == 0:
            raise ValueError("a pulse needs at least one bin")
        amps.setflags(write=False)
        object.__setattr__(self, "amplitudes", amps)
        object.__setattr__(self, "bounds", bounds)
        object.__setattr__(self, "horizon", check_scalar(self.horizon, "horizon", min_val=0.0,
                                                         include_min=False))

    @property
    def n_bins(self):
        return self.amplitudes.shape[0]

    @property
    def bin_width(self):
        return self.horizon / self.n_bins

    @property
    def bin_starts(self):
        return np.arange(self.n_bins) * self.bin_width

    def __len__(self):
        return self.n_bins

    def __eq__(self, other):
        if not isinstance(other, Pulse):
            return NotImplemented
        return (self.horizon == other.horizon and self.bounds == other.bounds
                and np.array_equal(self.amplitudes, other.amplitudes))

    __hash__ = None


def apply_increment(value, action, bounds):
    """Return ``clip(value + action, lo, hi)``."""
    lo, hi = bounds
    return float(min(max(value + action, lo), hi))


def sample(pulse, t):
    """Amplitude of ``pulse`` at time ``t``; ``t == horizon`` maps to the last bin."""
    t = float(t)
    if not 0.0 <= t <= pulse.horizon:
        raise ValueError(f"t={t} outside [0, {pulse.horizon}]")
    j = min(int(np.floor(t / pulse.bin_width)), pulse.n_bins - 1)
    return float(pulse.amplitudes[j])


def random_pulse(seed, bounds, n_bins, horizon):
    """Uniform i.i.d. amplitudes in ``bounds``; bit-identical for equal seeds."""
    n_bins = check_scalar(n_bins, "n_bins", min_val=1, integer=True)
    lo, hi = check_bounds(bounds)
    rng = as_generator(seed)
    amps = rng.uniform(lo, hi, size=n_bins)
    # uniform(lo, hi) may round to hi on a closed interval edge case
    return Pulse(np.clip(amps, lo, hi), horizon, (lo, hi))


def constant_pulse(value, n_bins, horizon, bounds=DEFAULT_BOUNDS):
    return Pulse(np.full(n_bins, float(value)), horizon, bounds)


def write_pulse_csv(pulse, path):
    """Write ``bin_index,t_start,amplitude`` rows with 17 significant digits."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["bin_index", "t_start", "amplitude"])
        for j, (t0, amp) in enumerate(zip(pulse.bin_starts, pulse.amplitudes)):
            writer.writerow([j, f"{t0:.17g}", f"{amp:.17g}"])


def read_pulse_csv(path, horizon, bounds=DEFAULT_BOUNDS):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    rows.sort(key=lambda r: int(r["bin_index"]))
    return Pulse(np.array([float(r["amplitude"]) for r in rows]), horizon, bounds)
