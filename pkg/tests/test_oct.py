import json

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from backflow.dynamics import KET0, KET1, PropagationConfig, ReservoirParams, propagate_pair
from backflow.exceptions import DivergenceError
from backflow.oct import (BackflowObjective, LBFGSBPulseOptimizer, OCTConfig, ObjectiveHistory,
                          PowellPulseOptimizer, fd_gradient, feasible_interval, lbfgsb_optimize,
                          line_search_1d, powell_optimize)
from backflow.pulse import random_pulse

SMALL = PropagationConfig(horizon=2.0, control_bins=8, substeps=10)
CURVATURE = np.array([1.0, 2.0, 0.5, 3.0, 1.5])
CENTER = np.array([0.3, -1.2, 2.0, 0.7, -0.4])


def quadratic(x):
    return -float(np.sum(CURVATURE * (x - CENTER) ** 2))


def quadratic_grad(x):
    return -2.0 * CURVATURE * (x - CENTER)


class Counter:
    def __init__(self, func):
        self.func = func
        self.calls = 0

    def __call__(self, x):
        self.calls += 1
        return self.func(x)


# objective


def test_objective_zero_pulse_markovian_is_zero():
    obj = BackflowObjective(ReservoirParams(0.3, 1.0), PropagationConfig())
    assert obj(np.zeros(70)) < 1e-12


def test_objective_zero_pulse_strong_coupling_positive():
    obj = BackflowObjective()
    value = obj(np.zeros(70))
    rec = propagate_pair(KET1, KET0, np.zeros(70), ReservoirParams(), PropagationConfig())
    assert value > 0.1
    assert value == rec.n_total


def test_objective_is_deterministic():
    x = random_pulse(0, (-5, 5), 70, 7.0).amplitudes
    assert BackflowObjective()(x) == BackflowObjective()(x)


def test_objective_prefix_reuse_is_bit_identical(rng):
    obj = BackflowObjective()
    params, config = ReservoirParams(), PropagationConfig()
    x = random_pulse(1, (-5, 5), 70, 7.0).amplitudes.copy()
    for _ in range(15):
        j = rng.integers(0, 70)
        x[j:] = np.clip(x[j:] + rng.normal(size=70 - j), -5, 5)
        expected = propagate_pair(KET1, KET0, x, params, config).n_total
        assert obj(x) == expected


def test_objective_rejects_bad_vectors():
    obj = BackflowObjective()
    with pytest.raises(ValueError):
        obj(np.zeros(69))
    with pytest.raises(ValueError):
        obj(np.full(70, 6.0))


# line search


def test_line_search_finds_interior_maximum():
    lam, val = line_search_1d(lambda t: -(t - 0.3) ** 2, (-1.0, 2.0))
    assert lam == pytest.approx(0.3, abs=1e-6)
    assert val == pytest.approx(0.0, abs=1e-12)


def test_line_search_stays_inside_interval():
    seen = []

    def phi(t):
        seen.append(t)
        return t

    lam, _ = line_search_1d(phi, (-0.5, 1.5))
    assert lam == 1.5
    assert min(seen) >= -0.5 and max(seen) <= 1.5


def test_line_search_tolerance_sets_probe_count():
    counter = Counter(lambda t: -(t - 0.1) ** 2)
    line_search_1d(counter, (0.0, 1.0), tol=1e-4)
    # golden-section bracket shrinks by 0.618 per probe
    assert counter.calls <= int(np.ceil(np.log(1e-4) / np.log(0.618))) + 5


def test_line_search_degenerate_interval():
    assert line_search_1d(lambda t: 5.0, (0.0, 0.0), f0=5.0) == (0.0, 5.0)
    with pytest.raises(ValueError):
        line_search_1d(lambda t: t, (1.0, 0.0))


def test_line_search_never_below_reference():
    lam, val = line_search_1d(lambda t: -abs(t) - 1.0, (-1.0, 1.0), f0=-0.5)
    assert (lam, val) == (0.0, -0.5)


def test_feasible_interval():
    lo, hi = feasible_interval(np.array([0.0, 4.0]), np.array([1.0, 1.0]), (-5, 5))
    assert (lo, hi) == (-5.0, 1.0)
    assert feasible_interval(np.zeros(2), np.zeros(2), (-5, 5)) == (0.0, 0.0)


# Powell


def test_powell_separable_quadratic():
    x, history = powell_optimize(lambda z: -(z[0] - 1) ** 2 - (z[1] - 2) ** 2, np.zeros(2),
                                 (-5, 5))
    assert np.max(np.abs(x - [1.0, 2.0])) < 1e-6
    assert np.all(np.diff(history.values) >= 0)


def test_powell_one_dimensional():
    x, _ = powell_optimize(lambda z: -(z[0] - 4.5) ** 2, np.zeros(1), (-2, 3))
    assert x[0] == pytest.approx(3.0, abs=1e-12)


def test_powell_coupled_quadratic():
    a = np.array([[2.0, 0.8, 0.0], [0.8, 1.5, 0.3], [0.0, 0.3, 1.0]])
    c = np.array([0.5, -0.25, 1.0])
    x, _ = powell_optimize(lambda z: -float((z - c) @ a @ (z - c)), np.zeros(3), (-5, 5),
                           OCTConfig(max_outer_iterations=50))
    assert np.max(np.abs(x - c)) < 1e-6


def test_powell_monotone_on_real_objective():
    obj = BackflowObjective(ReservoirParams(), SMALL)
    for seed in range(10):
        x0 = random_pulse(seed, (-5, 5), 8, 2.0).amplitudes
        x, history = powell_optimize(obj, x0, (-5, 5), OCTConfig(max_outer_iterations=2))
        assert np.all(np.diff(history.values) >= 0)
        assert history.values[-1] >= history.values[0]
        assert obj(x) == history.values[-1]


def test_powell_counts_evaluations():
    counter = Counter(lambda z: -(z[0] - 1) ** 2)
    _, history = powell_optimize(counter, np.zeros(1), (-5, 5))
    assert history.evaluations[-1] == counter.calls


# finite differences


def test_fd_gradient_linear():
    grad = fd_gradient(lambda z: float(np.dot([1.0, -2.0, 3.0], z)), np.zeros(3), 1e-6)
    assert np.allclose(grad, [1.0, -2.0, 3.0], atol=1e-8)


def test_fd_gradient_clipped_component_is_zero():
    grad = fd_gradient(lambda z: float(np.sum(z)), np.array([5.0, 0.0]), 1e-3, bounds=(-5, 5))
    assert grad[0] == 0.0
    assert grad[1] == pytest.approx(1.0)


def test_fd_gradient_evaluation_count():
    counter = Counter(lambda z: float(np.sum(z ** 2)))
    fd_gradient(counter, np.ones(7), 1e-4)
    assert counter.calls == 8
    counter = Counter(lambda z: float(np.sum(z ** 2)))
    fd_gradient(counter, np.ones(7), 1e-4, f0=7.0)
    assert counter.calls == 7


# L-BFGS-B


def test_lbfgsb_quadratic_with_analytic_gradient():
    x, history = lbfgsb_optimize(quadratic, np.zeros(5), (-10, 10), gradient=quadratic_grad)
    assert np.max(np.abs(x - CENTER)) < 1e-6
    assert history.iterations[-1] <= 50


def test_lbfgsb_quadratic_with_finite_differences():
    x, history = lbfgsb_optimize(quadratic, np.zeros(5), (-10, 10), OCTConfig(fd_step=1e-8))
    assert np.max(np.abs(x - CENTER)) < 1e-6
    assert history.iterations[-1] <= 50


def test_lbfgsb_interior_box_matches_unconstrained():
    config = OCTConfig(initial_step=1.0)
    xb, hb = lbfgsb_optimize(quadratic, np.zeros(5), (-50, 50), config, gradient=quadratic_grad)
    xu, hu = lbfgsb_optimize(quadratic, np.zeros(5), None, config, gradient=quadratic_grad)
    assert np.array_equal(xb, xu)
    assert hb.values == hu.values


def test_lbfgsb_active_bounds():
    center = np.array([3.0, -4.0, 0.5])
    x, _ = lbfgsb_optimize(lambda z: -float(np.sum((z - center) ** 2)), np.zeros(3), (-1, 1),
                           gradient=lambda z: -2.0 * (z - center))
    assert x[0] == 1.0 and x[1] == -1.0
    assert x[2] == pytest.approx(0.5, abs=1e-8)


def test_lbfgsb_iterates_stay_feasible():
    obj = BackflowObjective(ReservoirParams(), SMALL)
    x0 = random_pulse(3, (-5, 5), 8, 2.0).amplitudes
    _, history = lbfgsb_optimize(obj, x0, (-5, 5), OCTConfig(max_iterations=15))
    for x in history.amplitudes:
        assert np.all(x >= -5.0) and np.all(x <= 5.0)
    assert np.all(np.diff(history.values) >= 0)


def test_lbfgsb_evaluation_budget_accounting():
    counter = Counter(quadratic)
    _, history = lbfgsb_optimize(counter, np.zeros(5), (-10, 10), OCTConfig(max_iterations=5))
    assert history.evaluations[-1] == counter.calls


def test_optimizers_reject_non_finite_objective():
    with pytest.raises(DivergenceError):
        lbfgsb_optimize(lambda z: float("nan"), np.zeros(2), (-1, 1))
    with pytest.raises(DivergenceError):
        powell_optimize(lambda z: float("inf"), np.zeros(2), (-1, 1))


def test_optimizers_reject_infeasible_start():
    with pytest.raises(ValueError):
        lbfgsb_optimize(quadratic, np.full(5, 20.0), (-10, 10))
    with pytest.raises(ValueError):
        powell_optimize(quadratic, np.full(5, 20.0), (-10, 10))


def test_oct_config_validation():
    with pytest.raises(ValueError):
        OCTConfig(max_outer_iterations=0)
    with pytest.raises(ValueError):
        OCTConfig(fd_step=-1.0)
    assert OCTConfig().resolved_fd_step((-5, 5)) == pytest.approx(0.01)


# history and estimators


def test_objective_history_files(tmp_path):
    history = ObjectiveHistory()
    history.append(0, 0.1, np.zeros(2), 1)
    history.append(1, 0.2, np.ones(2), 9)
    history.termination_reason = "ftol"
    history.write_csv(tmp_path / "h.csv")
    history.write_json(tmp_path / "h.json")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines == ["iteration,n_tot,evals", "0,0.10000000000000001,1", "1,0.20000000000000001,9"]
    summary = json.loads((tmp_path / "h.json").read_text())
    assert summary["termination_reason"] == "ftol"
    assert summary["final_amplitudes"] == [1.0, 1.0]
    assert history.best_value == 0.2


def test_powell_estimator_api():
    est = PowellPulseOptimizer(horizon=2.0, control_bins=8, substeps=10, max_outer_iterations=2)
    with pytest.raises(NotFittedError):
        est.predict([0.0])
    assert clone(est).get_params() == est.get_params()
    est.set_params(max_outer_iterations=1)
    est.fit()
    assert est.n_total_ >= est.initial_n_total_
    assert est.score() == est.n_total_
    assert est.predict([0.0, 1.99]).shape == (2,)
    assert est.trajectory().n_total == est.n_total_


def test_lbfgsb_estimator_random_init_is_reproducible():
    kwargs = dict(horizon=2.0, control_bins=8, substeps=10, max_iterations=5, init="random",
                  random_state=7)
    a = LBFGSBPulseOptimizer(**kwargs).fit()
    b = LBFGSBPulseOptimizer(**kwargs).fit()
    assert a.pulse_ == b.pulse_
    assert a.history_.values == b.history_.values
