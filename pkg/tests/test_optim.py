import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stagedgp import optim
from stagedgp.errors import ArgumentError


def sphere(x):
    return float(np.sum(x**2))


def rosenbrock(x):
    return float(100 * (x[1] - x[0] ** 2) ** 2 + (1 - x[0]) ** 2)


def test_sphere():
    res = optim.minimize(sphere, optim.OptimConfig([-5, -5], [5, 5], max_evals=2000, seed=0))
    assert res.f_best < 1e-8


def test_rosenbrock():
    res = optim.minimize(rosenbrock, optim.OptimConfig([-2, -2], [2, 2], max_evals=5000, seed=0))
    np.testing.assert_allclose(res.x_best, [1, 1], atol=1e-2)


def test_deterministic():
    cfg = lambda: optim.OptimConfig([-2, -2], [2, 2], max_evals=300, seed=7)
    a, b = optim.minimize(rosenbrock, cfg()), optim.minimize(rosenbrock, cfg())
    np.testing.assert_array_equal(a.x_best, b.x_best)
    assert a.f_best == b.f_best and a.evals == b.evals


def test_budget_respected_and_trace_monotone():
    res = optim.minimize(rosenbrock, optim.OptimConfig([-2, -2], [2, 2], max_evals=250, seed=1))
    assert res.evals <= 250
    assert np.all(np.diff(res.best_trace) <= 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(0.1, 4))
def test_evaluations_stay_in_box(seed, lo, width):
    seen = []

    def f(x):
        seen.append(x.copy())
        return float(np.sum((x - 100.0) ** 2))  # optimum far outside the box pushes on the bounds

    lower, upper = np.array([lo, lo - 1]), np.array([lo + width, lo - 1 + width])
    optim.minimize(f, optim.OptimConfig(lower, upper, max_evals=200, seed=seed))
    pts = np.array(seen)
    assert np.all(pts >= lower) and np.all(pts <= upper)


def test_non_finite_objective_penalized():
    def f(x):
        return np.inf if x[0] > 0 else float((x[0] + 1) ** 2 + x[1] ** 2)

    res = optim.minimize(f, optim.OptimConfig([-3, -3], [3, 3], max_evals=1500, seed=2))
    np.testing.assert_allclose(res.x_best, [-1, 0], atol=1e-3)


def test_restarts_monotone_in_count():
    def rastrigin(x):
        return float(10 * x.size + np.sum(x**2 - 10 * np.cos(2 * np.pi * x)))

    cfg = optim.OptimConfig([-5.12] * 3, [5.12] * 3, max_evals=300, seed=3)
    vals = [optim.minimize_restarts(rastrigin, cfg, k).f_best for k in (1, 2, 4, 8)]
    assert np.all(np.diff(vals) <= 0)


def test_config_validation():
    with pytest.raises(ArgumentError):
        optim.OptimConfig([0, 1], [1, 1])
    with pytest.raises(ArgumentError):
        optim.OptimConfig([0], [1], max_evals=3)
    assert optim.default_population(2) == 6


def test_reflect_unit():
    u = np.array([-0.2, 0.5, 1.3, 2.4, -1.1])
    np.testing.assert_allclose(optim.reflect_unit(u), [0.2, 0.5, 0.7, 0.4, 0.9])
