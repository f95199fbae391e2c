import math

import numpy as np
import pytest

from sparseprior.lbfgs import (CONVERGED, LINE_SEARCH_FAILED, LbfgsConfig, NonFiniteError,
                               minimize, two_loop, wolfe_search)


def quadratic(diag, b):
    diag, b = np.asarray(diag, float), np.asarray(b, float)

    def fg(x):
        return 0.5 * float(x @ (diag * x)) - float(b @ x), diag * x - b

    return fg


def rosenbrock(x):
    a, b = x
    f = (1 - a) ** 2 + 100 * (b - a * a) ** 2
    g = np.array([-2 * (1 - a) - 400 * a * (b - a * a), 200 * (b - a * a)])
    return f, g


def test_quadratic_diag_1_10():
    res = minimize(quadratic([1.0, 10.0], [1.0, 1.0]), np.zeros(2), LbfgsConfig(grad_tol=1e-10))
    assert res.status == CONVERGED
    assert res.iterations <= 20
    assert np.allclose(res.x, [1.0, 0.1], atol=1e-8)


def test_rosenbrock():
    res = minimize(rosenbrock, np.array([-1.2, 1.0]), LbfgsConfig(max_iter=200, grad_tol=1e-9))
    assert res.status == CONVERGED
    assert res.f < 1e-8
    assert np.allclose(res.x, [1.0, 1.0], atol=1e-4)


def test_stationary_start_takes_no_step():
    calls = []

    def fg(x):
        calls.append(1)
        return 3.0, np.zeros_like(x)

    res = minimize(fg, np.ones(4))
    assert res.status == CONVERGED and res.iterations == 0 and len(calls) == 1
    assert np.array_equal(res.x, np.ones(4))


def test_history_invariants_on_random_quadratic():
    rng = np.random.default_rng(0)
    diag = rng.uniform(0.1, 50.0, 30)
    cfg = LbfgsConfig(memory=5, max_iter=200, grad_tol=1e-6)
    res = minimize(quadratic(diag, rng.normal(size=30)), rng.normal(size=30), cfg)
    assert res.status == CONVERGED
    assert all(b < a for a, b in zip(res.values, res.values[1:]))
    assert all(sy > 0 for sy, _ in res.curvatures)
    assert len(res.values) == len(res.grad_norms) == res.iterations + 1 == len(res.steps) + 1


def test_strong_wolfe_conditions_hold_on_accepted_steps():
    rng = np.random.default_rng(1)
    diag = rng.uniform(0.5, 5.0, 10)
    fg = quadratic(diag, rng.normal(size=10))
    x = rng.normal(size=10)
    f0, g0 = fg(x)
    d = -g0
    d0 = float(g0 @ d)

    def phi(a):
        f, g = fg(x + a * d)
        return f, float(g @ d), None

    alpha, fa, _, _ = wolfe_search(phi, f0, d0, 1.0, 1e-4, 0.9, 30)
    _, slope, _ = phi(alpha)
    assert fa <= f0 + 1e-4 * alpha * d0
    assert abs(slope) <= 0.9 * abs(d0)


def test_unbounded_memory_finishes_in_dimension_steps():
    # exact line searches on a quadratic make L-BFGS with full memory
    # coincide with conjugate gradients
    rng = np.random.default_rng(2)
    n = 8
    diag = rng.uniform(1.0, 20.0, n)
    cfg = LbfgsConfig(memory=100, max_iter=50, grad_tol=1e-8, c1=1e-12, c2=1e-10,
                      max_evals_per_search=100)
    res = minimize(quadratic(diag, np.ones(n)), np.zeros(n), cfg)
    assert res.status == CONVERGED
    assert res.iterations <= n


def test_two_loop_without_pairs_is_identity():
    g = np.arange(5.0)
    assert np.array_equal(two_loop(g, []), g)


def test_two_loop_single_pair_satisfies_secant():
    s = np.array([1.0, 2.0, -1.0])
    y = np.array([2.0, 3.0, 0.5])
    h_y = two_loop(y, [(s, y, 1.0 / float(s @ y))])
    assert np.allclose(h_y, s)


def test_non_finite_objective_raises():
    def fg(x):
        return (math.nan if x[0] > 0.5 else float(x @ x)), 2 * x - 10

    with pytest.raises(NonFiniteError):
        minimize(fg, np.zeros(2), LbfgsConfig(initial_step_norm=100.0))


def test_line_search_failure_returns_last_iterate():
    # gradient inconsistent with the value: no step satisfies the conditions
    def fg(x):
        return float(x @ x), -np.ones_like(x)

    res = minimize(fg, np.ones(3), LbfgsConfig(max_evals_per_search=10))
    assert res.status == LINE_SEARCH_FAILED
    assert np.array_equal(res.x, np.ones(3))


def test_callback_sees_every_accepted_step():
    seen = []
    res = minimize(quadratic([1.0, 4.0], [1.0, 2.0]), np.zeros(2), LbfgsConfig(grad_tol=1e-10),
                   callback=lambda k, x, f, g: seen.append((k, f)))
    assert [k for k, _ in seen] == list(range(1, res.iterations + 1))
    assert [f for _, f in seen] == res.values[1:]


def test_max_iter_zero():
    res = minimize(quadratic([1.0], [1.0]), np.zeros(1), LbfgsConfig(max_iter=0))
    assert res.iterations == 0 and res.status == "max_iter"


@pytest.mark.parametrize("kwargs", [dict(memory=0), dict(max_iter=-1), dict(c1=0.9, c2=0.5),
                                    dict(c2=1.0), dict(grad_tol=0.0), dict(initial_step_norm=-1.0)])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        LbfgsConfig(**kwargs)
