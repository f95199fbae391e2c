import math

import numpy as np
import pytest

from sparseprior.penalty import (DEFAULT_EPSILON, SMOOTHED_ABS, SMOOTHED_INTERVAL, Penalty, deriv,
                                 deriv2, value)

ABS = Penalty(SMOOTHED_ABS)
BOX = Penalty(SMOOTHED_INTERVAL)


def test_defaults_and_validation():
    assert ABS.epsilon == DEFAULT_EPSILON[SMOOTHED_ABS] == 0.01
    assert BOX.epsilon == DEFAULT_EPSILON[SMOOTHED_INTERVAL] == 0.001
    with pytest.raises(ValueError):
        Penalty("huber")
    with pytest.raises(ValueError):
        Penalty(SMOOTHED_ABS, 0.0)
    with pytest.raises(ValueError):
        Penalty(SMOOTHED_INTERVAL, -1.0)


def test_values():
    assert value(ABS, 0.0) == pytest.approx(0.01, rel=1e-15)
    assert value(ABS, 0.01) == pytest.approx(0.01 * math.sqrt(2), rel=1e-15)
    assert value(Penalty(SMOOTHED_INTERVAL, 0.3), 0.5) == 0.0
    assert value(Penalty(SMOOTHED_INTERVAL, 1.0), 2.0) == pytest.approx(0.5)
    assert value(Penalty(SMOOTHED_INTERVAL, 1.0), -2.0) == pytest.approx(0.5)


def test_first_derivatives():
    assert deriv(ABS, 0.0) == 0.0
    assert abs(deriv(ABS, 1e6) - 1.0) < 1e-9
    assert abs(deriv(ABS, -1e6) + 1.0) < 1e-9
    box = Penalty(SMOOTHED_INTERVAL, 0.1)
    assert deriv(box, 0.7) == 0.0
    assert deriv(box, 1.5) == pytest.approx(5.0)
    assert deriv(box, -1.5) == pytest.approx(-5.0)


def test_second_derivatives():
    assert deriv2(ABS, 0.0) == pytest.approx(1 / 0.01)
    z = np.linspace(-50, 50, 1001)
    assert np.all(deriv2(ABS, z) > 0)
    assert deriv2(BOX, 0.9) == 0.0
    assert deriv2(Penalty(SMOOTHED_INTERVAL, 0.1), 1.1) == pytest.approx(10.0)
    assert np.all(deriv2(BOX, z) >= 0)


@pytest.mark.parametrize("eps", [0.01, 0.3])
def test_derivatives_match_finite_differences_abs(eps):
    p = Penalty(SMOOTHED_ABS, eps)
    z = np.random.default_rng(1).uniform(-3, 3, 200)
    h = 1e-5
    fd1 = (value(p, z + h) - value(p, z - h)) / (2 * h)
    fd2 = (deriv(p, z + h) - deriv(p, z - h)) / (2 * h)
    assert np.max(np.abs(fd1 - deriv(p, z)) / np.maximum(np.abs(deriv(p, z)), 1e-3)) < 1e-6
    # tiny curvatures far out are differences of nearly equal slopes: absolute floor
    assert np.all(np.abs(fd2 - deriv2(p, z)) <= 1e-6 * deriv2(p, z) + 1e-9)


def test_derivatives_match_finite_differences_interval():
    p = Penalty(SMOOTHED_INTERVAL, 0.05)
    z = np.random.default_rng(2).uniform(-4, 4, 200)
    z = z[np.abs(np.abs(z) - 1.0) > 1e-3]  # away from the kinks
    h = 1e-6
    fd1 = (value(p, z + h) - value(p, z - h)) / (2 * h)
    fd2 = (deriv(p, z + h) - deriv(p, z - h)) / (2 * h)
    assert np.max(np.abs(fd1 - deriv(p, z))) < 1e-6 * max(1.0, np.max(np.abs(deriv(p, z))))
    assert np.max(np.abs(fd2 - deriv2(p, z))) < 1e-3 * np.max(deriv2(p, z))


@pytest.mark.parametrize("p", [ABS, BOX, Penalty(SMOOTHED_ABS, 1.0)])
def test_convexity(p):
    rng = np.random.default_rng(3)
    z1, z2 = rng.uniform(-5, 5, (2, 100))
    t = rng.uniform(0, 1, 100)
    lhs = value(p, t * z1 + (1 - t) * z2)
    rhs = t * value(p, z1) + (1 - t) * value(p, z2)
    assert np.all(lhs <= rhs + 1e-12)


def test_elementwise_shapes():
    z = np.zeros((2, 3, 4))
    for f in (value, deriv, deriv2):
        assert f(ABS, z).shape == z.shape
        assert f(BOX, z).shape == z.shape
