"""Smooth convex penalties applied elementwise to filter responses.

``smoothed-abs``       phi(z) = sqrt(z^2 + eps^2)            (smooth |z|)
``smoothed-interval``  phi(z) = max(|z| - 1, 0)^2 / (2 eps)   (smooth indicator of [-1, 1])

All functions accept scalars or arrays.
"""

from dataclasses import dataclass

import numpy as np

SMOOTHED_ABS = "smoothed-abs"
SMOOTHED_INTERVAL = "smoothed-interval"
KINDS = (SMOOTHED_ABS, SMOOTHED_INTERVAL)

DEFAULT_EPSILON = {SMOOTHED_ABS: 0.01, SMOOTHED_INTERVAL: 0.001}


@dataclass(frozen=True)
class Penalty:
    kind: str
    epsilon: float = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown penalty kind {self.kind!r}; choose from {KINDS}")
        if self.epsilon is None:
            object.__setattr__(self, "epsilon", DEFAULT_EPSILON[self.kind])
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")


def value(p, z):
    z = np.asarray(z, dtype=np.float64)
    eps = p.epsilon
    if p.kind == SMOOTHED_ABS:
        return np.sqrt(z * z + eps * eps)
    excess = np.maximum(np.abs(z) - 1.0, 0.0)
    return excess * excess / (2.0 * eps)


def deriv(p, z):
    z = np.asarray(z, dtype=np.float64)
    eps = p.epsilon
    if p.kind == SMOOTHED_ABS:
        return z / np.sqrt(z * z + eps * eps)
    return np.sign(z) * np.maximum(np.abs(z) - 1.0, 0.0) / eps


def deriv2(p, z):
    """Second derivative; for ``smoothed-interval`` the a.e. value (0 at |z| = 1)."""
    z = np.asarray(z, dtype=np.float64)
    eps = p.epsilon
    if p.kind == SMOOTHED_ABS:
        r = z * z + eps * eps
        return eps * eps / (r * np.sqrt(r))
    return np.where(np.abs(z) > 1.0, 1.0 / eps, 0.0)
