"""Limited-memory BFGS with a strong-Wolfe line search.

Deterministic and dependency-free apart from numpy, so that training runs
are bit-reproducible.  The line search follows the bracketing/zoom scheme
of Nocedal & Wright (Algorithms 3.5 and 3.6) with safeguarded cubic
interpolation.
"""

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

CONVERGED = "converged"
MAX_ITER = "max_iter"
LINE_SEARCH_FAILED = "line_search_failed"


class NonFiniteError(FloatingPointError):
    """The objective returned a non-finite value or gradient."""


@dataclass(frozen=True)
class LbfgsConfig:
    memory: int = 10
    max_iter: int = 100
    grad_tol: float = 1e-6
    c1: float = 1e-4
    c2: float = 0.9
    initial_step_norm: float = 1.0
    max_evals_per_search: int = 30
    curvature_eps: float = 1e-10

    def __post_init__(self):
        if self.memory < 1:
            raise ValueError("memory must be >= 1")
        if self.max_iter < 0:
            raise ValueError("max_iter must be >= 0")
        if not 0 < self.c1 < self.c2 < 1:
            raise ValueError("need 0 < c1 < c2 < 1")
        if not self.grad_tol > 0 or not self.initial_step_norm > 0:
            raise ValueError("grad_tol and initial_step_norm must be positive")


@dataclass
class LbfgsResult:
    x: np.ndarray
    f: float
    g: np.ndarray
    status: str
    iterations: int = 0
    evaluations: int = 0
    values: list = field(default_factory=list)       # f at x0 and after every accepted step
    grad_norms: list = field(default_factory=list)   # matching l-inf gradient norms
    steps: list = field(default_factory=list)        # accepted step lengths
    curvatures: list = field(default_factory=list)   # (s.y, |s| |y|) per accepted step
    skipped_pairs: int = 0
    message: str = ""


def two_loop(g, pairs):
    """Apply the L-BFGS inverse-Hessian approximation to ``g``."""
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * float(np.dot(s, q))
        q -= a * y
        alphas.append(a)
    if pairs:
        s, y, _ = pairs[-1]
        q *= float(np.dot(s, y)) / float(np.dot(y, y))
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * float(np.dot(y, q))
        q += (a - b) * s
    return q


def _cubic_min(a, fa, da, b, fb, db):
    """Minimiser of the cubic interpolating (a, fa, da) and (b, fb, db), or None."""
    if a == b:
        return None
    d1 = da + db - 3.0 * (fa - fb) / (a - b)
    disc = d1 * d1 - da * db
    if disc < 0 or not math.isfinite(disc):
        return None
    d2 = math.copysign(math.sqrt(disc), b - a)
    denom = db - da + 2.0 * d2
    if denom == 0:
        return None
    return b - (b - a) * (db + d2 - d1) / denom


def _interpolate(lo, flo, dlo, hi, fhi, dhi):
    t = _cubic_min(lo, flo, dlo, hi, fhi, dhi)
    left, right = min(lo, hi), max(lo, hi)
    margin = 0.1 * (right - left)
    if t is None or not (left + margin <= t <= right - margin):
        t = 0.5 * (lo + hi)
    return t


def wolfe_search(phi, f0, d0, alpha0, c1, c2, max_evals):
    """Strong-Wolfe step along a descent direction.

    ``phi(a)`` returns ``(f, slope, payload)``.  Returns
    ``(alpha, f, payload, evals)``; ``alpha`` is None on failure, in which
    case the best Armijo-satisfying trial (if any) is not used.
    """
    evals = 0
    a_prev, f_prev, d_prev = 0.0, f0, d0
    a = alpha0
    for i in range(max_evals):
        fa, da, pay = phi(a)
        evals += 1
        if fa > f0 + c1 * a * d0 or (i > 0 and fa >= f_prev):
            return _zoom(phi, f0, d0, c1, c2, a_prev, f_prev, d_prev, a, fa, da,
                         max_evals - evals, evals)
        if abs(da) <= -c2 * d0:
            return a, fa, pay, evals
        if da >= 0:
            return _zoom(phi, f0, d0, c1, c2, a, fa, da, a_prev, f_prev, d_prev,
                         max_evals - evals, evals)
        a_prev, f_prev, d_prev = a, fa, da
        a = 2.0 * a
    return None, None, None, evals


def _zoom(phi, f0, d0, c1, c2, lo, flo, dlo, hi, fhi, dhi, budget, evals):
    for _ in range(max(budget, 0)):
        a = _interpolate(lo, flo, dlo, hi, fhi, dhi)
        if a == lo or a == hi:
            break
        fa, da, pay = phi(a)
        evals += 1
        if fa > f0 + c1 * a * d0 or fa >= flo:
            hi, fhi, dhi = a, fa, da
        else:
            if abs(da) <= -c2 * d0:
                return a, fa, pay, evals
            if da * (hi - lo) >= 0:
                hi, fhi, dhi = lo, flo, dlo
            lo, flo, dlo = a, fa, da
    return None, None, None, evals


def _checked(fg, x):
    f, g = fg(x)
    f = float(f)
    g = np.asarray(g, dtype=np.float64).ravel()
    if not math.isfinite(f) or not np.all(np.isfinite(g)):
        raise NonFiniteError(f"objective returned non-finite value/gradient (f={f})")
    return f, g


def minimize(fg, x0, cfg=None, callback=None):
    """Minimise ``fg(x) -> (value, gradient)`` from flat ``x0``.

    Stops with status ``converged`` (l-inf gradient <= ``grad_tol``),
    ``max_iter`` or ``line_search_failed``; the returned point is always
    the last accepted iterate.  ``callback(k, x, f, g)`` runs after every
    accepted step.  Pairs with ``s.y <= curvature_eps |s| |y|`` are not
    stored.
    """
    cfg = cfg or LbfgsConfig()
    x = np.array(x0, dtype=np.float64).ravel()
    f, g = _checked(fg, x)
    res = LbfgsResult(x=x, f=f, g=g, status=MAX_ITER, evaluations=1)
    res.values.append(f)
    res.grad_norms.append(float(np.max(np.abs(g), initial=0.0)))
    pairs = deque(maxlen=cfg.memory)
    for k in range(cfg.max_iter + 1):
        if res.grad_norms[-1] <= cfg.grad_tol:
            res.status = CONVERGED
            break
        if k == cfg.max_iter:
            break
        d = -two_loop(g, list(pairs))
        slope = float(np.dot(g, d))
        if not slope < 0:
            pairs.clear()
            d = -g
            slope = -float(np.dot(g, g))
        alpha0 = 1.0
        if not pairs:
            alpha0 = min(1.0, cfg.initial_step_norm / float(np.linalg.norm(d)))

        def phi(a):
            xa = x + a * d
            fa, ga = _checked(fg, xa)
            return fa, float(np.dot(ga, d)), (xa, ga)

        alpha, f_new, pay, evals = wolfe_search(phi, f, slope, alpha0, cfg.c1, cfg.c2,
                                                cfg.max_evals_per_search)
        res.evaluations += evals
        if alpha is None:
            res.status = LINE_SEARCH_FAILED
            res.message = f"no strong-Wolfe step found at iteration {k}"
            break
        x_new, g_new = pay
        s = x_new - x
        y = g_new - g
        sy = float(np.dot(s, y))
        scale = float(np.linalg.norm(s) * np.linalg.norm(y))
        if sy > cfg.curvature_eps * scale:
            pairs.append((s, y, 1.0 / sy))
        else:
            res.skipped_pairs += 1
        x, f, g = x_new, f_new, g_new
        res.iterations = k + 1
        res.values.append(f)
        res.grad_norms.append(float(np.max(np.abs(g))))
        res.steps.append(alpha)
        res.curvatures.append((sy, scale))
        if callback is not None:
            callback(k + 1, x, f, g)
    res.x, res.f, res.g = x, f, g
    return res
