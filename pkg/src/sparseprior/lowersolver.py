"""Newton-CG minimisation of the smoothed lower-level denoising energies.

Both models share one energy form over an image ``x``::

    E(x) = sum_i sum_pixels phi((A_i x)_p) + (w / 2) ||x - t||^2

* analysis:        ``x = u``, ``w = lam``,      ``t = f``,       phi = smoothed-abs
* synthesis-dual:  ``x = v``, ``w = 1 / lam``,  ``t = lam * f``, phi = smoothed-interval,
  with the denoised image recovered as ``u = f - v / lam``.

The Hessian ``sum_i A_i^T diag(phi''(A_i x)) A_i + w I`` is symmetric
positive definite because ``phi'' >= 0`` and ``w > 0``.
"""

import logging
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import penalty as pen
from .filterbank import FilterBank, adjoint_sum, responses
from .imagecore import ImageError, as_image, check_same_shape, psnr

log = logging.getLogger(__name__)

ANALYSIS = "analysis"
SYNTHESIS_DUAL = "synthesis-dual"


class ConvergenceError(RuntimeError):
    """An iterative solve hit its iteration cap (or stalled)."""

    def __init__(self, message, residual, x=None):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual
        self.x = x


@dataclass(frozen=True)
class SolverConfig:
    """Newton-CG settings.  ``grad_tol=None`` means ``1e-5 * sqrt(N_p)``."""

    newton_max_iter: int = 50
    grad_tol: float = None
    cg_tol: float = 1e-8
    cg_max_iter: int = 500
    shrink: float = 0.5
    sufficient_decrease: float = 1e-4
    max_backtracks: int = 60
    precondition: bool = True
    newton_variant: str = "primal-dual"
    continuation_start: float = 1.0
    continuation_factor: float = 10.0

    def __post_init__(self):
        if self.newton_max_iter < 1 or self.cg_max_iter < 1 or self.max_backtracks < 1:
            raise ValueError("iteration caps must be >= 1")
        if self.grad_tol is not None and not self.grad_tol > 0:
            raise ValueError("grad_tol must be positive")
        if not self.cg_tol > 0:
            raise ValueError("cg_tol must be positive")
        if self.newton_variant not in ("primal-dual", "exact"):
            raise ValueError(f"unknown newton_variant {self.newton_variant!r}")
        if not 0 < self.shrink < 1 or not 0 < self.sufficient_decrease < 1:
            raise ValueError("line search parameters must lie in (0, 1)")

    def gradient_tolerance(self, npix):
        return self.grad_tol if self.grad_tol is not None else 1e-5 * math.sqrt(npix)


# Higher caps for strong banks (large strength / eps ratio) on full-size images.
DENOISE_CONFIG = SolverConfig(newton_max_iter=200, cg_max_iter=5000)


@dataclass(frozen=True)
class LowerProblem:
    mode: str
    bank: object
    penalty: pen.Penalty
    lam: float
    f: np.ndarray

    def __post_init__(self):
        if self.mode not in (ANALYSIS, SYNTHESIS_DUAL):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not self.lam > 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")
        f = as_image(self.f)
        if f.shape[0] < self.bank.patch_side or f.shape[1] < self.bank.patch_side:
            raise ImageError(f"image {f.shape} smaller than patch side {self.bank.patch_side}")
        object.__setattr__(self, "f", f)

    @property
    def weight(self):
        return self.lam if self.mode == ANALYSIS else 1.0 / self.lam

    @property
    def target(self):
        return self.f if self.mode == ANALYSIS else self.lam * self.f


def _check(p, x):
    x = as_image(x)
    check_same_shape(x, p.f)
    return x


def energy(p, x):
    x = _check(p, x)
    r = x - p.target
    return float(np.sum(pen.value(p.penalty, responses(p.bank, x)))) + 0.5 * p.weight * float(np.sum(r * r))


def grad(p, x):
    x = _check(p, x)
    dphi = pen.deriv(p.penalty, responses(p.bank, x))
    return adjoint_sum(p.bank, dphi) + p.weight * (x - p.target)


def hessian_at(p, x):
    """Closure ``d -> H(x) d`` with ``phi''`` evaluated once at ``x``."""
    x = _check(p, x)
    curv = pen.deriv2(p.penalty, responses(p.bank, x))
    bank, w = p.bank, p.weight

    def hvp(d):
        return adjoint_sum(bank, curv * responses(bank, d)) + w * d

    return hvp


def hess_vec(p, x, d):
    d = _check(p, d)
    return hessian_at(p, x)(d)


def jacobi_diagonal(p, curv):
    """Approximate diagonal of the Hessian, used as a CG preconditioner.

    Exact in the interior; near the border, reflected taps landing on the
    same pixel are counted as separate squares.
    """
    sq = FilterBank.from_kernels(p.bank.kernels**2)
    return adjoint_sum(sq, curv) + p.weight


def cg_solve(hvp, rhs, cfg=None, tol=None, precond=None, raise_on_fail=True):
    """(Preconditioned) conjugate gradients for ``hvp(s) = rhs``, SPD operator.

    Stops when ``||hvp(s) - rhs|| <= tol * ||rhs||`` (``tol`` defaults to
    ``cfg.cg_tol``).  ``precond`` is an optional positive diagonal ``M``;
    the iteration then runs on ``M^-1 H``.  Returns ``(s, iterations)``.
    """
    cfg = cfg or SolverConfig()
    tol = cfg.cg_tol if tol is None else tol
    rhs = np.asarray(rhs, dtype=np.float64)
    x = np.zeros_like(rhs)
    r = rhs.copy()
    rr = float(np.vdot(r, r))
    target = (tol * math.sqrt(rr)) ** 2
    if rr <= target:
        return x, 0
    z = r / precond if precond is not None else r
    rz = float(np.vdot(r, z))
    d = z.copy()
    for k in range(1, cfg.cg_max_iter + 1):
        Hd = hvp(d)
        dHd = float(np.vdot(d, Hd))
        if dHd <= 0:
            raise ConvergenceError("CG met non-positive curvature", math.sqrt(rr), x)
        alpha = rz / dHd
        x += alpha * d
        r -= alpha * Hd
        rr = float(np.vdot(r, r))
        if rr <= target:
            return x, k
        z = r / precond if precond is not None else r
        rz_new = float(np.vdot(r, z))
        d = z + (rz_new / rz) * d
        rz = rz_new
    if raise_on_fail:
        raise ConvergenceError(f"CG did not converge in {cfg.cg_max_iter} iterations",
                               math.sqrt(rr), x)
    return x, cfg.cg_max_iter


def _penalty_diff(p, z, dz):
    """``phi(z + dz) - phi(z)`` elementwise without cancellation."""
    eps = p.epsilon
    z1 = z + dz
    if p.kind == pen.SMOOTHED_ABS:
        # sqrt(a) - sqrt(b) = (a - b) / (sqrt(a) + sqrt(b)),  a - b = dz (2 z + dz)
        return dz * (z + z1) / (np.sqrt(z1 * z1 + eps * eps) + np.sqrt(z * z + eps * eps))
    e0 = np.maximum(np.abs(z) - 1.0, 0.0)
    e1 = np.maximum(np.abs(z1) - 1.0, 0.0)
    return (e1 - e0) * (e1 + e0) / (2.0 * eps)


def _energy_change(p, Ax, Ad, r, d, t):
    """``E(x + t d) - E(x)`` given ``Ax``, ``Ad`` and residual ``r = x - target``."""
    dpen = float(np.sum(_penalty_diff(p.penalty, Ax, t * Ad)))
    dfid = 0.5 * p.weight * (2.0 * t * float(np.vdot(r, d)) + t * t * float(np.vdot(d, d)))
    return dpen + dfid


@dataclass
class SolveResult:
    x: np.ndarray
    energies: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    newton_iters: int = 0
    cg_iters: int = 0
    stage_energies: list = field(default_factory=list)
    total_newton_iters: int = 0
    total_cg_iters: int = 0


def _newton(p, cfg, x0):
    """Damped Newton-CG from ``x0``; returns a :class:`SolveResult` with history.

    Directions come from inexact Jacobi-preconditioned CG with forcing
    term ``max(cg_tol, min(0.5, sqrt(||g|| / ||g_0||)))``; steps are
    accepted by Armijo backtracking on exactly computed energy
    differences, so the recorded energies never increase.

    With ``newton_variant="primal-dual"`` and the smoothed-abs penalty the
    curvature ``phi''(z) = (1 - phi'(z) z / rho) / rho`` is replaced by
    ``(1 - w z / rho) / rho`` where ``rho = sqrt(z^2 + eps^2)`` and ``w`` is
    a dual estimate of ``phi'(z)`` kept in ``[-1, 1]`` (Chan-Golub-Mulet).
    The system stays SPD, the step is still a descent direction, and the
    fixed point is unchanged; plain Newton needs many more iterations as
    ``eps`` gets small relative to the filter responses.
    """
    x = _check(p, x0).copy()
    tol = cfg.gradient_tolerance(x.size)
    primal_dual = cfg.newton_variant == "primal-dual" and p.penalty.kind == pen.SMOOTHED_ABS
    eps = p.penalty.epsilon
    res = SolveResult(x=x)
    Ax = responses(p.bank, x)
    w = np.zeros_like(Ax) if primal_dual else None
    E = float(np.sum(pen.value(p.penalty, Ax))) + 0.5 * p.weight * float(np.sum((x - p.target) ** 2))
    g0norm = None
    for it in range(cfg.newton_max_iter + 1):
        g = adjoint_sum(p.bank, pen.deriv(p.penalty, Ax)) + p.weight * (x - p.target)
        gmax = float(np.max(np.abs(g)))
        res.energies.append(E)
        res.grad_norms.append(gmax)
        if gmax <= tol:
            res.x = x
            res.newton_iters = it
            return res
        if it == cfg.newton_max_iter:
            break
        gnorm = float(np.linalg.norm(g))
        g0norm = g0norm or gnorm
        forcing = max(cfg.cg_tol, min(0.5, math.sqrt(gnorm / g0norm)))
        if primal_dual:
            rho = np.sqrt(Ax * Ax + eps * eps)
            curv = (1.0 - w * Ax / rho) / rho
        else:
            curv = pen.deriv2(p.penalty, Ax)

        def hvp(d):
            return adjoint_sum(p.bank, curv * responses(p.bank, d)) + p.weight * d

        M = jacobi_diagonal(p, curv) if cfg.precondition else None
        d, k = cg_solve(hvp, -g, cfg, tol=forcing, precond=M, raise_on_fail=False)
        res.cg_iters += k
        slope = float(np.vdot(g, d))
        if not slope < 0:
            d, slope = -g, -gnorm * gnorm
        Ad = responses(p.bank, d)
        if primal_dual:
            dw = curv * Ad - (w - Ax / rho)
            with np.errstate(divide="ignore", invalid="ignore"):
                room = np.where(dw > 0, (1.0 - w) / dw, np.where(dw < 0, (-1.0 - w) / dw, np.inf))
            w = w + min(1.0, 0.99 * float(np.min(room))) * dw
        r = x - p.target
        t = 1.0
        for _ in range(cfg.max_backtracks):
            dE = _energy_change(p, Ax, Ad, r, d, t)
            if dE <= cfg.sufficient_decrease * t * slope:
                break
            t *= cfg.shrink
        else:
            raise ConvergenceError(f"line search failed at Newton iteration {it}", gmax, x)
        x = x + t * d
        Ax = responses(p.bank, x)
        E = E + dE
    res.x = x
    raise ConvergenceError(f"Newton did not reach grad_tol {tol:.1e} in {cfg.newton_max_iter} iterations",
                           res.grad_norms[-1], x)


def continuation_schedule(p, cfg):
    """Smoothing levels to pass through before the target one.

    Only the smoothed-interval penalty uses continuation: its curvature
    jumps between 0 and ``1/eps`` and Newton's active set otherwise
    thrashes for small ``eps``.  Earlier levels just provide the starting
    point of the next; the returned minimiser is that of the target.
    """
    eps = p.penalty.epsilon
    if p.penalty.kind != pen.SMOOTHED_INTERVAL or cfg.continuation_factor <= 1:
        return [eps]
    levels = []
    e = cfg.continuation_start
    while e > eps * cfg.continuation_factor ** 0.5:
        levels.append(e)
        e /= cfg.continuation_factor
    return levels + [eps]


def minimize_energy(p, cfg=None, x0=None):
    """Minimise the lower-level energy; :class:`SolveResult` of the final stage.

    ``x0`` defaults to ``f`` (analysis) or ``0`` (synthesis-dual).
    ``stage_energies`` on the result holds each continuation stage's
    energy history.
    """
    cfg = cfg or SolverConfig()
    if x0 is None:
        x0 = p.f if p.mode == ANALYSIS else np.zeros_like(p.f)
    levels = continuation_schedule(p, cfg)
    x, stages, newton, cg = x0, [], 0, 0
    for e in levels:
        stage = p if e == p.penalty.epsilon else replace(p, penalty=pen.Penalty(p.penalty.kind, e))
        res = _newton(stage, cfg, x)
        x = res.x
        stages.append(res.energies)
        newton += res.newton_iters
        cg += res.cg_iters
    res.stage_energies = stages
    res.total_newton_iters = newton
    res.total_cg_iters = cg
    return res


def solve(p, cfg=None, x0=None):
    """Minimiser of the lower-level energy."""
    return minimize_energy(p, cfg, x0).x


def denoise_analysis(f, bank, lam=1.0, penalty=None, cfg=None):
    """Analysis-prior denoising: ``argmin_u sum phi(A u) + lam/2 ||u - f||^2``."""
    penalty = penalty or pen.Penalty(pen.SMOOTHED_ABS)
    return solve(LowerProblem(ANALYSIS, bank, penalty, lam, f), cfg)


def solve_synthesis(f, dict_bank, lam=1.0, epsilon=None, cfg=None, restore_mean=True):
    """Synthesis-prior denoising through its dual; returns ``(u, v)`` with ``u = f - v / lam``.

    Atoms built on the mean-zero basis can only synthesise mean-zero
    images.  With ``restore_mean`` the dual is solved for the centred
    observation ``f - mean(f)``; its ``v`` (the noise estimate) is kept as
    is, so ``u = f - v / lam`` carries the mean of ``f``.
    """
    f = as_image(f)
    if not np.any(dict_bank.kernels):
        warnings.warn("all-zero dictionary: the dual minimiser is v = lam * f, a degenerate model",
                      stacklevel=2)
    penalty = pen.Penalty(pen.SMOOTHED_INTERVAL, epsilon)
    mean = float(np.mean(f)) if restore_mean else 0.0
    v = solve(LowerProblem(SYNTHESIS_DUAL, dict_bank, penalty, lam, f - mean), cfg)
    return f - v / lam, v


def denoise_synthesis(f, dict_bank, lam=1.0, epsilon=None, cfg=None, restore_mean=True):
    return solve_synthesis(f, dict_bank, lam, epsilon, cfg, restore_mean)[0]


def tune_strength(noisy, clean, denoise, lo=0.1, hi=10.0, grid=15, refine=12):
    """Strength ``s`` maximising ``psnr(denoise(noisy, s), clean)``.

    Log-spaced grid over ``[lo, hi]`` followed by golden-section refinement
    of ``log s`` around the best grid point.  Returns ``(s, psnr)``.
    """
    cache = {}

    def score(logs):
        if logs not in cache:
            cache[logs] = psnr(denoise(noisy, math.exp(logs)), clean)
        return cache[logs]

    pts = np.linspace(math.log(lo), math.log(hi), grid)
    scores = [score(float(q)) for q in pts]
    k = int(np.argmax(scores))
    a = float(pts[max(k - 1, 0)])
    b = float(pts[min(k + 1, grid - 1)])
    ratio = (math.sqrt(5) - 1) / 2
    c, d = b - ratio * (b - a), a + ratio * (b - a)
    for _ in range(refine):
        if score(c) >= score(d):
            b, d = d, c
            c = b - ratio * (b - a)
        else:
            a, c = c, d
            d = a + ratio * (b - a)
    best = max(cache, key=cache.get)
    return math.exp(best), cache[best]
