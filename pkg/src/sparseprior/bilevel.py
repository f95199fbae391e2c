"""Bi-level learning of filter-bank coefficients by implicit differentiation.

The upper level minimises ``sum_k 1/2 ||x_k(theta) - g_k||^2`` over the
basis coefficients ``theta``; the lower level ``x_k(theta)`` is the
minimiser of a smoothed denoising energy (see :mod:`.lowersolver`).

Differentiating the stationarity condition
``G(x, theta) = sum_i A_i^T phi'(A_i x) + w (x - t) = 0`` gives, for
``A_i = s * sum_j theta_ij B_j``::

    dL/dtheta_ij = -s * [ <phi'(A_i x), B_j p> + <phi''(A_i x) * B_j x, A_i p> ]
    H p = dL/dx,   H = sum_i A_i^T diag(phi''(A_i x)) A_i + w I

so one CG solve per sample serves every ``(i, j)``; the inner products
reduce to two ``(n, N_p) x (N_p, m)`` matrix products.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import lbfgs
from . import penalty as pen
from .filterbank import (assemble, dct_mean_zero_basis, dictionary_bank, patch_stack, project,
                         responses)
from .imagecore import TrainingSample, add_gaussian_noise, check_same_shape
from .lowersolver import (ANALYSIS, SYNTHESIS_DUAL, LowerProblem, SolverConfig, cg_solve,
                          hessian_at, jacobi_diagonal, minimize_energy)
from .rng import Xoshiro256, derive_seed

log = logging.getLogger(__name__)

SYNTHESIS = "synthesis"
MODES = (ANALYSIS, SYNTHESIS)

# lower-level accuracy for finite-difference checks
TIGHT = SolverConfig(grad_tol=1e-10, cg_tol=1e-12, newton_max_iter=200, cg_max_iter=5000)


class SampleError(RuntimeError):
    def __init__(self, sample_id, cause):
        super().__init__(f"sample {sample_id}: {cause}")
        self.sample_id = sample_id
        self.cause = cause


def loss(u_star, g):
    """Half squared Euclidean distance."""
    check_same_shape(u_star, g)
    r = u_star - g
    return 0.5 * float(np.vdot(r, r))


@dataclass
class SampleGradient:
    loss: float
    grad_theta: np.ndarray
    u_star: np.ndarray
    x_star: np.ndarray = None  # lower-level variable (u or v), reused as warm start


@dataclass(frozen=True)
class ModelSpec:
    """Everything but theta that defines a lower-level model."""

    mode: str = ANALYSIS
    patch_side: int = 3
    penalty: pen.Penalty = None
    lam: float = 1.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        kind = pen.SMOOTHED_ABS if self.mode == ANALYSIS else pen.SMOOTHED_INTERVAL
        if self.penalty is None:
            object.__setattr__(self, "penalty", pen.Penalty(kind))
        elif self.penalty.kind != kind:
            raise ValueError(f"{self.mode} mode requires the {kind} penalty")
        if not self.lam > 0:
            raise ValueError("lambda must be positive")

    def bank(self, basis, theta):
        if self.mode == ANALYSIS:
            return assemble(basis, theta)
        return dictionary_bank(basis, theta)


def _kernel_gradient(bank, penalty, x, p):
    """``-[phi'(A x) S_p^T + (phi''(A x) * A p) S_x^T]``: dL/dkernels, shape ``(n, m)``."""
    Ax = responses(bank, x).reshape(bank.n, -1)
    Ap = responses(bank, p).reshape(bank.n, -1)
    dphi = pen.deriv(penalty, Ax)
    curv = pen.deriv2(penalty, Ax)
    Sx = patch_stack(x, bank.patch_side)
    Sp = patch_stack(p, bank.patch_side)
    return -(dphi @ Sp.T + (curv * Ap) @ Sx.T)


def _adjoint_state(problem, x, rhs, cfg):
    hvp = hessian_at(problem, x)
    curv = pen.deriv2(problem.penalty, responses(problem.bank, x))
    M = jacobi_diagonal(problem, curv) if cfg.precondition else None
    p, _ = cg_solve(hvp, rhs, cfg, precond=M)
    return p


def implicit_gradient(sample, bank, basis, penalty=None, cfg=None, lam=1.0, x0=None):
    """Loss and d(loss)/d(theta) for the analysis model on one sample."""
    penalty = penalty or pen.Penalty(pen.SMOOTHED_ABS)
    cfg = cfg or SolverConfig()
    problem = LowerProblem(ANALYSIS, bank, penalty, lam, sample.noisy)
    u = minimize_energy(problem, cfg, x0).x
    p = _adjoint_state(problem, u, u - sample.clean, cfg)
    GK = _kernel_gradient(bank, penalty, u, p)
    grad = bank.scale * (GK @ basis.matrix.T)
    return SampleGradient(loss(u, sample.clean), grad, u, u)


def implicit_gradient_synthesis(sample, dict_bank, basis, epsilon=None, lam=1.0, cfg=None,
                                x0=None, restore_mean=True):
    """Loss and d(loss)/d(theta) for the synthesis model, through its dual.

    The dual variable ``v`` solves the smoothed problem for the centred
    observation (see :func:`.lowersolver.solve_synthesis`); ``u = f - v/lam``
    up to the restored mean, so ``dL/dv = -(u - g) / lam``.
    """
    penalty = pen.Penalty(pen.SMOOTHED_INTERVAL, epsilon)
    cfg = cfg or SolverConfig()
    f = sample.noisy
    mean = float(np.mean(f)) if restore_mean else 0.0
    problem = LowerProblem(SYNTHESIS_DUAL, dict_bank, penalty, lam, f - mean)
    v = minimize_energy(problem, cfg, x0).x
    u = f - v / lam
    p = _adjoint_state(problem, v, -(u - sample.clean) / lam, cfg)
    GK = _kernel_gradient(dict_bank, penalty, v, p)
    grad = dict_bank.scale * (GK @ basis.matrix.T)
    return SampleGradient(loss(u, sample.clean), grad, u, v)


def sample_gradient(spec, basis, theta, sample, cfg, x0=None):
    bank = spec.bank(basis, theta)
    if spec.mode == ANALYSIS:
        return implicit_gradient(sample, bank, basis, spec.penalty, cfg, spec.lam, x0)
    return implicit_gradient_synthesis(sample, bank, basis, spec.penalty.epsilon, spec.lam, cfg, x0)


def sample_loss(spec, basis, theta, sample, cfg):
    """Loss only, from a fresh cold-started solve."""
    bank = spec.bank(basis, theta)
    if spec.mode == ANALYSIS:
        problem = LowerProblem(ANALYSIS, bank, spec.penalty, spec.lam, sample.noisy)
        u = minimize_energy(problem, cfg).x
    else:
        mean = float(np.mean(sample.noisy))
        problem = LowerProblem(SYNTHESIS_DUAL, bank, spec.penalty, spec.lam, sample.noisy - mean)
        u = sample.noisy - minimize_energy(problem, cfg).x / spec.lam
    return loss(u, sample.clean)


class Objective:
    """Summed loss and gradient over samples as a function of flat theta.

    With ``warm_start`` each sample's lower-level solve starts from its
    previous minimiser; the minimiser itself does not depend on the start,
    only the iteration count does.  Per-sample work can run on a thread
    pool; results are always reduced in sample order.
    """

    def __init__(self, samples, spec, basis, n, cfg=None, threads=1, warm_start=True):
        if not samples:
            raise ValueError("need at least one training sample")
        self.samples = list(samples)
        self.spec = spec
        self.basis = basis
        self.n = n
        self.cfg = cfg or SolverConfig()
        self.threads = threads
        self.warm_start = warm_start
        self._warm = {}
        self.evaluations = 0

    def _one(self, theta, k):
        s = self.samples[k]
        try:
            return sample_gradient(self.spec, self.basis, theta, s, self.cfg,
                                   self._warm.get(k) if self.warm_start else None)
        except Exception as exc:
            raise SampleError(s.id, exc) from exc

    def evaluate(self, theta):
        theta = np.asarray(theta, dtype=np.float64).reshape(self.n, self.basis.size)
        idx = range(len(self.samples))
        if self.threads > 1:
            with ThreadPoolExecutor(self.threads) as pool:
                parts = list(pool.map(lambda k: self._one(theta, k), idx))
        else:
            parts = [self._one(theta, k) for k in idx]
        total = 0.0
        grad = np.zeros_like(theta)
        for k, sg in enumerate(parts):
            total += sg.loss
            grad += sg.grad_theta
            if self.warm_start:
                self._warm[k] = sg.x_star
        self.evaluations += 1
        return total, grad

    def __call__(self, theta_flat):
        value, grad = self.evaluate(theta_flat)
        return value, grad.ravel()


def objective(theta, samples, spec, basis, cfg=None, threads=1):
    """``(sum_k L_k, sum_k dL_k/dtheta)`` with cold-started solves."""
    theta = np.asarray(theta, dtype=np.float64)
    return Objective(samples, spec, basis, theta.shape[0], cfg, threads, warm_start=False).evaluate(theta)


def fd_oracle(theta, sample, entry, h, spec, basis, cfg=None):
    """Central difference ``[L(theta + h e_ij) - L(theta - h e_ij)] / 2h``."""
    if not h > 0:
        raise ValueError("h must be positive")
    cfg = cfg or TIGHT
    theta = np.asarray(theta, dtype=np.float64)
    tp = theta.copy()
    tm = theta.copy()
    tp[entry] += h
    tm[entry] -= h
    return (sample_loss(spec, basis, tp, sample, cfg) - sample_loss(spec, basis, tm, sample, cfg)) / (2 * h)


# ---------------------------------------------------------------------------
# gradient check on a fixed small instance

GRADCHECK_KERNEL_NORM = {ANALYSIS: 3.0, SYNTHESIS: 0.1}
# smaller for synthesis: a wider step can straddle a kink of the interval penalty
GRADCHECK_STEP = {ANALYSIS: 1e-4, SYNTHESIS: 1e-5}


@dataclass
class GradCheck:
    mode: str
    implicit: np.ndarray
    finite_difference: np.ndarray
    rel_err: np.ndarray
    h: float

    @property
    def max_rel_err(self):
        return float(np.max(self.rel_err))


def canonical_instance(mode=ANALYSIS, seed=7):
    """6x6 ramp-plus-step image with sigma=15 noise, 2 random 3x3 filters.

    Returns ``(spec, basis, theta, sample)``.  Kernel norms are large enough
    that central differences at ``h = 1e-4`` sit well below their
    truncation error.
    """
    yy, xx = np.mgrid[0:6, 0:6]
    clean = (80.0 + 15.0 * xx + 60.0 * (yy >= 3)).astype(np.float64)
    sample = TrainingSample(clean, add_gaussian_noise(clean, 15.0, seed), 0)
    spec = ModelSpec(mode=mode, patch_side=3)
    basis = dct_mean_zero_basis(3)
    scale = 1.0 if mode == ANALYSIS else 1.0 / basis.m
    theta = random_theta(2, basis, derive_seed(seed, 1), GRADCHECK_KERNEL_NORM[mode], scale)
    return spec, basis, theta, sample


def gradient_check(spec, basis, theta, sample, h=None, cfg=None):
    """Implicit gradient against central differences over every theta entry.

    ``h`` is measured in kernel units, so for dictionaries (kernel scale
    ``1/m``) the coefficient step is ``h * m``.  Defaults per mode come
    from ``GRADCHECK_STEP``.
    """
    cfg = cfg or TIGHT
    h = GRADCHECK_STEP[spec.mode] if h is None else h
    implicit = sample_gradient(spec, basis, theta, sample, cfg).grad_theta
    step = h if spec.mode == ANALYSIS else h * basis.m
    fd = np.zeros_like(implicit)
    for entry in np.ndindex(*theta.shape):
        fd[entry] = fd_oracle(theta, sample, entry, step, spec, basis, cfg)
    denom = np.maximum(np.maximum(np.abs(implicit), np.abs(fd)), 1e-12 * np.max(np.abs(implicit)))
    rel = np.abs(implicit - fd) / np.where(denom > 0, denom, 1.0)
    return GradCheck(spec.mode, implicit, fd, rel, step)


# ---------------------------------------------------------------------------
# initialisation


def random_theta(n, basis, seed, kernel_norm=0.1, scale=1.0):
    """Gaussian rows from the frozen generator, rescaled so each kernel has l2 norm ``kernel_norm``.

    ``scale`` is the bank's kernel scale (1 for analysis, 1/m for
    dictionaries); the basis is orthonormal, so ``|kernel| = scale |row|``.
    """
    z = Xoshiro256(seed).normal(n * basis.size).reshape(n, basis.size)
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    return z / norms * (kernel_norm / scale)


def tv_kernels(patch_side):
    """Forward differences ``[-1, 1]`` horizontally and vertically, centred in a ``p x p`` kernel."""
    c = patch_side // 2
    k = np.zeros((2, patch_side, patch_side))
    k[0, c, c], k[0, c, c + 1] = -1.0, 1.0
    k[1, c, c], k[1, c + 1, c] = -1.0, 1.0
    return k


def init_theta(n, basis, seed, kernel_norm=0.1, scale=1.0, warm=None, tv_strength=1.0):
    """Initial coefficients; ``warm="tv"`` replaces the first two rows by TV kernels.

    ``warm="dct"`` uses basis atoms themselves (row ``i`` selects atom
    ``i mod N_B``) at norm ``kernel_norm``.
    """
    theta = random_theta(n, basis, seed, kernel_norm, scale)
    if warm == "tv":
        if n < 2:
            raise ValueError("TV warm start needs n >= 2")
        theta[:2] = project(basis, tv_kernels(basis.patch_side) * tv_strength) / scale
    elif warm == "dct":
        theta[:] = 0.0
        for i in range(n):
            theta[i, i % basis.size] = kernel_norm / scale
    elif warm is not None:
        raise ValueError(f"unknown warm start {warm!r}")
    return theta


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainState:
    theta: np.ndarray
    iteration: int = 0
    loss_history: list = field(default_factory=list)
    grad_norm_history: list = field(default_factory=list)
    wall_seconds: list = field(default_factory=list)
    initial_loss: float = None
    initial_grad_norm: float = None
    status: str = ""
    message: str = ""


@dataclass(frozen=True)
class OuterConfig:
    optimizer: lbfgs.LbfgsConfig = lbfgs.LbfgsConfig(max_iter=100, grad_tol=1e-6)
    solver: SolverConfig = SolverConfig(grad_tol=1e-5, cg_tol=1e-8, newton_max_iter=200,
                                        cg_max_iter=5000)
    threads: int = 1
    warm_start: bool = True


def train(samples, init, spec, basis, outer=None, callback=None):
    """Minimise the summed loss over theta with L-BFGS.

    ``callback(state)`` is invoked after every accepted outer step.  If a
    lower-level solve fails mid-search, the state reached so far is
    attached to the raised :class:`TrainingError`.
    """
    outer = outer or OuterConfig()
    init = np.asarray(init, dtype=np.float64)
    if not np.any(init):
        raise ValueError("theta = 0 is a stationary point; initialise away from it")
    n = init.shape[0]
    obj = Objective(samples, spec, basis, n, outer.solver, outer.threads, outer.warm_start)
    state = TrainState(theta=init.copy())
    t0 = time.perf_counter()

    def on_step(k, x, f, g):
        state.theta = x.reshape(n, basis.size).copy()
        state.iteration = k
        state.loss_history.append(f)
        state.grad_norm_history.append(float(np.max(np.abs(g))))
        state.wall_seconds.append(time.perf_counter() - t0)
        log.info("iter %d  loss %.6g  |grad| %.3g", k, f, state.grad_norm_history[-1])
        if callback is not None:
            callback(state)

    try:
        res = lbfgs.minimize(obj, init.ravel(), outer.optimizer, callback=on_step)
    except Exception as exc:
        raise TrainingError(state, exc) from exc
    state.theta = res.x.reshape(n, basis.size)
    state.initial_loss = res.values[0]
    state.initial_grad_norm = res.grad_norms[0]
    state.status = res.status
    state.message = res.message
    return state


class TrainingError(RuntimeError):
    def __init__(self, state, cause):
        super().__init__(f"training stopped after {state.iteration} iterations: {cause}")
        self.state = state
        self.cause = cause
