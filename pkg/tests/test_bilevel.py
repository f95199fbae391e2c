import numpy as np
import pytest

from sparseprior import penalty as pen
from sparseprior.bilevel import (ANALYSIS, SYNTHESIS, TIGHT, ModelSpec, Objective, OuterConfig,
                                 SampleError, TrainingError, canonical_instance, fd_oracle,
                                 gradient_check, implicit_gradient, implicit_gradient_synthesis,
                                 init_theta, loss, objective, random_theta, sample_gradient,
                                 train, tv_kernels)
from sparseprior.filterbank import FilterBank, assemble, dct_mean_zero_basis, dictionary_bank, project
from sparseprior.imagecore import ImageError, make_dataset, psnr
from sparseprior.lbfgs import LbfgsConfig
from sparseprior.lowersolver import DENOISE_CONFIG, SolverConfig, denoise_analysis


def small_samples(count=5, side=16, seed=0):
    yy, xx = np.mgrid[0:48, 0:48]
    images = [80 + 40 * np.sin(xx / (3 + k)) + 60 * (yy > 20 + k) + 10 * np.cos(yy * xx / 50.0)
              for k in range(count)]
    return make_dataset(images, side, 1, 15.0, seed)


# ---------------------------------------------------------------- loss


def test_loss_values():
    g = np.arange(12.0).reshape(3, 4)
    assert loss(g, g) == 0.0
    assert loss(g + 1, g) == pytest.approx(6.0)
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(2, 5, 5))
    assert loss(a, b) == loss(b, a)
    with pytest.raises(ImageError):
        loss(a, np.zeros((5, 4)))


def test_model_spec_validation():
    assert ModelSpec().penalty.kind == pen.SMOOTHED_ABS
    assert ModelSpec(SYNTHESIS).penalty.kind == pen.SMOOTHED_INTERVAL
    with pytest.raises(ValueError):
        ModelSpec("dictionary")
    with pytest.raises(ValueError):
        ModelSpec(ANALYSIS, penalty=pen.Penalty(pen.SMOOTHED_INTERVAL))
    with pytest.raises(ValueError):
        ModelSpec(lam=0.0)


# ---------------------------------------------------------------- implicit gradient


def test_analysis_gradient_matches_finite_differences():
    report = gradient_check(*canonical_instance(ANALYSIS))
    assert report.implicit.shape == (2, 8)
    assert report.max_rel_err < 1e-4


def test_synthesis_gradient_matches_finite_differences():
    report = gradient_check(*canonical_instance(SYNTHESIS))
    assert report.max_rel_err < 1e-3


def test_gradient_at_random_theta_entries_other_seeds():
    for seed in (1, 2):
        spec, basis, theta, sample = canonical_instance(ANALYSIS, seed)
        g = sample_gradient(spec, basis, theta, sample, TIGHT).grad_theta
        for entry in [(0, 0), (1, 5), (0, 7)]:
            fd = fd_oracle(theta, sample, entry, 1e-4, spec, basis)
            assert abs(fd - g[entry]) <= 1e-4 * abs(g[entry])


def test_richardson_behaviour_of_fd_discrepancy():
    # at a weak bank the third derivative is large: the discrepancy must
    # shrink ~4x per halving of h until the solver floor
    spec, basis, _, sample = canonical_instance(ANALYSIS)
    theta = random_theta(2, basis, 3, 0.1)
    g = sample_gradient(spec, basis, theta, sample, TIGHT).grad_theta[1, 7]
    errs = [abs(fd_oracle(theta, sample, (1, 7), h, spec, basis) - g) for h in (4e-4, 2e-4, 1e-4, 5e-5)]
    ratios = [a / b for a, b in zip(errs, errs[1:])]
    assert all(3.0 < r < 5.0 for r in ratios)


def test_fd_oracle_on_quadratic_toy():
    # one filter, lam = 1: in the region where |A u| >> eps the penalty is
    # nearly linear, so compare the oracle against a tiny-step reference
    spec, basis, theta, sample = canonical_instance(ANALYSIS)
    ref = fd_oracle(theta, sample, (0, 2), 1e-6, spec, basis)
    for h in (1e-3, 5e-4):
        assert abs(fd_oracle(theta, sample, (0, 2), h, spec, basis) - ref) < 1e-3 * abs(ref)
    with pytest.raises(ValueError):
        fd_oracle(theta, sample, (0, 2), 0.0, spec, basis)


def test_theta_zero_is_stationary_with_high_loss():
    spec, basis, _, sample = canonical_instance(ANALYSIS)
    zero = np.zeros((2, basis.size))
    sg = sample_gradient(spec, basis, zero, sample, TIGHT)
    assert np.array_equal(sg.u_star, sample.noisy)
    assert sg.loss == pytest.approx(0.5 * float(np.sum((sample.noisy - sample.clean) ** 2)), rel=1e-14)
    assert not np.any(sg.grad_theta)
    nearby = sample_gradient(spec, basis, random_theta(2, basis, 1, 3.0), sample, TIGHT)
    assert nearby.loss < sg.loss


def test_synthesis_theta_zero_gradient_vanishes():
    spec, basis, _, sample = canonical_instance(SYNTHESIS)
    sg = sample_gradient(spec, basis, np.zeros((2, basis.size)), sample, TIGHT)
    assert not np.any(sg.grad_theta)


def test_tv_initialised_gradient_nonzero():
    spec, basis, _, sample = canonical_instance(ANALYSIS)
    theta = project(basis, tv_kernels(3) * 10.0)
    g = sample_gradient(spec, basis, theta, sample, SolverConfig(grad_tol=1e-8, newton_max_iter=200)).grad_theta
    assert np.linalg.norm(g) > 0


def test_synthesis_lambda_changes_gradient():
    spec, basis, theta, sample = canonical_instance(SYNTHESIS)
    bank = dictionary_bank(basis, theta)
    a = implicit_gradient_synthesis(sample, bank, basis, lam=1.0, cfg=TIGHT).grad_theta
    b = implicit_gradient_synthesis(sample, bank, basis, lam=2.0, cfg=TIGHT).grad_theta
    assert not np.allclose(a, b)


def test_implicit_gradient_direct_call_matches_dispatch():
    spec, basis, theta, sample = canonical_instance(ANALYSIS)
    a = implicit_gradient(sample, assemble(basis, theta), basis, cfg=TIGHT)
    b = sample_gradient(spec, basis, theta, sample, TIGHT)
    assert np.array_equal(a.grad_theta, b.grad_theta)
    assert a.loss == b.loss >= 0


# ---------------------------------------------------------------- objective


def test_objective_single_sample_equals_sample_gradient():
    spec, basis, theta, sample = canonical_instance(ANALYSIS)
    value, g = objective(theta, [sample], spec, basis, TIGHT)
    sg = sample_gradient(spec, basis, theta, sample, TIGHT)
    assert value == sg.loss
    assert np.array_equal(g, sg.grad_theta)


def test_objective_additive_and_permutation_invariant():
    samples = small_samples(4, 12)
    spec = ModelSpec(ANALYSIS, 3)
    basis = dct_mean_zero_basis(3)
    theta = random_theta(3, basis, 5, 2.0)
    v1, g1 = objective(theta, samples[:1], spec, basis)
    v2, g2 = objective(theta, samples[:1] * 2, spec, basis)
    assert v2 == 2 * v1 and np.array_equal(g2, 2 * g1)
    va, ga = objective(theta, samples, spec, basis)
    vb, gb = objective(theta, samples[::-1], spec, basis)
    assert abs(va - vb) <= 1e-12 * va
    assert np.max(np.abs(ga - gb)) <= 1e-12 * np.max(np.abs(ga))


def test_objective_threads_bit_identical():
    samples = small_samples(4, 12)
    spec = ModelSpec(ANALYSIS, 3)
    basis = dct_mean_zero_basis(3)
    theta = random_theta(3, basis, 5, 2.0)
    v1, g1 = objective(theta, samples, spec, basis, threads=1)
    v3, g3 = objective(theta, samples, spec, basis, threads=3)
    assert v1 == v3 and np.array_equal(g1, g3)


def test_objective_reports_failing_sample():
    samples = small_samples(2, 12)
    spec = ModelSpec(ANALYSIS, 3)
    basis = dct_mean_zero_basis(3)
    theta = random_theta(2, basis, 5, 50.0)
    cfg = SolverConfig(newton_max_iter=1, grad_tol=1e-12)
    with pytest.raises(SampleError) as err:
        objective(theta, samples, spec, basis, cfg)
    assert err.value.sample_id == 0
    with pytest.raises(ValueError):
        Objective([], spec, basis, 2)


# ---------------------------------------------------------------- initialisation


def test_random_theta_kernel_norms_and_determinism():
    basis = dct_mean_zero_basis(5)
    theta = random_theta(6, basis, 11, 0.1)
    norms = np.linalg.norm(assemble(basis, theta).kernels.reshape(6, -1), axis=1)
    assert np.allclose(norms, 0.1, rtol=1e-12)
    assert np.array_equal(theta, random_theta(6, basis, 11, 0.1))
    dict_theta = random_theta(6, basis, 11, 0.1, scale=1 / 25)
    norms = np.linalg.norm(dictionary_bank(basis, dict_theta).flat, axis=1)
    assert np.allclose(norms, 0.1, rtol=1e-12)


def test_init_theta_warm_starts():
    basis = dct_mean_zero_basis(3)
    tv = init_theta(4, basis, 0, warm="tv", tv_strength=2.0)
    assert np.allclose(assemble(basis, tv[:2]).kernels, 2.0 * tv_kernels(3), atol=1e-12)
    dct = init_theta(3, basis, 0, kernel_norm=0.5, warm="dct")
    assert np.allclose(assemble(basis, dct).kernels, 0.5 * basis.filters[:3], atol=1e-15)
    with pytest.raises(ValueError):
        init_theta(1, basis, 0, warm="tv")
    with pytest.raises(ValueError):
        init_theta(2, basis, 0, warm="gabor")


# ---------------------------------------------------------------- training


def test_train_rejects_zero_init():
    samples = small_samples(1, 12)
    basis = dct_mean_zero_basis(3)
    with pytest.raises(ValueError, match="stationary"):
        train(samples, np.zeros((2, 8)), ModelSpec(), basis)


def test_train_desk_smoke_loss_drops_twenty_percent():
    samples = small_samples(5, 16)
    basis = dct_mean_zero_basis(3)
    spec = ModelSpec(ANALYSIS, 3)
    init = random_theta(8, basis, 0, 0.1)
    outer = OuterConfig(optimizer=LbfgsConfig(max_iter=30, initial_step_norm=0.1))
    seen = []
    state = train(samples, init, spec, basis, outer, callback=lambda s: seen.append(s.iteration))
    assert state.iteration == len(state.loss_history) == len(state.grad_norm_history) == 30
    assert seen == list(range(1, 31))
    assert all(b < a for a, b in zip([state.initial_loss] + state.loss_history, state.loss_history))
    assert state.loss_history[-1] <= 0.8 * state.initial_loss
    assert state.status == "max_iter"


def test_train_is_bit_reproducible():
    samples = small_samples(3, 12)
    basis = dct_mean_zero_basis(3)
    outer = OuterConfig(optimizer=LbfgsConfig(max_iter=5, initial_step_norm=0.1))
    a = train(samples, random_theta(4, basis, 1, 0.1), ModelSpec(), basis, outer)
    b = train(samples, random_theta(4, basis, 1, 0.1), ModelSpec(), basis, outer)
    assert np.array_equal(a.theta, b.theta)
    assert a.loss_history == b.loss_history


def test_train_zero_iterations_keeps_theta():
    samples = small_samples(2, 12)
    basis = dct_mean_zero_basis(3)
    init = random_theta(3, basis, 2, 0.1)
    outer = OuterConfig(optimizer=LbfgsConfig(max_iter=0))
    state = train(samples, init, ModelSpec(), basis, outer)
    assert np.array_equal(state.theta, init)
    assert state.iteration == 0 and state.loss_history == []


def test_train_failure_preserves_last_good_theta():
    samples = small_samples(2, 12)
    basis = dct_mean_zero_basis(3)
    calls = {"n": 0}
    # a solver budget that is fine at the start but too small once kernels grow
    outer = OuterConfig(optimizer=LbfgsConfig(max_iter=50, initial_step_norm=5.0),
                        solver=SolverConfig(newton_max_iter=3, grad_tol=1e-9))
    try:
        train(samples, random_theta(3, basis, 2, 0.01), ModelSpec(), basis, outer)
    except TrainingError as err:
        calls["n"] = 1
        assert isinstance(err.cause, SampleError)
        assert err.state.theta.shape == (3, 8)
        assert len(err.state.loss_history) == err.state.iteration
    assert calls["n"] == 1


def test_train_from_tv_not_worse_than_tv_on_held_out():
    samples = small_samples(3, 12)
    basis = dct_mean_zero_basis(3)
    tv_strength = 12.0
    init = init_theta(4, basis, 0, 0.1, warm="tv", tv_strength=tv_strength)
    outer = OuterConfig(optimizer=LbfgsConfig(max_iter=8, initial_step_norm=0.1))
    state = train(samples, init, ModelSpec(), basis, outer)
    tv = FilterBank.from_kernels(tv_kernels(3)).scaled(tv_strength)
    trained = assemble(basis, state.theta)
    held = small_samples(3, 24, seed=9)
    ours = np.mean([psnr(denoise_analysis(s.noisy, trained, cfg=DENOISE_CONFIG), s.clean) for s in held])
    base = np.mean([psnr(denoise_analysis(s.noisy, tv, cfg=DENOISE_CONFIG), s.clean) for s in held])
    assert ours >= base
