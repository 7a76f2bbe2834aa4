"""
Patch Analyzer Test

Runs Monte Carlo EM on synthetic patches drawn from the plate model and checks
the recovered thickness, the stopping rule and the run diagnostics.
"""

import sys
from pathlib import Path

import numpy as np
import pytest
from scipy import special, stats

# Add the project root to the Python path
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.analyzer import (STOP_CONVERGED, STOP_MAX_ITERATIONS, McemSettings, PatchAnalyzer, latent_state_of,
                          mcem_estimate_patch)
from src.bone_model import BoneModel, NoiseParams, mean_profile, noise_covariance
from src.errors import EmptyPatchError
from src.prior import NIX2Prior, initial_hyper_params
from src.processor.importance_sampler import GaussianProposal, adaptive_is_round, warm_up_proposal
from src.processor.profile_processor import Profile, ProfileSet
from src.processor.psf_processor import KernelBank, PsfComponent, PsfModel, sigma_from_slice_width

PSF = PsfModel((PsfComponent(1.0, 0.0, 0.4),), sigma_from_slice_width(1.0))
NOISE = NoiseParams(sigma_eps=10.0, sigma_xi=10.0)
TRUE_THICKNESS = 0.5
RHO = (0.0, 1200.0, 200.0)
PRIOR = NIX2Prior()


def synthetic_patch(seed: int = 0, count: int = 10, noise: NoiseParams = NOISE) -> ProfileSet:
    """Noisy plate profiles with one thickness and scattered offsets"""
    rng = np.random.default_rng(seed)
    kernels = KernelBank(PSF, 0.1)
    ts = np.round(np.arange(-25, 26) * 0.1, 10)
    profiles = []
    for j in range(count):
        alpha = float(rng.uniform(60.0, 90.0))
        kernel = kernels.kernel(alpha)
        offset = float(rng.normal(0.05, 0.1))
        mean = mean_profile(kernel, TRUE_THICKNESS / 2, offset, RHO, ts)
        error = np.linalg.cholesky(noise_covariance(kernel, ts, noise)) @ rng.standard_normal(ts.size)
        profiles.append(Profile(patch_id=4, vertex_id=j, alpha=alpha, ts=ts, values=mean + error))
    return ProfileSet(4, profiles)


def analyzer(noise: NoiseParams = NOISE, **settings) -> PatchAnalyzer:
    return PatchAnalyzer(PRIOR, KernelBank(PSF, 0.1), noise, McemSettings(**settings))


def test_recovers_thickness_of_synthetic_patch():
    estimate = analyzer(max_iterations=40, k_max=2000).estimate(synthetic_patch(), seed=11)
    assert estimate.patch_id == 4
    assert estimate.profile_count == 10
    assert estimate.thickness_mean == pytest.approx(TRUE_THICKNESS, rel=0.15)
    assert estimate.theta.mu_rho[1] == pytest.approx(1200.0, rel=0.15)


def test_estimate_is_deterministic_for_a_seed():
    profiles = synthetic_patch(1)
    first = analyzer(max_iterations=5).estimate(profiles, seed=3)
    second = analyzer(max_iterations=5).estimate(profiles, seed=3)
    assert first.theta == second.theta
    assert first.trace == second.trace


def test_infinite_threshold_stops_after_first_acceptance():
    estimate = analyzer(stop_threshold=float("inf")).estimate(synthetic_patch(2), seed=0)
    assert estimate.stop_reason == STOP_CONVERGED
    assert estimate.accepted == 1
    assert not estimate.no_convergence
    assert estimate.trace[-1]["accepted"]


def test_iteration_limit_at_largest_sample_size_marks_no_convergence():
    estimate = analyzer(max_iterations=2, stop_threshold=-1.0, k0=56, k_max=56).estimate(synthetic_patch(3), seed=0)
    assert estimate.stop_reason == STOP_MAX_ITERATIONS
    assert estimate.no_convergence
    assert estimate.iterations == 2
    assert len(estimate.trace) == 2


def test_iteration_limit_below_largest_sample_size_is_not_no_convergence():
    estimate = analyzer(max_iterations=2, stop_threshold=-1.0).estimate(synthetic_patch(3), seed=0)
    assert estimate.stop_reason == STOP_MAX_ITERATIONS
    assert estimate.final_k < 512 * 14
    assert not estimate.no_convergence


def test_degenerate_round_grows_the_sample_size():
    sharp = NoiseParams(sigma_eps=0.0, sigma_xi=5.0)
    estimate = analyzer(noise=sharp, warm_up=False, k0=14, k_max=4000, max_iterations=2).estimate(
        synthetic_patch(8, noise=sharp), seed=0)
    assert estimate.iterations == 2
    assert estimate.trace[0]["k"] > 14
    assert all(record["ess"] >= 2.0 for record in estimate.trace)


def test_accepted_steps_have_positive_lower_bound():
    estimate = analyzer(max_iterations=10).estimate(synthetic_patch(4), seed=1)
    for record in estimate.trace:
        assert record["delta_lower"] <= record["delta_upper"]
        if record["accepted"]:
            assert record["delta_lower"] >= 0.0
    ks = [record["k"] for record in estimate.trace]
    assert ks == sorted(ks), "the sample size never shrinks"


def test_rejected_step_grows_the_sample_size():
    estimate = analyzer(max_iterations=10, growth_factor=2.0).estimate(synthetic_patch(5), seed=2)
    for previous, current in zip(estimate.trace, estimate.trace[1:]):
        if not previous["accepted"]:
            assert current["k"] >= min(2 * previous["k"], 512 * 14)


def test_record_and_latent_state():
    estimate = mcem_estimate_patch(synthetic_patch(6), PRIOR, KernelBank(PSF, 0.1), NOISE,
                                   McemSettings(max_iterations=3), seed=0)
    record = estimate.to_record()
    assert record["thickness_mean_mm"] == pytest.approx(estimate.theta.thickness_mean())
    assert record["profile_count"] == 10
    state = latent_state_of(estimate)
    assert state.dimension == 14
    assert state.w > 0


def test_empty_patch_raises():
    with pytest.raises(EmptyPatchError):
        analyzer().estimate(ProfileSet(9, []), seed=0)


def test_initial_sample_size_below_dimension_raises():
    with pytest.raises(ValueError):
        analyzer(k0=5).estimate(synthetic_patch(), seed=0)


def test_settings_validation():
    with pytest.raises(ValueError):
        McemSettings(growth_factor=1.0)
    with pytest.raises(ValueError):
        McemSettings(max_iterations=0)
    settings = McemSettings()
    assert settings.initial_k(14) == 56
    assert settings.maximum_k(14) == 512 * 14


def test_replicated_profiles_contract_the_thickness_spread():
    profiles = synthetic_patch(5, count=4)
    settings = {"max_iterations": 20, "k_max": 4000, "multiplier": 1000.0}
    single = analyzer(**settings).estimate(profiles, seed=2)
    replicated = analyzer(**settings).estimate(profiles.replicated(10), seed=2)
    assert replicated.profile_count == 40
    assert replicated.theta.sigma_w < single.theta.sigma_w


def test_importance_posterior_matches_quadrature():
    """Posterior mean of (ln w, s) for one profile with the densities held at their true values"""
    model = BoneModel(synthetic_patch(12, count=1), KernelBank(PSF, 0.1), NOISE)
    theta = initial_hyper_params(PRIOR)
    rho = np.array(RHO)

    def log_target(x):
        x = np.atleast_2d(x)
        latents = np.column_stack([x[:, 0], np.tile(rho, (len(x), 1)), x[:, 1]])
        return (model.log_likelihood(latents) + stats.norm.logpdf(x[:, 0], theta.mu_w, theta.sigma_w)
                + stats.norm.logpdf(x[:, 1], theta.mu_s, theta.sigma_s))

    rng = np.random.default_rng(0)
    proposal = GaussianProposal.diagonal(np.array([theta.mu_w, theta.mu_s]),
                                         np.array([theta.sigma_w, theta.sigma_s]))
    proposal, _ = warm_up_proposal(log_target, proposal, 10_000, rng)
    for _ in range(3):
        samples, proposal = adaptive_is_round(log_target, proposal, 10_000, rng)
    sampled = samples.weights @ samples.latents

    ln_ws = np.linspace(theta.mu_w - 5 * theta.sigma_w, theta.mu_w + 5 * theta.sigma_w, 801)
    ss = np.linspace(theta.mu_s - 5 * theta.sigma_s, theta.mu_s + 5 * theta.sigma_s, 801)
    log_posterior = np.array([log_target(np.column_stack([np.full(ss.size, ln_w), ss])) for ln_w in ln_ws])
    grid = np.exp(log_posterior - special.logsumexp(log_posterior))
    quadrature = np.array([np.sum(grid.sum(axis=1) * ln_ws), np.sum(grid.sum(axis=0) * ss)])

    assert abs(sampled[0] - quadrature[0]) <= 0.02 * theta.sigma_w
    assert abs(sampled[1] - quadrature[1]) <= 0.02 * theta.sigma_s
