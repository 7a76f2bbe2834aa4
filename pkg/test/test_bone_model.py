"""
Bone Model Test

Checks the plate profile, its blurred mean, the noise covariance and the
profile likelihoods against direct evaluations.
"""

import sys
from pathlib import Path

import numpy as np
import pytest
from scipy import integrate, stats

# Add the project root to the Python path
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.bone_model import (BoneModel, LatentState, NoiseParams, default_sigma_xi, dump_profile_fit,
                            estimate_noise_from_background, ideal_profile, mean_profile, noise_covariance,
                            patch_log_likelihood, profile_log_likelihood, profile_mean)
from src.processor.profile_processor import Profile, ProfileSet
from src.processor.psf_processor import KernelBank, PsfComponent, PsfModel, combined_kernel, combined_psf
from src.volume_manager import InterpolationStencil, Volume

MODEL = PsfModel((PsfComponent(1.0, 0.0, 0.4), PsfComponent(0.3, 0.3, 0.6)), 0.45)
RHO = (0.0, 1200.0, 200.0)
NOISE = NoiseParams(sigma_eps=30.0, sigma_xi=50.0)


def make_profile(values, alpha: float = 60.0, step: float = 0.1, vertex_id: int = 0) -> Profile:
    values = np.asarray(values, dtype=float)
    n = (len(values) - 1) // 2
    return Profile(patch_id=0, vertex_id=vertex_id, alpha=alpha, ts=np.arange(-n, n + 1) * step, values=values)


def test_ideal_profile_levels():
    w, s = 0.2, 0.3
    assert ideal_profile(w, s, RHO, s) == 1200.0
    assert ideal_profile(w, s, RHO, s - 10 * w) == 0.0
    assert ideal_profile(w, s, RHO, s + 10 * w) == 200.0
    assert np.all(ideal_profile(w, s, (7.0, 7.0, 7.0), np.linspace(-3, 3, 31)) == 7.0)


def test_ideal_profile_edges_take_half():
    assert ideal_profile(0.2, 0.0, RHO, -0.2) == pytest.approx(600.0)


def test_mean_profile_constant_density():
    kernel = combined_kernel(MODEL, 30.0, 0.1)
    ts = np.linspace(-3, 3, 61)
    assert np.allclose(mean_profile(kernel, 0.15, 0.2, (500.0, 500.0, 500.0), ts), 500.0, atol=1e-9)


def test_mean_profile_thick_plate_center():
    kernel = combined_kernel(MODEL, 45.0, 0.1)
    w = 5.0 * kernel.support
    assert mean_profile(kernel, w, 0.1, RHO, np.array([0.1]))[0] == pytest.approx(1200.0, abs=1e-6)


def _convolution_oracle(alpha, w, s, rho, t, support):
    def mass(lower, upper):
        lower, upper = max(lower, -support), min(upper, support)
        if upper <= lower:
            return 0.0
        return integrate.quad(lambda x: float(combined_psf(MODEL, alpha, x)), lower, upper,
                              epsabs=1e-12, epsrel=1e-12, limit=200)[0]

    total = mass(-support, support)
    u = t - s
    # the plate sits at t - tau, so each tissue collects the kernel mass over a window of tau
    cortical = mass(u - w, u + w)
    trabecular = mass(-support, u - w)
    background = mass(u + w, support)
    return (rho[0] * background + rho[1] * cortical + rho[2] * trabecular) / total


def test_mean_profile_matches_convolution():
    """Closed form vs direct integration of the ideal plate against the continuous kernel"""
    rng = np.random.default_rng(12)
    worst = 0.0
    for _ in range(100):
        alpha = float(rng.uniform(1.0, 90.0))
        w = float(np.exp(rng.uniform(np.log(0.05), np.log(1.0))))
        s = float(rng.uniform(-0.5, 0.5))
        rho = (rng.uniform(-100, 100), rng.uniform(800, 1500), rng.uniform(0, 400))
        kernel = combined_kernel(MODEL, alpha, 0.1)
        ts = rng.uniform(-2.0, 2.0, 4)
        values = mean_profile(kernel, w, s, rho, ts)
        expected = [_convolution_oracle(alpha, w, s, rho, t, kernel.support) for t in ts]
        density_range = max(rho) - min(rho)
        worst = max(worst, float(np.max(np.abs(values - expected))) / density_range)
    assert worst <= 1e-4


def test_mean_profile_batches():
    kernel = combined_kernel(MODEL, 70.0, 0.1)
    ts = np.linspace(-3, 3, 61)
    w = np.array([0.1, 0.2, 0.3])
    s = np.array([0.0, 0.1, -0.2])
    rho = np.array([RHO, (10.0, 1100.0, 150.0), (-5.0, 900.0, 300.0)])
    batch = mean_profile(kernel, w, s, rho, ts)
    assert batch.shape == (3, 61)
    for k in range(3):
        assert np.allclose(batch[k], mean_profile(kernel, w[k], s[k], rho[k], ts))


def test_covariance_without_measurement_noise():
    kernel = combined_kernel(MODEL, 40.0, 0.1)
    ts = np.linspace(-1, 1, 21)
    covariance = noise_covariance(kernel, ts, NoiseParams(0.0, 20.0))
    assert np.allclose(covariance, 400.0 * np.eye(21))


def test_covariance_of_far_samples_is_diagonal():
    kernel = combined_kernel(MODEL, 40.0, 0.1)
    ts = np.arange(5) * (2.0 * kernel.support + 1.0)
    covariance = noise_covariance(kernel, ts, NOISE)
    expected = NOISE.sigma_eps ** 2 * kernel.energy + NOISE.sigma_xi ** 2
    assert np.allclose(covariance, expected * np.eye(5))


def test_covariance_is_positive_definite():
    rng = np.random.default_rng(4)
    for _ in range(10):
        kernel = combined_kernel(MODEL, float(rng.uniform(0, 90)), 0.1)
        noise = NoiseParams(float(rng.uniform(0, 100)), float(rng.uniform(1, 100)))
        covariance = noise_covariance(kernel, np.linspace(-3, 3, 61), noise)
        assert np.all(np.linalg.eigvalsh(covariance) > 0)


def test_likelihood_of_exact_mean_is_normalizer():
    kernel = combined_kernel(MODEL, 60.0, 0.1)
    x = LatentState(np.log(0.15), RHO, [0.05])
    ts = np.linspace(-1.0, 1.0, 21)
    values = mean_profile(kernel, x.w, 0.05, x.rho, ts)
    profile = make_profile(values)
    covariance = noise_covariance(kernel, ts, NOISE)
    _, log_det = np.linalg.slogdet(2 * np.pi * covariance)
    assert profile_log_likelihood(profile, x, kernel, NOISE) == pytest.approx(-0.5 * log_det, rel=1e-10)


def test_doubled_residual_costs_three_quadratic_terms():
    kernel = combined_kernel(MODEL, 60.0, 0.1)
    x = LatentState(np.log(0.15), RHO, [0.0])
    ts = np.linspace(-1.0, 1.0, 21)
    mean = mean_profile(kernel, x.w, 0.0, x.rho, ts)
    residual = np.random.default_rng(5).normal(0, 40, 21)
    covariance = noise_covariance(kernel, ts, NOISE)
    quadratic = 0.5 * residual @ np.linalg.solve(covariance, residual)
    single = profile_log_likelihood(make_profile(mean + residual), x, kernel, NOISE)
    double = profile_log_likelihood(make_profile(mean + 2 * residual), x, kernel, NOISE)
    assert single - double == pytest.approx(3 * quadratic, rel=1e-8)


def test_likelihood_matches_dense_oracle():
    kernel = combined_kernel(MODEL, 25.0, 0.1)
    x = LatentState(np.log(0.2), (20.0, 1100.0, 180.0), [-0.1])
    ts = np.arange(-10, 10) * 0.1
    ts = ts - ts.mean()
    rng = np.random.default_rng(6)
    mean = mean_profile(kernel, x.w, -0.1, x.rho, ts)
    values = mean + rng.normal(0, 60, 20)
    profile = Profile(patch_id=0, vertex_id=0, alpha=25.0, ts=ts, values=values)
    covariance = noise_covariance(kernel, ts, NOISE)
    expected = stats.multivariate_normal(mean=mean, cov=covariance).logpdf(values)
    assert profile_log_likelihood(profile, x, kernel, NOISE) == pytest.approx(expected, abs=1e-8)


def _patch(rng, alphas):
    bank = KernelBank(MODEL, 0.1)
    profiles = []
    offsets = rng.normal(0, 0.1, len(alphas))
    for i, alpha in enumerate(alphas):
        kernel = bank.kernel(alpha)
        ts = np.linspace(-3, 3, 61)
        values = mean_profile(kernel, 0.15, offsets[i], RHO, ts) + rng.normal(0, 50, 61)
        profiles.append(Profile(patch_id=0, vertex_id=i, alpha=alpha, ts=ts, values=values))
    return bank, ProfileSet(0, profiles), LatentState(np.log(0.15), RHO, offsets)


def test_patch_likelihood_of_single_profile():
    bank, profiles, x = _patch(np.random.default_rng(7), [33.0])
    expected = profile_log_likelihood(profiles[0], x, bank.kernel(33.0), NOISE)
    assert patch_log_likelihood(profiles, x, bank, NOISE) == pytest.approx(expected, rel=1e-12)


def test_patch_likelihood_is_exchangeable():
    bank, profiles, x = _patch(np.random.default_rng(8), [10.0, 45.0, 80.0, 60.0])
    order = [2, 0, 3, 1]
    permuted = ProfileSet(0, [profiles[i] for i in order])
    x_permuted = LatentState(x.ln_w, x.rho, x.offsets[order])
    assert patch_log_likelihood(permuted, x_permuted, bank, NOISE) == pytest.approx(
        patch_log_likelihood(profiles, x, bank, NOISE), rel=1e-12)


def test_identical_profiles_double_the_likelihood():
    bank, profiles, x = _patch(np.random.default_rng(9), [50.0])
    doubled = profiles.replicated(2)
    x2 = LatentState(x.ln_w, x.rho, np.repeat(x.offsets, 2))
    assert patch_log_likelihood(doubled, x2, bank, NOISE) == pytest.approx(
        2 * patch_log_likelihood(profiles, x, bank, NOISE), rel=1e-12)


def test_bone_model_batch_matches_single_evaluations():
    bank, profiles, x = _patch(np.random.default_rng(10), [15.0, 75.0, 75.4])
    model = BoneModel(profiles, bank, NOISE)
    rng = np.random.default_rng(11)
    latents = x.to_vector() + rng.normal(0, 0.05, (6, model.dimension))
    batch = model.log_likelihood(latents)
    for k in range(6):
        expected = patch_log_likelihood(profiles, LatentState.from_vector(latents[k]), bank, NOISE)
        assert batch[k] == pytest.approx(expected, rel=1e-10)
    assert len(model._factors) == 2, "profiles in one angle bin share a factorization"


def test_bone_model_rejects_wrong_dimension():
    bank, profiles, _ = _patch(np.random.default_rng(1), [20.0, 30.0])
    with pytest.raises(ValueError):
        BoneModel(profiles, bank, NOISE).log_likelihood(np.zeros((2, 5)))


def gridded_plate(alpha: float = 60.0, w: float = 0.3, s: float = 0.1):
    """Voxel grid holding the blurred plate at every voxel center, and a profile through it"""
    kernel = combined_kernel(MODEL, alpha, 0.1)
    a = np.deg2rad(alpha)
    direction = np.array([np.sin(a), 0.0, np.cos(a)])
    dims, spacing = (21, 21, 9), (0.234, 0.234, 1.0)
    origin = tuple(-0.5 * (d - 1) * h for d, h in zip(dims, spacing))
    centers = np.stack(np.meshgrid(*[o + np.arange(d) * h for o, d, h in zip(origin, dims, spacing)],
                                   indexing="ij"), axis=-1)
    data = mean_profile(kernel, w, s, RHO, (centers @ direction).ravel()).reshape(dims)
    volume = Volume(data, spacing, origin)
    ts = np.round(np.arange(-15, 16) * 0.1, 10)
    points = ts[:, None] * direction
    profile = Profile(patch_id=0, vertex_id=0, alpha=alpha, ts=ts, values=volume.sample(points),
                      direction=direction, stencil=volume.interpolation_stencil(points, np.zeros(3), direction))
    return kernel, profile


def test_stencil_mean_reproduces_interpolated_grid():
    kernel, profile = gridded_plate()
    assert np.allclose(profile_mean(profile, kernel, 0.3, 0.1, RHO), profile.values, atol=1e-9)
    point_mean = mean_profile(kernel, 0.3, 0.1, RHO, profile.ts)
    assert np.max(np.abs(point_mean - profile.values)) > 1.0
    batch = profile_mean(profile, kernel, np.array([0.3, 0.2]), np.array([0.1, 0.0]), np.array([RHO, RHO]))
    assert batch.shape == (2, len(profile))
    assert np.allclose(batch[0], profile.values, atol=1e-9)
    assert np.allclose(batch[1], profile_mean(profile, kernel, 0.2, 0.0, RHO))


def test_grid_noise_uses_the_stencil_gram():
    kernel, profile = gridded_plate()
    noise = NoiseParams(sigma_eps=0.0, sigma_xi=2.0, sigma_grid=20.0)
    covariance = noise_covariance(kernel, profile.ts, noise, profile.stencil)
    assert np.allclose(covariance, 4.0 * np.eye(len(profile)) + 400.0 * profile.stencil.gram)
    white = noise_covariance(kernel, profile.ts, noise)
    assert np.allclose(white, 404.0 * np.eye(len(profile)))


def test_stencil_likelihood_matches_dense_oracle():
    kernel, profile = gridded_plate()
    noise = NoiseParams(sigma_eps=10.0, sigma_xi=3.0, sigma_grid=20.0)
    x = LatentState(np.log(0.25), (5.0, 1150.0, 210.0), [0.05])
    mean = profile_mean(profile, kernel, x.w, 0.05, x.rho)
    covariance = noise_covariance(kernel, profile.ts, noise, profile.stencil)
    expected = stats.multivariate_normal(mean, covariance).logpdf(profile.values)
    assert profile_log_likelihood(profile, x, kernel, noise) == pytest.approx(expected, rel=1e-9)
    model = BoneModel(ProfileSet(0, [profile]), KernelBank(MODEL, 0.1), noise)
    assert model.log_likelihood(x.to_vector()[None, :])[0] == pytest.approx(expected, rel=1e-9)


def test_grid_noise_factors_are_cached_per_stencil():
    _, first = gridded_plate()
    _, second = gridded_plate(s=0.0)
    shifted = Profile(patch_id=0, vertex_id=1, alpha=first.alpha, ts=first.ts, values=second.values,
                      stencil=InterpolationStencil(first.stencil.corner_ts + 0.05, first.stencil.weights,
                                                   0.5 * first.stencil.gram + 0.5 * np.eye(len(first))))
    profiles = ProfileSet(0, [first, shifted])
    grid_model = BoneModel(profiles, KernelBank(MODEL, 0.1), NoiseParams(0.0, 2.0, 20.0))
    assert grid_model.factor(first) is not grid_model.factor(shifted)
    white_model = BoneModel(profiles, KernelBank(MODEL, 0.1), NoiseParams(10.0, 2.0))
    assert white_model.factor(first) is white_model.factor(shifted)


def test_noise_from_background():
    kernel = combined_kernel(MODEL, 90.0, 0.1)
    data = np.random.default_rng(2).normal(0.0, 12.0, (40, 40, 40))
    estimate = estimate_noise_from_background(Volume(data, (1.0, 1.0, 1.0)), [[0, 40], [0, 40], [0, 40]], kernel)
    assert estimate == pytest.approx(np.std(data, ddof=1) / np.sqrt(kernel.energy))


@pytest.mark.parametrize("step", [0.05, 0.1, 0.2])
def test_background_noise_reproduces_the_roi_variance(step):
    kernel = combined_kernel(MODEL, 90.0, step)
    assert kernel.energy == pytest.approx(np.sum(kernel.taps ** 2) * step)
    data = np.random.default_rng(3).normal(0.0, 12.0, (30, 30, 30))
    volume = Volume(data, (1.0, 1.0, 1.0))
    sigma_eps = estimate_noise_from_background(volume, [[0, 30], [0, 30], [0, 30]], kernel)
    modeled = noise_covariance(kernel, [0.0], NoiseParams(sigma_eps=sigma_eps, sigma_xi=0.0))[0, 0]
    assert modeled == pytest.approx(np.var(data, ddof=1), rel=1e-5)


def test_default_sigma_xi():
    assert default_sigma_xi(1200.0, 200.0) == pytest.approx(50.0)


def test_noise_params_validation():
    with pytest.raises(ValueError):
        NoiseParams(0.0, 0.0)
    with pytest.raises(ValueError):
        NoiseParams(-1.0, 5.0)
    with pytest.raises(ValueError):
        NoiseParams(1.0, 1.0, sigma_grid=-1.0)
    assert NoiseParams(0.0, 0.0, sigma_grid=5.0).sigma_grid == 5.0


def test_dump_profile_fit(tmp_path):
    kernel = combined_kernel(MODEL, 60.0, 0.1)
    x = LatentState(np.log(0.15), RHO, [0.0])
    ts = np.linspace(-1.0, 1.0, 21)
    profile = make_profile(mean_profile(kernel, x.w, 0.0, x.rho, ts) + 5.0)
    csv_path = tmp_path / "fit.csv"
    png_path = tmp_path / "fit.png"
    dump_profile_fit(str(csv_path), profile, x, kernel, plot_path=str(png_path))
    rows = np.loadtxt(csv_path, delimiter=",", skiprows=1)
    assert rows.shape == (21, 4)
    assert np.allclose(rows[:, 3], 5.0)
    assert png_path.stat().st_size > 0
