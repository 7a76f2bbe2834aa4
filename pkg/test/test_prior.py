"""
Prior Test

Checks the NIX2 prior, the latent prior, the weighted MAP update and the
Monte Carlo EM lower bound against direct evaluations and grid search.
"""

import math
import sys
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

# Add the project root to the Python path
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.prior import (HyperParams, NIX2Prior, PriorBlock, WeightedSamples, conjugate_map_update,
                       effective_sample_size, initial_hyper_params, log_latent_prior, normalize_log_weights,
                       q_improvement, q_lower_bound)

THETA = HyperParams(mu_w=np.log(0.15), sigma_w=0.3, mu_rho=(10.0, 1150.0, 210.0), sigma_rho=(80.0, 120.0, 90.0),
                    mu_s=0.05, sigma_s=0.2)


def weighted(latents, weights=None) -> WeightedSamples:
    latents = np.atleast_2d(np.asarray(latents, dtype=float))
    if weights is None:
        weights = np.full(len(latents), 1.0 / len(latents))
    zeros = np.zeros(len(latents))
    return WeightedSamples(latents, zeros, zeros, np.asarray(weights, dtype=float))


def random_samples(rng, k: int = 30, n: int = 3) -> WeightedSamples:
    means = THETA.means(n)
    sds = THETA.sds(n)
    latents = means + sds * rng.standard_normal((k, n + 4))
    weights = rng.dirichlet(np.ones(k))
    return weighted(latents, weights)


def test_prior_block_density():
    block = PriorBlock(mu0=1.0, sigma0_sq=0.5, kappa0=2.0, nu0=3.0)
    mu, sigma_sq = 0.7, 0.4
    expected = (stats.norm.logpdf(mu, 1.0, math.sqrt(sigma_sq / 2.0))
                + stats.invgamma.logpdf(sigma_sq, 1.5, scale=1.5 * 0.5 / 1.0))
    assert block.log_density(mu, sigma_sq) == pytest.approx(expected, rel=1e-12)


def test_prior_block_mode_maximizes_density():
    block = PriorBlock(mu0=0.0, sigma0_sq=2.0, kappa0=1.0, nu0=4.0)
    mu, sigma_sq = block.mode()
    best = block.log_density(mu, sigma_sq)
    for d_mu, d_var in [(0.01, 0.0), (-0.01, 0.0), (0.0, 0.01), (0.0, -0.01)]:
        assert block.log_density(mu + d_mu, sigma_sq + d_var) < best


def test_prior_overrides():
    prior = NIX2Prior().with_overrides({"rho_ct": {"mu0": 1100.0}})
    assert prior.rho_ct.mu0 == 1100.0
    assert prior.rho_ct.sigma0_sq == NIX2Prior().rho_ct.sigma0_sq
    with pytest.raises(KeyError):
        NIX2Prior().with_overrides({"rho_xx": {"mu0": 1.0}})


def test_initial_hyper_params_are_prior_means():
    theta = initial_hyper_params(NIX2Prior())
    assert theta.mu_w == pytest.approx(np.log(0.1))
    assert theta.sigma_w == pytest.approx(0.4)
    assert theta.mu_rho == (0.0, 1200.0, 200.0)
    assert theta.sigma_s == pytest.approx(0.25)


def test_thickness_statistics_match_lognormal():
    distribution = stats.lognorm(s=THETA.sigma_w, scale=np.exp(THETA.mu_w))
    assert THETA.thickness_mean() == pytest.approx(2 * distribution.mean(), rel=1e-12)
    assert THETA.thickness_median() == pytest.approx(2 * distribution.median(), rel=1e-12)
    assert THETA.thickness_sd() == pytest.approx(2 * distribution.std(), rel=1e-10)


def test_latent_prior_at_means_with_unit_scales():
    n = 5
    theta = HyperParams(0.2, 1.0, (1.0, 2.0, 3.0), (1.0, 1.0, 1.0), -0.3, 1.0)
    assert log_latent_prior(theta.means(n), theta) == pytest.approx(-(n + 4) / 2 * np.log(2 * np.pi))


def test_latent_prior_quadratic_increment():
    theta = HyperParams(0.2, 1.0, (1.0, 2.0, 3.0), (1.0, 1.0, 1.0), -0.3, 1.0)
    x = theta.means(2)
    x1, x2 = x.copy(), x.copy()
    x1[0] += 0.4
    x2[0] += 0.8
    assert log_latent_prior(x1, theta) - log_latent_prior(x2, theta) == pytest.approx(0.5 * (0.8 ** 2 - 0.4 ** 2))


def test_latent_prior_matches_product_of_densities():
    rng = np.random.default_rng(0)
    latents = THETA.means(4) + rng.normal(0, 1, (7, 8)) * THETA.sds(4)
    values = log_latent_prior(latents, THETA)
    for k in range(7):
        expected = sum(math.log(stats.norm.pdf(latents[k, j], THETA.means(4)[j], THETA.sds(4)[j])) for j in range(8))
        assert values[k] == pytest.approx(expected, abs=1e-10)


def test_normalized_weights():
    weights = normalize_log_weights(np.array([1000.0, 1000.0, np.nan, -np.inf]))
    assert np.allclose(weights, [0.5, 0.5, 0.0, 0.0])
    assert effective_sample_size(np.full(8, 1 / 8)) == pytest.approx(8.0)
    assert effective_sample_size(np.array([1.0, 0.0])) == pytest.approx(1.0)


def test_map_update_without_data_is_prior_mode():
    prior = NIX2Prior()
    n = 2
    means = np.array([prior.w.mu0, prior.rho_bg.mu0, prior.rho_ct.mu0, prior.rho_tr.mu0] + [prior.s.mu0] * n)
    theta = conjugate_map_update(weighted(np.tile(means, (4, 1))), prior, multiplier=1e-12)
    for block, (mu, sigma) in zip(prior.blocks(), theta.block_values()):
        mode_mu, mode_var = block.mode()
        assert mu == pytest.approx(mode_mu, abs=1e-9)
        assert sigma ** 2 == pytest.approx(mode_var, rel=1e-9)


def test_map_update_flat_prior_limit():
    flat = PriorBlock(mu0=0.0, sigma0_sq=1.0, kappa0=1e-12, nu0=1e-12)
    prior = NIX2Prior(w=flat, rho_bg=flat, rho_ct=flat, rho_tr=flat, s=flat)
    rng = np.random.default_rng(1)
    latents = rng.normal(0.0, 2.0, (50, 5))
    m = 20.0
    theta = conjugate_map_update(weighted(latents), prior, multiplier=m)
    column = latents[:, 0]
    assert theta.mu_w == pytest.approx(column.mean(), abs=1e-9)
    assert theta.sigma_w ** 2 == pytest.approx(m * column.var() / (m + 3), rel=1e-9)


def _grid_argmax(values: np.ndarray, weights: np.ndarray, multiplier: float, block: PriorBlock):
    """Brute-force maximizer of m * sum_k gamma_k sum_j log N(x_kj; mu, s2) + log prior on a 400 x 400 grid"""
    values = values.reshape(len(weights), -1)
    d = values.shape[1]
    mus = np.linspace(values.min(), values.max(), 400)
    spread = np.max((values - values.mean()) ** 2)
    variances = np.linspace(spread * 1e-3, spread, 400)
    squares = np.array([np.sum(weights[:, None] * (values - mu) ** 2) for mu in mus])
    s2 = variances[None, :]
    objective = multiplier * (-0.5 * d * np.log(2 * np.pi * s2) - squares[:, None] / (2 * s2))
    objective += stats.norm.logpdf(mus[:, None], block.mu0, np.sqrt(s2 / block.kappa0))
    objective += stats.invgamma.logpdf(s2, block.nu0 / 2, scale=block.nu0 * block.sigma0_sq / 2)
    i, j = np.unravel_index(int(np.argmax(objective)), objective.shape)
    return (mus[i], variances[j]), mus[1] - mus[0], variances[1] - variances[0]


def test_map_update_matches_grid_search():
    prior = NIX2Prior()
    rng = np.random.default_rng(2)
    for _ in range(20):
        samples = random_samples(rng, k=25, n=3)
        m = float(rng.uniform(2.0, 30.0))
        theta = conjugate_map_update(samples, prior, multiplier=m)
        for column, block, (mu, sigma) in [(samples.latents[:, 0], prior.w, (theta.mu_w, theta.sigma_w)),
                                           (samples.latents[:, 4:], prior.s, (theta.mu_s, theta.sigma_s))]:
            (grid_mu, grid_var), d_mu, d_var = _grid_argmax(column, samples.weights, m, block)
            assert abs(grid_mu - mu) <= d_mu * 1.01
            assert abs(grid_var - sigma ** 2) <= d_var * 1.01


def test_map_update_ignores_sample_order_and_duplication():
    prior = NIX2Prior()
    rng = np.random.default_rng(9)
    samples = random_samples(rng, k=40, n=4)
    m = 12.0
    theta = conjugate_map_update(samples, prior, multiplier=m)

    order = rng.permutation(len(samples))
    permuted = weighted(samples.latents[order], samples.weights[order])
    doubled = weighted(np.vstack([samples.latents, samples.latents]),
                       np.concatenate([samples.weights, samples.weights]) / 2.0)
    for other in (conjugate_map_update(permuted, prior, multiplier=m),
                  conjugate_map_update(doubled, prior, multiplier=m)):
        for (mu, sigma), (mu_other, sigma_other) in zip(theta.block_values(), other.block_values()):
            assert mu_other == pytest.approx(mu, rel=1e-9, abs=1e-12)
            assert sigma_other == pytest.approx(sigma, rel=1e-9)


def test_lower_bound_of_single_sample():
    prior = NIX2Prior()
    x = THETA.means(2) + 0.1
    value, se = q_lower_bound(weighted(x, [1.0]), THETA, prior)
    assert value == pytest.approx(log_latent_prior(x, THETA) + prior.log_density(THETA), rel=1e-12)
    assert se == 0.0


def test_lower_bound_matches_summation_oracle():
    prior = NIX2Prior()
    rng = np.random.default_rng(3)
    samples = random_samples(rng, k=40, n=4)
    m = 7.5
    value, _ = q_lower_bound(samples, THETA, prior, multiplier=m)
    terms = [float(w) * float(v) for w, v in zip(samples.weights, log_latent_prior(samples.latents, THETA))]
    expected = m * math.fsum(terms) + prior.log_density(THETA)
    assert value == pytest.approx(expected, abs=1e-9)


def test_map_update_does_not_lower_the_bound():
    prior = NIX2Prior()
    rng = np.random.default_rng(4)
    for _ in range(10):
        samples = random_samples(rng)
        m = float(rng.uniform(1.0, 50.0))
        updated = conjugate_map_update(samples, prior, multiplier=m)
        before, _ = q_lower_bound(samples, THETA, prior, m)
        after, _ = q_lower_bound(samples, updated, prior, m)
        assert after >= before


def test_improvement_is_difference_of_bounds():
    prior = NIX2Prior()
    samples = random_samples(np.random.default_rng(5))
    m = 12.0
    updated = conjugate_map_update(samples, prior, multiplier=m)
    improvement = q_improvement(samples, THETA, updated, prior, m)
    before, _ = q_lower_bound(samples, THETA, prior, m)
    after, _ = q_lower_bound(samples, updated, prior, m)
    assert improvement.delta_q == pytest.approx(after - before, rel=1e-9)
    assert improvement.per_observation == pytest.approx(improvement.delta_q / m, rel=1e-9)
    assert improvement.lower(1.645) < improvement.per_observation < improvement.upper(1.645)
