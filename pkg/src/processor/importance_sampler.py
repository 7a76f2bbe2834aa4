"""
Importance Sampler Module
Gaussian proposals, adaptive importance sampling rounds with self-normalized
weights and a tempered warm-up that moves the proposal onto the posterior.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Tuple

import numpy as np
from scipy import linalg

from src.errors import DegenerateWeightsError
from src.prior import WeightedSamples, effective_sample_size, normalize_log_weights

logger = logging.getLogger("importance_sampler")

LogTarget = Callable[[np.ndarray], np.ndarray]

DEFAULT_SHRINKAGE = 0.5
MIN_ESS = 2.0
WARM_UP_ROUNDS = 60
BISECTION_STEPS = 40


@dataclass(frozen=True)
class GaussianProposal:
    """Multivariate normal proposal q over the latent space"""
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).ravel()
        cov = np.asarray(self.cov, dtype=float)
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"covariance shape {cov.shape} does not match mean size {mean.size}")
        cov = 0.5 * (cov + cov.T)
        try:
            chol = linalg.cholesky(cov, lower=True)
        except linalg.LinAlgError:
            raise ValueError("proposal covariance must be positive definite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "_chol", chol)

    @classmethod
    def diagonal(cls, mean: np.ndarray, sds: np.ndarray) -> "GaussianProposal":
        return cls(mean, np.diag(np.square(np.asarray(sds, dtype=float))))

    @property
    def dimension(self) -> int:
        return self.mean.size

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        """``count`` independent draws as rows"""
        z = rng.standard_normal((count, self.dimension))
        return self.mean + z @ self._chol.T

    def log_pdf(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        white = linalg.solve_triangular(self._chol, (x - self.mean).T, lower=True)
        log_det = 2.0 * np.sum(np.log(np.diag(self._chol)))
        return -0.5 * (np.sum(white ** 2, axis=0) + log_det + self.dimension * np.log(2.0 * np.pi))

    def widened(self, factor: float) -> "GaussianProposal":
        return GaussianProposal(self.mean, self.cov * factor)


def proposal_sample(proposal: GaussianProposal, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` draws from q, rejecting non-finite rows from overflowing covariances"""
    latents = proposal.sample(count, rng)
    if not np.all(np.isfinite(latents)):
        raise DegenerateWeightsError("proposal produced non-finite draws")
    return latents


def weighted_moments(latents: np.ndarray, weights: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mean = weights @ latents
    centered = latents - mean
    return mean, (centered * weights[:, None]).T @ centered


def adapt_proposal(proposal: GaussianProposal, latents: np.ndarray, weights: np.ndarray,
                   shrinkage: float = DEFAULT_SHRINKAGE) -> GaussianProposal:
    """Move q to the weighted moments, shrinking the covariance toward its previous value"""
    mean, cov = weighted_moments(latents, weights)
    return GaussianProposal(mean, shrinkage * proposal.cov + (1.0 - shrinkage) * cov)


def _draw(log_target: LogTarget, proposal: GaussianProposal, count: int, rng: np.random.Generator):
    latents = proposal_sample(proposal, count, rng)
    log_target_values = np.asarray(log_target(latents), dtype=float)
    log_target_values = np.where(np.isfinite(log_target_values), log_target_values, -np.inf)
    return latents, log_target_values, proposal.log_pdf(latents)


def adaptive_is_round(log_target: LogTarget, proposal: GaussianProposal, count: int,
                      rng: np.random.Generator,
                      shrinkage: float = DEFAULT_SHRINKAGE) -> Tuple[WeightedSamples, GaussianProposal]:
    """
    One adaptive importance sampling round.

    Args:
        log_target: Unnormalized log posterior of a batch of latents (K, D) -> (K,)
        proposal: Current proposal q
        count: Number of draws K
        rng: Random generator
        shrinkage: Weight of the previous covariance in the adapted proposal

    Returns:
        (weighted samples, adapted proposal)

    Raises:
        DegenerateWeightsError: if the effective sample size falls below 2

    The proposal is kept as is when fewer than D + 1 effective draws support
    the weighted covariance.
    """
    latents, log_target_values, log_proposal_values = _draw(log_target, proposal, count, rng)
    samples = WeightedSamples.from_log_weights(latents, log_target_values, log_proposal_values)
    ess = samples.ess
    if ess < MIN_ESS:
        raise DegenerateWeightsError(f"effective sample size {ess:.2f} of {count} draws", ess=ess)
    if ess < proposal.dimension + 1:
        logger.debug(f"ESS {ess:.1f} below dimension + 1; proposal not adapted")
        return samples, proposal
    return samples, adapt_proposal(proposal, latents, samples.weights, shrinkage)


def _tempered_ess(log_weights: np.ndarray, beta: float) -> float:
    finite = np.isfinite(log_weights)
    tempered = np.where(finite, beta * np.where(finite, log_weights, 0.0), -np.inf)
    return effective_sample_size(normalize_log_weights(tempered))


def tempering_exponent(log_weights: np.ndarray, target_ess: float) -> float:
    """Largest beta in [0, 1] whose tempered weights keep the ESS at target_ess (bisection)"""
    if _tempered_ess(log_weights, 1.0) >= target_ess:
        return 1.0
    low, high = 0.0, 1.0
    for _ in range(BISECTION_STEPS):
        middle = 0.5 * (low + high)
        if _tempered_ess(log_weights, middle) >= target_ess:
            low = middle
        else:
            high = middle
    return low


def warm_up_proposal(log_target: LogTarget, proposal: GaussianProposal, count: int,
                     rng: np.random.Generator, max_rounds: int = WARM_UP_ROUNDS,
                     shrinkage: float = DEFAULT_SHRINKAGE) -> Tuple[GaussianProposal, int]:
    """
    Adapt the proposal with tempered weights until full weights keep half the draws.

    Each round raises the importance weights to the largest power beta that keeps
    the ESS at K/2 and adapts q to those weights; warm-up ends after the first
    round with beta = 1.

    Returns:
        (adapted proposal, rounds used)
    """
    target_ess = 0.5 * count
    for round_index in range(1, max_rounds + 1):
        latents, log_target_values, log_proposal_values = _draw(log_target, proposal, count, rng)
        log_weights = log_target_values - log_proposal_values
        beta = tempering_exponent(log_weights, target_ess)
        finite = np.isfinite(log_weights)
        weights = normalize_log_weights(np.where(finite, beta * np.where(finite, log_weights, 0.0), -np.inf))
        if effective_sample_size(weights) < MIN_ESS:
            raise DegenerateWeightsError("tempered weights collapsed during warm-up",
                                         ess=effective_sample_size(weights))
        proposal = adapt_proposal(proposal, latents, weights, shrinkage)
        logger.debug(f"Warm-up round {round_index}: beta={beta:.4f}")
        if beta >= 1.0:
            return proposal, round_index
    logger.warning(f"Proposal warm-up stopped after {max_rounds} rounds before reaching full weights")
    return proposal, max_rounds
