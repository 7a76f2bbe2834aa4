"""
Patch Analyzer Module
Estimates the plate hyper-parameters of one patch by ascent-based Monte Carlo
EM: adaptive importance sampling of the latent posterior, closed-form NIX2
maximization, and a sample size that grows while improvements are uncertain.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Union

import numpy as np
import typing_extensions as typing

from src.bone_model import BoneModel, LatentState, NoiseParams, latent_dimension
from src.errors import DegenerateWeightsError, EmptyPatchError
from src.processor.importance_sampler import GaussianProposal, adaptive_is_round, warm_up_proposal
from src.processor.profile_processor import ProfileSet
from src.processor.psf_processor import KernelBank
from src.prior import (HyperParams, HyperParamsRecord, NIX2Prior, WeightedSamples, conjugate_map_update,
                       initial_hyper_params, log_latent_prior, q_improvement, q_lower_bound)

logger = logging.getLogger("analyzer")

WIDEN_FACTOR = 4.0

STOP_CONVERGED = "converged"
STOP_MAX_ITERATIONS = "max_iterations"


# Schema of one line of the per-patch diagnostic log
class TraceRecord(typing.TypedDict):
    patch_id: int
    iteration: int
    k: int
    ess: float
    q_lower_bound: float
    delta_q: float
    delta_lower: float
    delta_upper: float
    accepted: bool


class PatchRecord(typing.TypedDict):
    patch_id: int
    profile_count: int
    thickness_mean_mm: float
    thickness_median_mm: float
    thickness_sd_mm: float
    theta: HyperParamsRecord
    iterations: int
    accepted: int
    final_k: int
    ess: float
    q_upper_bound: float
    stop_reason: str
    no_convergence: bool


@dataclass(frozen=True)
class McemSettings:
    """
    Sample-size schedule and stopping rule.

    ``k0`` and ``k_max`` default to 4(N+4) and 512(N+4); ``multiplier`` (the
    pseudo-count of the M-step) defaults to the effective sample size.
    """
    k0: Optional[int] = None
    k_max: Optional[int] = None
    growth_factor: float = 2.0
    stop_threshold: float = 0.05
    max_iterations: int = 200
    z: float = 1.645
    multiplier: Optional[float] = None
    shrinkage: float = 0.5
    warm_up: bool = True
    max_widenings: int = 3

    def __post_init__(self):
        if self.growth_factor <= 1.0:
            raise ValueError(f"growth_factor must exceed 1, got {self.growth_factor}")
        if self.max_iterations < 1:
            raise ValueError(f"max_iterations must be at least 1, got {self.max_iterations}")
        if not 0.0 <= self.shrinkage < 1.0:
            raise ValueError(f"shrinkage must lie in [0, 1), got {self.shrinkage}")

    def initial_k(self, dimension: int) -> int:
        return self.k0 if self.k0 is not None else 4 * dimension

    def maximum_k(self, dimension: int) -> int:
        return max(self.initial_k(dimension), self.k_max if self.k_max is not None else 512 * dimension)


@dataclass(frozen=True)
class PatchEstimate:
    """MAP hyper-parameters of a patch with thickness statistics and run diagnostics"""
    patch_id: int
    theta: HyperParams
    profile_count: int
    iterations: int
    accepted: int
    final_k: int
    ess: float
    q_lower_bound: float
    q_upper_bound: float
    stop_reason: str
    no_convergence: bool
    latent_mean: np.ndarray
    trace: List[TraceRecord] = field(default_factory=list)

    @property
    def thickness_mean(self) -> float:
        return self.theta.thickness_mean()

    @property
    def thickness_median(self) -> float:
        return self.theta.thickness_median()

    @property
    def thickness_sd(self) -> float:
        return self.theta.thickness_sd()

    def to_record(self) -> PatchRecord:
        return {
            "patch_id": self.patch_id,
            "profile_count": self.profile_count,
            "thickness_mean_mm": self.thickness_mean,
            "thickness_median_mm": self.thickness_median,
            "thickness_sd_mm": self.thickness_sd,
            "theta": self.theta.to_record(),
            "iterations": self.iterations,
            "accepted": self.accepted,
            "final_k": self.final_k,
            "ess": self.ess,
            "q_upper_bound": self.q_upper_bound,
            "stop_reason": self.stop_reason,
            "no_convergence": self.no_convergence,
        }


class PatchAnalyzer:
    """Runs Monte Carlo EM on the profiles of single patches"""

    def __init__(self, prior: NIX2Prior, kernels: KernelBank, noise: NoiseParams,
                 settings: Optional[McemSettings] = None):
        self.prior = prior
        self.kernels = kernels
        self.noise = noise
        self.settings = settings or McemSettings()

    def _recover(self, target, proposal: GaussianProposal, k: int, k_max: int, widenings: int,
                 rng: np.random.Generator, patch_id: int,
                 error: DegenerateWeightsError) -> Tuple[GaussianProposal, int, int]:
        """
        Restart the warm-up after degenerate weights.

        K grows by the growth factor up to k_max first; at k_max the proposal is
        widened, at most ``max_widenings`` times, before the error propagates.

        Returns:
            (warmed-up proposal, K, widenings used)
        """
        settings = self.settings
        while True:
            if k < k_max:
                k = int(min(np.ceil(k * settings.growth_factor), k_max))
                logger.debug(f"Patch {patch_id}: {error}; repeating the warm-up with K={k}")
            elif widenings < settings.max_widenings:
                widenings += 1
                proposal = proposal.widened(WIDEN_FACTOR)
                logger.debug(f"Patch {patch_id}: {error}; widening the proposal ({widenings})")
            else:
                raise error
            try:
                proposal, rounds = warm_up_proposal(target, proposal, k, rng, shrinkage=settings.shrinkage)
                logger.debug(f"Warm-up finished after {rounds} rounds")
                return proposal, k, widenings
            except DegenerateWeightsError as e:
                error = e

    def _warm_up(self, target, proposal: GaussianProposal, k: int, k_max: int,
                 rng: np.random.Generator, patch_id: int) -> Tuple[GaussianProposal, int, int]:
        try:
            proposal, rounds = warm_up_proposal(target, proposal, k, rng, shrinkage=self.settings.shrinkage)
            logger.debug(f"Warm-up finished after {rounds} rounds")
            return proposal, k, 0
        except DegenerateWeightsError as e:
            return self._recover(target, proposal, k, k_max, 0, rng, patch_id, e)

    def estimate(self, profiles: ProfileSet, seed: Union[int, np.random.SeedSequence]) -> PatchEstimate:
        """
        Estimate the hyper-parameters of one patch.

        Args:
            profiles: The patch's profiles
            seed: Seed of the patch's random stream

        Returns:
            PatchEstimate; ``no_convergence`` is set when the iteration limit is hit at
            K = k_max without meeting the stopping rule
        """
        if len(profiles) == 0:
            raise EmptyPatchError(f"patch {profiles.patch_id} has no profiles")
        settings = self.settings
        n = len(profiles)
        dimension = latent_dimension(n)
        k = settings.initial_k(dimension)
        k_max = settings.maximum_k(dimension)
        if k < dimension:
            raise ValueError(f"initial sample size {k} is below the latent dimension {dimension}")

        rng = np.random.default_rng(seed)
        model = BoneModel(profiles, self.kernels, self.noise)
        theta = initial_hyper_params(self.prior)
        proposal = GaussianProposal.diagonal(theta.means(n), theta.sds(n))

        def target_for(current: HyperParams):
            return lambda latents: model.log_likelihood(latents) + log_latent_prior(latents, current)

        widenings = 0
        if settings.warm_up:
            proposal, k, widenings = self._warm_up(target_for(theta), proposal, k, k_max, rng, profiles.patch_id)

        trace: List[TraceRecord] = []
        accepted_count = 0
        stop_reason = STOP_MAX_ITERATIONS
        samples: Optional[WeightedSamples] = None
        q_value, upper = float("nan"), float("inf")
        iteration = 0
        while iteration < settings.max_iterations:
            try:
                samples, proposal = adaptive_is_round(target_for(theta), proposal, k, rng, settings.shrinkage)
            except DegenerateWeightsError as e:
                proposal, k, widenings = self._recover(target_for(theta), proposal, k, k_max, widenings, rng,
                                                       profiles.patch_id, e)
                continue
            iteration += 1

            multiplier = samples.ess if settings.multiplier is None else settings.multiplier
            candidate = conjugate_map_update(samples, self.prior, multiplier)
            improvement = q_improvement(samples, theta, candidate, self.prior, multiplier)
            lower, upper = improvement.lower(settings.z), improvement.upper(settings.z)
            accepted = lower >= 0.0
            if accepted:
                theta = candidate
                accepted_count += 1
            q_value, _ = q_lower_bound(samples, theta, self.prior, multiplier)
            trace.append({
                "patch_id": profiles.patch_id, "iteration": iteration, "k": k, "ess": samples.ess,
                "q_lower_bound": q_value, "delta_q": improvement.delta_q,
                "delta_lower": lower, "delta_upper": upper, "accepted": accepted,
            })
            logger.debug(f"Patch {profiles.patch_id} iteration {iteration}: K={k} ESS={samples.ess:.1f} "
                         f"dQ=[{lower:.4g}, {upper:.4g}] accepted={accepted}")

            if accepted_count > 0 and upper < settings.stop_threshold:
                stop_reason = STOP_CONVERGED
                break
            if not accepted:
                k = int(min(np.ceil(k * settings.growth_factor), k_max))

        no_convergence = stop_reason != STOP_CONVERGED and k >= k_max and upper >= settings.stop_threshold
        if no_convergence:
            logger.warning(f"Patch {profiles.patch_id}: no convergence after {iteration} iterations (K={k})")
        elif stop_reason != STOP_CONVERGED:
            logger.info(f"Patch {profiles.patch_id}: stopped at the iteration limit with K={k}")

        latent_mean = samples.weights @ samples.latents if samples is not None else theta.means(n)
        return PatchEstimate(
            patch_id=profiles.patch_id, theta=theta, profile_count=n, iterations=iteration,
            accepted=accepted_count, final_k=k, ess=samples.ess if samples is not None else 0.0,
            q_lower_bound=q_value, q_upper_bound=upper, stop_reason=stop_reason,
            no_convergence=no_convergence, latent_mean=latent_mean, trace=trace,
        )


def mcem_estimate_patch(profiles: ProfileSet, prior: NIX2Prior, kernels: KernelBank, noise: NoiseParams,
                        settings: Optional[McemSettings] = None,
                        seed: Union[int, np.random.SeedSequence] = 0) -> PatchEstimate:
    """Estimate one patch with a fresh PatchAnalyzer"""
    return PatchAnalyzer(prior, kernels, noise, settings).estimate(profiles, seed)


def latent_state_of(estimate: PatchEstimate) -> LatentState:
    """Posterior mean latents of the last importance sampling round"""
    return LatentState.from_vector(estimate.latent_mean)
