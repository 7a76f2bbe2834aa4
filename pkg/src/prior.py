"""
Prior Module
Normal-Inverse-chi^2 prior over the plate hyper-parameters, the latent prior,
the closed-form weighted MAP update and the Monte Carlo EM lower bound.
"""

import logging
from dataclasses import dataclass, replace
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
from scipy import special, stats
import typing_extensions as typing

from src.bone_model import LN_W, OFFSETS, RHO

logger = logging.getLogger("prior")

BLOCKS = ("w", "rho_bg", "rho_ct", "rho_tr", "s")


@dataclass(frozen=True)
class PriorBlock:
    """NIX2 parameters of one scalar (mu, sigma^2) pair"""
    mu0: float
    sigma0_sq: float
    kappa0: float = 1.0
    nu0: float = 1.0

    def __post_init__(self):
        if self.kappa0 <= 0 or self.nu0 <= 0 or self.sigma0_sq <= 0:
            raise ValueError(f"kappa0, nu0 and sigma0_sq must be positive, got {self}")

    def log_density(self, mu: float, sigma_sq: float) -> float:
        """log N(mu; mu0, sigma^2/kappa0) + log Scaled-Inv-chi^2(sigma^2; nu0, sigma0^2)"""
        return float(stats.norm.logpdf(mu, self.mu0, np.sqrt(sigma_sq / self.kappa0))
                     + stats.invgamma.logpdf(sigma_sq, self.nu0 / 2.0, scale=self.nu0 * self.sigma0_sq / 2.0))

    def mode(self) -> Tuple[float, float]:
        return self.mu0, self.nu0 * self.sigma0_sq / (self.nu0 + 3.0)


@dataclass(frozen=True)
class NIX2Prior:
    w: PriorBlock = PriorBlock(mu0=float(np.log(0.1)), sigma0_sq=0.16)
    rho_bg: PriorBlock = PriorBlock(mu0=0.0, sigma0_sq=100.0 ** 2)
    rho_ct: PriorBlock = PriorBlock(mu0=1200.0, sigma0_sq=150.0 ** 2)
    rho_tr: PriorBlock = PriorBlock(mu0=200.0, sigma0_sq=100.0 ** 2)
    s: PriorBlock = PriorBlock(mu0=0.0, sigma0_sq=0.25 ** 2)

    def blocks(self) -> List[PriorBlock]:
        return [getattr(self, name) for name in BLOCKS]

    def with_overrides(self, overrides: Dict[str, Dict[str, float]]) -> "NIX2Prior":
        """Replace block fields, e.g. ``{"rho_ct": {"mu0": 1100.0}}``"""
        changes = {}
        for name, values in overrides.items():
            if name not in BLOCKS:
                raise KeyError(name)
            changes[name] = replace(getattr(self, name), **values)
        return replace(self, **changes)

    def log_density(self, theta: "HyperParams") -> float:
        """log p(theta | theta_0), independent across blocks"""
        return sum(block.log_density(mu, sigma ** 2)
                   for block, (mu, sigma) in zip(self.blocks(), theta.block_values()))


# Schema of the hyper-parameters in the summary JSON
class HyperParamsRecord(typing.TypedDict):
    mu_w: float
    sigma_w: float
    mu_rho: List[float]
    sigma_rho: List[float]
    mu_s: float
    sigma_s: float


@dataclass(frozen=True)
class HyperParams:
    """Location and scale of every latent block; the offsets share one pair"""
    mu_w: float
    sigma_w: float
    mu_rho: Tuple[float, float, float]
    sigma_rho: Tuple[float, float, float]
    mu_s: float
    sigma_s: float

    def __post_init__(self):
        object.__setattr__(self, "mu_rho", tuple(float(v) for v in self.mu_rho))
        object.__setattr__(self, "sigma_rho", tuple(float(v) for v in self.sigma_rho))
        if min(self.sigma_w, self.sigma_s, *self.sigma_rho) <= 0:
            raise ValueError("all scales must be positive")

    def block_values(self) -> List[Tuple[float, float]]:
        return [(self.mu_w, self.sigma_w)] + list(zip(self.mu_rho, self.sigma_rho)) + [(self.mu_s, self.sigma_s)]

    @classmethod
    def from_blocks(cls, values: List[Tuple[float, float]]) -> "HyperParams":
        (mu_w, sigma_w), bg, ct, tr, (mu_s, sigma_s) = values
        return cls(mu_w, sigma_w, (bg[0], ct[0], tr[0]), (bg[1], ct[1], tr[1]), mu_s, sigma_s)

    def means(self, profile_count: int) -> np.ndarray:
        return np.concatenate([[self.mu_w], self.mu_rho, np.full(profile_count, self.mu_s)])

    def sds(self, profile_count: int) -> np.ndarray:
        return np.concatenate([[self.sigma_w], self.sigma_rho, np.full(profile_count, self.sigma_s)])

    def thickness_mean(self) -> float:
        return float(2.0 * np.exp(self.mu_w + self.sigma_w ** 2 / 2.0))

    def thickness_median(self) -> float:
        return float(2.0 * np.exp(self.mu_w))

    def thickness_sd(self) -> float:
        variance = (np.exp(self.sigma_w ** 2) - 1.0) * np.exp(2.0 * self.mu_w + self.sigma_w ** 2)
        return float(2.0 * np.sqrt(variance))

    def to_record(self) -> HyperParamsRecord:
        return {"mu_w": self.mu_w, "sigma_w": self.sigma_w, "mu_rho": list(self.mu_rho),
                "sigma_rho": list(self.sigma_rho), "mu_s": self.mu_s, "sigma_s": self.sigma_s}


def initial_hyper_params(prior: NIX2Prior) -> HyperParams:
    return HyperParams.from_blocks([(b.mu0, float(np.sqrt(b.sigma0_sq))) for b in prior.blocks()])


def log_latent_prior(latents: np.ndarray, theta: HyperParams) -> np.ndarray:
    """
    Sum of independent normal log-densities of every latent coordinate.

    Args:
        latents: (D,) or (K, D) latent vectors

    Returns:
        Scalar for one vector, (K,) for a batch
    """
    latents = np.asarray(latents, dtype=float)
    n = latents.shape[-1] - 4
    value = np.sum(stats.norm.logpdf(latents, theta.means(n), theta.sds(n)), axis=-1)
    return float(value) if np.ndim(value) == 0 else value


@dataclass(frozen=True)
class WeightedSample:
    x: np.ndarray
    log_target: float
    log_proposal: float
    weight: float


@dataclass(frozen=True)
class WeightedSamples:
    """K latent draws with self-normalized importance weights"""
    latents: np.ndarray
    log_target: np.ndarray
    log_proposal: np.ndarray
    weights: np.ndarray

    def __len__(self) -> int:
        return len(self.weights)

    def __iter__(self) -> Iterator[WeightedSample]:
        for k in range(len(self)):
            yield WeightedSample(self.latents[k], float(self.log_target[k]),
                                 float(self.log_proposal[k]), float(self.weights[k]))

    @property
    def ess(self) -> float:
        return effective_sample_size(self.weights)

    @classmethod
    def from_log_weights(cls, latents: np.ndarray, log_target: np.ndarray, log_proposal: np.ndarray) -> "WeightedSamples":
        return cls(latents, log_target, log_proposal, normalize_log_weights(log_target - log_proposal))


def normalize_log_weights(log_weights: np.ndarray) -> np.ndarray:
    """Self-normalized weights by log-sum-exp; NaN counts as zero weight"""
    log_weights = np.where(np.isnan(log_weights), -np.inf, np.asarray(log_weights, dtype=float))
    if not np.any(np.isfinite(log_weights)):
        return np.zeros_like(log_weights)
    return np.exp(log_weights - special.logsumexp(log_weights))


def effective_sample_size(weights: np.ndarray) -> float:
    total = float(np.sum(np.square(weights)))
    return 1.0 / total if total > 0 else 0.0


def block_statistics(latents: np.ndarray, weights: np.ndarray) -> List[Tuple[float, float, int]]:
    """
    Weighted mean, weighted variance and observations per draw of every block.

    The offset block pools all N offset coordinates of a draw.
    """
    columns = [latents[:, LN_W]] + [latents[:, RHO][:, j] for j in range(3)]
    result = []
    for column in columns:
        mean = float(np.sum(weights * column))
        result.append((mean, float(np.sum(weights * (column - mean) ** 2)), 1))
    offsets = latents[:, OFFSETS]
    n = offsets.shape[1]
    mean = float(np.sum(weights * offsets.mean(axis=1)))
    result.append((mean, float(np.sum(weights * np.mean((offsets - mean) ** 2, axis=1))), n))
    return result


def conjugate_map_update(samples: WeightedSamples, prior: NIX2Prior,
                         multiplier: Optional[float] = None) -> HyperParams:
    """
    Maximize the weighted Monte Carlo objective in closed form.

    Each block sees ``multiplier * d`` pseudo-observations (d = 1, or N for the
    offsets) with the weighted mean and variance of the draws, and the NIX2
    posterior mode is returned.

    Args:
        samples: Weighted draws; weights sum to 1
        prior: NIX2 prior
        multiplier: Pseudo-count m; defaults to the effective sample size

    Returns:
        MAP hyper-parameters
    """
    m = samples.ess if multiplier is None else float(multiplier)
    values = []
    for block, (mean, variance, d) in zip(prior.blocks(), block_statistics(samples.latents, samples.weights)):
        n = m * d
        kappa_n = block.kappa0 + n
        nu_n = block.nu0 + n
        mu_n = (block.kappa0 * block.mu0 + n * mean) / kappa_n
        scatter = block.nu0 * block.sigma0_sq + n * variance + block.kappa0 * n * (mean - block.mu0) ** 2 / kappa_n
        values.append((float(mu_n), float(np.sqrt(scatter / (nu_n + 3.0)))))
    return HyperParams.from_blocks(values)


def q_lower_bound(samples: WeightedSamples, theta: HyperParams, prior: NIX2Prior,
                  multiplier: float = 1.0) -> Tuple[float, float]:
    """
    Monte Carlo estimate of the EM lower bound and its standard error.

    Returns:
        (m * sum_k gamma_k ln p(x_k | theta) + ln p(theta | theta_0), standard error)
    """
    log_prior = log_latent_prior(samples.latents, theta)
    mean = float(np.sum(samples.weights * log_prior))
    se = multiplier * float(np.sqrt(np.sum(samples.weights ** 2 * (log_prior - mean) ** 2)))
    return multiplier * mean + prior.log_density(theta), se


@dataclass(frozen=True)
class Improvement:
    """Change of the lower bound between two hyper-parameter values on one sample set"""
    delta_q: float
    per_observation: float
    standard_error: float

    def lower(self, z: float) -> float:
        return self.per_observation - z * self.standard_error

    def upper(self, z: float) -> float:
        return self.per_observation + z * self.standard_error


def q_improvement(samples: WeightedSamples, theta_old: HyperParams, theta_new: HyperParams,
                  prior: NIX2Prior, multiplier: float) -> Improvement:
    """Lower-bound improvement, scaled per pseudo-observation, with its weighted MC standard error"""
    d = log_latent_prior(samples.latents, theta_new) - log_latent_prior(samples.latents, theta_old)
    mean = float(np.sum(samples.weights * d))
    delta_prior = prior.log_density(theta_new) - prior.log_density(theta_old)
    se = float(np.sqrt(np.sum(samples.weights ** 2 * (d - mean) ** 2)))
    return Improvement(delta_q=multiplier * mean + delta_prior,
                       per_observation=mean + delta_prior / multiplier, standard_error=se)
