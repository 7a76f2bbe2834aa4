"""
Bone Model Module
Generative plate model of the cortex: ideal step profile, PSF-blurred mean
profile and the correlated Gaussian likelihood of measured profiles.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Hashable, List, Optional, Sequence, Tuple

import numpy as np
import matplotlib.pyplot as plt
from scipy import linalg

from src.errors import NotPositiveDefiniteError
from src.processor.profile_processor import Profile, ProfileSet
from src.processor.psf_processor import DiscreteKernel, KernelBank, alpha_bin, kernel_autocorrelation, kernel_cdf
from src.utils.helper_functions import atomic_write_text, visualize_profile_fit
from src.volume_manager import InterpolationStencil, Volume, background_sd

logger = logging.getLogger("bone_model")

# Latent vector layout: [ln w, rho_BG, rho_Ct, rho_Tr, s_1 .. s_N]
LN_W = 0
RHO = slice(1, 4)
OFFSETS = slice(4, None)
LOG_2PI = np.log(2.0 * np.pi)
# Model-error SD as a fraction of the cortical/trabecular contrast
SIGMA_XI_FRACTION = 0.05


def latent_dimension(profile_count: int) -> int:
    return profile_count + 4


@dataclass(frozen=True)
class LatentState:
    """One draw of the plate latents for a patch"""
    ln_w: float
    rho: np.ndarray
    offsets: np.ndarray

    def __post_init__(self):
        if not np.isfinite(self.ln_w):
            raise ValueError("ln_w must be finite")
        object.__setattr__(self, "rho", np.asarray(self.rho, dtype=float).reshape(3))
        object.__setattr__(self, "offsets", np.asarray(self.offsets, dtype=float).ravel())

    @property
    def w(self) -> float:
        return float(np.exp(self.ln_w))

    @property
    def dimension(self) -> int:
        return latent_dimension(len(self.offsets))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([[self.ln_w], self.rho, self.offsets])

    @classmethod
    def from_vector(cls, x: Sequence[float]) -> "LatentState":
        x = np.asarray(x, dtype=float)
        return cls(ln_w=float(x[LN_W]), rho=x[RHO], offsets=x[OFFSETS])


@dataclass(frozen=True)
class NoiseParams:
    """
    Noise SDs (mg CaHA/cm3): measurement noise blurred by the PSF, white
    model error, and white noise on the voxel grid read through the
    interpolation stencil.
    """
    sigma_eps: float
    sigma_xi: float
    sigma_grid: float = 0.0

    def __post_init__(self):
        if self.sigma_eps < 0 or self.sigma_xi < 0 or self.sigma_grid < 0:
            raise ValueError("noise SDs must be non-negative")
        if self.sigma_eps == 0 and self.sigma_xi == 0 and self.sigma_grid == 0:
            raise ValueError("sigma_eps, sigma_xi and sigma_grid cannot all be zero")


def default_sigma_xi(rho_ct_mean: float, rho_tr_mean: float) -> float:
    return SIGMA_XI_FRACTION * abs(rho_ct_mean - rho_tr_mean)


def estimate_noise_from_background(volume: Volume, roi, kernel: DiscreteKernel) -> float:
    """
    Measurement noise SD before blurring.

    Blurring white noise scales its variance by (g * g)(0); dividing the SD of a
    background ROI by its square root recovers sigma_eps.
    """
    return background_sd(volume, roi) / np.sqrt(kernel.energy)


def ideal_profile(w: float, s: float, rho: Sequence[float], t) -> np.ndarray:
    """Piecewise constant plate: rho_BG | rho_Ct (width 2w around s) | rho_Tr, H(0) = 1/2"""
    if w <= 0:
        raise ValueError(f"half width must be positive, got {w}")
    rho_bg, rho_ct, rho_tr = rho
    u = np.asarray(t, dtype=float) - s
    h_lower = np.heaviside(u + w, 0.5)
    h_upper = np.heaviside(u - w, 0.5)
    return rho_bg + (rho_ct - rho_bg) * h_lower + (rho_tr - rho_ct) * h_upper


def mean_profile(kernel: DiscreteKernel, w, s, rho, ts) -> np.ndarray:
    """
    Blurred plate profile in closed form.

    ``w``, ``s`` and the rows of ``rho`` broadcast against each other, so a batch
    of K latents gives a (K, len(ts)) array.
    """
    w = np.asarray(w, dtype=float)[..., None]
    s = np.asarray(s, dtype=float)[..., None]
    rho = np.asarray(rho, dtype=float)
    rho_bg, rho_ct, rho_tr = rho[..., 0, None], rho[..., 1, None], rho[..., 2, None]
    u = np.asarray(ts, dtype=float) - s
    values = rho_bg + (rho_ct - rho_bg) * kernel_cdf(kernel, u + w) + (rho_tr - rho_ct) * kernel_cdf(kernel, u - w)
    return values if values.ndim > 1 else values.ravel()


def profile_mean(profile: Profile, kernel: DiscreteKernel, w, s, rho) -> np.ndarray:
    """
    Model mean of a measured profile.

    With an interpolation stencil every sample is the weighted sum of the mean
    profile at its eight corner voxels; otherwise the mean profile at the
    sample positions.
    """
    if profile.stencil is None:
        return mean_profile(kernel, w, s, rho, profile.ts)
    stencil = profile.stencil
    corners = mean_profile(kernel, w, s, rho, stencil.corner_ts.ravel())
    corners = corners.reshape(corners.shape[:-1] + stencil.weights.shape)
    return np.sum(corners * stencil.weights, axis=-1)


def noise_covariance(kernel: DiscreteKernel, ts, noise: NoiseParams,
                     stencil: Optional[InterpolationStencil] = None) -> np.ndarray:
    """
    C[i, j] = sigma_eps^2 (g * g)(t_i - t_j) + sigma_xi^2 delta_ij + sigma_grid^2 G[i, j]

    G is the stencil gram W W^T, or the identity without a stencil.
    """
    ts = np.asarray(ts, dtype=float)
    lags = ts[:, None] - ts[None, :]
    covariance = noise.sigma_eps ** 2 * kernel_autocorrelation(kernel, lags)
    covariance[np.diag_indices_from(covariance)] += noise.sigma_xi ** 2
    if noise.sigma_grid > 0:
        if stencil is None:
            covariance[np.diag_indices_from(covariance)] += noise.sigma_grid ** 2
        else:
            covariance += noise.sigma_grid ** 2 * stencil.gram
    return covariance


@dataclass(frozen=True)
class CovarianceFactor:
    factor: Tuple[np.ndarray, bool]
    log_det: float
    size: int


def factorize(covariance: np.ndarray) -> CovarianceFactor:
    try:
        factor = linalg.cho_factor(covariance, lower=True, check_finite=True)
    except linalg.LinAlgError as e:
        raise NotPositiveDefiniteError(f"noise covariance is not positive definite ({e}); increase sigma_xi")
    log_det = 2.0 * float(np.sum(np.log(np.diag(factor[0]))))
    return CovarianceFactor(factor, log_det, covariance.shape[0])


def _gaussian_log_density(residuals: np.ndarray, factor: CovarianceFactor) -> np.ndarray:
    """Log N(residual; 0, C) for residual rows (K, L)"""
    solved = linalg.cho_solve(factor.factor, residuals.T)
    quadratic = np.sum(residuals.T * solved, axis=0)
    return -0.5 * (quadratic + factor.log_det + factor.size * LOG_2PI)


def profile_log_likelihood(profile: Profile, x: LatentState, kernel: DiscreteKernel,
                           noise: NoiseParams, index: int = 0) -> float:
    """
    Log-density of one measured profile given the latents.

    Args:
        profile: Measured profile
        x: Latent state of the patch
        kernel: Kernel of the profile's angle bin
        noise: Noise SDs
        index: Position of the profile's offset in ``x.offsets``
    """
    mean = profile_mean(profile, kernel, x.w, x.offsets[index], x.rho)
    factor = factorize(noise_covariance(kernel, profile.ts, noise, profile.stencil))
    return float(_gaussian_log_density((profile.values - mean)[None, :], factor)[0])


def patch_log_likelihood(profiles: ProfileSet, x: LatentState, kernels: KernelBank, noise: NoiseParams) -> float:
    """Sum of the conditionally independent profile log-likelihoods"""
    if len(x.offsets) != len(profiles):
        raise ValueError(f"{len(x.offsets)} offsets for {len(profiles)} profiles")
    return float(BoneModel(profiles, kernels, noise).log_likelihood(x.to_vector()[None, :])[0])


class BoneModel:
    """
    Batched likelihood of a patch's profiles.

    Covariance factorizations are cached per (angle bin, profile length), or per
    profile when grid noise is read through the profile's own stencil.
    """

    def __init__(self, profiles: ProfileSet, kernels: KernelBank, noise: NoiseParams):
        self.profiles = profiles
        self.kernels = kernels
        self.noise = noise
        self._factors: Dict[Hashable, CovarianceFactor] = {}
        self._profile_kernels: List[DiscreteKernel] = [kernels.kernel(p.alpha) for p in profiles]

    @property
    def dimension(self) -> int:
        return latent_dimension(len(self.profiles))

    def factor(self, profile: Profile) -> CovarianceFactor:
        if profile.stencil is not None and self.noise.sigma_grid > 0:
            key: Hashable = ("stencil", id(profile.stencil))
        else:
            key = (alpha_bin(profile.alpha), len(profile))
        if key not in self._factors:
            kernel = self.kernels.kernel(profile.alpha)
            self._factors[key] = factorize(noise_covariance(kernel, profile.ts, self.noise, profile.stencil))
        return self._factors[key]

    def log_likelihood(self, latents: np.ndarray) -> np.ndarray:
        """
        Log-likelihood of every latent row.

        Args:
            latents: (K, N+4) latent vectors

        Returns:
            (K,) log-likelihoods
        """
        latents = np.atleast_2d(np.asarray(latents, dtype=float))
        if latents.shape[1] != self.dimension:
            raise ValueError(f"latent dimension {latents.shape[1]} != {self.dimension}")
        w = np.exp(latents[:, LN_W])
        rho = latents[:, RHO]
        total = np.zeros(latents.shape[0])
        for i, (profile, kernel) in enumerate(zip(self.profiles, self._profile_kernels)):
            mean = profile_mean(profile, kernel, w, latents[:, 4 + i], rho)
            total += _gaussian_log_density(profile.values[None, :] - mean, self.factor(profile))
        return total

    def synthesize(self, x: LatentState) -> List[np.ndarray]:
        """Mean profile of every measured profile under ``x``"""
        return [profile_mean(profile, kernel, x.w, x.offsets[i], x.rho)
                for i, (profile, kernel) in enumerate(zip(self.profiles, self._profile_kernels))]


def profile_fit_rows(profile: Profile, x: LatentState, kernel: DiscreteKernel, index: int = 0) -> np.ndarray:
    """Columns t, measured, mean, residual"""
    mean = profile_mean(profile, kernel, x.w, x.offsets[index], x.rho)
    return np.column_stack([profile.ts, profile.values, mean, profile.values - mean])


def dump_profile_fit(path: str, profile: Profile, x: LatentState, kernel: DiscreteKernel,
                     index: int = 0, plot_path: str = None) -> None:
    """Write the measured vs synthesized profile as CSV and optionally as a figure"""
    rows = profile_fit_rows(profile, x, kernel, index)
    lines = ["t_mm,measured,mean,residual"]
    lines += [",".join(repr(float(v)) for v in row) for row in rows]
    atomic_write_text(path, "\n".join(lines) + "\n")
    if plot_path:
        fig = visualize_profile_fit(rows[:, 0], rows[:, 1], rows[:, 2],
                                    title=f"Patch {profile.patch_id}, vertex {profile.vertex_id}, "
                                          f"alpha {profile.alpha:.0f} deg")
        fig.savefig(plot_path)
        plt.close(fig)
