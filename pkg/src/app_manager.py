"""
Pipeline Manager

Runs a specimen: places patches, extracts profiles, estimates every patch
concurrently and merges the patch distributions into per-vertex and
per-specimen thickness.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.sparse import csgraph

from src.analyzer import PatchAnalyzer, PatchEstimate
from src.bone_model import NoiseParams, default_sigma_xi, estimate_noise_from_background
from src.errors import DegenerateWeightsError, EmptyPatchError, NoPatchSucceededError, NotPositiveDefiniteError
from src.mesh_manager import Patch, SurfaceMesh, place_patches
from src.prior import NIX2Prior
from src.processor.profile_processor import ProfileSet, extract_profiles
from src.processor.psf_processor import KernelBank, PsfModel
from src.run_config import NoiseConfig, RunConfig, default_threads
from src.utils.helper_functions import derive_seed
from src.volume_manager import Volume

logger = logging.getLogger("app_manager")

# Patch failures that skip the patch instead of aborting the specimen
PATCH_FAILURES = (EmptyPatchError, DegenerateWeightsError, NotPositiveDefiniteError)


@dataclass(frozen=True)
class Aggregate:
    """Per-vertex thickness and the overlap-adjusted specimen mixture"""
    thickness: np.ndarray
    multiplicity: np.ndarray
    patch_weights: Dict[int, float]
    specimen_mean: float
    specimen_sd: float


@dataclass(frozen=True)
class ThicknessModel:
    mesh: SurfaceMesh
    patch_estimates: List[PatchEstimate]
    specimen_mean: float
    specimen_sd: float
    coverage: np.ndarray
    patch_weights: Dict[int, float]
    patches: List[Patch]
    noise: NoiseParams
    failures: Dict[int, str] = field(default_factory=dict)
    profile_sets: Dict[int, ProfileSet] = field(default_factory=dict)

    @property
    def no_convergence(self) -> bool:
        return any(e.no_convergence for e in self.patch_estimates)


def _fill_uncovered(mesh: SurfaceMesh, thickness: np.ndarray, covered: np.ndarray, uncovered: np.ndarray) -> None:
    """Give uncovered vertices the value of their geodesically nearest covered vertex"""
    if uncovered.size == 0:
        return
    _, _, sources = csgraph.dijkstra(mesh.edge_graph(), directed=False, indices=covered,
                                     min_only=True, return_predecessors=True)
    for vertex in uncovered:
        source = sources[vertex]
        if source < 0:
            distances = np.linalg.norm(mesh.vertices[covered] - mesh.vertices[vertex], axis=1)
            source = covered[np.argmin(distances)]
        thickness[vertex] = thickness[source]
    logger.info(f"Filled {uncovered.size} vertices of skipped patches from their nearest covered neighbor")


def aggregate_patches(estimates: List[PatchEstimate], patches: List[Patch], mesh: SurfaceMesh) -> Aggregate:
    """
    Merge patch estimates into per-vertex thickness and a specimen distribution.

    Vertex thickness is the equal-weight mean of the covering patches' thickness
    means. The specimen distribution is the mixture of the patch log-normal
    thickness distributions with patch weight sum(1 / multiplicity) over its
    vertices, so every covered vertex contributes total weight 1.

    Args:
        estimates: Successful patch estimates
        patches: All placed patches
        mesh: Cortex mesh with region mask

    Returns:
        Aggregate
    """
    if not estimates:
        raise NoPatchSucceededError("no patch estimate to aggregate")
    by_id = {p.id: p for p in patches}
    n = mesh.vertex_count
    multiplicity = np.zeros(n, dtype=np.int64)
    total = np.zeros(n)
    for estimate in estimates:
        members = by_id[estimate.patch_id].vertex_ids
        multiplicity[members] += 1
        total[members] += estimate.thickness_mean

    thickness = np.full(n, np.nan)
    covered = np.flatnonzero(multiplicity > 0)
    thickness[covered] = total[covered] / multiplicity[covered]
    uncovered = np.flatnonzero(mesh.region & (multiplicity == 0))
    _fill_uncovered(mesh, thickness, covered, uncovered)
    thickness[~mesh.region] = np.nan

    weights = {e.patch_id: float(np.sum(1.0 / multiplicity[by_id[e.patch_id].vertex_ids])) for e in estimates}
    total_weight = sum(weights.values())
    mixture = np.array([weights[e.patch_id] / total_weight for e in estimates])
    means = np.array([e.thickness_mean for e in estimates])
    sds = np.array([e.thickness_sd for e in estimates])
    specimen_mean = float(np.sum(mixture * means))
    second_moment = float(np.sum(mixture * (sds ** 2 + means ** 2)))
    specimen_sd = float(np.sqrt(max(second_moment - specimen_mean ** 2, 0.0)))
    return Aggregate(thickness, multiplicity, weights, specimen_mean, specimen_sd)


def patch_reference(truth_thickness: np.ndarray, patches: List[Patch]) -> Dict[int, float]:
    """Mean true thickness over each patch's vertices"""
    truth_thickness = np.asarray(truth_thickness, dtype=float)
    return {p.id: float(np.nanmean(truth_thickness[p.vertex_ids])) for p in patches}


def resolve_noise(volume: Volume, config: NoiseConfig, prior: NIX2Prior, kernels: KernelBank) -> NoiseParams:
    """Noise SDs from explicit values, the background ROI, or the defaults; logged with their origin"""
    if config.sigma_xi is not None:
        sigma_xi, xi_origin = config.sigma_xi, "config"
    else:
        sigma_xi, xi_origin = default_sigma_xi(prior.rho_ct.mu0, prior.rho_tr.mu0), "default"
    if config.sigma_eps is not None:
        sigma_eps, eps_origin = config.sigma_eps, "config"
    elif config.background_roi is not None:
        sigma_eps = estimate_noise_from_background(volume, config.background_roi, kernels.kernel(90.0))
        eps_origin = "background ROI"
    else:
        sigma_eps, eps_origin = 0.0, "default"
    sigma_grid = config.sigma_grid if config.sigma_grid is not None else 0.0
    logger.info(f"Noise: sigma_eps={sigma_eps:.4g} ({eps_origin}), sigma_xi={sigma_xi:.4g} ({xi_origin}), "
                f"sigma_grid={sigma_grid:.4g}")
    return NoiseParams(sigma_eps=sigma_eps, sigma_xi=sigma_xi, sigma_grid=sigma_grid)


class PipelineManager:
    """Runs the estimation of one specimen"""

    def __init__(self, psf_model: PsfModel, prior: NIX2Prior, config: Optional[RunConfig] = None,
                 threads: Optional[int] = None):
        """
        Initialize the pipeline

        Args:
            psf_model: Fitted PSF model
            prior: NIX2 prior
            config: Run configuration (defaults if omitted)
            threads: Worker count; defaults from the config or environment
        """
        self.psf_model = psf_model
        self.prior = prior
        self.config = config or RunConfig()
        self.threads = threads or default_threads(self.config)
        self.kernels = KernelBank(psf_model, self.config.profiles.step_mm)

    def kernel_bank(self, volume: Volume) -> KernelBank:
        """Kernels for the grid of ``volume``; the voxel footprint is included unless disabled"""
        voxel_size = volume.spacing if self.config.profiles.voxel_model else None
        if self.kernels.voxel_size != voxel_size:
            self.kernels = KernelBank(self.psf_model, self.config.profiles.step_mm, voxel_size)
        return self.kernels

    def _estimate_patch(self, volume: Volume, mesh: SurfaceMesh, patch: Patch,
                        analyzer: PatchAnalyzer) -> Tuple[int, Optional[PatchEstimate], Optional[ProfileSet], str]:
        profile_cfg = self.config.profiles
        profile_seed, mcem_seed = derive_seed(self.config.seed, patch.id).spawn(2)
        try:
            profiles = extract_profiles(volume, mesh, patch, half_length=profile_cfg.half_length_mm,
                                        step=profile_cfg.step_mm, max_profiles=profile_cfg.max_profiles,
                                        min_profiles=profile_cfg.min_profiles, seed=profile_seed,
                                        stencil=profile_cfg.voxel_model)
            estimate = analyzer.estimate(profiles, mcem_seed)
        except PATCH_FAILURES as e:
            logger.warning(f"Skipping patch {patch.id}: {e}")
            return patch.id, None, None, str(e)
        logger.info(f"Patch {patch.id}: {len(profiles)} profiles, Ct.Th {estimate.thickness_mean:.3f} mm, "
                     f"{estimate.iterations} iterations, ESS {estimate.ess:.1f}")
        return patch.id, estimate, profiles, ""

    def estimate_specimen(self, volume: Volume, mesh: SurfaceMesh) -> ThicknessModel:
        """
        Estimate the thickness distribution of a specimen.

        Args:
            volume: Calibrated scan
            mesh: Cortex mesh with region mask

        Returns:
            ThicknessModel

        Raises:
            NoPatchSucceededError: if the region is empty or every patch failed
        """
        region_count = int(mesh.region.sum())
        if region_count == 0:
            raise NoPatchSucceededError("mesh has no in-region vertices")
        target = self.config.patches.target_count
        if target > region_count:
            logger.warning(f"Reducing patch count from {target} to the {region_count} in-region vertices")
            target = region_count

        kernels = self.kernel_bank(volume)
        support = max(kernels.max_support, 0.0)
        if self.config.profiles.half_length_mm < support:
            logger.warning(f"Profile half length {self.config.profiles.half_length_mm} mm is shorter than "
                           f"the kernel support {support:.2f} mm")

        noise = resolve_noise(volume, self.config.noise, self.prior, kernels)
        patches = place_patches(mesh, target, seed=self.config.seed)
        analyzer = PatchAnalyzer(self.prior, kernels, noise, self.config.mcem.build())

        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            results = list(pool.map(lambda p: self._estimate_patch(volume, mesh, p, analyzer), patches))
        results.sort(key=lambda r: r[0])

        estimates = [r[1] for r in results if r[1] is not None]
        profile_sets = {r[0]: r[2] for r in results if r[2] is not None}
        failures = {r[0]: r[3] for r in results if r[1] is None}
        if not estimates:
            raise NoPatchSucceededError(f"all {len(patches)} patches failed")

        aggregate = aggregate_patches(estimates, patches, mesh)
        logger.info(f"Specimen Ct.Th {aggregate.specimen_mean:.3f} +/- {aggregate.specimen_sd:.3f} mm "
                    f"from {len(estimates)} of {len(patches)} patches")
        return ThicknessModel(
            mesh=mesh.with_thickness(aggregate.thickness, aggregate.multiplicity),
            patch_estimates=estimates, specimen_mean=aggregate.specimen_mean, specimen_sd=aggregate.specimen_sd,
            coverage=aggregate.multiplicity, patch_weights=aggregate.patch_weights, patches=patches,
            noise=noise, failures=failures, profile_sets=profile_sets,
        )


def estimate_specimen(volume: Volume, mesh: SurfaceMesh, psf_model: PsfModel, prior: NIX2Prior,
                      config: Optional[RunConfig] = None, threads: Optional[int] = None) -> ThicknessModel:
    """Estimate a specimen with a fresh PipelineManager"""
    return PipelineManager(psf_model, prior, config, threads).estimate_specimen(volume, mesh)
