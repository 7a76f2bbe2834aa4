"""
Profile Processor Module
Samples 1-D density profiles perpendicular to the cortex mesh and orients them
so that negative positions lie on the background side.
"""

import logging
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Sequence

import numpy as np

from src.errors import EmptyPatchError
from src.mesh_manager import Patch, SurfaceMesh
from src.volume_manager import InterpolationStencil, Volume

logger = logging.getLogger("profile_processor")

DEFAULT_HALF_LENGTH = 3.0
DEFAULT_STEP = 0.1
DEFAULT_MIN_PROFILES = 11
DEFAULT_MAX_PROFILES = 51
# Distance from the vertex beyond which the two sides are compared
ORIENTATION_DISTANCE = 2.0


@dataclass(frozen=True)
class Profile:
    """Densities along ``vertex + t * direction``; negative t is background"""
    patch_id: int
    vertex_id: int
    alpha: float
    ts: np.ndarray
    values: np.ndarray
    direction: Optional[np.ndarray] = None
    stencil: Optional[InterpolationStencil] = None

    def __post_init__(self):
        ts = np.asarray(self.ts, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if ts.ndim != 1 or ts.shape != values.shape or ts.size < 2:
            raise ValueError("profile needs matching 1-D ts and values with at least two samples")
        steps = np.diff(ts)
        if np.any(steps <= 0) or not np.allclose(steps, steps[0], rtol=1e-9, atol=1e-12):
            raise ValueError("profile positions must be strictly increasing and uniform")
        if not np.all(np.isfinite(values)):
            raise ValueError("profile values must be finite")
        if not 0.0 <= self.alpha <= 90.0:
            raise ValueError(f"alpha must lie in [0, 90], got {self.alpha}")
        if self.stencil is not None and len(self.stencil) != ts.size:
            raise ValueError(f"stencil covers {len(self.stencil)} samples, profile has {ts.size}")
        object.__setattr__(self, "ts", ts)
        object.__setattr__(self, "values", values)

    @property
    def step(self) -> float:
        return float(self.ts[1] - self.ts[0])

    def __len__(self) -> int:
        return len(self.ts)


@dataclass(frozen=True)
class ProfileSet:
    """The profiles of one patch, in vertex order"""
    patch_id: int
    profiles: List[Profile] = field(default_factory=list)
    dropped: int = 0

    def __iter__(self) -> Iterator[Profile]:
        return iter(self.profiles)

    def __len__(self) -> int:
        return len(self.profiles)

    def __getitem__(self, index: int) -> Profile:
        return self.profiles[index]

    @property
    def alphas(self) -> np.ndarray:
        return np.array([p.alpha for p in self.profiles])

    def replicated(self, times: int) -> "ProfileSet":
        """The same profiles repeated ``times`` times"""
        return ProfileSet(self.patch_id, list(self.profiles) * times, self.dropped)


def profile_alpha(direction: Sequence[float]) -> float:
    """Angle in degrees between a direction and the z-axis, folded into [0, 90]"""
    d = np.asarray(direction, dtype=float)
    cosine = abs(d[2]) / np.linalg.norm(d)
    return float(np.degrees(np.arccos(np.clip(cosine, 0.0, 1.0))))


def profile_positions(half_length: float, step: float) -> np.ndarray:
    """Symmetric sample positions ``-n*step .. n*step`` with ``n*step`` close to half_length"""
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    if half_length < step:
        raise ValueError(f"half length {half_length} is shorter than one step {step}")
    n = int(round(half_length / step))
    return np.arange(-n, n + 1) * step


def sample_line(volume: Volume, point: Sequence[float], direction: Sequence[float], ts: np.ndarray) -> np.ndarray:
    """
    Sample the volume at ``point + t * direction`` for every t.

    Raises:
        OutOfBoundsError: if any sample leaves the grid
    """
    direction = np.asarray(direction, dtype=float)
    direction = direction / np.linalg.norm(direction)
    points = np.asarray(point, dtype=float)[None, :] + np.asarray(ts, dtype=float)[:, None] * direction[None, :]
    return volume.sample(points)


def _orient(values: np.ndarray, ts: np.ndarray, distance: float) -> bool:
    """True if the trabecular side (higher mean) lies at negative t"""
    outside = values[ts <= -distance]
    inside = values[ts >= distance]
    return float(np.mean(outside)) > float(np.mean(inside))


def extract_profiles(volume: Volume, mesh: SurfaceMesh, patch: Patch,
                     half_length: float = DEFAULT_HALF_LENGTH, step: float = DEFAULT_STEP,
                     max_profiles: int = DEFAULT_MAX_PROFILES, min_profiles: int = DEFAULT_MIN_PROFILES,
                     seed: Optional[int] = None, stencil: bool = True) -> ProfileSet:
    """
    Sample profiles through the patch vertices along their normals.

    Patches with more than ``max_profiles`` vertices are subsampled uniformly
    with a seeded shuffle. Profiles leaving the grid are dropped.

    Args:
        volume: Calibrated scan
        mesh: Cortex mesh
        patch: Patch whose vertices are sampled
        half_length: Profile half length (mm)
        step: Sample spacing (mm)
        max_profiles: Upper bound on profiles per patch
        min_profiles: Fewest surviving profiles accepted (capped at the patch size)
        seed: Seed of the subsampling shuffle
        stencil: Attach the interpolation stencil of every profile

    Returns:
        ProfileSet ordered by vertex id

    Raises:
        EmptyPatchError: if too few profiles survive
    """
    if not volume.calibrated:
        logger.warning("Extracting profiles from an uncalibrated volume")
    ts = profile_positions(half_length, step)
    distance = min(ORIENTATION_DISTANCE, ts[-1])

    vertex_ids = np.asarray(patch.vertex_ids)
    if len(vertex_ids) > max_profiles:
        rng = np.random.default_rng(seed)
        vertex_ids = np.sort(rng.permutation(vertex_ids)[:max_profiles])

    profiles = []
    for vertex_id in vertex_ids:
        point = mesh.vertices[vertex_id]
        direction = -mesh.normals[vertex_id]
        points = point[None, :] + ts[:, None] * direction[None, :]
        if not np.all(volume.inside(points)):
            continue
        values = volume.sample(points)
        if not np.all(np.isfinite(values)):
            continue
        grid_stencil = volume.interpolation_stencil(points, point, direction) if stencil else None
        if _orient(values, ts, distance):
            values = values[::-1]
            direction = -direction
            grid_stencil = grid_stencil.reversed() if grid_stencil is not None else None
        profiles.append(Profile(patch_id=patch.id, vertex_id=int(vertex_id), alpha=profile_alpha(direction),
                                ts=ts, values=values, direction=direction, stencil=grid_stencil))

    dropped = len(vertex_ids) - len(profiles)
    required = max(1, min(min_profiles, len(vertex_ids)))
    if len(profiles) < required:
        raise EmptyPatchError(f"patch {patch.id}: {len(profiles)} of {len(vertex_ids)} profiles inside the volume, "
                              f"{required} required")
    if dropped:
        logger.info(f"Patch {patch.id}: dropped {dropped} profiles leaving the volume")
    return ProfileSet(patch_id=patch.id, profiles=profiles, dropped=dropped)
