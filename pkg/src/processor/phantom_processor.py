"""
Phantom Processor Module
Synthesizes ground-truth scans of thin plates and tilted cylindrical shells:
partial-volume rasterization on a super-sampled grid, separable PSF blur, box
averaging to the clinical grid and seeded white noise.
"""

import json
import logging
import os
from dataclasses import asdict, dataclass
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
from scipy import ndimage

from src.errors import ConfigError
from src.mesh_manager import SurfaceMesh, write_ply
from src.processor.psf_processor import PsfModel, in_plane_psf
from src.utils.helper_functions import atomic_write_text
from src.volume_manager import Volume, write_metaimage

logger = logging.getLogger("phantom_processor")

MIN_SAMPLES_ACROSS = 4
MIN_SUPER_SAMPLING = 4
KERNEL_SIGMAS = 7.0
NOISE_MODES = ("post", "pre")


@dataclass(frozen=True)
class PlateGeometry:
    """Plane through the volume center with normal (sin a, 0, cos a) pointing to background"""
    alpha_deg: float
    thickness_mm: float
    mesh_spacing_mm: float = 0.5
    kind: str = "plate"

    @property
    def normal(self) -> np.ndarray:
        a = np.deg2rad(self.alpha_deg)
        return np.array([np.sin(a), 0.0, np.cos(a)])


@dataclass(frozen=True)
class ShellGeometry:
    """Cylindrical shell through the volume center, axis tilted about y by ``tilt_deg``"""
    radius_mm: float
    thickness_mm: float
    height_mm: float
    tilt_deg: float = 0.0
    n_theta: int = 64
    n_axial: int = 16
    kind: str = "shell"

    @property
    def axis(self) -> np.ndarray:
        t = np.deg2rad(self.tilt_deg)
        return np.array([np.sin(t), 0.0, np.cos(t)])

    def frame(self) -> Tuple[np.ndarray, np.ndarray]:
        t = np.deg2rad(self.tilt_deg)
        return np.array([np.cos(t), 0.0, -np.sin(t)]), np.array([0.0, 1.0, 0.0])


Geometry = Union[PlateGeometry, ShellGeometry]


@dataclass(frozen=True)
class PhantomSpec:
    geometry: Geometry
    densities: Tuple[float, float, float]
    dims: Tuple[int, int, int]
    spacing: Tuple[float, float, float]
    noise_sd: float = 0.0
    noise_mode: str = "post"
    super_sampling: int = 4
    seed: int = 0
    profile_half_length_mm: float = 3.0

    def __post_init__(self):
        object.__setattr__(self, "densities", tuple(float(v) for v in self.densities))
        object.__setattr__(self, "dims", tuple(int(v) for v in self.dims))
        object.__setattr__(self, "spacing", tuple(float(v) for v in self.spacing))
        if len(self.densities) != 3 or len(self.dims) != 3 or len(self.spacing) != 3:
            raise ValueError("densities, dims and spacing need three values each")
        if min(self.dims) < 1 or min(self.spacing) <= 0:
            raise ValueError("dims and spacing must be positive")
        thickness = self.geometry.thickness_mm
        if thickness <= 0:
            raise ValueError(f"thickness must be positive, got {thickness}")
        if int(self.super_sampling) != self.super_sampling or self.super_sampling < MIN_SUPER_SAMPLING:
            raise ValueError(f"super_sampling must be an integer >= {MIN_SUPER_SAMPLING}, got {self.super_sampling}")
        object.__setattr__(self, "super_sampling", int(self.super_sampling))
        samples_across = thickness / (min(self.spacing) / self.super_sampling)
        if samples_across < MIN_SAMPLES_ACROSS:
            raise ValueError(f"super_sampling {self.super_sampling} resolves the {thickness} mm plate by "
                             f"{samples_across:.1f} samples, {MIN_SAMPLES_ACROSS} required")
        if self.noise_sd < 0 or self.noise_mode not in NOISE_MODES:
            raise ValueError(f"noise_sd must be >= 0 and noise_mode one of {NOISE_MODES}")

    @property
    def origin(self) -> np.ndarray:
        """Grid origin that puts the volume center at (0, 0, 0)"""
        return -(np.asarray(self.dims) - 1) * np.asarray(self.spacing) / 2.0

    @property
    def fine_spacing(self) -> np.ndarray:
        return np.asarray(self.spacing) / self.super_sampling

    def fine_axis(self, axis: int) -> np.ndarray:
        s = self.super_sampling
        f = np.arange(self.dims[axis] * s)
        return self.origin[axis] + (f - (s - 1) / 2.0) * self.fine_spacing[axis]

    def to_record(self) -> Dict[str, Any]:
        return {
            "geometry": asdict(self.geometry), "densities": list(self.densities),
            "grid": {"dims": list(self.dims), "spacing": list(self.spacing)},
            "noise_sd": self.noise_sd, "noise_mode": self.noise_mode,
            "super_sampling": self.super_sampling, "seed": self.seed,
            "profile_half_length_mm": self.profile_half_length_mm,
        }


@dataclass(frozen=True)
class PhantomResult:
    volume: Volume
    mesh: SurfaceMesh
    truth: Dict[str, Any]


def _band_fractions(u: np.ndarray, h: np.ndarray, w: float) -> Tuple[np.ndarray, np.ndarray]:
    """Fractions of [u-h, u+h] beyond +w (background) and below -w (trabecular)"""
    background = np.clip((u + h - w) / (2.0 * h), 0.0, 1.0)
    trabecular = np.clip((h - u - w) / (2.0 * h), 0.0, 1.0)
    return background, trabecular


def rasterize(spec: PhantomSpec) -> np.ndarray:
    """
    Ideal density field on the super-sampled grid.

    Each fine voxel averages the step profile over its extent projected onto the
    local geometry normal.
    """
    xs, ys, zs = (spec.fine_axis(a) for a in range(3))
    dx, dy, dz = spec.fine_spacing
    rho_bg, rho_ct, rho_tr = spec.densities
    w = spec.geometry.thickness_mm / 2.0
    field = np.empty((xs.size, ys.size, zs.size), dtype=np.float32)
    X_all = xs[:, None, None]
    Y = ys[None, :, None]
    Z = zs[None, None, :]
    block = max(1, spec.super_sampling)
    for start in range(0, xs.size, block):
        X = X_all[start:start + block]
        if isinstance(spec.geometry, PlateGeometry):
            n = spec.geometry.normal
            u = X * n[0] + Y * n[1] + Z * n[2]
            h = np.full_like(u, 0.5 * (abs(n[0]) * dx + abs(n[1]) * dy + abs(n[2]) * dz))
        else:
            a = spec.geometry.axis
            along = X * a[0] + Y * a[1] + Z * a[2]
            rx, ry, rz = X - along * a[0], Y - along * a[1], Z - along * a[2]
            r = np.sqrt(rx ** 2 + ry ** 2 + rz ** 2)
            safe = np.where(r > 0, r, 1.0)
            h = 0.5 * (np.abs(rx) * dx + np.abs(ry) * dy + np.abs(rz) * dz) / safe
            h = np.where(r > 0, h, 0.5 * min(dx, dy, dz))
            u = r - spec.geometry.radius_mm
        background, trabecular = _band_fractions(u, h, w)
        cortical = 1.0 - background - trabecular
        field[start:start + block] = rho_bg * background + rho_ct * cortical + rho_tr * trabecular
    return field


def _normalized(taps: np.ndarray) -> np.ndarray:
    return taps / taps.sum()


def blur_kernels(psf_model: PsfModel, fine_spacing) -> Tuple[Optional[np.ndarray], Optional[np.ndarray]]:
    """Sampled in-plane line-spread and out-of-plane Gaussian taps on the fine grid"""
    in_plane_sigma = 1.0 / (2.0 * np.pi * min(k.c for k in psf_model.components))
    step = min(fine_spacing[0], fine_spacing[1])
    half = int(np.ceil(KERNEL_SIGMAS * in_plane_sigma / step))
    in_plane = _normalized(in_plane_psf(psf_model, np.arange(-half, half + 1) * step))
    out_of_plane = None
    sigma_z = psf_model.out_of_plane_sigma
    if sigma_z > 0:
        half_z = int(np.ceil(KERNEL_SIGMAS * sigma_z / fine_spacing[2]))
        t = np.arange(-half_z, half_z + 1) * fine_spacing[2]
        out_of_plane = _normalized(np.exp(-t ** 2 / (2.0 * sigma_z ** 2)))
    return in_plane, out_of_plane


def blur(field: np.ndarray, psf_model: PsfModel, fine_spacing) -> np.ndarray:
    """Separable PSF blur: in-plane LSF along x and y, Gaussian along z (mass conserving)"""
    in_plane, out_of_plane = blur_kernels(psf_model, fine_spacing)
    result = ndimage.convolve1d(field, in_plane, axis=0, mode="reflect")
    result = ndimage.convolve1d(result, in_plane, axis=1, mode="reflect")
    if out_of_plane is not None:
        result = ndimage.convolve1d(result, out_of_plane, axis=2, mode="reflect")
    return result


def box_average(field: np.ndarray, factor: int) -> np.ndarray:
    """Average factor^3 blocks of the fine grid into clinical voxels"""
    nx, ny, nz = (d // factor for d in field.shape)
    blocks = field.reshape(nx, factor, ny, factor, nz, factor)
    return blocks.mean(axis=(1, 3, 5), dtype=np.float64)


def plate_mesh(spec: PhantomSpec) -> SurfaceMesh:
    """Planar grid on the plate mid-surface, clipped so profiles stay inside the volume"""
    geometry = spec.geometry
    n = geometry.normal
    u1 = np.array([n[2], 0.0, -n[0]])
    u2 = np.array([0.0, 1.0, 0.0])
    lower = spec.origin
    upper = -spec.origin
    margin = spec.profile_half_length_mm + max(spec.spacing)
    spacing = geometry.mesh_spacing_mm

    def fits(points: np.ndarray) -> np.ndarray:
        ok = np.ones(len(points), dtype=bool)
        for sign in (-1.0, 0.0, 1.0):
            moved = points + sign * margin * n
            ok &= np.all((moved >= lower) & (moved <= upper), axis=1)
        return ok

    reach = float(np.linalg.norm(upper - lower))
    s_grid = np.arange(-np.floor(reach / spacing), np.floor(reach / spacing) + 1) * spacing
    s_ok = s_grid[fits(s_grid[:, None] * u1[None, :])]
    t_ok = s_grid[fits(s_grid[:, None] * u2[None, :])]
    if s_ok.size < 2 or t_ok.size < 2:
        raise ValueError("volume is too small for a plate mesh with the profile margin")
    ss, tt = np.meshgrid(s_ok, t_ok, indexing="ij")
    vertices = ss.ravel()[:, None] * u1 + tt.ravel()[:, None] * u2
    ns, nt = ss.shape
    index = np.arange(ns * nt).reshape(ns, nt)
    a, b = index[:-1, :-1].ravel(), index[1:, :-1].ravel()
    c, d = index[1:, 1:].ravel(), index[:-1, 1:].ravel()
    triangles = np.concatenate([np.column_stack([a, b, c]), np.column_stack([a, c, d])])
    normals = np.tile(n, (len(vertices), 1))
    return SurfaceMesh(vertices, normals, triangles, thickness=np.full(len(vertices), geometry.thickness_mm))


def shell_mesh(spec: PhantomSpec) -> SurfaceMesh:
    """
    Triangulated cylinder mid-surface with outward normals.

    Vertices whose profile segment would leave the volume are flagged out of region.
    """
    geometry = spec.geometry
    if not isinstance(geometry, ShellGeometry):
        raise ValueError("shell_mesh needs a cylindrical shell geometry")
    e1, e2 = geometry.frame()
    axis = geometry.axis
    thetas = 2.0 * np.pi * np.arange(geometry.n_theta) / geometry.n_theta
    heights = np.linspace(-geometry.height_mm / 2.0, geometry.height_mm / 2.0, geometry.n_axial)
    tt, hh = np.meshgrid(thetas, heights, indexing="ij")
    normals = np.cos(tt.ravel())[:, None] * e1 + np.sin(tt.ravel())[:, None] * e2
    vertices = geometry.radius_mm * normals + hh.ravel()[:, None] * axis

    index = np.arange(geometry.n_theta * geometry.n_axial).reshape(geometry.n_theta, geometry.n_axial)
    following = np.roll(index, -1, axis=0)
    a, b = index[:, :-1].ravel(), following[:, :-1].ravel()
    c, d = following[:, 1:].ravel(), index[:, 1:].ravel()
    triangles = np.concatenate([np.column_stack([a, b, c]), np.column_stack([a, c, d])])

    lower, upper = spec.origin, -spec.origin
    margin = spec.profile_half_length_mm
    region = np.ones(len(vertices), dtype=bool)
    for sign in (-1.0, 1.0):
        moved = vertices + sign * margin * normals
        region &= np.all((moved >= lower) & (moved <= upper), axis=1)
    return SurfaceMesh(vertices, normals, triangles, region=region,
                       thickness=np.full(len(vertices), geometry.thickness_mm))


def synthesize_phantom(spec: PhantomSpec, psf_model: PsfModel) -> PhantomResult:
    """
    Build a phantom scan with its mid-surface mesh and ground truth.

    Args:
        spec: Phantom description
        psf_model: PSF used for the blur

    Returns:
        PhantomResult (calibrated volume, mesh with true thickness, truth record)
    """
    field = rasterize(spec)
    rng = np.random.default_rng(spec.seed)
    if spec.noise_mode == "pre" and spec.noise_sd > 0:
        field += rng.normal(0.0, spec.noise_sd, field.shape).astype(np.float32)
    blurred = blur(field, psf_model, spec.fine_spacing)
    del field
    data = box_average(blurred, spec.super_sampling)
    if spec.noise_mode == "post" and spec.noise_sd > 0:
        data = data + rng.normal(0.0, spec.noise_sd, data.shape)

    volume = Volume(data=data, spacing=spec.spacing, origin=tuple(spec.origin), calibrated=True)
    mesh = plate_mesh(spec) if isinstance(spec.geometry, PlateGeometry) else shell_mesh(spec)
    truth = {"thickness_mm": spec.geometry.thickness_mm, "densities": list(spec.densities), "seed": spec.seed,
             "spec": spec.to_record()}
    logger.info(f"Synthesized {spec.geometry.kind} phantom: dims={spec.dims}, {mesh.vertex_count} mesh vertices")
    return PhantomResult(volume=volume, mesh=mesh, truth=truth)


def _pick(data: Dict[str, Any], allowed, required, where: str) -> Dict[str, Any]:
    if not isinstance(data, dict):
        raise ConfigError("expected an object", field=where)
    for key in data:
        if key not in allowed:
            raise ConfigError("unknown key", field=f"{where}{key}")
    for key in required:
        if key not in data:
            raise ConfigError("missing key", field=f"{where}{key}")
    return data


def parse_phantom_spec(data: Dict[str, Any]) -> PhantomSpec:
    """Build a PhantomSpec from its JSON object, rejecting unknown keys"""
    _pick(data, {"geometry", "densities", "grid", "noise_sd", "noise_mode", "super_sampling", "seed",
                 "profile_half_length_mm"}, {"geometry", "densities", "grid"}, "")
    geometry_data = dict(data["geometry"]) if isinstance(data["geometry"], dict) else data["geometry"]
    _pick(geometry_data, {"kind", "alpha_deg", "thickness_mm", "mesh_spacing_mm", "radius_mm", "height_mm",
                          "tilt_deg", "n_theta", "n_axial"}, {"kind", "thickness_mm"}, "geometry.")
    kind = geometry_data.pop("kind")
    try:
        if kind == "plate":
            _pick(geometry_data, {"alpha_deg", "thickness_mm", "mesh_spacing_mm"}, {"alpha_deg"}, "geometry.")
            geometry = PlateGeometry(**geometry_data)
        elif kind == "shell":
            _pick(geometry_data, {"radius_mm", "thickness_mm", "height_mm", "tilt_deg", "n_theta", "n_axial"},
                  {"radius_mm", "height_mm"}, "geometry.")
            geometry = ShellGeometry(**geometry_data)
        else:
            raise ConfigError(f"unknown geometry kind {kind!r}", field="geometry.kind")
        grid = _pick(data["grid"], {"dims", "spacing"}, {"dims", "spacing"}, "grid.")
        return PhantomSpec(geometry=geometry, densities=tuple(data["densities"]), dims=tuple(grid["dims"]),
                           spacing=tuple(grid["spacing"]), noise_sd=float(data.get("noise_sd", 0.0)),
                           noise_mode=data.get("noise_mode", "post"),
                           super_sampling=data.get("super_sampling", 4), seed=int(data.get("seed", 0)),
                           profile_half_length_mm=float(data.get("profile_half_length_mm", 3.0)))
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e))


def load_phantom_spec(path: str) -> PhantomSpec:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read phantom spec: {e}", path=path)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON: {e}", path=path)
    try:
        return parse_phantom_spec(data)
    except ConfigError as e:
        raise ConfigError(str(e), path=path)


def write_phantom(result: PhantomResult, output_dir: str) -> Dict[str, str]:
    """Write volume.mhd/.raw, mesh.ply, truth.json and truth_thickness.csv"""
    paths = {name: os.path.join(output_dir, name)
             for name in ("volume.mhd", "mesh.ply", "truth.json", "truth_thickness.csv")}
    truth_json = json.dumps(result.truth, indent=2, ensure_ascii=False) + "\n"
    rows = ["vertex_id,thickness_mm"] + [f"{i},{float(t)!r}" for i, t in enumerate(result.mesh.thickness)]
    truth_csv = "\n".join(rows) + "\n"
    write_metaimage(result.volume, paths["volume.mhd"])
    write_ply(result.mesh, paths["mesh.ply"])
    atomic_write_text(paths["truth.json"], truth_json)
    atomic_write_text(paths["truth_thickness.csv"], truth_csv)
    return paths
