"""
Volume Manager Module
Holds the scan grid, reads and writes MetaImage files, calibrates densities
and samples the grid by trilinear interpolation.
"""

import os
import logging
from dataclasses import dataclass, replace
from typing import Dict, Sequence, Tuple

import numpy as np
from scipy import ndimage, sparse, stats

from src.errors import AlreadyCalibratedError, DataError, OutOfBoundsError
from src.utils.helper_functions import atomic_write_bytes, atomic_write_text

logger = logging.getLogger("volume_manager")

# MetaImage element types we read and write, little-endian only
ELEMENT_TYPES = {
    "MET_SHORT": np.dtype("<i2"),
    "MET_FLOAT": np.dtype("<f4"),
}

# Slack for points that sit on the hull up to rounding
_HULL_TOLERANCE = 1e-9


@dataclass(frozen=True)
class InterpolationStencil:
    """
    Voxels read by trilinear interpolation at the samples of one profile.

    ``corner_ts[i, c]`` is the center of corner voxel c of sample i projected on
    the profile axis, ``weights[i, c]`` its interpolation weight and ``gram`` the
    matrix W W^T of the sparse sample-by-voxel weight matrix W.
    """
    corner_ts: np.ndarray
    weights: np.ndarray
    gram: np.ndarray

    def __post_init__(self):
        corner_ts = np.asarray(self.corner_ts, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        gram = np.asarray(self.gram, dtype=float)
        if corner_ts.ndim != 2 or corner_ts.shape != weights.shape or corner_ts.shape[1] != 8:
            raise ValueError("stencil needs matching (L, 8) corner positions and weights")
        if gram.shape != (len(weights), len(weights)):
            raise ValueError(f"stencil gram must be ({len(weights)}, {len(weights)}), got {gram.shape}")
        object.__setattr__(self, "corner_ts", corner_ts)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "gram", gram)

    def __len__(self) -> int:
        return len(self.weights)

    def reversed(self) -> "InterpolationStencil":
        """Stencil of the same samples read in reverse order along the opposite direction"""
        return InterpolationStencil(-self.corner_ts[::-1], self.weights[::-1], self.gram[::-1, ::-1])


@dataclass(frozen=True)
class Volume:
    """3-D density grid; ``data[i, j, k]`` sits at ``origin + (i, j, k) * spacing`` (mm)"""
    data: np.ndarray
    spacing: Tuple[float, float, float]
    origin: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    calibrated: bool = False

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3-D array, got shape {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing must be 3 positive lengths, got {self.spacing}")
        origin = tuple(float(o) for o in self.origin)
        if len(origin) != 3:
            raise ValueError(f"origin must be a 3-vector, got {self.origin}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape)

    @property
    def center(self) -> np.ndarray:
        """Physical position of the grid center (mm)"""
        return np.asarray(self.origin) + (np.asarray(self.dims) - 1) * np.asarray(self.spacing) / 2.0

    def to_index(self, points: np.ndarray) -> np.ndarray:
        """Convert physical points (..., 3) to continuous voxel indices"""
        return (np.asarray(points, dtype=float) - np.asarray(self.origin)) / np.asarray(self.spacing)

    def inside(self, points: np.ndarray) -> np.ndarray:
        """Boolean mask of points inside the grid hull"""
        index = self.to_index(points)
        upper = np.asarray(self.dims) - 1
        return np.all((index >= -_HULL_TOLERANCE) & (index <= upper + _HULL_TOLERANCE), axis=-1)

    def sample(self, points: np.ndarray) -> np.ndarray:
        """Trilinear interpolation at many points (..., 3)

        Raises:
            OutOfBoundsError: if any point lies outside the grid hull
        """
        points = np.asarray(points, dtype=float)
        if not np.all(self.inside(points)):
            raise OutOfBoundsError("sample point outside the volume grid")
        index = self.to_index(points).reshape(-1, 3)
        index = np.clip(index, 0, np.asarray(self.dims) - 1)
        values = ndimage.map_coordinates(self.data, index.T, order=1, mode="nearest")
        return values.reshape(points.shape[:-1])

    def interpolation_corners(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Corner voxels and weights of the trilinear interpolation used by ``sample``.

        Returns:
            (indices (P, 8, 3), weights (P, 8)); the weighted sum of the corner
            values equals ``sample(points)``
        """
        upper_index = np.asarray(self.dims) - 1
        index = np.clip(self.to_index(points).reshape(-1, 3), 0, upper_index)
        lower = np.clip(np.floor(index).astype(np.int64), 0, np.maximum(upper_index - 1, 0))
        upper = np.minimum(lower + 1, upper_index)
        frac = np.where(upper > lower, index - lower, 0.0)
        indices = np.empty((len(index), 8, 3), dtype=np.int64)
        weights = np.ones((len(index), 8))
        for corner in range(8):
            for axis in range(3):
                high = bool(corner >> axis & 1)
                indices[:, corner, axis] = upper[:, axis] if high else lower[:, axis]
                weights[:, corner] *= frac[:, axis] if high else 1.0 - frac[:, axis]
        return indices, weights

    def interpolation_stencil(self, points: np.ndarray, anchor: Sequence[float],
                              direction: Sequence[float]) -> InterpolationStencil:
        """
        Interpolation stencil of profile samples ``points`` along ``anchor + t * direction``.

        Raises:
            OutOfBoundsError: if any point lies outside the grid hull
        """
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        if not np.all(self.inside(points)):
            raise OutOfBoundsError("sample point outside the volume grid")
        direction = np.asarray(direction, dtype=float)
        direction = direction / np.linalg.norm(direction)
        indices, weights = self.interpolation_corners(points)
        centers = np.asarray(self.origin) + indices * np.asarray(self.spacing)
        corner_ts = (centers - np.asarray(anchor, dtype=float)) @ direction
        flat = np.ravel_multi_index(indices.reshape(-1, 3).T, self.dims)
        rows = np.repeat(np.arange(len(points)), 8)
        matrix = sparse.csr_matrix((weights.ravel(), (rows, flat)), shape=(len(points), self.data.size))
        gram = (matrix @ matrix.T).toarray()
        return InterpolationStencil(corner_ts, weights, gram)


def trilinear_sample(volume: Volume, point: Sequence[float]) -> float:
    """
    Interpolate the density at one physical point.

    Args:
        volume: The scan grid
        point: Position in mm

    Returns:
        Trilinear interpolation of the 8 surrounding voxels
    """
    return float(volume.sample(np.asarray(point, dtype=float)[None, :])[0])


def calibrate_density(volume: Volume, slope: float, intercept: float) -> Volume:
    """
    Map scanner units to mg CaHA/cm3 with ``slope * v + intercept``.

    Values are not clamped; background may end up negative.
    """
    if slope <= 0:
        raise ValueError(f"calibration slope must be positive, got {slope}")
    if volume.calibrated:
        raise AlreadyCalibratedError("volume is already calibrated")
    logger.info(f"Calibrating volume: slope={slope:g} intercept={intercept:g}")
    return replace(volume, data=slope * volume.data + intercept, calibrated=True)


def fit_calibration(raw_values: Sequence[float], densities: Sequence[float]) -> Tuple[float, float]:
    """
    Fit the linear calibration through phantom rod measurements.

    Args:
        raw_values: Mean scanner value inside each rod
        densities: Known rod densities (mg CaHA/cm3)

    Returns:
        (slope, intercept)
    """
    raw_values = np.asarray(raw_values, dtype=float)
    densities = np.asarray(densities, dtype=float)
    if raw_values.size < 2 or raw_values.size != densities.size:
        raise DataError("calibration needs at least two matching rod pairs")
    fit = stats.linregress(raw_values, densities)
    return float(fit.slope), float(fit.intercept)


def background_sd(volume: Volume, roi: Sequence[Sequence[int]]) -> float:
    """SD of the voxels inside an index box ``[[i0, i1], [j0, j1], [k0, k1]]`` (end exclusive)"""
    (i0, i1), (j0, j1), (k0, k1) = roi
    block = volume.data[i0:i1, j0:j1, k0:k1]
    if block.size < 2:
        raise DataError("background ROI must contain at least two voxels", field="noise.background_roi")
    return float(np.std(block, ddof=1))


def _parse_header(header_path: str) -> Dict[str, str]:
    fields = {}
    with open(header_path, "r", encoding="utf-8") as f:
        for line in f:
            if "=" not in line:
                continue
            key, value = line.split("=", 1)
            fields[key.strip()] = value.strip()
    return fields


def read_metaimage(header_path: str) -> Volume:
    """
    Read a MetaImage pair (.mhd header and external .raw data).

    Args:
        header_path: Path to the .mhd file

    Returns:
        Uncalibrated Volume
    """
    try:
        fields = _parse_header(header_path)
    except OSError as e:
        raise DataError(f"cannot read header: {e}", path=header_path)

    def require(key: str) -> str:
        if key not in fields:
            raise DataError("missing header key", path=header_path, field=key)
        return fields[key]

    if fields.get("ObjectType", "Image") != "Image":
        raise DataError("only Image objects are supported", path=header_path, field="ObjectType")
    if int(require("NDims")) != 3:
        raise DataError("only 3-D images are supported", path=header_path, field="NDims")
    for key in ("BinaryDataByteOrderMSB", "ElementByteOrderMSB"):
        if fields.get(key, "False").lower() == "true":
            raise DataError("big-endian data is not supported", path=header_path, field=key)
    if fields.get("CompressedData", "False").lower() == "true":
        raise DataError("compressed data is not supported", path=header_path, field="CompressedData")
    matrix = fields.get("TransformMatrix")
    if matrix and not np.allclose([float(v) for v in matrix.split()], np.eye(3).ravel()):
        raise DataError("rotated volumes are not supported", path=header_path, field="TransformMatrix")

    element_type = require("ElementType")
    if element_type not in ELEMENT_TYPES:
        raise DataError(f"unsupported element type {element_type}", path=header_path, field="ElementType")
    try:
        dims = [int(v) for v in require("DimSize").split()]
        spacing = [float(v) for v in fields.get("ElementSpacing", "1 1 1").split()]
        origin = [float(v) for v in fields.get("Offset", fields.get("Origin", "0 0 0")).split()]
    except ValueError:
        raise DataError("malformed numeric header value", path=header_path)
    if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
        raise DataError("DimSize, ElementSpacing and Offset need three values", path=header_path)

    data_file = require("ElementDataFile")
    if data_file.upper() == "LOCAL":
        raise DataError("embedded (LOCAL) data is not supported", path=header_path, field="ElementDataFile")
    data_path = os.path.join(os.path.dirname(os.path.abspath(header_path)), data_file)
    dtype = ELEMENT_TYPES[element_type]
    try:
        raw = np.fromfile(data_path, dtype=dtype)
    except OSError as e:
        raise DataError(f"cannot read data file: {e}", path=data_path)
    if raw.size != int(np.prod(dims)):
        raise DataError(f"expected {int(np.prod(dims))} elements, found {raw.size}", path=data_path)

    # x varies fastest on disk
    data = raw.reshape(dims[::-1]).transpose(2, 1, 0).astype(float)
    logger.info(f"Read volume {header_path}: dims={dims} spacing={spacing}")
    return Volume(data=data, spacing=tuple(spacing), origin=tuple(origin))


def write_metaimage(volume: Volume, header_path: str, element_type: str = "MET_FLOAT") -> None:
    """Write a volume as a MetaImage pair next to each other"""
    if element_type not in ELEMENT_TYPES:
        raise ValueError(f"unsupported element type {element_type}")
    dtype = ELEMENT_TYPES[element_type]
    data = volume.data
    if dtype.kind == "i":
        data = np.rint(data)
    raw_name = os.path.splitext(os.path.basename(header_path))[0] + ".raw"
    raw_path = os.path.join(os.path.dirname(os.path.abspath(header_path)), raw_name)

    def triple(values) -> str:
        return " ".join(repr(float(v)) for v in values)

    header = (
        "ObjectType = Image\n"
        "NDims = 3\n"
        "BinaryData = True\n"
        "BinaryDataByteOrderMSB = False\n"
        "CompressedData = False\n"
        f"Offset = {triple(volume.origin)}\n"
        f"ElementSpacing = {triple(volume.spacing)}\n"
        f"DimSize = {' '.join(str(d) for d in volume.dims)}\n"
        f"ElementType = {element_type}\n"
        f"ElementDataFile = {raw_name}\n"
    )
    atomic_write_bytes(raw_path, data.transpose(2, 1, 0).astype(dtype).tobytes())
    atomic_write_text(header_path, header)
