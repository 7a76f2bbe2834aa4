"""
Mesh Manager Module
Holds the cortex-center triangle mesh, reads and writes PLY files and
places quasi-random, partially overlapping patches on the analyzed region.
"""

import io
import logging
from dataclasses import dataclass, replace
from typing import List, Optional

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from plyfile import PlyData, PlyElement, PlyParseError

from src.errors import DataError, InsufficientRegionError
from src.utils.helper_functions import atomic_write_bytes

logger = logging.getLogger("mesh_manager")

NORMAL_TOLERANCE = 1e-6
RADIUS_GROWTH = 1.1


@dataclass(frozen=True)
class SurfaceMesh:
    """Triangle mesh along the cortex center with per-vertex normals and thickness"""
    vertices: np.ndarray
    normals: np.ndarray
    triangles: np.ndarray
    region: Optional[np.ndarray] = None
    thickness: Optional[np.ndarray] = None
    multiplicity: Optional[np.ndarray] = None

    def __post_init__(self):
        vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        normals = np.asarray(self.normals, dtype=float).reshape(-1, 3)
        triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        n = len(vertices)
        if len(normals) != n:
            raise DataError(f"{len(normals)} normals for {n} vertices", field="normals")
        lengths = np.linalg.norm(normals, axis=1)
        if n and np.max(np.abs(lengths - 1.0)) > NORMAL_TOLERANCE:
            raise DataError("normals must have unit length", field="normals")
        if triangles.size and (triangles.min() < 0 or triangles.max() >= n):
            raise DataError("triangle index out of range", field="triangles")
        region = np.ones(n, dtype=bool) if self.region is None else np.asarray(self.region, dtype=bool)
        if region.shape != (n,):
            raise DataError("region mask needs one flag per vertex", field="region")
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "normals", normals)
        object.__setattr__(self, "triangles", triangles)
        object.__setattr__(self, "region", region)
        if self.thickness is not None:
            object.__setattr__(self, "thickness", np.asarray(self.thickness, dtype=float).reshape(n))
        if self.multiplicity is not None:
            object.__setattr__(self, "multiplicity", np.asarray(self.multiplicity, dtype=np.int64).reshape(n))
        self._check_manifold()

    def _check_manifold(self):
        edges = self.triangle_edges()
        if len(edges) == 0:
            return
        _, counts = np.unique(edges, axis=0, return_counts=True)
        if counts.max() > 2:
            raise DataError("edge shared by more than two triangles", field="triangles")

    @property
    def vertex_count(self) -> int:
        return len(self.vertices)

    @property
    def region_ids(self) -> np.ndarray:
        return np.flatnonzero(self.region)

    def triangle_edges(self) -> np.ndarray:
        """Undirected edges of every triangle, sorted per row (3m, 2)"""
        t = self.triangles
        edges = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        return np.sort(edges, axis=1)

    def edge_graph(self) -> sparse.csr_matrix:
        """Sparse symmetric graph of Euclidean edge lengths"""
        edges = np.unique(self.triangle_edges(), axis=0)
        n = self.vertex_count
        if len(edges) == 0:
            return sparse.csr_matrix((n, n))
        lengths = np.linalg.norm(self.vertices[edges[:, 0]] - self.vertices[edges[:, 1]], axis=1)
        graph = sparse.coo_matrix((lengths, (edges[:, 0], edges[:, 1])), shape=(n, n))
        return (graph + graph.T).tocsr()

    def triangle_areas(self) -> np.ndarray:
        v = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def area(self, region_only: bool = False) -> float:
        areas = self.triangle_areas()
        if region_only:
            areas = areas[np.all(self.region[self.triangles], axis=1)]
        return float(areas.sum())

    def with_thickness(self, thickness: np.ndarray, multiplicity: Optional[np.ndarray] = None) -> "SurfaceMesh":
        return replace(self, thickness=thickness, multiplicity=multiplicity)


@dataclass(frozen=True)
class Patch:
    """A set of in-region vertices within a geodesic radius of a center vertex"""
    id: int
    vertex_ids: np.ndarray
    center: int
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "vertex_ids", np.unique(np.asarray(self.vertex_ids, dtype=np.int64)))

    @property
    def size(self) -> int:
        return len(self.vertex_ids)


def geodesic_distances(mesh: SurfaceMesh, sources) -> np.ndarray:
    """Edge-path (Dijkstra) distances from each source vertex to every vertex"""
    return csgraph.dijkstra(mesh.edge_graph(), directed=False, indices=sources)


def place_patches(mesh: SurfaceMesh, target_count: int, seed: int) -> List[Patch]:
    """
    Cover the in-region vertices with ``target_count`` overlapping patches.

    Centers are picked by seeded farthest-point sampling; all patches share one
    radius that starts at sqrt(area / target_count) and grows by 10% until every
    in-region vertex is covered.

    Args:
        mesh: Cortex mesh with region mask
        target_count: Number of patches
        seed: Seed of the first center

    Returns:
        Patches ordered by id
    """
    region_ids = mesh.region_ids
    if target_count < 1:
        raise ValueError(f"target_count must be at least 1, got {target_count}")
    if len(region_ids) < target_count:
        raise InsufficientRegionError(
            f"{len(region_ids)} in-region vertices cannot hold {target_count} patches")

    graph = mesh.edge_graph()
    rng = np.random.default_rng(seed)
    centers = [int(rng.choice(region_ids))]
    distances = [csgraph.dijkstra(graph, directed=False, indices=centers[0])]
    nearest = distances[0][region_ids].copy()
    while len(centers) < target_count:
        # argmax picks the lowest index on ties, which keeps the choice deterministic
        candidate = int(region_ids[np.argmax(nearest)])
        if candidate in centers:
            break
        centers.append(candidate)
        distances.append(csgraph.dijkstra(graph, directed=False, indices=candidate))
        nearest = np.minimum(nearest, distances[-1][region_ids])

    if not np.all(np.isfinite(nearest)):
        raise InsufficientRegionError("region has components without a patch center")

    needed = float(nearest.max())
    radius = np.sqrt(mesh.area(region_only=True) / target_count)
    if radius <= 0:
        radius = needed if needed > 0 else 1.0
    while radius < needed:
        radius *= RADIUS_GROWTH

    patches = []
    for patch_id, (center, dist) in enumerate(zip(centers, distances)):
        members = region_ids[dist[region_ids] <= radius]
        patches.append(Patch(id=patch_id, vertex_ids=members, center=center, radius=float(radius)))
    logger.info(f"Placed {len(patches)} patches with radius {radius:.3f} mm over {len(region_ids)} vertices")
    return patches


VERTEX_DTYPE = [
    ("x", "f8"), ("y", "f8"), ("z", "f8"),
    ("nx", "f8"), ("ny", "f8"), ("nz", "f8"),
    ("thickness", "f4"), ("patch_multiplicity", "i4"), ("region", "u1"),
]


def mesh_to_ply(mesh: SurfaceMesh, text: bool = True) -> PlyData:
    """PLY document with normals, thickness, patch multiplicity and region flag"""
    n = mesh.vertex_count
    vertex = np.empty(n, dtype=VERTEX_DTYPE)
    for index, axis in enumerate("xyz"):
        vertex[axis] = mesh.vertices[:, index]
        vertex["n" + axis] = mesh.normals[:, index]
    vertex["thickness"] = mesh.thickness if mesh.thickness is not None else np.nan
    vertex["patch_multiplicity"] = mesh.multiplicity if mesh.multiplicity is not None else 0
    vertex["region"] = mesh.region

    indices = np.empty(len(mesh.triangles), dtype=object)
    for index, triangle in enumerate(mesh.triangles.astype(np.int32)):
        indices[index] = triangle
    face = np.empty(len(mesh.triangles), dtype=[("vertex_indices", object)])
    face["vertex_indices"] = indices
    return PlyData([
        PlyElement.describe(vertex, "vertex"),
        PlyElement.describe(face, "face", len_types={"vertex_indices": "u1"},
                            val_types={"vertex_indices": "i4"}),
    ], text=text)


def format_ply(mesh: SurfaceMesh, text: bool = True) -> bytes:
    stream = io.BytesIO()
    mesh_to_ply(mesh, text=text).write(stream)
    return stream.getvalue()


def write_ply(mesh: SurfaceMesh, path: str, text: bool = True) -> None:
    atomic_write_bytes(path, format_ply(mesh, text=text))


def read_ply(path: str) -> SurfaceMesh:
    """
    Read a PLY mesh (ASCII or binary).

    Required vertex properties: x, y, z, nx, ny, nz. Optional: thickness,
    patch_multiplicity, region. Polygons are fan-triangulated.
    """
    try:
        document = PlyData.read(path)
    except (OSError, PlyParseError, ValueError) as e:
        raise DataError(f"cannot read mesh: {e}", path=path)
    elements = {element.name: element for element in document.elements}
    if "vertex" not in elements:
        raise DataError("missing vertex element", path=path, field="vertex")
    vertex = elements["vertex"].data
    names = vertex.dtype.names or ()
    for prop in ("x", "y", "z", "nx", "ny", "nz"):
        if prop not in names:
            raise DataError("missing vertex property", path=path, field=prop)

    faces: List[List[int]] = []
    if "face" in elements:
        face = elements["face"].data
        if "vertex_indices" not in (face.dtype.names or ()):
            raise DataError("missing face property", path=path, field="vertex_indices")
        for polygon in face["vertex_indices"]:
            polygon = [int(v) for v in polygon]
            for k in range(1, len(polygon) - 1):
                faces.append([polygon[0], polygon[k], polygon[k + 1]])

    vertices = np.column_stack([vertex["x"], vertex["y"], vertex["z"]]).astype(float)
    normals = np.column_stack([vertex["nx"], vertex["ny"], vertex["nz"]]).astype(float)
    lengths = np.linalg.norm(normals, axis=1)
    if np.any(lengths == 0):
        raise DataError("zero-length normal", path=path, field="nx")
    normals = normals / lengths[:, None]
    region = vertex["region"].astype(bool) if "region" in names else None
    thickness = vertex["thickness"].astype(float) if "thickness" in names else None
    multiplicity = vertex["patch_multiplicity"].astype(np.int64) if "patch_multiplicity" in names else None
    try:
        return SurfaceMesh(vertices=vertices, normals=normals,
                           triangles=np.array(faces, dtype=np.int64).reshape(-1, 3),
                           region=region, thickness=thickness, multiplicity=multiplicity)
    except DataError as e:
        raise DataError(str(e), path=path)
