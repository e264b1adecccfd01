"""Fixed-topology triangle meshes, deformations and mesh regularizers.

All arrays are float64 in meters unless noted. Gradients are returned as
dense ``(n_vertices, 3)`` arrays.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import BoundError, DegenerateGeometryError, ShapeError, TopologyError

DEGENERATE_AREA = 1e-12
MAX_SUBDIVISIONS = 6


def _edges_from_faces(faces: np.ndarray) -> np.ndarray:
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0)


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Triangle mesh whose connectivity is frozen at construction.

    ``adjacency[i]`` is the sorted array of vertices sharing an edge with ``i``.
    """

    vertices: np.ndarray
    faces: np.ndarray
    validate: bool = field(default=True, repr=False)

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64)
        f = np.ascontiguousarray(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ShapeError(f"vertices must be (n, 3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise ShapeError(f"faces must be (m, 3), got {f.shape}")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ShapeError("face index out of range")
        v.flags.writeable = False
        f.flags.writeable = False
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if self.validate:
            areas = self.face_areas()
            bad = np.flatnonzero(areas <= DEGENERATE_AREA)
            if bad.size:
                raise DegenerateGeometryError(
                    f"face {bad[0]} has area {areas[bad[0]]:.3e} m^2", face_index=int(bad[0])
                )

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges ``(E, 2)`` with ``e[:, 0] < e[:, 1]``."""
        return _edges_from_faces(self.faces)

    @cached_property
    def adjacency(self) -> list[np.ndarray]:
        e = self.edges
        both = np.concatenate([e, e[:, ::-1]])
        order = np.lexsort((both[:, 1], both[:, 0]))
        both = both[order]
        splits = np.searchsorted(both[:, 0], np.arange(1, self.n_vertices))
        return [a.copy() for a in np.split(both[:, 1], splits)]

    @cached_property
    def _umbrella(self) -> sp.csr_matrix:
        # rows of (I - A) with A the row-normalized adjacency
        n = self.n_vertices
        e = self.edges
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        deg = np.bincount(rows, minlength=n).astype(np.float64)
        if np.any(deg == 0):
            raise TopologyError(f"vertex {int(np.argmin(deg))} has no neighbors")
        a = sp.csr_matrix((1.0 / deg[rows], (rows, cols)), shape=(n, n))
        return (sp.identity(n, format="csr") - a).tocsr()

    def with_vertices(self, vertices: np.ndarray) -> "TriangleMesh":
        """Same connectivity, new positions. Skips the degeneracy check."""
        vertices = np.asarray(vertices, dtype=np.float64)
        if vertices.shape != self.vertices.shape:
            raise ShapeError(f"expected {self.vertices.shape}, got {vertices.shape}")
        m = TriangleMesh(vertices, self.faces, validate=False)
        # connectivity-derived caches are shared, never recomputed
        for key in ("edges", "adjacency", "_umbrella"):
            if key in self.__dict__:
                m.__dict__[key] = self.__dict__[key]
        return m

    def face_cross(self) -> np.ndarray:
        v = self.vertices
        f = self.faces
        return np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_cross(), axis=1)

    def euler_characteristic(self) -> int:
        return self.n_vertices - len(self.edges) + self.n_faces

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


@dataclass
class MeshDeformation:
    vertex_deltas: np.ndarray
    global_translation: np.ndarray

    @classmethod
    def zeros(cls, n_vertices: int) -> "MeshDeformation":
        return cls(np.zeros((n_vertices, 3)), np.zeros(3))


def make_icosphere(subdivisions: int = 3, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Geodesic sphere from a subdivided icosahedron; ``10 * 4**k + 2`` vertices."""
    if not 0 <= subdivisions <= MAX_SUBDIVISIONS:
        raise BoundError(f"subdivisions must be in [0, {MAX_SUBDIVISIONS}], got {subdivisions}")
    t = (1.0 + 5.0**0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    v = np.array(verts, dtype=np.float64)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    f = np.array(faces, dtype=np.int64)
    for _ in range(subdivisions):
        edges = _edges_from_faces(f)
        n = len(v)
        mid = v[edges[:, 0]] + v[edges[:, 1]]
        mid /= np.linalg.norm(mid, axis=1, keepdims=True)
        key = edges[:, 0] * n + edges[:, 1]
        order = np.argsort(key)
        key_sorted = key[order]

        def midpoint(a, b):
            lo, hi = np.minimum(a, b), np.maximum(a, b)
            return n + order[np.searchsorted(key_sorted, lo * n + hi)]

        a, b, c = f[:, 0], f[:, 1], f[:, 2]
        ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
        f = np.concatenate(
            [np.stack(x, axis=1) for x in ((a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca))]
        )
        v = np.concatenate([v, mid])
    return TriangleMesh(v * float(radius) + np.asarray(center, dtype=np.float64), f)


def apply_deformation(mesh: TriangleMesh, d: MeshDeformation) -> TriangleMesh:
    deltas = np.asarray(d.vertex_deltas, dtype=np.float64)
    if deltas.shape != mesh.vertices.shape:
        raise ShapeError(f"vertex_deltas {deltas.shape} does not match mesh {mesh.vertices.shape}")
    t = np.asarray(d.global_translation, dtype=np.float64).reshape(3)
    return mesh.with_vertices(mesh.vertices + deltas + t)


def face_normals(mesh: TriangleMesh) -> np.ndarray:
    c = mesh.face_cross()
    norm = np.linalg.norm(c, axis=1)
    bad = np.flatnonzero(0.5 * norm <= DEGENERATE_AREA)
    if bad.size:
        raise DegenerateGeometryError(f"face {bad[0]} is degenerate", face_index=int(bad[0]))
    return c / norm[:, None]


def laplacian_loss(mesh: TriangleMesh) -> tuple[float, np.ndarray]:
    """Uniform (umbrella) Laplacian energy and its exact gradient."""
    m = mesh._umbrella
    delta = m @ mesh.vertices
    return float(np.sum(delta * delta)), 2.0 * (m.T @ delta)


def _edge_length_loss(vertices: np.ndarray, edges: np.ndarray) -> tuple[float, np.ndarray]:
    d = vertices[edges[:, 0]] - vertices[edges[:, 1]]
    length = np.linalg.norm(d, axis=1)
    resid = length - length.mean()  # mean held constant for the gradient
    g_edge = (2.0 * resid / np.where(length > 0, length, 1.0))[:, None] * d
    grad = np.zeros_like(vertices)
    np.add.at(grad, edges[:, 0], g_edge)
    np.add.at(grad, edges[:, 1], -g_edge)
    return float(np.sum(resid * resid)), grad


def edge_length_loss(mesh: TriangleMesh) -> tuple[float, np.ndarray]:
    if len(mesh.edges) == 0:
        raise TopologyError("mesh has no edges")
    return _edge_length_loss(mesh.vertices, mesh.edges)


def allocate_gaussians(mesh: TriangleMesh, avg_per_face: float, rng_seed: int) -> np.ndarray:
    """Per-face Gaussian counts proportional to area, stochastically rounded.

    Draw ``f`` of a Philox stream keyed on the seed decides face ``f``.
    """
    if not 1 <= avg_per_face <= 64:
        raise BoundError(f"avg_per_face must be in [1, 64], got {avg_per_face}")
    areas = mesh.face_areas()
    total = areas.sum()
    if not total > 0:
        raise DegenerateGeometryError("mesh has zero total area")
    expected = avg_per_face * mesh.n_faces * areas / total
    nearest = np.rint(expected)
    expected = np.where(np.abs(expected - nearest) < 1e-9, nearest, expected)
    base = np.floor(expected)
    frac = expected - base
    u = np.random.Generator(np.random.Philox(key=int(rng_seed))).random(mesh.n_faces)
    return (base + (u < frac)).astype(np.int64)


# --- PLY -----------------------------------------------------------------------

def save_mesh_ply(path, mesh: TriangleMesh, colors=None, binary: bool = True, comments=()) -> None:
    """Write vertices as float32 x/y/z, faces as ``vertex_indices`` lists.

    ``colors`` is an optional ``(n, 3)`` array in [0, 1] or uint8.
    """
    from plyfile import PlyData, PlyElement

    fields = [("x", "f4"), ("y", "f4"), ("z", "f4")]
    if colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    vert = np.empty(mesh.n_vertices, dtype=fields)
    for i, k in enumerate("xyz"):
        vert[k] = mesh.vertices[:, i]
    if colors is not None:
        c = np.asarray(colors)
        if c.dtype != np.uint8:
            c = np.clip(np.rint(np.asarray(c, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
        vert["red"], vert["green"], vert["blue"] = c[:, 0], c[:, 1], c[:, 2]
    face = np.empty(mesh.n_faces, dtype=[("vertex_indices", "i4", (3,))])
    face["vertex_indices"] = mesh.faces
    PlyData(
        [PlyElement.describe(vert, "vertex"), PlyElement.describe(face, "face")],
        text=not binary,
        comments=list(comments),
    ).write(str(Path(path)))


def load_mesh_ply(path) -> tuple[TriangleMesh, np.ndarray | None]:
    """Returns the mesh and its uint8 vertex colors (or None)."""
    from plyfile import PlyData

    ply = PlyData.read(str(Path(path)))
    v = ply["vertex"].data
    vertices = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
    faces = np.stack(list(ply["face"].data["vertex_indices"])).astype(np.int64)
    colors = None
    if "red" in v.dtype.names:
        colors = np.stack([v["red"], v["green"], v["blue"]], axis=1).astype(np.uint8)
    return TriangleMesh(vertices, faces, validate=False), colors
