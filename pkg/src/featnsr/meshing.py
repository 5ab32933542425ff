"""Isosurface extraction, PLY output, surface sampling and Chamfer distance."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree
from skimage import measure

from .errors import EmptySet, EmptySurface, ParseError

MIN_RESOLUTION = 8
SNAP = 1e-2  # fraction of a grid step kept between the surface and grid nodes


@dataclass
class Mesh:
    vertices: np.ndarray  # (V, 3)
    triangles: np.ndarray  # (T, 3) int

    def areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, k]] for k in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def edge_counts(self) -> np.ndarray:
        """How many triangles share each undirected edge."""
        e = np.concatenate([self.triangles[:, [0, 1]], self.triangles[:, [1, 2]], self.triangles[:, [2, 0]]])
        e.sort(axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return counts

    def is_watertight(self) -> bool:
        """Every edge is shared by exactly two triangles."""
        return len(self.triangles) > 0 and bool(np.all(self.edge_counts() == 2))


def sdf_grid(sdf_fn: Callable, resolution: int, bound: float = 1.0, chunk: int = 262144) -> np.ndarray:
    """SDF values on a ``resolution^3`` lattice spanning ``[-bound, bound]^3``."""
    axis = np.linspace(-bound, bound, resolution)
    X, Y, Z = np.meshgrid(axis, axis, axis, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
    vals = np.concatenate([np.asarray(sdf_fn(pts[i:i + chunk]), dtype=np.float64)
                           for i in range(0, len(pts), chunk)])
    return vals.reshape(resolution, resolution, resolution)


def marching_cubes(sdf_fn: Callable, resolution: int, bound: float = 1.0) -> Mesh:
    """Triangulate the zero level set of ``sdf_fn`` inside the cube ``[-bound, bound]^3``.

    Grid values within ``SNAP * step`` of zero are pushed out to that distance
    (zeros count as outside), so no vertex lands on or next to a grid node and
    no sliver triangles are produced; the surface moves by at most that much.
    The grid is padded
    with one layer of positive (outside) values, so surfaces cut by the cube are
    closed along its faces and the mesh is always watertight.  Duplicate
    vertices are merged and zero-area triangles dropped.
    """
    if resolution < MIN_RESOLUTION:
        raise ValueError(f"resolution must be at least {MIN_RESOLUTION}, got {resolution}")
    grid = sdf_grid(sdf_fn, resolution, bound)
    if not (grid.min() < 0.0 < grid.max()):
        raise EmptySurface("the SDF has no sign change on the extraction grid")
    step = 2.0 * bound / (resolution - 1)
    snap = SNAP * step
    grid = np.where(np.abs(grid) < snap, np.where(grid < 0.0, -snap, snap), grid)
    grid = np.pad(grid, 1, constant_values=step)
    verts, faces, _, _ = measure.marching_cubes(grid, level=0.0, spacing=(step,) * 3,
                                                allow_degenerate=False)
    verts = np.clip(verts - bound - step, -bound, bound)
    verts, inverse = np.unique(verts, axis=0, return_inverse=True)
    faces = inverse.reshape(-1)[faces]
    mesh = Mesh(verts, faces.astype(np.int64))
    keep = (mesh.areas() > 1e-12) & (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) \
        & (faces[:, 0] != faces[:, 2])
    mesh.triangles = mesh.triangles[keep]
    if len(mesh.triangles) == 0:
        raise EmptySurface("marching cubes produced no triangles")
    return mesh


def clip_to_ball(sdf_fn: Callable, radius: float = 1.0) -> Callable:
    """Intersect a field with the ball it was trained in: ``max(sdf, |x| - radius)``."""
    def clipped(p):
        return np.maximum(np.asarray(sdf_fn(p), dtype=np.float64), np.linalg.norm(p, axis=-1) - radius)
    return clipped


def write_ply(path, mesh: Mesh) -> None:
    lines = ["ply", "format ascii 1.0", f"element vertex {len(mesh.vertices)}",
             "property float x", "property float y", "property float z",
             f"element face {len(mesh.triangles)}", "property list uchar int vertex_indices", "end_header"]
    lines += [f"{x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles]
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path) -> Mesh:
    """Read the ASCII PLY subset written by ``write_ply``."""
    path = Path(path)
    try:
        text = path.read_text().splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise ParseError(f"{path}: cannot read mesh ({exc})") from exc
    if not text or text[0].strip() != "ply":
        raise ParseError(f"{path}: not a PLY file")
    n_vert = n_face = None
    try:
        end = text.index("end_header")
    except ValueError:
        raise ParseError(f"{path}: missing end_header") from None
    for line in text[:end]:
        parts = line.split()
        if len(parts) > 1 and parts[0] == "format" and parts[1] != "ascii":
            raise ParseError(f"{path}: only ASCII PLY is supported")
        if parts[:2] == ["element", "vertex"]:
            n_vert = int(parts[2])
        elif parts[:2] == ["element", "face"]:
            n_face = int(parts[2])
    if n_vert is None or n_face is None:
        raise ParseError(f"{path}: header lacks vertex/face counts")
    body = text[end + 1:]
    if len(body) < n_vert + n_face:
        raise ParseError(f"{path}: truncated body")
    try:
        verts = np.array([list(map(float, l.split()[:3])) for l in body[:n_vert]], dtype=np.float64).reshape(-1, 3)
        faces = np.array([list(map(int, l.split()[1:4])) for l in body[n_vert:n_vert + n_face]],
                         dtype=np.int64).reshape(-1, 3)
    except ValueError as exc:
        raise ParseError(f"{path}: malformed element line ({exc})") from exc
    if faces.size and (faces.min() < 0 or faces.max() >= n_vert):
        raise ParseError(f"{path}: face index out of range")
    return Mesh(verts, faces)


def sample_mesh(mesh: Mesh, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` points uniformly distributed over the mesh surface by area."""
    areas = mesh.areas()
    if len(areas) == 0 or areas.sum() <= 0:
        raise EmptySurface("mesh has no area to sample")
    tri = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    a, b, c = (mesh.vertices[mesh.triangles[tri, k]] for k in range(3))
    return (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c


def nearest_distances(query: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Exact nearest-neighbour distance from every query point to ``ref``.

    The k-d tree only picks the neighbour; the distance is recomputed with the
    same arithmetic as a brute-force loop so both agree bit for bit.
    """
    _, idx = cKDTree(ref).query(query, k=1)
    diff = query - ref[idx]
    return np.sqrt(np.sum(diff * diff, axis=1))


def chamfer_distance(A, B) -> tuple[float, float, float]:
    """``(accuracy, completeness, mean)`` between point sets ``A`` and ``B``."""
    A = np.asarray(A, dtype=np.float64).reshape(-1, 3)
    B = np.asarray(B, dtype=np.float64).reshape(-1, 3)
    if len(A) == 0 or len(B) == 0:
        raise EmptySet("chamfer distance needs two non-empty point sets")
    acc = float(np.mean(nearest_distances(A, B)))
    comp = float(np.mean(nearest_distances(B, A)))
    return acc, comp, (acc + comp) / 2.0
