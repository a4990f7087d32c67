"""Isosurface extraction and mesh utilities.

The lattice walk itself comes from scikit-image (standard marching cubes
with linear edge interpolation); this module owns grid construction, chunked
field evaluation, gradient normals, degenerate-face cleanup, OBJ round trips,
and area-uniform surface sampling.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from skimage.measure import marching_cubes as _marching_cubes

from .fields import CanonicalBBox, DEFAULT_BBOX
from .parallel import chunk_ranges, parallel_map

EVAL_CHUNK = 32768


@dataclass
class Mesh:
    vertices: np.ndarray   # [V,3]
    triangles: np.ndarray  # [T,3] int
    normals: np.ndarray    # [V,3] unit

    @property
    def empty(self) -> bool:
        return len(self.triangles) == 0

    def triangle_areas(self) -> np.ndarray:
        a = self.vertices[self.triangles[:, 0]]
        b = self.vertices[self.triangles[:, 1]]
        c = self.vertices[self.triangles[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def empty_mesh() -> Mesh:
    return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), np.zeros((0, 3)))


def grid_axes(bbox: CanonicalBBox, resolution: int):
    """Near-isotropic sampling: `resolution` nodes along the longest axis."""
    extent = bbox.extent
    longest = float(extent.max())
    counts = [max(8, int(round((e / longest) * (resolution - 1))) + 1) for e in extent.tolist()]
    axes = [np.linspace(bbox.mins[i], bbox.maxs[i], counts[i]) for i in range(3)]
    return axes, counts


def evaluate_on_grid(field_fn, bbox: CanonicalBBox, resolution: int) -> tuple:
    axes, counts = grid_axes(bbox, resolution)
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=-1)

    def run(span):
        lo, hi = span
        return field_fn(pts[lo:hi])

    vals = np.concatenate(parallel_map(run, chunk_ranges(len(pts), EVAL_CHUNK)))
    return vals.reshape(counts), axes


def extract_mesh(field_fn, bbox: CanonicalBBox = DEFAULT_BBOX, resolution: int = 128,
                 iso: float = 0.5, orientation: str = "occupancy",
                 normal_h: float | None = None) -> Mesh:
    """Marching cubes over a chunk-evaluated grid, with gradient normals.

    ``orientation`` picks the outward direction: "occupancy" fields decrease
    outward, "sdf" fields increase outward. Vertex normals come from central
    differences of the field at one-cell spacing. Fields with no crossing
    yield an empty mesh.
    """
    volume, axes = evaluate_on_grid(field_fn, bbox, resolution)
    spacing = tuple(float(a[1] - a[0]) for a in axes)
    lo = float(volume.min())
    hi = float(volume.max())
    if not (lo < iso < hi):
        return empty_mesh()
    verts, faces, _, _ = _marching_cubes(volume, level=iso, spacing=spacing)
    verts = verts + np.array([axes[0][0], axes[1][0], axes[2][0]])
    h = normal_h if normal_h is not None else max(spacing)
    normals = field_gradient_normals(field_fn, verts, h, orientation)
    mesh = Mesh(verts, faces.astype(np.int64), normals)
    return _drop_degenerate(mesh)


def field_gradient_normals(field_fn, verts: np.ndarray, h: float, orientation: str) -> np.ndarray:
    if len(verts) == 0:
        return np.zeros((0, 3))
    grads = np.zeros_like(verts)
    for axis in range(3):
        dx = np.zeros(3)
        dx[axis] = h

        def run(span):
            lo_i, hi_i = span
            seg = verts[lo_i:hi_i]
            return field_fn(seg + dx) - field_fn(seg - dx)

        grads[:, axis] = np.concatenate(parallel_map(run, chunk_ranges(len(verts), EVAL_CHUNK)))
    if orientation == "occupancy":
        grads = -grads
    norms = np.linalg.norm(grads, axis=1, keepdims=True)
    return grads / np.maximum(norms, 1e-300)


def _drop_degenerate(mesh: Mesh, min_area: float = 1e-12) -> Mesh:
    if mesh.empty:
        return mesh
    keep = mesh.triangle_areas() > min_area
    return Mesh(mesh.vertices, mesh.triangles[keep], mesh.normals)


def sample_mesh_surface(mesh: Mesh, n: int, seed: int = 0):
    """Area-uniform points and face normals on the mesh surface."""
    if mesh.empty:
        return np.zeros((0, 3)), np.zeros((0, 3))
    rng = np.random.default_rng(seed)
    areas = mesh.triangle_areas()
    probs = areas / areas.sum()
    tri = rng.choice(len(areas), size=n, p=probs)
    a = mesh.vertices[mesh.triangles[tri, 0]]
    b = mesh.vertices[mesh.triangles[tri, 1]]
    c = mesh.vertices[mesh.triangles[tri, 2]]
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1
    u[flip] = 1 - u[flip]
    v[flip] = 1 - v[flip]
    pts = a + u[:, None] * (b - a) + v[:, None] * (c - a)
    fn = np.cross(b - a, c - a)
    fn /= np.maximum(np.linalg.norm(fn, axis=1, keepdims=True), 1e-300)
    return pts, fn


def euler_characteristic(mesh: Mesh) -> int:
    v = len(mesh.vertices)
    f = len(mesh.triangles)
    edges = set()
    for tri in mesh.triangles:
        for i in range(3):
            e = (min(tri[i], tri[(i + 1) % 3]), max(tri[i], tri[(i + 1) % 3]))
            edges.add(e)
    return v - len(edges) + f


def connected_components(mesh: Mesh) -> list:
    """Vertex index sets of connected components."""
    parent = np.arange(len(mesh.vertices))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for tri in mesh.triangles:
        a, b, c = (int(v) for v in tri)
        ra, rb, rc = find(a), find(b), find(c)
        parent[rb] = ra
        parent[rc] = find(a)
    groups: dict = {}
    for i in range(len(mesh.vertices)):
        groups.setdefault(find(i), []).append(i)
    return list(groups.values())


def save_obj(path, mesh: Mesh) -> None:
    """ASCII OBJ with v/vn/f records; formatting is fixed for reproducibility."""
    lines = []
    for v in mesh.vertices:
        lines.append("v %.17g %.17g %.17g" % (v[0], v[1], v[2]))
    for vn in mesh.normals:
        lines.append("vn %.17g %.17g %.17g" % (vn[0], vn[1], vn[2]))
    for f in mesh.triangles:
        lines.append("f %d//%d %d//%d %d//%d" % (f[0] + 1, f[0] + 1, f[1] + 1, f[1] + 1, f[2] + 1, f[2] + 1))
    Path(path).write_text("\n".join(lines) + "\n")


def load_obj(path) -> Mesh:
    verts, normals, faces = [], [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "vn":
            normals.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    verts = np.asarray(verts, dtype=np.float64).reshape(-1, 3)
    normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    if len(normals) != len(verts):
        normals = np.zeros_like(verts)
    return Mesh(verts, np.asarray(faces, dtype=np.int64).reshape(-1, 3), normals)
