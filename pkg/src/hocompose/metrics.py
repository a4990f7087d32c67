"""Reconstruction metrics: Chamfer, point-to-surface, and normal-map error.

Chamfer is the symmetric mean nearest-neighbor distance between surface
point sets. P2S is the mean exact point-to-triangle distance from reference
points to a predicted mesh (KD-tree candidate pruning on triangle centroids,
then exact distances). Normal maps are z-buffer rasterizations of face
normals from the six axis-aligned orthographic views at 256^2; their L2
error is averaged over pixels covered by either image, with zero vectors
standing in where one side has no coverage.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .fields import CanonicalBBox, DEFAULT_BBOX
from .meshing import Mesh, sample_mesh_surface

NORMAL_MAP_RES = 256


def chamfer_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric mean nearest-neighbor distance between two point sets."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        return float("inf")
    d_ab = cKDTree(b).query(a)[0]
    d_ba = cKDTree(a).query(b)[0]
    return float(0.5 * (d_ab.mean() + d_ba.mean()))


def _point_triangle_distance(p: np.ndarray, a, b, c) -> np.ndarray:
    """Exact distances from points p[N,3] to matching triangles [N,3] each."""
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = (ab * ap).sum(1)
    d2 = (ac * ap).sum(1)
    bp = p - b
    d3 = (ab * bp).sum(1)
    d4 = (ac * bp).sum(1)
    cp = p - c
    d5 = (ab * cp).sum(1)
    d6 = (ac * cp).sum(1)
    closest = np.empty_like(p)

    region_a = (d1 <= 0) & (d2 <= 0)
    region_b = (d3 >= 0) & (d4 <= d3)
    region_c = (d6 >= 0) & (d5 <= d6)
    vc = d1 * d4 - d3 * d2
    v_ab = np.zeros(len(p))
    edge_ab = (~region_a) & (~region_b) & (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        v_ab = np.where(d1 - d3 != 0, d1 / (d1 - d3), 0.0)
    vb = d5 * d2 - d1 * d6
    edge_ac = (~region_a) & (~region_c) & (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        w_ac = np.where(d2 - d6 != 0, d2 / (d2 - d6), 0.0)
    va = d3 * d6 - d5 * d4
    edge_bc = (~region_b) & (~region_c) & (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        w_bc = np.where((d4 - d3) + (d5 - d6) != 0, (d4 - d3) / ((d4 - d3) + (d5 - d6)), 0.0)

    denom = np.where(va + vb + vc != 0, va + vb + vc, 1.0)
    v_in = vb / denom
    w_in = vc / denom
    closest = a + v_in[:, None] * ab + w_in[:, None] * ac
    closest = np.where(edge_bc[:, None], b + w_bc[:, None] * (c - b), closest)
    closest = np.where(edge_ac[:, None], a + w_ac[:, None] * ac, closest)
    closest = np.where(edge_ab[:, None], a + v_ab[:, None] * ab, closest)
    closest = np.where(region_c[:, None], c, closest)
    closest = np.where(region_b[:, None], b, closest)
    closest = np.where(region_a[:, None], a, closest)
    return np.linalg.norm(p - closest, axis=1)


def point_to_surface(points: np.ndarray, mesh: Mesh, candidates: int = 32) -> float:
    """Mean distance from points to the mesh's triangles."""
    if mesh.empty:
        return float("inf")
    points = np.asarray(points, dtype=np.float64)
    tris = mesh.triangles
    a = mesh.vertices[tris[:, 0]]
    b = mesh.vertices[tris[:, 1]]
    c = mesh.vertices[tris[:, 2]]
    centroids = (a + b + c) / 3.0
    k = min(candidates, len(tris))
    _, idx = cKDTree(centroids).query(points, k=k)
    idx = idx.reshape(len(points), k)
    best = np.full(len(points), np.inf)
    for col in range(k):
        t = idx[:, col]
        d = _point_triangle_distance(points, a[t], b[t], c[t])
        best = np.minimum(best, d)
    return float(best.mean())


_VIEWS = (
    ((1, 2), 0, +1), ((1, 2), 0, -1),
    ((0, 2), 1, +1), ((0, 2), 1, -1),
    ((0, 1), 2, +1), ((0, 1), 2, -1),
)


def render_normal_map(mesh: Mesh, view: int, bbox: CanonicalBBox = DEFAULT_BBOX,
                      res: int = NORMAL_MAP_RES) -> np.ndarray:
    """[res,res,4]: face normal (xyz) plus coverage flag, orthographic."""
    out = np.zeros((res, res, 4))
    if mesh.empty:
        return out
    (u_axis, v_axis), depth_axis, sign = _VIEWS[view]
    lo, hi = bbox.mins, bbox.maxs
    span = hi - lo
    verts = mesh.vertices
    u = (verts[:, u_axis] - lo[u_axis]) / span[u_axis] * (res - 1)
    v = (verts[:, v_axis] - lo[v_axis]) / span[v_axis] * (res - 1)
    depth = sign * verts[:, depth_axis]

    tris = mesh.triangles
    tu = u[tris]
    tv = v[tris]
    td = depth[tris].mean(axis=1)
    fa = mesh.vertices[tris[:, 0]]
    fb = mesh.vertices[tris[:, 1]]
    fc = mesh.vertices[tris[:, 2]]
    fn = np.cross(fb - fa, fc - fa)
    fn /= np.maximum(np.linalg.norm(fn, axis=1, keepdims=True), 1e-300)
    # orient normals toward the camera
    flip = (sign * fn[:, depth_axis]) < 0
    fn[flip] = -fn[flip]

    u0 = np.clip(np.floor(tu.min(axis=1)).astype(np.int64), 0, res - 1)
    u1 = np.clip(np.ceil(tu.max(axis=1)).astype(np.int64), 0, res - 1)
    v0 = np.clip(np.floor(tv.min(axis=1)).astype(np.int64), 0, res - 1)
    v1 = np.clip(np.ceil(tv.max(axis=1)).astype(np.int64), 0, res - 1)

    # candidate (triangle, pixel) pairs: vectorized over fixed box offsets;
    # marching-cubes triangles span only a few pixels each
    wu = int((u1 - u0).max()) + 1
    wv = int((v1 - v0).max()) + 1
    cand_tri = []
    cand_flat = []
    for du in range(wu):
        for dv in range(wv):
            mask = (u0 + du <= u1) & (v0 + dv <= v1)
            if not mask.any():
                continue
            t = np.nonzero(mask)[0]
            cand_tri.append(t)
            cand_flat.append((u0[t] + du) * res + (v0[t] + dv))
    if not cand_tri:
        return out
    tri_ids = np.concatenate(cand_tri)
    flat = np.concatenate(cand_flat)

    # barycentric inside-test at pixel centers
    px = flat // res
    py = flat % res
    x0 = tu[tri_ids, 0]
    y0 = tv[tri_ids, 0]
    d00 = tu[tri_ids, 1] - x0
    d01 = tv[tri_ids, 1] - y0
    d10 = tu[tri_ids, 2] - x0
    d11 = tv[tri_ids, 2] - y0
    det = d00 * d11 - d01 * d10
    ok = np.abs(det) > 1e-18
    inv = np.where(ok, 1.0, 0.0) / np.where(ok, det, 1.0)
    qx = px - x0
    qy = py - y0
    l1 = (qx * d11 - qy * d10) * inv
    l2 = (qy * d00 - qx * d01) * inv
    inside = ok & (l1 >= -1e-12) & (l2 >= -1e-12) & (l1 + l2 <= 1 + 1e-12)
    tri_ids = tri_ids[inside]
    flat = flat[inside]
    if len(tri_ids) == 0:
        return out

    depth_pix = td[tri_ids]
    zbuf = np.full(res * res, -np.inf)
    np.maximum.at(zbuf, flat, depth_pix)
    hit = depth_pix == zbuf[flat]
    # depth ties resolve to the lowest triangle id for determinism
    winner = np.full(res * res, np.iinfo(np.int64).max)
    np.minimum.at(winner, flat[hit], tri_ids[hit])
    covered = winner < np.iinfo(np.int64).max
    img = out.reshape(res * res, 4)
    img[covered, :3] = fn[winner[covered]]
    img[covered, 3] = 1.0
    return out


def normal_map_l2(map_a: np.ndarray, map_b: np.ndarray) -> float:
    """Mean squared normal difference over pixels covered by either map."""
    cov = (map_a[..., 3] > 0) | (map_b[..., 3] > 0)
    if not cov.any():
        return 0.0
    diff = map_a[..., :3] - map_b[..., :3]
    return float((diff[cov] ** 2).sum(axis=-1).mean())


def normal_error_six_views(mesh_a: Mesh, mesh_b: Mesh, bbox: CanonicalBBox = DEFAULT_BBOX,
                           res: int = NORMAL_MAP_RES) -> float:
    vals = []
    for view in range(6):
        vals.append(normal_map_l2(render_normal_map(mesh_a, view, bbox, res),
                                  render_normal_map(mesh_b, view, bbox, res)))
    return float(np.mean(vals))


def save_normal_map(path, nmap: np.ndarray) -> None:
    """Binary float grid: magic line, dims line, then little-endian f64."""
    with open(path, "wb") as fh:
        fh.write(b"PGMF\n")
        fh.write(f"{nmap.shape[0]} {nmap.shape[1]} {nmap.shape[2]}\n".encode())
        fh.write(np.ascontiguousarray(nmap, dtype="<f8").tobytes())


def load_normal_map(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.readline()
        if magic != b"PGMF\n":
            raise ValueError(f"{path}: bad normal-map magic {magic!r}")
        dims = tuple(int(x) for x in fh.readline().split())
        data = np.frombuffer(fh.read(), dtype="<f8")
    return data.reshape(dims).copy()


def mesh_metrics(pred_mesh: Mesh, gt_points: np.ndarray, gt_normals: np.ndarray | None = None,
                 n_samples: int = 2000, seed: int = 0, gt_mesh: Mesh | None = None,
                 bbox: CanonicalBBox = DEFAULT_BBOX):
    """(chamfer, p2s, normal_l2) of a predicted mesh against reference data.

    The normal term needs a reference mesh; when absent it reports nan.
    Empty predictions yield inf distances.
    """
    if pred_mesh.empty:
        return float("inf"), float("inf"), float("inf")
    pred_pts, _ = sample_mesh_surface(pred_mesh, max(n_samples, 1000), seed=seed)
    ch = chamfer_distance(pred_pts, gt_points)
    p2s = point_to_surface(np.asarray(gt_points, dtype=np.float64), pred_mesh)
    if gt_mesh is not None:
        nl2 = normal_error_six_views(pred_mesh, gt_mesh, bbox)
    else:
        nl2 = float("nan")
    return ch, p2s, nl2
