"""Bone kinematics, learned skinning, forward LBS, and canonicalization.

A posed query point x_d is mapped back to canonical space by solving
``forward_lbs(x_c) = x_d`` with a batched Broyden iteration started from
per-bone rigid inverses. Gradients of losses evaluated at the recovered
roots reach the deformation networks through the implicit function theorem:
d(root)/dw = -J_x^{-1} df/dw, wired in as a custom graph node whose backward
runs a vector-Jacobian product through a fresh forward-LBS graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .fields import Counter
from .nn import MLP, ParamBag, mlp_value, mlp_value_and_input_jac

BONE_COUNT = 24
SHAPE_DIM = 10

SINGULAR_COUNTER = Counter()


# ---------------------------------------------------------------------------
# skeleton and forward kinematics


@dataclass
class Skeleton:
    parents: np.ndarray          # [24] int, -1 at the root
    offsets: np.ndarray          # [24,3] joint position relative to parent (root: absolute)
    segments: np.ndarray         # [24,3] bone vector from joint toward its tip, rest pose
    length_basis: np.ndarray = None  # [24,10]: per-bone length scale = 1 + basis @ beta

    def __post_init__(self):
        self.parents = np.asarray(self.parents, dtype=np.int64)
        self.offsets = np.asarray(self.offsets, dtype=np.float64)
        self.segments = np.asarray(self.segments, dtype=np.float64)
        if self.length_basis is None:
            self.length_basis = np.zeros((self.bone_count, SHAPE_DIM))
        self.length_basis = np.asarray(self.length_basis, dtype=np.float64)
        if self.parents[0] != -1 or np.any(self.parents[1:] >= np.arange(1, self.bone_count)):
            raise ValueError("parents must form a tree rooted at bone 0 with parent index < child index")

    @property
    def bone_count(self) -> int:
        return len(self.parents)

    def length_scales(self, beta) -> np.ndarray:
        if beta is None:
            return np.ones(self.bone_count)
        raw = 1.0 + self.length_basis @ np.asarray(beta, dtype=np.float64)
        return np.clip(raw, 0.85, 1.15)

    def rest_joints(self, beta=None) -> np.ndarray:
        """Joint positions in the canonical (zero-pose) frame."""
        s = self.length_scales(beta)
        joints = np.zeros((self.bone_count, 3))
        joints[0] = self.offsets[0]
        for i in range(1, self.bone_count):
            joints[i] = joints[self.parents[i]] + self.offsets[i] * s[i]
        return joints

    def rest_segments(self, beta=None) -> np.ndarray:
        return self.segments * self.length_scales(beta)[:, None]

    @property
    def rest_directions(self) -> np.ndarray:
        return self.segments / np.maximum(np.linalg.norm(self.segments, axis=1, keepdims=True), 1e-12)


def rodrigues(axis_angle: np.ndarray) -> np.ndarray:
    """Axis-angle vectors [B,3] -> rotation matrices [B,3,3]."""
    aa = np.asarray(axis_angle, dtype=np.float64)
    theta = np.linalg.norm(aa, axis=-1)
    out = np.broadcast_to(np.eye(3), (*aa.shape[:-1], 3, 3)).copy()
    mask = theta > 1e-12
    if not np.any(mask):
        return out
    k = aa[mask] / theta[mask, None]
    kx, ky, kz = k[:, 0], k[:, 1], k[:, 2]
    zero = np.zeros_like(kx)
    kmat = np.stack(
        [
            np.stack([zero, -kz, ky], axis=-1),
            np.stack([kz, zero, -kx], axis=-1),
            np.stack([-ky, kx, zero], axis=-1),
        ],
        axis=-2,
    )
    s = np.sin(theta[mask])[:, None, None]
    c = np.cos(theta[mask])[:, None, None]
    out[mask] = np.eye(3) + s * kmat + (1 - c) * (kmat @ kmat)
    return out


@dataclass
class BoneTransforms:
    rotations: np.ndarray       # [24,3,3]
    translations: np.ndarray    # [24,3]
    posed_joints: np.ndarray    # [24,3]
    rest_joints: np.ndarray     # [24,3]
    posed_segments: np.ndarray  # [24,2,3] posed bone segment endpoints

    def matrices(self) -> np.ndarray:
        out = np.broadcast_to(np.eye(4), (len(self.rotations), 4, 4)).copy()
        out[:, :3, :3] = self.rotations
        out[:, :3, 3] = self.translations
        return out

    def apply(self, x: np.ndarray) -> np.ndarray:
        """All bone maps on all points: [N,3] -> [N,24,3], via one GEMM."""
        nb = len(self.rotations)
        rows = self.rotations.reshape(nb * 3, 3)  # rows: R_b[j, :]
        return (x @ rows.T).reshape(len(x), nb, 3) + self.translations[None]

    def apply_single(self, bone: int, x: np.ndarray) -> np.ndarray:
        return x @ self.rotations[bone].T + self.translations[bone]

    def inverse_apply(self, x: np.ndarray) -> np.ndarray:
        """[N,3] -> [N,24,3]: every bone's rigid inverse applied to each point."""
        nb = len(self.rotations)
        cols = self.rotations.transpose(0, 2, 1).reshape(nb * 3, 3)  # rows: R_b[:, j]
        shifted = (x @ cols.T).reshape(len(x), nb, 3)
        offset = np.einsum("bji,bj->bi", self.rotations, self.translations)
        return shifted - offset[None]


def bone_transforms(skel: Skeleton, beta, theta) -> BoneTransforms:
    """Forward-kinematic chain; B_i maps the canonical bone frame to the posed one.

    theta is [24,3] axis-angle per joint; beta scales rest offsets through the
    skeleton's length basis, so B_i(beta, 0) is the identity exactly.
    """
    theta = np.zeros((skel.bone_count, 3)) if theta is None else np.asarray(theta, dtype=np.float64)
    theta = theta.reshape(skel.bone_count, 3)
    rest = skel.rest_joints(beta)
    local_rot = rodrigues(theta)
    nb = skel.bone_count
    orient = np.zeros((nb, 3, 3))
    pos = np.zeros((nb, 3))
    orient[0] = local_rot[0]
    pos[0] = rest[0]
    scales = skel.length_scales(beta)
    for i in range(1, nb):
        p = skel.parents[i]
        orient[i] = orient[p] @ local_rot[i]
        pos[i] = pos[p] + orient[p] @ (skel.offsets[i] * scales[i])
    translations = pos - np.einsum("bij,bj->bi", orient, rest)
    seg = skel.rest_segments(beta)
    posed_a = np.einsum("bij,bj->bi", orient, rest) + translations
    posed_b = np.einsum("bij,bj->bi", orient, rest + seg) + translations
    return BoneTransforms(
        rotations=orient,
        translations=translations,
        posed_joints=pos,
        rest_joints=rest,
        posed_segments=np.stack([posed_a, posed_b], axis=1),
    )


def bone_transforms_beta_jacobian(skel: Skeleton, beta, theta) -> np.ndarray:
    """d(B_i)/d(beta_k) as [10,24,3,4]; only the translation column moves."""
    theta = np.zeros((skel.bone_count, 3)) if theta is None else np.asarray(theta, dtype=np.float64)
    theta = theta.reshape(skel.bone_count, 3)
    nb = skel.bone_count
    local_rot = rodrigues(theta)
    orient = np.zeros((nb, 3, 3))
    orient[0] = local_rot[0]
    for i in range(1, nb):
        orient[i] = orient[skel.parents[i]] @ local_rot[i]
    out = np.zeros((SHAPE_DIM, nb, 3, 4))
    for k in range(SHAPE_DIM):
        drest = np.zeros((nb, 3))
        dpos = np.zeros((nb, 3))
        for i in range(1, nb):
            p = skel.parents[i]
            step = skel.offsets[i] * skel.length_basis[i, k]
            drest[i] = drest[p] + step
            dpos[i] = dpos[p] + orient[p] @ step
        out[k, :, :, 3] = dpos - np.einsum("bij,bj->bi", orient, drest)
    return out


# ---------------------------------------------------------------------------
# deformation networks

SKIN_SIZES = (128, 128, 128, 128, BONE_COUNT)
WARP_SIZES = (128, 128, 128, 128, 3)


class SkinningNet:
    """Identity-conditioned skinning weights: concat(x, z)[67] -> softmax[24]."""

    def __init__(self, bag: ParamBag, name: str, rng: np.random.Generator, latent_dim: int = 64):
        self.latent_dim = latent_dim
        self.mlp = MLP(bag, name, 3 + latent_dim, SKIN_SIZES, rng, final=ad.softmax_lastaxis,
                       zero_init_last=True)

    def graph(self, x: Tensor, z: Tensor) -> Tensor:
        n = x.data.shape[0]
        zb = ad.broadcast_to(ad.reshape(z, (1, -1)), (n, self.latent_dim))
        return self.mlp(ad.concat([x, zb], axis=-1))

    def value(self, x: np.ndarray, z: np.ndarray) -> np.ndarray:
        feats = np.concatenate([x, np.broadcast_to(z, (x.shape[0], self.latent_dim))], axis=-1)
        out, _ = mlp_value(self.mlp.layers, None, feats, "softmax")
        return out

    def value_and_jac(self, x: np.ndarray, jac_x: np.ndarray, z: np.ndarray):
        n = x.shape[0]
        feats = np.concatenate([x, np.broadcast_to(z, (n, self.latent_dim))], axis=-1)
        jac = np.zeros((n, 3, feats.shape[1]))
        jac[:, :, :3] = jac_x
        return mlp_value_and_input_jac(self.mlp.layers, None, feats, jac, "softmax")


class WarpNet:
    """Shape-conditioned residual warp: x + MLP(concat(x, beta))."""

    def __init__(self, bag: ParamBag, name: str, rng: np.random.Generator, shape_dim: int = SHAPE_DIM):
        self.shape_dim = shape_dim
        self.mlp = MLP(bag, name, 3 + shape_dim, WARP_SIZES, rng, final=None, zero_init_last=True)

    def graph(self, x: Tensor, beta: Tensor) -> Tensor:
        n = x.data.shape[0]
        bb = ad.broadcast_to(ad.reshape(beta, (1, -1)), (n, self.shape_dim))
        return ad.add(x, self.mlp(ad.concat([x, bb], axis=-1)))

    def value(self, x: np.ndarray, beta: np.ndarray) -> np.ndarray:
        feats = np.concatenate([x, np.broadcast_to(beta, (x.shape[0], self.shape_dim))], axis=-1)
        out, _ = mlp_value(self.mlp.layers, None, feats, "linear")
        return x + out

    def value_and_jac(self, x: np.ndarray, beta: np.ndarray):
        n = x.shape[0]
        feats = np.concatenate([x, np.broadcast_to(beta, (n, self.shape_dim))], axis=-1)
        jac = np.zeros((n, 3, feats.shape[1]))
        jac[:, :, :3] = np.eye(3)
        out, jout = mlp_value_and_input_jac(self.mlp.layers, None, feats, jac, "linear")
        return x + out, np.eye(3) + jout


class NetDeformer:
    """Network weight field bound to one (z, beta) conditioning."""

    def __init__(self, skin: SkinningNet, warp: WarpNet, z: np.ndarray, beta: np.ndarray):
        self.skin = skin
        self.warp = warp
        self.z = np.asarray(z, dtype=np.float64)
        self.beta = np.asarray(beta, dtype=np.float64)

    def weights_value(self, x: np.ndarray) -> np.ndarray:
        return self.skin.value(self.warp.value(x, self.beta), self.z)

    def weights_and_jac(self, x: np.ndarray):
        warped, jw = self.warp.value_and_jac(x, self.beta)
        return self.skin.value_and_jac(warped, jw, self.z)


class AnalyticDeformer:
    """Test fixture: explicit weight field, optionally with a spatial Jacobian."""

    def __init__(self, weight_fn, jac_fn=None):
        self._fn = weight_fn
        self._jac = jac_fn

    def weights_value(self, x: np.ndarray) -> np.ndarray:
        return self._fn(x)

    def weights_and_jac(self, x: np.ndarray):
        w = self._fn(x)
        if self._jac is None:
            jac = np.zeros((x.shape[0], 3, w.shape[1]))
        else:
            jac = self._jac(x)
        # stored as [N,3,24]: axis 1 is the spatial derivative direction
        return w, jac


def forward_lbs_value(x: np.ndarray, weights: np.ndarray, transforms: BoneTransforms) -> np.ndarray:
    """x_d = sum_i w_i * (B_i x), batched over points."""
    bx = transforms.apply(x)
    return (weights[:, :, None] * bx).sum(axis=1)


def forward_lbs(x: np.ndarray, deformer, transforms: BoneTransforms) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return forward_lbs_value(x, deformer.weights_value(x), transforms)


def forward_lbs_graph(x_c: Tensor, skin: SkinningNet, warp: WarpNet, z: Tensor, beta: Tensor,
                      transforms_t: Tensor) -> Tensor:
    """In-graph forward LBS at canonical points; transforms enter as a [24,3,4] tensor."""
    warped = warp.graph(x_c, beta)
    weights = skin.graph(warped, z)
    rot = transforms_t[:, :, :3]
    trans = transforms_t[:, :, 3]
    bx = ad.add(ad.einsum("bij,nj->nbi", rot, x_c), ad.reshape(trans, (1, -1, 3)))
    return ad.einsum("nb,nbi->ni", weights, bx)


def lbs_spatial_jacobian(roots: np.ndarray, deformer, transforms: BoneTransforms) -> np.ndarray:
    """Exact d(forward_lbs)/dx at canonical points, [N,3,3], forward-mode."""
    roots = np.asarray(roots, dtype=np.float64)
    w, dwdx = deformer.weights_and_jac(roots)  # [N,24], [N,3,24]
    nb = len(transforms.rotations)
    term1 = (w @ transforms.rotations.reshape(nb, 9)).reshape(-1, 3, 3)
    bx = transforms.apply(roots)  # [N,24,3]
    term2 = (bx[:, :, :, None] * dwdx.transpose(0, 2, 1)[:, :, None, :]).sum(axis=1)
    return term1 + term2


# ---------------------------------------------------------------------------
# root finding


@dataclass(frozen=True)
class SolverConfig:
    max_iters: int = 30
    tol: float = 1e-6
    dedup_tol: float = 1e-4
    init_radius: float = 0.3
    min_inits: int = 4
    fallback: str = "all"  # every bone, or the "nearest" fallback_count bones
    fallback_count: int = 24
    divergence: float = 8.0


DEFAULT_SOLVER = SolverConfig()


def segment_distances(x: np.ndarray, segments: np.ndarray) -> np.ndarray:
    """[N,3] x [B,2,3] -> [N,B] point-to-segment distances."""
    a = segments[:, 0]
    ab = segments[:, 1] - segments[:, 0]
    denom = np.maximum((ab * ab).sum(axis=1), 1e-18)
    ax = x[:, None, :] - a[None]
    t = np.clip(np.einsum("nbi,bi->nb", ax, ab) / denom[None], 0.0, 1.0)
    closest = a[None] + t[:, :, None] * ab[None]
    return np.linalg.norm(x[:, None, :] - closest, axis=-1)


def canonical_inits(x_d: np.ndarray, transforms: BoneTransforms,
                    cfg: SolverConfig = DEFAULT_SOLVER):
    """Rigid per-bone inverse seeds for the root search.

    Returns (point_ids [M], init_bones [M], inits [M,3]). Bones whose posed
    segment lies within ``init_radius`` qualify; points with fewer than
    ``min_inits`` qualifying bones fall back to all bones (default) or to the
    nearest ``fallback_count`` bones.
    """
    x_d = np.asarray(x_d, dtype=np.float64)
    nb = len(transforms.rotations)
    dists = segment_distances(x_d, transforms.posed_segments)
    qualify = dists <= cfg.init_radius
    counts = qualify.sum(axis=1)
    fallback_rows = counts < cfg.min_inits
    if np.any(fallback_rows):
        if cfg.fallback == "all" or cfg.fallback_count >= nb:
            qualify[fallback_rows] = True
        else:
            order = np.argsort(dists[fallback_rows], axis=1)[:, : cfg.fallback_count]
            q = np.zeros((int(fallback_rows.sum()), nb), dtype=bool)
            np.put_along_axis(q, order, True, axis=1)
            qualify[fallback_rows] = q
    point_ids, init_bones = np.nonzero(qualify)
    inv = transforms.inverse_apply(x_d[point_ids])
    inits = inv[np.arange(len(point_ids)), init_bones]
    return point_ids, init_bones, inits


def broyden_solve(f, x0: np.ndarray, cfg: SolverConfig = DEFAULT_SOLVER):
    """Batched Broyden (good update), identity initial inverse-Jacobian.

    ``f(x_subset, row_indices)`` evaluates the residual on a row subset.
    Returns (best roots, best residual norms, converged mask, iterations).
    """
    m = x0.shape[0]
    x = np.asarray(x0, dtype=np.float64).copy()
    if m == 0:
        return x, np.zeros(0), np.zeros(0, dtype=bool), 0
    rows = np.arange(m)
    fx = f(x, rows)
    jinv = np.broadcast_to(np.eye(3), (m, 3, 3)).copy()
    norm = np.linalg.norm(fx, axis=1)
    best_x = x.copy()
    best_norm = norm.copy()
    active = (norm > cfg.tol) & (norm < cfg.divergence)
    iters = 0
    while iters < cfg.max_iters and active.any():
        iters += 1
        ia = np.nonzero(active)[0]
        dx = -np.einsum("kij,kj->ki", jinv[ia], fx[ia])
        xn = x[ia] + dx
        fn = f(xn, ia)
        df = fn - fx[ia]
        x[ia] = xn
        fx[ia] = fn
        nrm = np.linalg.norm(fn, axis=1)
        better = nrm < best_norm[ia]
        ib = ia[better]
        best_norm[ib] = nrm[better]
        best_x[ib] = xn[better]
        still = (best_norm[ia] > cfg.tol) & (nrm < cfg.divergence)
        active[ia] = still
        keep = np.nonzero(still)[0]
        if keep.size == 0:
            break
        ik = ia[keep]
        dxk, dfk = dx[keep], df[keep]
        jdf = np.einsum("kij,kj->ki", jinv[ik], dfk)
        vt = np.einsum("kj,kji->ki", dxk, jinv[ik])
        denom = (vt * dfk).sum(axis=1)
        denom = denom + np.where(denom >= 0, 1e-12, -1e-12)
        u = (dxk - jdf) / denom[:, None]
        jinv[ik] += u[:, :, None] * vt[:, None, :]
    return best_x, best_norm, best_norm < cfg.tol, iters


@dataclass
class CorrespondenceBatch:
    """Flat set of converged, deduplicated canonical roots for posed queries."""

    n_points: int
    point_ids: np.ndarray   # [M] which query produced each root
    roots: np.ndarray       # [M,3]
    residuals: np.ndarray   # [M]
    init_bones: np.ndarray  # [M]

    def count(self) -> int:
        return len(self.point_ids)

    def points_with_roots(self) -> np.ndarray:
        mask = np.zeros(self.n_points, dtype=bool)
        mask[self.point_ids] = True
        return mask


def _dedup(point_ids, roots, tol):
    """Keep-first filter of roots closer than tol within the same point."""
    keep = np.ones(len(point_ids), dtype=bool)
    order = np.argsort(point_ids, kind="stable")
    pid = order_pid = point_ids[order]
    bounds = np.flatnonzero(np.diff(order_pid)) + 1
    groups = np.split(order, bounds)
    for idx in groups:
        if len(idx) < 2:
            continue
        r = roots[idx]
        for a in range(1, len(idx)):
            d = np.linalg.norm(r[:a] - r[a], axis=1)
            if np.any(keep[idx[:a]] & (d < tol)):
                keep[idx[a]] = False
    return keep


def find_correspondences(x_d: np.ndarray, deformer, transforms: BoneTransforms,
                         cfg: SolverConfig = DEFAULT_SOLVER) -> CorrespondenceBatch:
    """Multi-init Broyden canonicalization of a batch of posed points."""
    x_d = np.asarray(x_d, dtype=np.float64)
    point_ids, init_bones, inits = canonical_inits(x_d, transforms, cfg)
    targets = x_d[point_ids]

    def residual(xc, rows):
        w = deformer.weights_value(xc)
        return forward_lbs_value(xc, w, transforms) - targets[rows]

    roots, resid, converged, _ = broyden_solve(residual, inits, cfg)
    keep = converged.copy()
    if np.any(keep):
        k = np.nonzero(keep)[0]
        keep[k] = _dedup(point_ids[k], roots[k], cfg.dedup_tol)
    return CorrespondenceBatch(
        n_points=len(x_d),
        point_ids=point_ids[keep],
        roots=roots[keep],
        residuals=resid[keep],
        init_bones=init_bones[keep],
    )


# ---------------------------------------------------------------------------
# implicit differentiation


def attach_roots(roots_value: np.ndarray, j_x: np.ndarray, lbs_graph_builder, params: list,
                 counter: Counter = None) -> Tensor:
    """Expose solver roots as a graph node with implicit-function backward.

    ``lbs_graph_builder(roots)`` must rebuild the forward-LBS graph at the
    (constant) roots using exactly the Tensors in ``params``. Backward maps
    an incoming cotangent g through v = -J_x^{-T} g and accumulates v^T df/dw
    into each parameter. Rows with |det J_x| < 1e-9 contribute zero gradient
    and are counted.
    """
    roots_value = np.asarray(roots_value, dtype=np.float64)
    j_x = np.asarray(j_x, dtype=np.float64)
    dets = np.abs(np.linalg.det(j_x))
    valid = dets >= 1e-9
    (counter or SINGULAR_COUNTER).add(int(np.count_nonzero(~valid)))
    params = list(params)

    def vjp(g):
        v = np.zeros_like(g)
        if np.any(valid):
            jt = np.transpose(j_x[valid], (0, 2, 1))
            v[valid] = -np.linalg.solve(jt, g[valid][:, :, None])[:, :, 0]
        y = lbs_graph_builder(roots_value)
        return tuple(ad.gradients(y, params, seed=v))

    return Tensor(roots_value, _parents=tuple(params), _vjp=vjp)


def implicit_root_jacobian(j_x: np.ndarray, df_dw: np.ndarray) -> np.ndarray:
    """d(root)/dw = -J_x^{-1} df/dw for one root (df_dw: [3, P] or [3])."""
    return -np.linalg.solve(j_x, df_dw)


def transforms_graph(beta_t: Tensor, skel: Skeleton, theta) -> Tensor:
    """Bone transforms as a [24,3,4] graph node differentiable in beta.

    Rotations do not depend on beta; the translation columns chain through
    the analytic kinematic Jacobian, so shape-parameter fitting can move the
    skeleton without finite differences.
    """
    tf = bone_transforms(skel, beta_t.data, theta)
    mat = np.concatenate([tf.rotations, tf.translations[:, :, None]], axis=2)
    jac = bone_transforms_beta_jacobian(skel, beta_t.data, theta)  # [10,24,3,4]

    def vjp(g):
        return (np.einsum("kbij,bij->k", jac, g),)

    return Tensor(mat, _parents=(beta_t,), _vjp=vjp)
