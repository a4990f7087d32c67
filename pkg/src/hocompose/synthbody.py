"""Analytic stand-in for scan data: a 24-bone capsule body plus attachable
procedural objects, with exact occupancy/SDF/normal labels.

The body is a union of capsules, one per bone. Shape parameters scale bone
lengths and radii through fixed linear bases; identities perturb the rest
proportions deterministically from a seed. Posed ground truth moves each
capsule rigidly with its bone, so labels in posed space are exact.

Objects (backpack, outwear, scarf, hat, vest) are primitive SDFs attached to
a bone, carved so they never swallow the body interior, and jittered per scan.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .articulation import BONE_COUNT, SHAPE_DIM, BoneTransforms, Skeleton, bone_transforms

CATEGORIES = ("backpack", "outwear", "scarf", "hat", "vest")

# joint layout mirrors a standard humanoid rig: pelvis root, three-link spine,
# neck/head, and symmetric leg/arm chains
_JOINT_NAMES = (
    "pelvis", "l_hip", "r_hip", "spine1", "l_knee", "r_knee", "spine2",
    "l_ankle", "r_ankle", "spine3", "l_foot", "r_foot", "neck", "l_collar",
    "r_collar", "head", "l_shoulder", "r_shoulder", "l_elbow", "r_elbow",
    "l_wrist", "r_wrist", "l_hand", "r_hand",
)
_PARENTS = np.array([-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21])

_OFFSETS = np.array([
    [0.00, 0.00, 0.00],    # pelvis (root, absolute)
    [+0.09, -0.05, 0.00],  # l_hip
    [-0.09, -0.05, 0.00],  # r_hip
    [0.00, +0.11, 0.00],   # spine1
    [+0.02, -0.36, 0.00],  # l_knee
    [-0.02, -0.36, 0.00],  # r_knee
    [0.00, +0.12, 0.00],   # spine2
    [+0.01, -0.36, 0.00],  # l_ankle
    [-0.01, -0.36, 0.00],  # r_ankle
    [0.00, +0.12, 0.00],   # spine3
    [0.00, -0.05, +0.10],  # l_foot
    [0.00, -0.05, +0.10],  # r_foot
    [0.00, +0.11, 0.00],   # neck
    [+0.07, +0.08, 0.00],  # l_collar
    [-0.07, +0.08, 0.00],  # r_collar
    [0.00, +0.09, 0.00],   # head
    [+0.12, +0.02, 0.00],  # l_shoulder
    [-0.12, +0.02, 0.00],  # r_shoulder
    [+0.24, 0.00, 0.00],   # l_elbow
    [-0.24, 0.00, 0.00],   # r_elbow
    [+0.21, 0.00, 0.00],   # l_wrist
    [-0.21, 0.00, 0.00],   # r_wrist
    [+0.06, 0.00, 0.00],   # l_hand
    [-0.06, 0.00, 0.00],   # r_hand
])

# bone segment vectors (joint -> tip); tips of chain bones meet the child joint
_SEGMENTS = np.array([
    [0.00, 0.11, 0.00],    # pelvis -> spine1
    [+0.02, -0.36, 0.00],  # l_hip -> knee
    [-0.02, -0.36, 0.00],  # r_hip -> knee
    [0.00, +0.12, 0.00],   # spine1 -> spine2
    [+0.01, -0.36, 0.00],  # knees -> ankles
    [-0.01, -0.36, 0.00],
    [0.00, +0.12, 0.00],   # spine2 -> spine3
    [0.00, -0.05, +0.10],  # ankles -> feet
    [0.00, -0.05, +0.10],
    [0.00, +0.11, 0.00],   # spine3 -> neck
    [0.00, -0.01, +0.06],  # feet -> toes
    [0.00, -0.01, +0.06],
    [0.00, +0.09, 0.00],   # neck -> head
    [+0.12, +0.02, 0.00],  # collars -> shoulders
    [-0.12, +0.02, 0.00],
    [0.00, +0.12, 0.00],   # head -> crown
    [+0.24, 0.00, 0.00],   # shoulders -> elbows
    [-0.24, 0.00, 0.00],
    [+0.21, 0.00, 0.00],   # elbows -> wrists
    [-0.21, 0.00, 0.00],
    [+0.06, 0.00, 0.00],   # wrists -> hands
    [-0.06, 0.00, 0.00],
    [+0.05, 0.00, 0.00],   # hands -> fingertips
    [-0.05, 0.00, 0.00],
])

_BASE_RADII = np.array([
    0.13,  # pelvis
    0.072, 0.072,      # upper legs
    0.125,             # spine1
    0.058, 0.058,      # lower legs
    0.12,              # spine2
    0.045, 0.045,      # feet
    0.115,             # spine3
    0.035, 0.035,      # toes
    0.052,             # neck
    0.055, 0.055,      # collars
    0.095,             # head
    0.052, 0.052,      # upper arms
    0.042, 0.042,      # forearms
    0.036, 0.036,      # wrists
    0.03, 0.03,        # hands
])


def _shape_bases():
    """Fixed deterministic linear maps from beta[10] to per-bone scales."""
    rng = np.random.default_rng(20240117)
    length = rng.normal(size=(BONE_COUNT, SHAPE_DIM)) * 0.018
    radius = rng.normal(size=(BONE_COUNT, SHAPE_DIM)) * 0.022
    # first two shape axes act globally: overall size and girth
    length[:, 0] += 0.03
    radius[:, 0] += 0.02
    radius[:, 1] += 0.035
    return length, radius


_LENGTH_BASIS, _RADIUS_BASIS = _shape_bases()


@dataclass
class ParametricBody:
    skeleton: Skeleton
    capsule_radii: np.ndarray          # [24] rest radii
    radius_basis: np.ndarray           # [24,10]
    identity_seed: int

    def radii(self, beta) -> np.ndarray:
        if beta is None:
            return self.capsule_radii
        scale = 1.0 + self.radius_basis @ np.asarray(beta, dtype=np.float64)
        return self.capsule_radii * np.clip(scale, 0.5, 1.6)

    def transforms(self, beta, theta) -> BoneTransforms:
        return bone_transforms(self.skeleton, beta, theta)


def make_body(identity_seed: int = 0) -> ParametricBody:
    """Deterministic identity: the seed perturbs rest proportions."""
    offsets = _OFFSETS.copy()
    segments = _SEGMENTS.copy()
    radii = _BASE_RADII.copy()
    if identity_seed != 0:
        rng = np.random.default_rng(identity_seed)
        offsets = offsets * (1.0 + rng.uniform(-0.10, 0.10, size=(BONE_COUNT, 1)))
        segments = segments * (1.0 + rng.uniform(-0.10, 0.10, size=(BONE_COUNT, 1)))
        radii = radii * (1.0 + rng.uniform(-0.14, 0.14, size=BONE_COUNT))
    skel = Skeleton(parents=_PARENTS, offsets=offsets, segments=segments, length_basis=_LENGTH_BASIS)
    return ParametricBody(
        skeleton=skel,
        capsule_radii=radii,
        radius_basis=_RADIUS_BASIS,
        identity_seed=identity_seed,
    )


# ---------------------------------------------------------------------------
# capsule SDF machinery


def _capsule_sdf(x: np.ndarray, a: np.ndarray, seg: np.ndarray, radius: np.ndarray):
    """Per-capsule SDF and closest-axis parameters for [N,3] x [B,...]."""
    denom = np.maximum((seg * seg).sum(axis=-1), 1e-18)
    ax = x[:, None, :] - a[None]
    t = np.clip(np.einsum("nbi,bi->nb", ax, seg) / denom[None], 0.0, 1.0)
    diff = ax - t[:, :, None] * seg[None]
    dist = np.linalg.norm(diff, axis=-1)
    return dist - radius[None], diff, dist


def body_sdf(body: ParametricBody, beta, theta, x: np.ndarray, space: str = "canonical") -> np.ndarray:
    """Union-of-capsules signed distance; posed space applies exact rigid maps."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    joints = body.skeleton.rest_joints(beta)
    segs = body.skeleton.rest_segments(beta)
    radii = body.radii(beta)
    if space == "posed":
        tf = body.transforms(beta, theta)
        xl = tf.inverse_apply(x)  # [N,24,3]
        ax = xl - joints[None]
        denom = np.maximum((segs * segs).sum(axis=-1), 1e-18)
        t = np.clip(np.einsum("nbi,bi->nb", ax, segs) / denom[None], 0.0, 1.0)
        diff = ax - t[:, :, None] * segs[None]
        dist = np.linalg.norm(diff, axis=-1)
        return (dist - radii[None]).min(axis=1)
    sdfs, _, _ = _capsule_sdf(x, joints, segs, radii)
    return sdfs.min(axis=1)


def body_sdf_grad(body: ParametricBody, beta, theta, x: np.ndarray, space: str = "canonical"):
    """(sdf, unit gradient) of the capsule union, from the closest capsule."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    joints = body.skeleton.rest_joints(beta)
    segs = body.skeleton.rest_segments(beta)
    radii = body.radii(beta)
    if space == "posed":
        tf = body.transforms(beta, theta)
        xl = tf.inverse_apply(x)
        ax = xl - joints[None]
        denom = np.maximum((segs * segs).sum(axis=-1), 1e-18)
        t = np.clip(np.einsum("nbi,bi->nb", ax, segs) / denom[None], 0.0, 1.0)
        diff = ax - t[:, :, None] * segs[None]
        dist = np.linalg.norm(diff, axis=-1)
        sdfs = dist - radii[None]
        best = np.argmin(sdfs, axis=1)
        rows = np.arange(len(x))
        grad_local = diff[rows, best] / np.maximum(dist[rows, best, None], 1e-12)
        rot = tf.rotations[best]
        grad = np.einsum("nij,nj->ni", rot, grad_local)
        return sdfs[rows, best], grad
    sdfs, diff, dist = _capsule_sdf(x, joints, segs, radii)
    best = np.argmin(sdfs, axis=1)
    rows = np.arange(len(x))
    grad = diff[rows, best] / np.maximum(dist[rows, best, None], 1e-12)
    return sdfs[rows, best], grad


# ---------------------------------------------------------------------------
# procedural objects


@dataclass
class ProceduralObject:
    category: str
    attach_bone: int
    params: dict
    deform_seed: int = 0

    @property
    def category_index(self) -> int:
        return CATEGORIES.index(self.category)

    def one_hot(self) -> np.ndarray:
        v = np.zeros(len(CATEGORIES))
        v[self.category_index] = 1.0
        return v


def _rounded_box_sdf(x, center, half, round_r):
    q = np.abs(x - center) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(q.max(axis=-1), 0.0)
    return outside + inside - round_r


def _torus_sdf(x, center, axis, major, minor):
    rel = x - center
    along = rel @ axis
    radial = rel - along[:, None] * axis
    q = np.stack([np.linalg.norm(radial, axis=-1) - major, along], axis=-1)
    return np.linalg.norm(q, axis=-1) - minor


def _capped_cylinder_sdf(x, center, axis, half_h, radius):
    rel = x - center
    along = rel @ axis
    radial = np.linalg.norm(rel - along[:, None] * axis, axis=-1)
    d = np.stack([radial - radius, np.abs(along) - half_h], axis=-1)
    outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
    inside = np.minimum(d.max(axis=-1), 0.0)
    return outside + inside


def _wobble(x: np.ndarray, seed: int, amplitude: float = 0.012) -> np.ndarray:
    """Smooth low-frequency displacement, the contact-conforming jitter."""
    if seed == 0:
        return x
    rng = np.random.default_rng(seed)
    freq = rng.uniform(2.0, 4.5, size=3)
    phase = rng.uniform(0, 2 * np.pi, size=3)
    amp = rng.uniform(0.5, 1.0, size=3) * amplitude
    disp = np.stack(
        [amp[i] * np.sin(freq[i] * x[:, (i + 1) % 3] + phase[i]) for i in range(3)], axis=-1
    )
    return x + disp


def make_object(category: str, body: ParametricBody, rng: np.random.Generator) -> ProceduralObject:
    """Category template with per-scan size jitter, attached to the rest body."""
    joints = body.skeleton.rest_joints(None)
    spine3, neck, head = joints[9], joints[12], joints[15]
    j = lambda lo, hi: float(rng.uniform(lo, hi))
    seed = int(rng.integers(1, 2**31 - 1))
    if category == "backpack":
        params = {
            "center": np.array([0.0, spine3[1] - 0.06, -(0.12 + j(0.04, 0.10))]),
            "half": np.array([j(0.12, 0.17), j(0.15, 0.21), j(0.06, 0.10)]),
            "round": 0.03,
        }
        return ProceduralObject("backpack", 9, params, seed)
    if category == "outwear":
        params = {"lo": -0.02, "hi": neck[1] + 0.03, "thick": j(0.030, 0.045), "arms": True}
        return ProceduralObject("outwear", 6, params, seed)
    if category == "scarf":
        params = {
            "center": neck + np.array([0.0, j(0.00, 0.04), 0.0]),
            "major": j(0.10, 0.13),
            "minor": j(0.045, 0.062),
        }
        return ProceduralObject("scarf", 12, params, seed)
    if category == "hat":
        params = {
            "center": head + np.array([0.0, 0.16 + j(0.00, 0.03), 0.0]),
            "radius": j(0.10, 0.13),
            "half_h": j(0.035, 0.06),
            "brim": j(0.15, 0.19),
        }
        return ProceduralObject("hat", 15, params, seed)
    if category == "vest":
        params = {"lo": 0.02, "hi": spine3[1] + 0.06, "thick": j(0.026, 0.038), "arms": False}
        return ProceduralObject("vest", 6, params, seed)
    raise ValueError(f"unknown category {category!r}; valid: {CATEGORIES}")


_TORSO_BONES = (0, 3, 6, 9)
_ARM_BONES = (16, 17)


def _shell_base_sdf(x, body: ParametricBody, beta, params):
    """Clothing shell: offset band around torso (and optionally upper-arm) capsules."""
    joints = body.skeleton.rest_joints(beta)
    segs = body.skeleton.rest_segments(beta)
    radii = body.radii(beta)
    bones = _TORSO_BONES + (_ARM_BONES if params["arms"] else ())
    idx = np.asarray(bones)
    sdfs, _, _ = _capsule_sdf(x, joints[idx], segs[idx], radii[idx])
    dist_body = sdfs.min(axis=1)
    shell = np.abs(dist_body - params["thick"] * 0.6) - params["thick"] * 0.6
    band_lo = params["lo"] - x[:, 1]
    band_hi = x[:, 1] - params["hi"]
    return np.maximum(shell, np.maximum(band_lo, band_hi))


def object_sdf(obj: ProceduralObject, body: ParametricBody, beta, x: np.ndarray,
               carve: bool = True, gap: float = 0.004) -> np.ndarray:
    """Canonical-space object SDF, carved so the body interior stays body."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    xq = _wobble(x, obj.deform_seed)
    p = obj.params
    if obj.category == "backpack":
        base = _rounded_box_sdf(xq, p["center"], p["half"], p["round"])
    elif obj.category in ("outwear", "vest"):
        base = _shell_base_sdf(xq, body, beta, p)
    elif obj.category == "scarf":
        base = _torus_sdf(xq, p["center"], np.array([0.0, 1.0, 0.0]), p["major"], p["minor"])
    elif obj.category == "hat":
        crown = _capped_cylinder_sdf(xq, p["center"], np.array([0.0, 1.0, 0.0]), p["half_h"], p["radius"])
        brim = _capped_cylinder_sdf(
            xq, p["center"] - np.array([0.0, p["half_h"], 0.0]), np.array([0.0, 1.0, 0.0]), 0.012, p["brim"]
        )
        base = np.minimum(crown, brim)
    else:
        raise ValueError(f"unknown category {obj.category!r}")
    if not carve:
        return base
    body_d = body_sdf(body, beta, None, x, "canonical")
    return np.maximum(base, gap - body_d)


def object_sdf_posed(obj: ProceduralObject, body: ParametricBody, beta, theta, x: np.ndarray) -> np.ndarray:
    """Objects ride rigidly on their attach bone."""
    tf = body.transforms(beta, theta)
    b = obj.attach_bone
    local = (np.atleast_2d(x) - tf.translations[b]) @ tf.rotations[b]
    return object_sdf(obj, body, beta, local)


def scene_sdf(body: ParametricBody, objects: list, beta, theta, x: np.ndarray,
              space: str = "canonical") -> np.ndarray:
    """body union objects, in either space."""
    d = body_sdf(body, beta, theta, x, space)
    for obj in objects:
        if space == "posed":
            d = np.minimum(d, object_sdf_posed(obj, body, beta, theta, x))
        else:
            d = np.minimum(d, object_sdf(obj, body, beta, x))
    return d


def _numeric_grad(fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(x)
    for axis in range(3):
        dx = np.zeros(3)
        dx[axis] = h
        g[:, axis] = (fn(x + dx) - fn(x - dx)) / (2 * h)
    return g


# ---------------------------------------------------------------------------
# scan records


@dataclass
class ScanRecord:
    scan_id: int
    dataset: str                   # "s_th" | "s_sh" | "s_sh_plus_o"
    beta: np.ndarray
    theta: np.ndarray
    category: str | None
    surface_points: np.ndarray     # [ns,3] posed
    surface_normals: np.ndarray    # [ns,3] unit, posed
    volume_points: np.ndarray      # [nv,3] posed
    volume_occ: np.ndarray         # [nv] {0,1}
    volume_sdf: np.ndarray         # [nv]
    canon_points: np.ndarray       # [nc,3] canonical uniform
    canon_sdf: np.ndarray          # [nc] canonical scene sdf
    identity_seed: int
    provenance_seed: int

    @property
    def category_index(self) -> int:
        return -1 if self.category is None else CATEGORIES.index(self.category)


def _sample_capsule_surface(rng, joints, segs, radii, n: int):
    """Area-weighted uniform samples on the capsule surfaces (canonical)."""
    seg_len = np.linalg.norm(segs, axis=1)
    side_area = 2 * np.pi * radii * seg_len
    cap_area = 4 * np.pi * radii**2
    weights = side_area + cap_area
    weights = weights / weights.sum()
    bone = rng.choice(len(radii), size=n, p=weights)
    pts = np.zeros((n, 3))
    use_cap = rng.random(n) < (cap_area[bone] / (side_area[bone] + cap_area[bone]))
    # cylinder side: random height, random angle in the plane normal to the axis
    axis = segs / np.maximum(seg_len[:, None], 1e-12)
    tmp = np.where(np.abs(axis[:, [0]]) < 0.9, np.array([[1.0, 0, 0]]), np.array([[0, 1.0, 0]]))
    u = np.cross(axis, tmp)
    u /= np.maximum(np.linalg.norm(u, axis=1, keepdims=True), 1e-12)
    v = np.cross(axis, u)
    t = rng.random(n)
    phi = rng.uniform(0, 2 * np.pi, n)
    ring = np.cos(phi)[:, None] * u[bone] + np.sin(phi)[:, None] * v[bone]
    side_pts = joints[bone] + t[:, None] * segs[bone] + radii[bone][:, None] * ring
    # spherical caps: random direction, pushed to the nearer end
    dirs = rng.normal(size=(n, 3))
    dirs /= np.maximum(np.linalg.norm(dirs, axis=1, keepdims=True), 1e-12)
    along = np.einsum("ni,ni->n", dirs, axis[bone])
    end = (along > 0).astype(np.float64)
    cap_pts = joints[bone] + end[:, None] * segs[bone] + radii[bone][:, None] * dirs
    pts = np.where(use_cap[:, None], cap_pts, side_pts)
    return pts, bone


def _project_to_surface(fn_sdf, fn_grad, x: np.ndarray, iters: int = 8) -> np.ndarray:
    for _ in range(iters):
        d = fn_sdf(x)
        g = fn_grad(x)
        x = x - d[:, None] * g
        if np.max(np.abs(fn_sdf(x))) < 1e-10:
            break
    return x


def _sample_object_surface(rng, obj, body, beta, n: int):
    """Rejection-project points onto the carved object's zero level set."""
    p = obj.params
    if obj.category == "backpack":
        center, span = p["center"], p["half"] + 0.05
    elif obj.category == "scarf":
        center, span = p["center"], np.array([p["major"] + p["minor"] + 0.04] * 3)
    elif obj.category == "hat":
        center = p["center"]
        span = np.array([p["brim"] + 0.04, p["half_h"] + 0.06, p["brim"] + 0.04])
    else:  # shells hug the torso
        center = np.array([0.0, (p["lo"] + p["hi"]) / 2, 0.0])
        span = np.array([0.45, (p["hi"] - p["lo"]) / 2 + 0.08, 0.40])
    fn = lambda q: object_sdf(obj, body, beta, q)
    gn = lambda q: _numeric_grad(fn, q)
    pts = []
    for _ in range(40):
        cand = center + rng.uniform(-1, 1, size=(4 * n, 3)) * span
        cand = cand[np.abs(fn(cand)) < 0.05]
        if len(cand):
            cand = _project_to_surface(fn, gn, cand)
            cand = cand[np.abs(fn(cand)) < 1e-7]
            pts.append(cand)
        if sum(len(c) for c in pts) >= n:
            break
    if not pts:
        raise RuntimeError(f"object surface sampling failed for {obj.category}")
    out = np.concatenate(pts, axis=0)
    reps = int(np.ceil(n / len(out)))
    return np.tile(out, (reps, 1))[:n]


def sample_scan(body: ParametricBody, objects: list, beta, theta, n_surface: int,
                n_volume: int, seed: int, dataset: str = "s_th", scan_id: int = 0,
                n_canon: int = 1024, bbox_min=(-1, -1, -0.5), bbox_max=(1, 1, 0.5)) -> ScanRecord:
    """Labeled point samples for one synthetic scan; deterministic in seed."""
    rng = np.random.default_rng(seed)
    beta = np.zeros(SHAPE_DIM) if beta is None else np.asarray(beta, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    joints = body.skeleton.rest_joints(beta)
    segs = body.skeleton.rest_segments(beta)
    radii = body.radii(beta)
    tf = body.transforms(beta, theta)

    # canonical union surface: body capsules + object shells, rejection by union
    n_body = n_surface if not objects else int(n_surface * 0.65)
    surf_parts = []
    want_body = n_body
    for _ in range(30):
        pts, bone = _sample_capsule_surface(rng, joints, segs, radii, 2 * want_body)
        posed = np.einsum("nij,nj->ni", tf.rotations[bone], pts) + tf.translations[bone]
        keep = scene_sdf(body, objects, beta, theta, posed, "posed") > -1e-9
        # surface points lie on their own capsule; interior-to-union ones go
        surf_parts.append((posed[keep], bone[keep], pts[keep]))
        if sum(len(s[0]) for s in surf_parts) >= n_body:
            break
    posed_pts = np.concatenate([s[0] for s in surf_parts])[:n_body]
    bones = np.concatenate([s[1] for s in surf_parts])[:n_body]
    canon_pts = np.concatenate([s[2] for s in surf_parts])[:n_body]
    # analytic capsule normals, rotated by the owning bone
    ax = canon_pts - joints[bones]
    denom = np.maximum((segs[bones] * segs[bones]).sum(axis=1), 1e-18)
    t = np.clip(np.einsum("ni,ni->n", ax, segs[bones]) / denom, 0.0, 1.0)
    local_n = ax - t[:, None] * segs[bones]
    local_n /= np.maximum(np.linalg.norm(local_n, axis=1, keepdims=True), 1e-12)
    normals = np.einsum("nij,nj->ni", tf.rotations[bones], local_n)

    if objects:
        n_obj = n_surface - n_body
        opts_c = _sample_object_surface(rng, objects[0], body, beta, 2 * n_obj)
        b = objects[0].attach_bone
        posed_o = opts_c @ tf.rotations[b].T + tf.translations[b]
        keep = scene_sdf(body, objects, beta, theta, posed_o, "posed") > -1e-9
        posed_o, opts_c = posed_o[keep][:n_obj], opts_c[keep][:n_obj]
        fn = lambda q: object_sdf(objects[0], body, beta, q)
        gn_local = _numeric_grad(fn, opts_c)
        gn_local /= np.maximum(np.linalg.norm(gn_local, axis=1, keepdims=True), 1e-12)
        normals_o = gn_local @ tf.rotations[b].T
        posed_pts = np.concatenate([posed_pts, posed_o])
        normals = np.concatenate([normals, normals_o])

    # top up if rejection starved the quota
    while len(posed_pts) < n_surface:
        reps = n_surface - len(posed_pts)
        posed_pts = np.concatenate([posed_pts, posed_pts[:reps]])
        normals = np.concatenate([normals, normals[:reps]])

    # volume labels: half near-surface (gaussian offsets), half uniform in box
    lo, hi = np.asarray(bbox_min, dtype=np.float64), np.asarray(bbox_max, dtype=np.float64)
    n_near = n_volume // 2
    pick = rng.integers(0, len(posed_pts), size=n_near)
    near = posed_pts[pick] + rng.normal(scale=0.02, size=(n_near, 3))
    uniform = rng.uniform(lo, hi, size=(n_volume - n_near, 3))
    vol = np.concatenate([near, uniform])
    vol_sdf = scene_sdf(body, objects, beta, theta, vol, "posed")
    vol_occ = (vol_sdf < 0).astype(np.float64)

    canon = rng.uniform(lo, hi, size=(n_canon, 3))
    canon_sdf = scene_sdf(body, objects, beta, None, canon, "canonical")

    return ScanRecord(
        scan_id=scan_id,
        dataset=dataset,
        beta=beta,
        theta=theta,
        category=objects[0].category if objects else None,
        surface_points=posed_pts,
        surface_normals=normals,
        volume_points=vol,
        volume_occ=vol_occ,
        volume_sdf=vol_sdf,
        canon_points=canon,
        canon_sdf=canon_sdf,
        identity_seed=body.identity_seed,
        provenance_seed=seed,
    )


# ---------------------------------------------------------------------------
# datasets


@dataclass
class DatasetManifest:
    n_th: int = 52
    n_sh: int = 18
    n_sh_plus_o: int = 34
    seed: int = 7
    n_surface: int = 2048
    n_volume: int = 4096
    n_canon: int = 1024
    source_identity: int = 1000
    beta_scale: float = 0.7        # S_th body-shape variation
    beta_jitter: float = 0.05      # source-human per-scan wobble
    pose_scale: float = 1.0

    def counts(self):
        return {"s_th": self.n_th, "s_sh": self.n_sh, "s_sh_plus_o": self.n_sh_plus_o}

    def to_lines(self) -> str:
        fields = [
            ("n_th", self.n_th), ("n_sh", self.n_sh), ("n_sh_plus_o", self.n_sh_plus_o),
            ("seed", self.seed), ("n_surface", self.n_surface), ("n_volume", self.n_volume),
            ("n_canon", self.n_canon), ("source_identity", self.source_identity),
            ("beta_scale", self.beta_scale), ("beta_jitter", self.beta_jitter),
            ("pose_scale", self.pose_scale),
        ]
        return "".join(f"{k} = {v}\n" for k, v in fields)

    @classmethod
    def from_lines(cls, text: str) -> "DatasetManifest":
        m = cls()
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if not hasattr(m, key):
                raise KeyError(f"unknown manifest key {key!r}")
            current = getattr(m, key)
            setattr(m, key, type(current)(float(value)) if isinstance(current, int) else float(value))
        return m


# per-joint pose magnitudes (radians); kept moderate so roots stay findable
_POSE_LIMITS = np.zeros((BONE_COUNT, 3))
_POSE_LIMITS[0] = (0.15, 0.25, 0.15)            # pelvis
_POSE_LIMITS[[3, 6, 9]] = (0.12, 0.15, 0.10)    # spine
_POSE_LIMITS[[1, 2]] = (0.5, 0.2, 0.25)         # hips
_POSE_LIMITS[[4, 5]] = (0.8, 0.0, 0.0)          # knees
_POSE_LIMITS[[7, 8]] = (0.3, 0.0, 0.1)          # ankles
_POSE_LIMITS[[12, 15]] = (0.2, 0.25, 0.12)      # neck, head
_POSE_LIMITS[[13, 14]] = (0.0, 0.0, 0.15)       # collars
_POSE_LIMITS[[16, 17]] = (0.3, 0.3, 0.6)        # shoulders
_POSE_LIMITS[[18, 19]] = (0.0, 0.7, 0.3)        # elbows
_POSE_LIMITS[[20, 21]] = (0.2, 0.2, 0.2)        # wrists


def sample_pose(rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=(BONE_COUNT, 3)) * _POSE_LIMITS * scale


def canonical_extent_ok(body: ParametricBody, beta, margin: float = 0.03,
                        bbox_min=(-1, -1, -0.5), bbox_max=(1, 1, 0.5)) -> bool:
    """Whether the beta-shaped rest body stays inside the canonical box."""
    joints = body.skeleton.rest_joints(beta)
    tips = joints + body.skeleton.rest_segments(beta)
    r = body.radii(beta)[:, None]
    lo = np.minimum(joints - r, tips - r).min(axis=0)
    hi = np.maximum(joints + r, tips + r).max(axis=0)
    return bool(np.all(lo >= np.asarray(bbox_min) + margin) and np.all(hi <= np.asarray(bbox_max) - margin))


def draw_beta(rng: np.random.Generator, body: ParametricBody, scale: float) -> np.ndarray:
    """Shape draw, redrawn (deterministically) until the body fits the box."""
    for _ in range(64):
        beta = rng.normal(scale=scale, size=SHAPE_DIM).clip(-2, 2)
        if canonical_extent_ok(body, beta):
            return beta
    return np.zeros(SHAPE_DIM)


def make_datasets(manifest: DatasetManifest, out_dir) -> list:
    """Generate and persist all three scan sets; returns the records."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    root = np.random.SeedSequence(manifest.seed)
    records = []

    # S_th: distinct identities, varied shape and pose, no objects
    for i in range(manifest.n_th):
        rng = np.random.default_rng(root.spawn(1)[0])
        body = make_body(identity_seed=i + 1)
        beta = draw_beta(rng, body, manifest.beta_scale)
        theta = sample_pose(rng, manifest.pose_scale)
        rec = sample_scan(
            body, [], beta, theta, manifest.n_surface, manifest.n_volume,
            seed=int(rng.integers(2**31 - 1)), dataset="s_th", scan_id=i,
            n_canon=manifest.n_canon,
        )
        records.append(rec)

    # S_sh: one fixed source identity, varied pose, slight shape wobble
    for i in range(manifest.n_sh):
        rng = np.random.default_rng(root.spawn(1)[0])
        body = make_body(identity_seed=manifest.source_identity)
        beta = rng.normal(scale=manifest.beta_jitter, size=SHAPE_DIM)
        theta = sample_pose(rng, manifest.pose_scale)
        rec = sample_scan(
            body, [], beta, theta, manifest.n_surface, manifest.n_volume,
            seed=int(rng.integers(2**31 - 1)), dataset="s_sh", scan_id=i,
            n_canon=manifest.n_canon,
        )
        records.append(rec)

    # S_sh+o: the source identity with one object per scan, cycling categories
    for i in range(manifest.n_sh_plus_o):
        rng = np.random.default_rng(root.spawn(1)[0])
        body = make_body(identity_seed=manifest.source_identity)
        beta = rng.normal(scale=manifest.beta_jitter, size=SHAPE_DIM)
        theta = sample_pose(rng, manifest.pose_scale)
        obj = make_object(CATEGORIES[i % len(CATEGORIES)], body, rng)
        rec = sample_scan(
            body, [obj], beta, theta, manifest.n_surface, manifest.n_volume,
            seed=int(rng.integers(2**31 - 1)), dataset="s_sh_plus_o", scan_id=i,
            n_canon=manifest.n_canon,
        )
        records.append(rec)

    for rec in records:
        save_scan(out_dir / f"{rec.dataset}_{rec.scan_id:04d}.nscn", rec)
    (out_dir / "manifest.txt").write_text(manifest.to_lines())
    return records


# ---------------------------------------------------------------------------
# scan file format

SCAN_MAGIC = b"NSCN"
SCAN_VERSION = 1
_DATASET_CODES = {"s_th": 0, "s_sh": 1, "s_sh_plus_o": 2}
_DATASET_NAMES = {v: k for k, v in _DATASET_CODES.items()}


def save_scan(path, rec: ScanRecord) -> None:
    arrays = {
        "surface_points": rec.surface_points,
        "surface_normals": rec.surface_normals,
        "volume_points": rec.volume_points,
        "volume_occ": rec.volume_occ,
        "volume_sdf": rec.volume_sdf,
        "canon_points": rec.canon_points,
        "canon_sdf": rec.canon_sdf,
        "meta": np.array([rec.scan_id, _DATASET_CODES[rec.dataset], rec.identity_seed,
                          rec.provenance_seed], dtype=np.float64),
    }
    with open(path, "wb") as fh:
        fh.write(SCAN_MAGIC)
        fh.write(struct.pack("<I", SCAN_VERSION))
        fh.write(np.asarray(rec.beta, dtype="<f8").tobytes())
        fh.write(np.asarray(rec.theta, dtype="<f8").reshape(-1).tobytes())
        fh.write(struct.pack("<B", 255 if rec.category is None else rec.category_index))
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            a = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
            nb = name.encode()
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
            fh.write(a.tobytes())


class ScanFormatError(RuntimeError):
    pass


def load_scan(path) -> ScanRecord:
    raw = Path(path).read_bytes()
    if raw[:4] != SCAN_MAGIC:
        raise ScanFormatError(f"{path}: bad magic at offset 0: {raw[:4]!r}")
    off = 4
    (version,) = struct.unpack_from("<I", raw, off)
    off += 4
    if version != SCAN_VERSION:
        raise ScanFormatError(f"{path}: unsupported version {version} at offset 4")
    beta = np.frombuffer(raw, "<f8", SHAPE_DIM, off).copy()
    off += 8 * SHAPE_DIM
    theta = np.frombuffer(raw, "<f8", BONE_COUNT * 3, off).reshape(BONE_COUNT, 3).copy()
    off += 8 * BONE_COUNT * 3
    (cat,) = struct.unpack_from("<B", raw, off)
    off += 1
    (n_arrays,) = struct.unpack_from("<I", raw, off)
    off += 4
    arrays = {}
    for _ in range(n_arrays):
        (nlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off : off + nlen].decode()
        off += nlen
        (rank,) = struct.unpack_from("<I", raw, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arrays[name] = np.frombuffer(raw, "<f8", n, off).reshape(dims).copy()
        off += 8 * n
    if off != len(raw):
        raise ScanFormatError(f"{path}: {len(raw) - off} trailing bytes at offset {off}")
    meta = arrays["meta"]
    return ScanRecord(
        scan_id=int(meta[0]),
        dataset=_DATASET_NAMES[int(meta[1])],
        beta=beta,
        theta=theta,
        category=None if cat == 255 else CATEGORIES[cat],
        surface_points=arrays["surface_points"],
        surface_normals=arrays["surface_normals"],
        volume_points=arrays["volume_points"],
        volume_occ=arrays["volume_occ"],
        volume_sdf=arrays["volume_sdf"],
        canon_points=arrays["canon_points"],
        canon_sdf=arrays["canon_sdf"],
        identity_seed=int(meta[2]),
        provenance_seed=int(meta[3]),
    )


def load_dataset(data_dir) -> dict:
    """All scans in a directory grouped by dataset name, ordered by scan id."""
    data_dir = Path(data_dir)
    groups: dict[str, list[ScanRecord]] = {"s_th": [], "s_sh": [], "s_sh_plus_o": []}
    for f in sorted(data_dir.glob("*.nscn")):
        rec = load_scan(f)
        groups[rec.dataset].append(rec)
    for g in groups.values():
        g.sort(key=lambda r: r.scan_id)
    return groups


def corresponding_vertices(body: ParametricBody, beta, n: int, seed: int):
    """Matched surface points of the beta-body and the mean body.

    Capsule surfaces give exact correspondences: same bone, same axis
    parameter, same ring direction, radii swapped.
    """
    rng = np.random.default_rng(seed)
    joints_b = body.skeleton.rest_joints(beta)
    segs_b = body.skeleton.rest_segments(beta)
    radii_b = body.radii(beta)
    joints_0 = body.skeleton.rest_joints(None)
    segs_0 = body.skeleton.rest_segments(None)
    radii_0 = body.radii(None)
    bone = rng.integers(0, body.skeleton.bone_count, size=n)
    t = rng.random(n)
    dirs = rng.normal(size=(n, 3))
    axis = segs_0 / np.maximum(np.linalg.norm(segs_0, axis=1, keepdims=True), 1e-12)
    dirs -= np.einsum("ni,ni->n", dirs, axis[bone])[:, None] * axis[bone]
    dirs /= np.maximum(np.linalg.norm(dirs, axis=1, keepdims=True), 1e-12)
    v_beta = joints_b[bone] + t[:, None] * segs_b[bone] + radii_b[bone][:, None] * dirs
    v_zero = joints_0[bone] + t[:, None] * segs_0[bone] + radii_0[bone][:, None] * dirs
    return v_beta, v_zero
