"""Latent-conditioned tri-plane feature fields and their decoders.

The generator maps a 64-dim latent code to three axis-aligned 2D feature
grids (32 channels each). Querying a 3D point bilinearly samples each plane
at its two relevant coordinates and sums the three 32-vectors. Three MLP
decoders consume the sampled feature: occupancy (sigmoid head), signed
distance (linear head), and composition (feature-pair input).

Plane layout: ``plane_ab[c, i_a, i_b]`` with a,b the named axes, so
``plane_xz`` is indexed by (x, z). The canonical box spans [-1,1] in x and y
and [-0.5,0.5] in z; the z planes carry half the samples of the x/y axes so
texel density stays isotropic.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import (
    MLP,
    LEAKY_SLOPE,
    ParamBag,
    adain,
    bilinear_upsample2x,
    conv3x3,
    init_conv,
    init_dense,
    mlp_value,
    positional_encoding,
    positional_encoding_jacobian,
)

LATENT_DIM = 64
PLANE_CHANNELS = 32
FEATURE_DIM = 229
PE_DIM = 27
DECODER_IN = PE_DIM + PLANE_CHANNELS  # 59
COMP_IN = PE_DIM + 2 * FEATURE_DIM  # 485
DECODER_SIZES = (256, 256, 256, FEATURE_DIM, 1)
DECODER_SKIP_AT = 3  # raw input re-enters the 4th layer


@dataclass(frozen=True)
class CanonicalBBox:
    min_corner: tuple = (-1.0, -1.0, -0.5)
    max_corner: tuple = (1.0, 1.0, 0.5)

    def __post_init__(self):
        lo, hi = np.asarray(self.min_corner), np.asarray(self.max_corner)
        if not np.all(hi > lo):
            raise ValueError(f"degenerate bbox: {self.min_corner} .. {self.max_corner}")

    @property
    def mins(self) -> np.ndarray:
        return np.asarray(self.min_corner, dtype=np.float64)

    @property
    def maxs(self) -> np.ndarray:
        return np.asarray(self.max_corner, dtype=np.float64)

    @property
    def extent(self) -> np.ndarray:
        return self.maxs - self.mins

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.extent))

    def contains(self, x: np.ndarray) -> np.ndarray:
        return np.all((x >= self.mins) & (x <= self.maxs), axis=-1)


DEFAULT_BBOX = CanonicalBBox()


@dataclass
class TriPlane:
    plane_xy: Tensor
    plane_xz: Tensor
    plane_yz: Tensor

    def planes(self):
        return (self.plane_xy, self.plane_xz, self.plane_yz)

    def data(self):
        return tuple(p.data for p in self.planes())


class Counter:
    """Thread-safe event counter (out-of-box queries, singular Jacobians)."""

    def __init__(self):
        self._n = 0
        self._lock = threading.Lock()

    def add(self, k: int):
        if k:
            with self._lock:
                self._n += int(k)

    @property
    def value(self) -> int:
        return self._n

    def reset(self):
        with self._lock:
            self._n = 0


OOB_COUNTER = Counter()


def _normalize(x: np.ndarray, bbox: CanonicalBBox):
    """Map points into [0,1]^3; clamped coordinates are counted by the caller."""
    u = (x - bbox.mins) / bbox.extent
    oob = int(np.count_nonzero(np.any((u < 0.0) | (u > 1.0), axis=-1)))
    return np.clip(u, 0.0, 1.0), oob


def _corner_setup(u: np.ndarray, size: int):
    c = u * (size - 1)
    i0 = np.clip(np.floor(c).astype(np.int64), 0, size - 2)
    f = c - i0
    return i0, f


def _plane_lookup(plane_data: np.ndarray, ua, ub):
    ch, sa, sb = plane_data.shape
    ia, fa = _corner_setup(ua, sa)
    ib, fb = _corner_setup(ub, sb)
    flat = plane_data.reshape(ch, sa * sb)
    base = ia * sb + ib
    idx = (base, base + 1, base + sb, base + sb + 1)
    w = ((1 - fa) * (1 - fb), (1 - fa) * fb, fa * (1 - fb), fa * fb)
    return flat, idx, w, (fa, fb, sa, sb)


def _sample_plane_value(plane_data: np.ndarray, ua, ub) -> np.ndarray:
    flat, idx, w, _ = _plane_lookup(plane_data, ua, ub)
    out = flat[:, idx[0]] * w[0]
    for k in range(1, 4):
        out += flat[:, idx[k]] * w[k]
    return out.T


def _scatter_plane(shape, idx, w, g) -> np.ndarray:
    """Adjoint of the gather: accumulate [N,C] grads into a [C,A,B] plane."""
    ch, sa, sb = shape
    total = np.zeros((ch, sa * sb))
    gt = np.ascontiguousarray(g.T)
    for k in range(4):
        np.add.at(total, (slice(None), idx[k]), gt * w[k])
    return total.reshape(ch, sa, sb)


def sample_plane(plane: Tensor, ua: np.ndarray, ub: np.ndarray,
                 du_dx: tuple | None = None, xq: Tensor | None = None) -> Tensor:
    """Bilinear plane sample as a graph op.

    Gradients flow into the plane contents and, when ``xq`` is given, into the
    query point (``du_dx`` holds d(ua)/dx and d(ub)/dx rows, each [N,3]).
    """
    flat, idx, w, (fa, fb, sa, sb) = _plane_lookup(plane.data, ua, ub)
    out = flat[:, idx[0]] * w[0]
    for k in range(1, 4):
        out += flat[:, idx[k]] * w[k]
    out = out.T

    parents = (plane,) if xq is None else (plane, xq)

    def vjp(g):
        gplane = _scatter_plane(plane.data.shape, idx, w, g) if plane.requires_grad else None
        if xq is None:
            return (gplane,)
        # derivative of the interpolated value w.r.t. the fractional coords
        p00, p01, p10, p11 = (flat[:, idx[k]].T for k in range(4))
        dfa = (p10 - p00) * (1 - fb)[:, None] + (p11 - p01) * fb[:, None]
        dfb = (p01 - p00) * (1 - fa)[:, None] + (p11 - p10) * fa[:, None]
        ga = (g * dfa).sum(axis=1) * (sa - 1)
        gb = (g * dfb).sum(axis=1) * (sb - 1)
        gx = ga[:, None] * du_dx[0] + gb[:, None] * du_dx[1]
        return gplane, gx

    return Tensor(out, _parents=parents, _vjp=vjp)


def sample_plane_spatial_grad(plane: Tensor, ua, ub) -> Tensor:
    """[N,2,C]: derivative of the bilinear sample w.r.t. the two plane coords.

    Linear in the plane contents, so it stays a graph node and parameter
    gradients of spatial-gradient losses remain exact.
    """
    flat, idx, w, (fa, fb, sa, sb) = _plane_lookup(plane.data, ua, ub)
    p = [flat[:, idx[k]].T for k in range(4)]
    dfa = ((p[2] - p[0]) * (1 - fb)[:, None] + (p[3] - p[1]) * fb[:, None]) * (sa - 1)
    dfb = ((p[1] - p[0]) * (1 - fa)[:, None] + (p[3] - p[2]) * fa[:, None]) * (sb - 1)
    out = np.stack([dfa, dfb], axis=1)

    # weights of each corner in dfa/dfb, for the adjoint scatter
    wa = (-(1 - fb) * (sa - 1), -fb * (sa - 1), (1 - fb) * (sa - 1), fb * (sa - 1))
    wb = (-(1 - fa) * (sb - 1), (1 - fa) * (sb - 1), -fa * (sb - 1), fa * (sb - 1))

    def vjp(g):
        ga = _scatter_plane(plane.data.shape, idx, wa, g[:, 0, :])
        gb = _scatter_plane(plane.data.shape, idx, wb, g[:, 1, :])
        return (ga + gb,)

    return Tensor(out, _parents=(plane,), _vjp=vjp)


def pe_op(x) -> Tensor:
    """Positional encoding as a graph op (differentiable in the point)."""
    if not isinstance(x, Tensor):
        return Tensor(positional_encoding(np.asarray(x, dtype=np.float64)))
    enc = positional_encoding(x.data)
    jac = positional_encoding_jacobian(x.data)

    def vjp(g):
        return (np.einsum("nc,nac->na", g, jac),)

    return Tensor(enc, _parents=(x,), _vjp=vjp)


def query_triplane(tp: TriPlane, x, bbox: CanonicalBBox = DEFAULT_BBOX,
                   counter: Counter = None) -> Tensor:
    """Sum of the three bilinear plane samples at x ([N,3] -> [N,32])."""
    xq = x if isinstance(x, Tensor) else None
    xv = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    u, oob = _normalize(xv, bbox)
    (counter or OOB_COUNTER).add(oob)
    inv = 1.0 / bbox.extent
    n = xv.shape[0]
    inside = ((xv > bbox.mins) & (xv < bbox.maxs)).astype(np.float64) * inv
    dux = np.zeros((n, 3))
    duy = np.zeros((n, 3))
    duz = np.zeros((n, 3))
    dux[:, 0] = inside[:, 0]
    duy[:, 1] = inside[:, 1]
    duz[:, 2] = inside[:, 2]
    f_xy = sample_plane(tp.plane_xy, u[:, 0], u[:, 1], (dux, duy), xq)
    f_xz = sample_plane(tp.plane_xz, u[:, 0], u[:, 2], (dux, duz), xq)
    f_yz = sample_plane(tp.plane_yz, u[:, 1], u[:, 2], (duy, duz), xq)
    return ad.add(ad.add(f_xy, f_xz), f_yz)


def query_triplane_value(planes_data, x: np.ndarray, bbox: CanonicalBBox = DEFAULT_BBOX,
                         counter: Counter = None) -> np.ndarray:
    """Pure-numpy fast path (identical arithmetic to the graph op)."""
    u, oob = _normalize(np.asarray(x, dtype=np.float64), bbox)
    (counter or OOB_COUNTER).add(oob)
    pxy, pxz, pyz = planes_data
    out = _sample_plane_value(pxy, u[:, 0], u[:, 1])
    out = out + _sample_plane_value(pxz, u[:, 0], u[:, 2])
    out = out + _sample_plane_value(pyz, u[:, 1], u[:, 2])
    return out


def query_triplane_with_jac(tp: TriPlane, x: np.ndarray, bbox: CanonicalBBox = DEFAULT_BBOX,
                            counter: Counter = None):
    """Feature and its spatial Jacobian, both graph nodes in the planes.

    Returns (feat [N,32], jac [N,3,32]). Out-of-box coordinates clamp, with a
    zero spatial derivative along the clamped axis.
    """
    xv = np.asarray(x, dtype=np.float64)
    u, oob = _normalize(xv, bbox)
    (counter or OOB_COUNTER).add(oob)
    inv = 1.0 / bbox.extent
    inside = ((xv > bbox.mins) & (xv < bbox.maxs)).astype(np.float64) * inv
    n = xv.shape[0]

    f_xy = sample_plane(tp.plane_xy, u[:, 0], u[:, 1])
    f_xz = sample_plane(tp.plane_xz, u[:, 0], u[:, 2])
    f_yz = sample_plane(tp.plane_yz, u[:, 1], u[:, 2])
    feat = ad.add(ad.add(f_xy, f_xz), f_yz)

    g_xy = sample_plane_spatial_grad(tp.plane_xy, u[:, 0], u[:, 1])
    g_xz = sample_plane_spatial_grad(tp.plane_xz, u[:, 0], u[:, 2])
    g_yz = sample_plane_spatial_grad(tp.plane_yz, u[:, 1], u[:, 2])

    def axis_rows(gp: Tensor, axis_a: int, axis_b: int) -> Tensor:
        sel = np.zeros((n, 3, 2))
        sel[:, axis_a, 0] = inside[:, axis_a]
        sel[:, axis_b, 1] = inside[:, axis_b]
        return ad.einsum("nak,nkc->nac", Tensor(sel), gp)

    jac = ad.add(
        ad.add(axis_rows(g_xy, 0, 1), axis_rows(g_xz, 0, 2)),
        axis_rows(g_yz, 1, 2),
    )
    return feat, jac


# ---------------------------------------------------------------------------
# generator


@dataclass(frozen=True)
class GeneratorConfig:
    base_channels: int = 256
    base_res: int = 16
    channels: tuple = (32, 16, 8, 64)
    latent_dim: int = LATENT_DIM

    def __post_init__(self):
        if self.channels[-1] % 2 != 0:
            raise ValueError("final channel count must split into two plane stacks")

    @property
    def out_res(self) -> int:
        return self.base_res * (2 ** len(self.channels))

    @property
    def plane_channels(self) -> int:
        return self.channels[-1] // 2


class TriplaneGenerator:
    """Constant input refined by 4x (upsample, conv3x3, adaIN(z), leaky ReLU)."""

    def __init__(self, bag: ParamBag, name: str, rng: np.random.Generator,
                 config: GeneratorConfig = GeneratorConfig()):
        self.config = config
        self.constant = bag.add(
            f"{name}/constant",
            rng.uniform(-1.0, 1.0, size=(config.base_channels, config.base_res, config.base_res)),
        )
        self.convs = []
        self.affines = []
        prev = config.base_channels
        for i, c_out in enumerate(config.channels):
            k = bag.add(f"{name}/conv{i}", init_conv(rng, c_out, prev))
            w, b = init_dense(rng, config.latent_dim, 2 * c_out)
            b = np.concatenate([np.ones(c_out), np.zeros(c_out)])  # scale head starts at 1
            wt = bag.add(f"{name}/adain{i}/w", w)
            bt = bag.add(f"{name}/adain{i}/b", b)
            self.convs.append(k)
            self.affines.append((wt, bt))
            prev = c_out

    def __call__(self, z: Tensor) -> TriPlane:
        h = self.constant
        for k, (aw, ab) in zip(self.convs, self.affines):
            h = bilinear_upsample2x(h)
            h = conv3x3(h, k)
            h = adain(h, z, aw, ab)
            h = ad.leaky_relu(h, LEAKY_SLOPE)
        half = self.config.plane_channels
        res = self.config.out_res
        plane_xy = h[:half, :, :]
        rest = h[half:, :, :]
        plane_xz = rest[:, :, : res // 2]
        plane_yz = rest[:, :, res // 2 :]
        return TriPlane(plane_xy, plane_xz, plane_yz)


# ---------------------------------------------------------------------------
# decoders


@dataclass
class FieldOutput:
    occupancy: np.ndarray  # [N], strictly in (0,1)
    feature: np.ndarray  # [N, 229]


class OccupancyDecoder:
    """(256,256,256,229,1) softplus MLP, sigmoid head, penultimate feature out."""

    def __init__(self, bag: ParamBag, name: str, rng: np.random.Generator, in_dim: int = DECODER_IN):
        self.in_dim = in_dim
        self.mlp = MLP(bag, name, in_dim, DECODER_SIZES, rng, skip_at=DECODER_SKIP_AT, final=ad.sigmoid)

    def __call__(self, feats: Tensor):
        occ, feature = self.mlp(feats, return_penultimate=True)
        return ad.reshape(occ, (-1,)), feature

    def value(self, feats: np.ndarray) -> FieldOutput:
        occ, feature = mlp_value(self.mlp.layers, DECODER_SKIP_AT, feats, "sigmoid")
        return FieldOutput(occ.reshape(-1), feature)


class SdfDecoder:
    """Same topology, linear head; optional spatial-gradient carry."""

    def __init__(self, bag: ParamBag, name: str, rng: np.random.Generator, in_dim: int = DECODER_IN):
        self.in_dim = in_dim
        self.mlp = MLP(bag, name, in_dim, DECODER_SIZES, rng, skip_at=DECODER_SKIP_AT, final=None)

    def __call__(self, feats: Tensor) -> Tensor:
        return ad.reshape(self.mlp(feats), (-1,))

    def with_spatial_grad(self, feats: Tensor, jac: Tensor):
        val, jval = self.mlp.forward_with_jacobian(feats, jac)
        return ad.reshape(val, (-1,)), ad.reshape(jval, (-1, 3))

    def value(self, feats: np.ndarray) -> np.ndarray:
        out, _ = mlp_value(self.mlp.layers, DECODER_SKIP_AT, feats, "linear")
        return out.reshape(-1)


class CompositionDecoder:
    """Occupancy decoder over (encoding, human feature, object feature)."""

    def __init__(self, bag: ParamBag, name: str, rng: np.random.Generator):
        self.in_dim = COMP_IN
        self.mlp = MLP(bag, name, COMP_IN, DECODER_SIZES, rng, skip_at=DECODER_SKIP_AT, final=ad.sigmoid)

    def __call__(self, feats: Tensor) -> Tensor:
        occ = self.mlp(feats)
        return ad.reshape(occ, (-1,))

    def value(self, feats: np.ndarray) -> np.ndarray:
        occ, _ = mlp_value(self.mlp.layers, DECODER_SKIP_AT, feats, "sigmoid")
        return occ.reshape(-1)


def decoder_input(tp: TriPlane, x, bbox: CanonicalBBox = DEFAULT_BBOX, counter: Counter = None) -> Tensor:
    """concat(positional encoding, tri-plane feature): the 59-wide decoder feed."""
    return ad.concat([pe_op(x), query_triplane(tp, x, bbox, counter)], axis=-1)


def decoder_input_value(planes_data, x: np.ndarray, bbox: CanonicalBBox = DEFAULT_BBOX,
                        counter: Counter = None) -> np.ndarray:
    return np.concatenate(
        [positional_encoding(x), query_triplane_value(planes_data, x, bbox, counter)], axis=-1
    )


def decoder_input_with_jac(tp: TriPlane, x: np.ndarray, bbox: CanonicalBBox = DEFAULT_BBOX,
                           counter: Counter = None):
    x = np.asarray(x, dtype=np.float64)
    feat, jac = query_triplane_with_jac(tp, x, bbox, counter)
    enc = Tensor(positional_encoding(x))
    encj = Tensor(positional_encoding_jacobian(x))
    return ad.concat([enc, feat], axis=-1), ad.concat([encj, jac], axis=-1)
