"""Layers and parameter containers built on the autodiff engine.

Conventions:
- images are [C, H, W], point batches are [N, D]
- dense weights are [in, out], conv kernels are [C_out, C_in, 3, 3]
- parameters live in ``ParamBag`` dicts keyed by hierarchical names so that
  checkpoints, the optimizer, and freezing rules all address the same keys
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

SOFTPLUS_BETA = 100.0
LEAKY_SLOPE = 0.2
ADAIN_EPS = 1e-5
PE_FREQS = 4


class ParamBag:
    """Ordered name -> Tensor mapping with nested prefixes."""

    def __init__(self):
        self._items: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self._items:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(value, dtype=np.float64), requires_grad=trainable, name=name)
        self._items[name] = t
        return t

    def merge(self, prefix: str, other: "ParamBag"):
        for k, v in other._items.items():
            key = f"{prefix}/{k}"
            if key in self._items:
                raise KeyError(f"duplicate parameter name {key!r}")
            v.name = key
            self._items[key] = v

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def items(self):
        return self._items.items()

    def names(self):
        return list(self._items.keys())

    def tensors(self):
        return list(self._items.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self._items.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray], strict: bool = True):
        for k, t in self._items.items():
            if k not in arrays:
                if strict:
                    raise KeyError(f"checkpoint missing parameter {k!r}")
                continue
            a = np.asarray(arrays[k], dtype=np.float64)
            if a.shape != t.data.shape:
                raise ad.DimensionError(f"parameter {k!r}: checkpoint shape {a.shape} != model shape {t.data.shape}")
            t.data = a.copy()

    def set_trainable(self, flag: bool, prefix: str = ""):
        for k, t in self._items.items():
            if k.startswith(prefix):
                t.requires_grad = flag


def init_dense(rng: np.random.Generator, fan_in: int, fan_out: int):
    bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    b = rng.uniform(-bound, bound, size=(fan_out,))
    return w, b


def init_conv(rng: np.random.Generator, c_out: int, c_in: int, k: int = 3):
    bound = 1.0 / np.sqrt(c_in * k * k)
    return rng.uniform(-bound, bound, size=(c_out, c_in, k, k))


def positional_encoding(x: np.ndarray) -> np.ndarray:
    """[N,3] -> [N,27]: raw coords then (sin, cos) pairs for 4 octave frequencies."""
    x = np.asarray(x, dtype=np.float64)
    parts = [x]
    for k in range(PE_FREQS):
        arg = (2.0**k) * np.pi * x
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    return np.concatenate(parts, axis=-1)


def positional_encoding_jacobian(x: np.ndarray) -> np.ndarray:
    """[N,3] -> [N,3,27]: d(encoding)/d(x), nonzero only within each axis."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    jac = np.zeros((n, 3, 3 + 6 * PE_FREQS))
    eye = np.eye(3)
    jac[:, :, 0:3] = eye
    col = 3
    for k in range(PE_FREQS):
        w = (2.0**k) * np.pi
        arg = w * x
        for trig, d in ((np.sin, np.cos(arg) * w), (np.cos, -np.sin(arg) * w)):
            for axis in range(3):
                jac[:, axis, col + axis] = d[:, axis]
            col += 3
    return jac


def conv3x3(x: Tensor, kernels: Tensor) -> Tensor:
    """Stride-1, zero-pad-1 cross-correlation on a [C_in,H,W] image.

    Evaluated as nine [C_out,C_in] GEMMs over shifted views, which avoids
    materializing im2col columns on full-resolution feature maps.
    """
    c_in, h, w = x.data.shape
    c_out, kc, kh, kw = kernels.data.shape
    if kc != c_in:
        raise ad.DimensionError(
            f"conv3x3: kernels {kernels.name or ''}{kernels.data.shape} expect {kc} input "
            f"channels, image {x.name or ''} has {c_in}"
        )
    padded = np.pad(x.data, ((0, 0), (1, 1), (1, 1)))
    # columns [H*W, C_in*9]; the GEMMs below run on its BLAS-transposed view
    win = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(1, 2))
    cols = np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4)).reshape(h * w, c_in * kh * kw)
    kmat = kernels.data.reshape(c_out, c_in * kh * kw)
    out = (kmat @ cols.T).reshape(c_out, h, w)

    def vjp(g):
        gmat = g.reshape(c_out, h * w)
        gk = (gmat @ cols).reshape(c_out, c_in, kh, kw) if kernels.requires_grad else None
        gx = None
        if x.requires_grad:
            # one GEMM for all nine offsets, then cheap strided accumulation
            kstack = kernels.data.transpose(2, 3, 1, 0).reshape(kh * kw * c_in, c_out)
            slabs = (kstack @ gmat).reshape(kh, kw, c_in, h, w)
            gxpad = np.zeros_like(padded)
            for i in range(kh):
                for j in range(kw):
                    gxpad[:, i : i + h, j : j + w] += slabs[i, j]
            gx = gxpad[:, 1 : 1 + h, 1 : 1 + w]
        return gx, gk

    return Tensor(out, _parents=(x, kernels), _vjp=vjp)


def _upsample_axis_indices(n: int):
    """Source rows and weights for scale-2 bilinear, align_corners=False."""
    out = np.arange(2 * n)
    src = (out + 0.5) / 2.0 - 0.5
    lo = np.clip(np.floor(src).astype(int), 0, n - 1)
    hi = np.clip(lo + 1, 0, n - 1)
    w_hi = np.clip(src - np.floor(src), 0.0, 1.0)
    w_hi[src < 0] = 0.0
    w_hi[src > n - 1] = 0.0
    return lo, hi, 1.0 - w_hi, w_hi


def _up_axis(a: np.ndarray, axis: int) -> np.ndarray:
    """Double one axis: out[2i] = .25 a[i-1] + .75 a[i]; out[2i+1] mirrors.

    Edge clamping falls out of repeating the border sample, matching the
    align_corners=False convention exactly.
    """
    a = np.moveaxis(a, axis, -1)
    left = np.concatenate([a[..., :1], a[..., :-1]], axis=-1)
    right = np.concatenate([a[..., 1:], a[..., -1:]], axis=-1)
    out = np.empty((*a.shape[:-1], 2 * a.shape[-1]))
    out[..., 0::2] = 0.75 * a + 0.25 * left
    out[..., 1::2] = 0.75 * a + 0.25 * right
    return np.moveaxis(out, -1, axis)


def _down_axis(g: np.ndarray, axis: int) -> np.ndarray:
    """Adjoint of _up_axis (exact transpose of the interpolation stencil)."""
    g = np.moveaxis(g, axis, -1)
    ge = g[..., 0::2]
    go = g[..., 1::2]
    out = 0.75 * (ge + go)
    out[..., 0] += 0.25 * ge[..., 0]
    out[..., -1] += 0.25 * go[..., -1]
    out[..., :-1] += 0.25 * ge[..., 1:]
    out[..., 1:] += 0.25 * go[..., :-1]
    return np.moveaxis(out, -1, axis)


def bilinear_upsample2x(x: Tensor) -> Tensor:
    """[C,H,W] -> [C,2H,2W], align_corners=False convention."""

    def vjp(g):
        return (_down_axis(_down_axis(g, 2), 1),)

    out = _up_axis(_up_axis(x.data, 1), 2)
    return Tensor(out, _parents=(x,), _vjp=vjp)


def adain(features: Tensor, z: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Instance-normalize each channel over HxW, then latent-driven scale/shift.

    The affine head maps z[64] to [2C]: first C entries scale, last C shift.
    Fused into one graph node; the backward is the standard instance-norm
    adjoint, which keeps full-resolution feature maps off the op graph.
    """
    c, h, w = features.data.shape
    zrow = z.data.reshape(1, -1)
    params = (zrow @ weights.data + bias.data).reshape(-1)
    scale = params[:c].reshape(c, 1, 1)
    shift = params[c:].reshape(c, 1, 1)
    mu = features.data.mean(axis=(1, 2), keepdims=True)
    centered = features.data - mu
    var = np.mean(centered * centered, axis=(1, 2), keepdims=True)
    inv = 1.0 / np.sqrt(var + ADAIN_EPS)
    normed = centered * inv
    out = normed * scale + shift

    def vjp(g):
        gscale = (g * normed).sum(axis=(1, 2))
        gshift = g.sum(axis=(1, 2))
        gz = gw = None
        gparams = np.concatenate([gscale, gshift]).reshape(1, -1)
        if z.requires_grad:
            gz = (gparams @ weights.data.T).reshape(z.data.shape)
        if weights.requires_grad:
            gw = zrow.T @ gparams
        gb = gparams.reshape(-1) if bias.requires_grad else None
        gx = None
        if features.requires_grad:
            gn = g * scale
            m1 = gn.mean(axis=(1, 2), keepdims=True)
            m2 = (gn * normed).mean(axis=(1, 2), keepdims=True)
            gx = inv * (gn - m1 - normed * m2)
        return gx, gz, gw, gb

    return Tensor(out, _parents=(features, z, weights, bias), _vjp=vjp)


def mlp_value(layers, skip_at, x: np.ndarray, final: str = "linear"):
    """Pure-numpy forward mirroring MLP.__call__ bit for bit.

    Returns (output, penultimate activation). ``final`` is one of
    "linear" | "sigmoid" | "softmax".
    """
    from .autodiff import _sigmoid_raw, _softplus_raw

    h = x
    penultimate = None
    last = len(layers) - 1
    for i, layer in enumerate(layers):
        if skip_at is not None and i == skip_at:
            h = np.concatenate([h, x], axis=-1)
        h = h @ layer.w.data + layer.b.data
        if i < last:
            h = _softplus_raw(SOFTPLUS_BETA * h) / SOFTPLUS_BETA
            if i == last - 1:
                penultimate = h
    if final == "sigmoid":
        h = _sigmoid_raw(h)
    elif final == "softmax":
        e = np.exp(h - h.max(axis=-1, keepdims=True))
        h = e / e.sum(axis=-1, keepdims=True)
    return h, penultimate


def mlp_value_and_input_jac(layers, skip_at, x: np.ndarray, jac: np.ndarray, final: str = "linear"):
    """Forward-mode value + Jacobian w.r.t. a 3D driver, pure numpy.

    ``jac`` is [N, 3, in_dim] = d(input features)/d(driver point). Returns
    (value [N, out], d(value)/d(driver) [N, 3, out]).
    """
    from .autodiff import _sigmoid_raw, _softplus_raw

    h, jh = x, jac
    n = x.shape[0]
    last = len(layers) - 1
    for i, layer in enumerate(layers):
        if skip_at is not None and i == skip_at:
            h = np.concatenate([h, x], axis=-1)
            jh = np.concatenate([jh, jac], axis=-1)
        w = layer.w.data
        pre = h @ w + layer.b.data
        jpre = (jh.reshape(n * 3, -1) @ w).reshape(n, 3, -1)
        if i < last:
            h = _softplus_raw(SOFTPLUS_BETA * pre) / SOFTPLUS_BETA
            jh = jpre * _sigmoid_raw(SOFTPLUS_BETA * pre)[:, None, :]
        else:
            h, jh = pre, jpre
    if final == "softmax":
        e = np.exp(h - h.max(axis=-1, keepdims=True))
        s = e / e.sum(axis=-1, keepdims=True)
        dot = (s[:, None, :] * jh).sum(axis=-1)
        jh = s[:, None, :] * (jh - dot[:, :, None])
        h = s
    elif final == "sigmoid":
        s = _sigmoid_raw(h)
        jh = jh * (s * (1.0 - s))[:, None, :]
        h = s
    return h, jh


class Dense:
    def __init__(self, bag: ParamBag, name: str, fan_in: int, fan_out: int, rng: np.random.Generator,
                 zero_init: bool = False):
        if zero_init:
            w = np.zeros((fan_in, fan_out))
            b = np.zeros(fan_out)
        else:
            w, b = init_dense(rng, fan_in, fan_out)
        self.w = bag.add(f"{name}/w", w)
        self.b = bag.add(f"{name}/b", b)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.dense(x, self.w, self.b)


class MLP:
    """Softplus(beta=100) MLP with optional input skip into a given layer.

    ``sizes`` lists hidden+output widths, e.g. (256, 256, 256, 229, 1).
    ``skip_at`` is the 0-based index of the layer that consumes the
    re-concatenated raw input. The final layer applies ``final`` (a callable
    on Tensors) or nothing.
    """

    def __init__(self, bag: ParamBag, name: str, in_dim: int, sizes, rng: np.random.Generator,
                 skip_at: int | None = None, final=None, zero_init_last: bool = False):
        self.in_dim = in_dim
        self.sizes = tuple(sizes)
        self.skip_at = skip_at
        self.final = final
        self.layers: list[Dense] = []
        prev = in_dim
        for i, width in enumerate(self.sizes):
            if skip_at is not None and i == skip_at:
                prev += in_dim
            zero = zero_init_last and i == len(self.sizes) - 1
            self.layers.append(Dense(bag, f"{name}/l{i}", prev, width, rng, zero_init=zero))
            prev = width

    def __call__(self, x: Tensor, return_penultimate: bool = False):
        if x.data.shape[-1] != self.in_dim:
            raise ad.DimensionError(
                f"MLP expects input width {self.in_dim}, got {x.data.shape[-1]}"
            )
        h = x
        penultimate = None
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            if self.skip_at is not None and i == self.skip_at:
                h = ad.concat([h, x], axis=-1)
            h = layer(h)
            if i < last:
                h = ad.softplus_beta(h, SOFTPLUS_BETA)
                if i == last - 1:
                    penultimate = h
        if self.final is not None:
            h = self.final(h)
        if return_penultimate:
            return h, penultimate
        return h

    def forward_with_jacobian(self, x: Tensor, jac: Tensor, return_penultimate: bool = False):
        """Forward pass carrying d(out)/d(query-point) alongside the values.

        ``x`` is [N, in_dim]; ``jac`` is [N, 3, in_dim], the Jacobian of the
        input features w.r.t. the 3D query point. Both the value and the
        carried Jacobian remain graph nodes, so losses built on the spatial
        gradient backpropagate into all parameters exactly.
        """
        h, jh = x, jac
        penultimate = None
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            if self.skip_at is not None and i == self.skip_at:
                h = ad.concat([h, x], axis=-1)
                jh = ad.concat([jh, jac], axis=-1)
            pre = ad.dense(h, layer.w, layer.b)
            n3 = jh.data.shape[0] * 3
            jpre = ad.reshape(ad.matmul(ad.reshape(jh, (n3, -1)), layer.w),
                              (jh.data.shape[0], 3, -1))
            if i < last:
                h = ad.softplus_beta(pre, SOFTPLUS_BETA)
                dact = ad.sigmoid(ad.mul(pre, Tensor(SOFTPLUS_BETA)))
                jh = ad.mul(jpre, ad.reshape(dact, (dact.data.shape[0], 1, dact.data.shape[1])))
                if i == last - 1:
                    penultimate = h
            else:
                h, jh = pre, jpre
        if self.final is not None:
            raise NotImplementedError("jacobian carry is only used for the linear-output SDF head")
        if return_penultimate:
            return h, jh, penultimate
        return h, jh
