"""Reverse-mode automatic differentiation over dense float64 arrays.

A Tensor wraps an ndarray plus an optional record of the operation that
produced it. Calling ``backward`` (or the functional ``gradients``) walks the
recorded graph in reverse topological order and accumulates vector-Jacobian
products. Everything is float64; ops refuse silently mixed precision by
coercing through ``np.asarray(..., dtype=np.float64)``.

Only the operations the field networks actually need are provided. Broadcasting
follows numpy semantics; gradients are un-broadcast by summing over expanded
axes.
"""

from __future__ import annotations

import numpy as np


class DimensionError(ValueError):
    """Shape mismatch between operands, with the operands named."""


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "name")

    def __init__(self, data, requires_grad=False, _parents=(), _vjp=None, name=None):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self.grad = None
        self._parents = _parents
        self._vjp = _vjp
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar; scalars and ndarrays are lifted to constant tensors
    def __add__(self, other):
        return add(self, astensor(other))

    def __radd__(self, other):
        return add(astensor(other), self)

    def __sub__(self, other):
        return sub(self, astensor(other))

    def __rsub__(self, other):
        return sub(astensor(other), self)

    def __mul__(self, other):
        return mul(self, astensor(other))

    def __rmul__(self, other):
        return mul(astensor(other), self)

    def __truediv__(self, other):
        return div(self, astensor(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, astensor(other))

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def backward(self, seed=None):
        """Accumulate gradients into ``.grad`` of every requires_grad node."""
        table = _backward_pass(self, seed)
        for node, g in table.items():
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g


def astensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topo_order(root: Tensor) -> list:
    """Iterative post-order DFS; avoids recursion limits on deep graphs."""
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _backward_pass(root: Tensor, seed=None) -> dict:
    if seed is None:
        seed = np.ones_like(root.data)
    else:
        seed = _as_array(seed)
        if seed.shape != root.data.shape:
            raise DimensionError(f"seed shape {seed.shape} != output shape {root.data.shape}")
    table = {root: seed}
    for node in reversed(_topo_order(root)):
        g = table.get(node)
        if g is None or node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if p in table:
                table[p] = table[p] + pg
            else:
                table[p] = pg
    return table


def gradients(output: Tensor, wrt, seed=None) -> list:
    """Pure-function gradient query: no ``.grad`` mutation, thread safe."""
    table = _backward_pass(output, seed)
    return [table.get(w) for w in wrt]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Tensor(out, _parents=(a, b), _vjp=vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return Tensor(out, _parents=(a, b), _vjp=vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return Tensor(out, _parents=(a, b), _vjp=vjp)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def vjp(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return Tensor(out, _parents=(a, b), _vjp=vjp)


def neg(a: Tensor) -> Tensor:
    return Tensor(-a.data, _parents=(a,), _vjp=lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return Tensor(out, _parents=(a,), _vjp=vjp)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def vjp(g):
        return (g / a.data,)

    return Tensor(out, _parents=(a,), _vjp=vjp)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def vjp(g):
        return (g * (0.5 / out),)

    return Tensor(out, _parents=(a,), _vjp=vjp)


def square(a: Tensor) -> Tensor:
    def vjp(g):
        return (g * (2.0 * a.data),)

    return Tensor(a.data * a.data, _parents=(a,), _vjp=vjp)


def absolute(a: Tensor) -> Tensor:
    out = np.abs(a.data)

    def vjp(g):
        return (g * np.sign(a.data),)

    return Tensor(out, _parents=(a,), _vjp=vjp)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """True clamp: zero gradient where the bound is active."""
    out = np.clip(a.data, lo, hi)
    mask = (a.data > lo) & (a.data < hi)

    def vjp(g):
        return (g * mask,)

    return Tensor(out, _parents=(a,), _vjp=vjp)


def stop_gradient(a: Tensor) -> Tensor:
    """Identity value; contributes zero gradient to every ancestor."""
    return Tensor(a.data)


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.data.shape

    def vjp(g):
        return (g.reshape(orig),)

    return Tensor(a.data.reshape(shape), _parents=(a,), _vjp=vjp)


def broadcast_to(a: Tensor, shape) -> Tensor:
    out = np.broadcast_to(a.data, shape).copy()

    def vjp(g):
        return (_unbroadcast(g, a.data.shape),)

    return Tensor(out, _parents=(a,), _vjp=vjp)


def transpose(a: Tensor, axes=None) -> Tensor:
    def vjp(g):
        return (np.transpose(g, np.argsort(axes)) if axes is not None else np.transpose(g),)

    return Tensor(np.transpose(a.data, axes), _parents=(a,), _vjp=vjp)


def concat(tensors, axis=-1) -> Tensor:
    tensors = [astensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return Tensor(out, _parents=tuple(tensors), _vjp=vjp)


def _slice_only(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int)) for p in parts)


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]
    simple = _slice_only(idx)

    def vjp(g):
        full = np.zeros_like(a.data)
        if simple:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return Tensor(out, _parents=(a,), _vjp=vjp)


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows along axis 0 with an integer index array."""
    idx = np.asarray(idx)
    out = a.data[idx]

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor(out, _parents=(a,), _vjp=vjp)


# ---------------------------------------------------------------------------
# reductions


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            gg = g.reshape((1,) * a.data.ndim)
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return Tensor(out, _parents=(a,), _vjp=vjp)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = a.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.data.shape[i] for i in axis]))
    else:
        n = a.data.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            gg = g.reshape((1,) * a.data.ndim)
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / n, a.data.shape).copy(),)

    return Tensor(out, _parents=(a,), _vjp=vjp)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[-1] != b.data.shape[0] or b.data.ndim != 2:
        raise DimensionError(
            f"matmul: {a.name or 'lhs'} shape {a.data.shape} incompatible with "
            f"{b.name or 'rhs'} shape {b.data.shape}"
        )
    out = a.data @ b.data

    def vjp(g):
        ga = g @ b.data.T if a.requires_grad else None
        if b.requires_grad:
            lead = a.data.reshape(-1, a.data.shape[-1])
            gb = lead.T @ g.reshape(-1, g.shape[-1])
        else:
            gb = None
        return ga, gb

    return Tensor(out, _parents=(a, b), _vjp=vjp)


def einsum(spec: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum without ellipsis or repeated labels per operand."""
    inputs, out_spec = spec.split("->")
    sa, sb = inputs.split(",")
    out = np.einsum(spec, a.data, b.data)

    def vjp(g):
        ga = np.einsum(f"{out_spec},{sb}->{sa}", g, b.data)
        gb = np.einsum(f"{out_spec},{sa}->{sb}", g, a.data)
        # labels summed out of both inputs would need re-expansion; the spec
        # forms used here always keep every input label in output+other input
        return ga, gb

    return Tensor(out, _parents=(a, b), _vjp=vjp)


def dense(x: Tensor, weights: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map along the last axis: x @ W (+ b)."""
    if x.data.shape[-1] != weights.data.shape[0]:
        raise DimensionError(
            f"dense: input {x.name or ''}{x.data.shape} does not match "
            f"weights {weights.name or ''}{weights.data.shape}"
        )
    if bias is not None and bias.data.shape != (weights.data.shape[1],):
        raise DimensionError(
            f"dense: bias {bias.name or ''}{bias.data.shape} does not match "
            f"weights {weights.name or ''}{weights.data.shape}"
        )
    if bias is None:
        return matmul(x, weights)
    out = x.data @ weights.data + bias.data

    def vjp(g):
        gx = g @ weights.data.T if x.requires_grad else None
        gw = None
        if weights.requires_grad:
            lead = x.data.reshape(-1, x.data.shape[-1])
            gw = lead.T @ g.reshape(-1, g.shape[-1])
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return Tensor(out, _parents=(x, weights, bias), _vjp=vjp)


# ---------------------------------------------------------------------------
# nonlinearities

_SOFTPLUS_CUT = 30.0


def _softplus_raw(z: np.ndarray) -> np.ndarray:
    # stable decomposition: log(1+e^z) = max(z,0) + log1p(e^-|z|); beyond
    # |z| = 37 the correction underflows against the linear term in float64
    from . import _kernels

    return _kernels.softplus(np.asarray(z, dtype=np.float64))


def _sigmoid_raw(z: np.ndarray) -> np.ndarray:
    from . import _kernels

    return _kernels.sigmoid(np.asarray(z, dtype=np.float64))


def softplus_beta(a: Tensor, beta: float = 100.0) -> Tensor:
    if beta <= 0:
        raise ValueError(f"softplus beta must be positive, got {beta}")
    z = beta * a.data
    out = _softplus_raw(z) / beta
    sig = _sigmoid_raw(z)

    def vjp(g):
        return (g * sig,)

    return Tensor(out, _parents=(a,), _vjp=vjp)


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_raw(a.data)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return Tensor(out, _parents=(a,), _vjp=vjp)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    from . import _kernels

    out = _kernels.leaky(a.data, slope)

    def vjp(g):
        return (_kernels.leaky_grad(a.data, g, slope),)

    return Tensor(out, _parents=(a,), _vjp=vjp)


def softmax_lastaxis(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return Tensor(out, _parents=(a,), _vjp=vjp)


def safe_l2norm(a: Tensor, axis=-1) -> Tensor:
    """Euclidean norm with a zero-safe gradient (0 at the origin)."""
    n = np.sqrt((a.data * a.data).sum(axis=axis))

    def vjp(g):
        denom = np.maximum(n, 1e-300)
        gg = np.expand_dims(g / denom, axis)
        return (gg * a.data,)

    return Tensor(n, _parents=(a,), _vjp=vjp)


# ---------------------------------------------------------------------------
# finite-difference gradient checking


def finite_difference(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of scalar-valued f at x, elementwise."""
    x = _as_array(x).copy()
    g = np.zeros_like(x)
    flat, gflat = x.ravel(), g.ravel()
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        fp = f(x)
        flat[i] = keep - h
        fm = f(x)
        flat[i] = keep
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def check_gradient(build, x0: np.ndarray, h: float = 1e-4) -> float:
    """Max relative error between reverse-mode and central differences.

    ``build(t)`` must map a Tensor leaf to a scalar Tensor loss.
    """
    leaf = Tensor(x0, requires_grad=True)
    loss = build(leaf)
    (ad,) = gradients(loss, [leaf])
    if ad is None:
        ad = np.zeros_like(leaf.data)
    fd = finite_difference(lambda v: float(build(Tensor(v)).data), x0, h=h)
    scale = np.maximum(np.abs(fd), np.maximum(np.abs(ad), 1.0))
    return float(np.max(np.abs(ad - fd) / scale))
