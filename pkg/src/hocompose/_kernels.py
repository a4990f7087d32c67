"""Compiled elementwise kernels for the handful of hot activations.

Numba is optional: every kernel has a numpy twin computing the identical
IEEE sequence, and the module falls back silently when compilation is
unavailable. Kernels are single-threaded (worker processes own parallelism)
and avoid fastmath so results stay bit-reproducible.
"""

from __future__ import annotations

import os

import numpy as np

_USE_NUMBA = os.environ.get("HOCOMPOSE_NO_NUMBA", "") != "1"

if _USE_NUMBA:
    try:
        from numba import njit
    except Exception:  # pragma: no cover - numba is normally present
        _USE_NUMBA = False


def _np_softplus(z):
    az = np.abs(z)
    out = np.maximum(z, 0.0)
    band = az < 37.0
    if band.all():
        out += np.log1p(np.exp(-az))
    elif band.any():
        out[band] += np.log1p(np.exp(-az[band]))
    return out


def _np_sigmoid(z):
    from scipy.special import expit

    return expit(z)


def _np_leaky(z, slope):
    return np.where(z >= 0, z, slope * z)


def _np_leaky_grad(z, g, slope):
    return np.where(z >= 0, g, slope * g)


if _USE_NUMBA:

    @njit(cache=True)
    def _nb_softplus(z, out):
        for i in range(z.size):
            v = z.flat[i]
            a = v if v >= 0.0 else -v
            m = v if v > 0.0 else 0.0
            if a < 37.0:
                m += np.log1p(np.exp(-a))
            out.flat[i] = m

    @njit(cache=True)
    def _nb_sigmoid(z, out):
        for i in range(z.size):
            v = z.flat[i]
            if v >= 0.0:
                out.flat[i] = 1.0 / (1.0 + np.exp(-v))
            else:
                e = np.exp(v)
                out.flat[i] = e / (1.0 + e)

    @njit(cache=True)
    def _nb_leaky(z, slope, out):
        for i in range(z.size):
            v = z.flat[i]
            out.flat[i] = v if v >= 0.0 else slope * v

    @njit(cache=True)
    def _nb_leaky_grad(z, g, slope, out):
        for i in range(z.size):
            out.flat[i] = g.flat[i] if z.flat[i] >= 0.0 else slope * g.flat[i]

    def softplus(z: np.ndarray) -> np.ndarray:
        z = np.ascontiguousarray(z)
        out = np.empty_like(z)
        _nb_softplus(z, out)
        return out

    def sigmoid(z: np.ndarray) -> np.ndarray:
        z = np.ascontiguousarray(z)
        out = np.empty_like(z)
        _nb_sigmoid(z, out)
        return out

    def leaky(z: np.ndarray, slope: float) -> np.ndarray:
        z = np.ascontiguousarray(z)
        out = np.empty_like(z)
        _nb_leaky(z, slope, out)
        return out

    def leaky_grad(z: np.ndarray, g: np.ndarray, slope: float) -> np.ndarray:
        z = np.ascontiguousarray(z)
        g = np.ascontiguousarray(g)
        out = np.empty_like(g)
        _nb_leaky_grad(z, g, slope, out)
        return out

else:  # pragma: no cover - exercised only without numba
    softplus = _np_softplus
    sigmoid = _np_sigmoid
    leaky = _np_leaky
    leaky_grad = _np_leaky_grad
