"""Adam optimizer over named parameter tensors."""

from __future__ import annotations

import numpy as np

from .nn import ParamBag


class NonFiniteGradient(RuntimeError):
    pass


class Adam:
    """Standard Adam with bias correction.

    Defaults: beta1=0.9, beta2=0.999, eps=1e-8. State is kept per parameter
    name; only names present in ``params`` at construction get state, so
    frozen parameter sets never carry optimizer state.
    """

    def __init__(self, params: dict, lr: float = 0.001, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if isinstance(params, ParamBag):
            params = {k: v for k, v in params.items() if v.requires_grad}
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in self.params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in self.params.items()}

    def step(self, grads: dict):
        """Apply one update from a name -> ndarray gradient map.

        Parameters without an entry (or with None) are left untouched but
        still advance their moment decay only when updated; the step counter
        advances once per call.
        """
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                g = 0.0
            else:
                if not np.all(np.isfinite(g)):
                    raise NonFiniteGradient(f"non-finite gradient for parameter {name!r}")
                if g.shape != p.data.shape:
                    raise ValueError(f"gradient shape {g.shape} != parameter {name!r} shape {p.data.shape}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_arrays(self, prefix: str = "adam") -> dict:
        out = {f"{prefix}/step": np.array([float(self.step_count)])}
        for k in self.params:
            out[f"{prefix}/m/{k}"] = self.m[k]
            out[f"{prefix}/v/{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: dict, prefix: str = "adam"):
        key = f"{prefix}/step"
        if key in arrays:
            self.step_count = int(arrays[key][0])
        for k in self.params:
            mk, vk = f"{prefix}/m/{k}", f"{prefix}/v/{k}"
            if mk in arrays:
                self.m[k] = np.asarray(arrays[mk], dtype=np.float64).reshape(self.m[k].shape).copy()
            if vk in arrays:
                self.v[k] = np.asarray(arrays[vk], dtype=np.float64).reshape(self.v[k].shape).copy()
