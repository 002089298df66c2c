"""Bias-corrected Adam over a named parameter registry."""

from __future__ import annotations

from typing import Iterable, Optional

import numpy as np

from .core.tensor import Tensor


class MissingGradientError(RuntimeError):
    pass


class Adam:
    def __init__(
        self,
        params: Iterable[tuple[str, Tensor]],
        lr: float = 2e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = dict(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = 0

    def step(self, grads: Optional[dict[str, np.ndarray]] = None) -> None:
        """Apply one update.  Gradients default to each parameter's ``.grad``."""
        if grads is None:
            grads = {k: p.grad for k, p in self.params.items()}
        missing = [k for k in self.params if grads.get(k) is None]
        if missing:
            raise MissingGradientError(f"no gradient for parameter(s): {', '.join(missing)}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            g = np.asarray(grads[k], dtype=p.dtype)
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = m / c1
            v_hat = v / c2
            p.data = p.data - (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype)

    def load_state(self, m: dict[str, np.ndarray], v: dict[str, np.ndarray], t: int) -> None:
        if set(m) != set(self.params) or set(v) != set(self.params):
            raise KeyError("optimizer state does not match the parameter registry")
        self.m = {k: np.array(m[k], dtype=self.params[k].dtype) for k in self.params}
        self.v = {k: np.array(v[k], dtype=self.params[k].dtype) for k in self.params}
        self.t = t
