"""Adam optimizer over named parameter tensors."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .exceptions import ShapeError


class OptimizerState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        if lr <= 0.0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.lr = float(lr)
        self.betas = (float(betas[0]), float(betas[1]))
        self.eps = float(eps)
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: OptimizerState) -> OptimizerState:
    """One bias-corrected Adam update, in place on the parameter tensors."""
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ShapeError(
                f"adam_step: gradient shape {g.shape} != parameter shape "
                f"{p.data.shape} for '{name}'")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state


class Adam:
    """Convenience wrapper: reads ``.grad`` of the managed parameters.

    Internally the update runs on one flat buffer (identical elementwise
    math to ``adam_step``, far fewer array dispatches for many small
    parameters).
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.state = OptimizerState(lr=lr, betas=betas, eps=eps)
        self._names = list(params)
        sizes = [params[n].data.size for n in self._names]
        bounds = np.concatenate([[0], np.cumsum(sizes)])
        self._slices = {n: slice(int(bounds[i]), int(bounds[i + 1]))
                        for i, n in enumerate(self._names)}
        self._flat_m = np.zeros(int(bounds[-1]))
        self._flat_v = np.zeros(int(bounds[-1]))
        self._flat_g = np.zeros(int(bounds[-1]))

    def step(self) -> None:
        st = self.state
        st.step_count += 1
        for n in self._names:
            p = self.params[n]
            sl = self._slices[n]
            if p.grad is not None:
                self._flat_g[sl] = p.grad.reshape(-1)
            else:
                self._flat_g[sl] = 0.0
        b1, b2 = st.betas
        self._flat_m *= b1
        self._flat_m += (1.0 - b1) * self._flat_g
        self._flat_v *= b2
        self._flat_v += (1.0 - b2) * self._flat_g * self._flat_g
        c1 = 1.0 - b1 ** st.step_count
        c2 = 1.0 - b2 ** st.step_count
        update = st.lr * (self._flat_m / c1) / (np.sqrt(self._flat_v / c2) + st.eps)
        for n in self._names:
            p = self.params[n]
            p.data = p.data - update[self._slices[n]].reshape(p.data.shape)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()
