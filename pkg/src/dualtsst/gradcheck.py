"""Finite-difference verification of analytic gradients.

Central differences with a small step compared against one reverse-mode
pass.  Relative error uses a magnitude floor so that near-zero gradients
are compared on an absolute scale instead of blowing up the ratio.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, backward, no_grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def central_difference(loss_fn, param: Tensor, h: float = 1e-6) -> np.ndarray:
    """d loss / d param by central differences, perturbing in place."""
    flat = param.data.reshape(-1)
    num = np.empty_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = float(loss_fn().data)
            flat[i] = orig - h
            lm = float(loss_fn().data)
            flat[i] = orig
            num[i] = (lp - lm) / (2.0 * h)
    return num.reshape(param.data.shape)


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_param: str
    per_param: dict[str, float] = field(default_factory=dict)

    def ok(self, tol: float) -> bool:
        return self.max_rel_error < tol


def check_gradients(loss_fn, params: dict[str, Tensor], h: float = 1e-6,
                    floor: float = 1e-6) -> GradCheckResult:
    """Compare reverse-mode gradients of ``loss_fn()`` against central FD.

    ``loss_fn`` must rebuild the forward pass from the live ``params`` on
    every call and return a scalar Tensor.
    """
    for p in params.values():
        p.zero_grad()
    loss = loss_fn()
    backward(loss)
    analytic = {}
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"parameter {name} received no gradient")
        analytic[name] = p.grad.copy()

    per_param = {}
    worst = ("", -1.0)
    for name, p in params.items():
        numeric = central_difference(loss_fn, p, h=h)
        err = max_relative_error(analytic[name], numeric, floor=floor)
        per_param[name] = err
        if err > worst[1]:
            worst = (name, err)
    return GradCheckResult(max_rel_error=worst[1], worst_param=worst[0], per_param=per_param)
