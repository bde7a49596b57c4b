"""Central finite-difference checks of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import Tensor, backward

# Gradients smaller than this are compared in absolute terms: central
# differences at h=1e-5 carry ~1e-11 rounding noise per unit of loss.
GRAD_FLOOR = 1e-6


@dataclass
class GradCheckRow:
    name: str
    rel_error: float
    size: int

    def passed(self, tol: float) -> bool:
        return self.rel_error < tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), GRAD_FLOOR)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def numeric_grad(fn: Callable[[], Tensor], p: Tensor, h: float = 1e-5) -> np.ndarray:
    g = np.zeros_like(p.data)
    flat = p.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = float(fn().data)
        flat[i] = old - h
        fm = float(fn().data)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def grad_check(fn: Callable[[], Tensor], params: dict[str, Tensor], h: float = 1e-5) -> list[GradCheckRow]:
    """Compare backprop against central differences for every named tensor in ``params``.

    ``fn`` must rebuild the graph from the current ``.data`` of the tensors on
    each call and return a scalar.
    """
    for p in params.values():
        p.requires_grad = True
        p.grad = None
    out = fn()
    backward(out)
    rows = []
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = numeric_grad(fn, p, h)
        rows.append(GradCheckRow(name, relative_error(analytic, numeric), p.data.size))
    return rows


def max_error(rows: list[GradCheckRow]) -> float:
    return max((r.rel_error for r in rows), default=0.0)
