"""Named parameter storage and the Adam optimizer."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class ParamStore:
    params: dict[str, Tensor]
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        for name, p in self.params.items():
            p.requires_grad = True
            self.m.setdefault(name, np.zeros_like(p.data))
            self.v.setdefault(name, np.zeros_like(p.data))

    def __getitem__(self, name) -> Tensor:
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in self.params.items()}

    def values(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def load_values(self, values: dict[str, np.ndarray]):
        missing = set(self.params) - set(values)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, p in self.params.items():
            if values[k].shape != p.data.shape:
                raise ShapeError(f"parameter {k}: stored shape {values[k].shape} != {p.data.shape}")
            p.data = np.array(values[k], dtype=p.data.dtype)

    def count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))


def adam_step(store: ParamStore, grads: dict[str, np.ndarray] | None = None, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update of every parameter in ``store``."""
    if grads is None:
        grads = store.grads()
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in store.params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: gradient for {name} has shape {g.shape}, parameter {p.data.shape}")
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if lr == 0.0:
            continue
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
