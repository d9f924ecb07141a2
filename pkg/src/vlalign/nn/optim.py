"""Named parameter store and decoupled-weight-decay Adam."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import kernels
from .tensor import Tensor


class MissingGradient(RuntimeError):
    pass


class ParamStore:
    """Named parameter tensors with per-parameter trainable/decay flags.

    ``decay=False`` opts a parameter out of weight decay (biases, layer
    norm affines, the contrastive temperature).
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._decay: dict[str, bool] = {}

    def add(self, name: str, data: np.ndarray, trainable: bool = True, decay: bool = True) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(np.asarray(data), requires_grad=trainable)
        self._params[name] = t
        self._decay[name] = decay
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def remove(self, name: str) -> None:
        del self._params[name]
        del self._decay[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        for name in self.names():
            yield name, self._params[name]

    def trainable_items(self):
        for name, t in self.items():
            if t.requires_grad:
                yield name, t

    def decays(self, name: str) -> bool:
        return self._decay[name]

    def set_trainable(self, prefixes: tuple[str, ...], trainable: bool) -> None:
        for name, t in self._params.items():
            if name.startswith(prefixes):
                t.requires_grad = trainable

    def zero_grad(self) -> None:
        for _, t in self.trainable_items():
            t.zero_grad()

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.items()}


@dataclass
class OptimState:
    """AdamW accumulators and hyperparameters; lr is set per step."""

    lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: ParamStore, state: OptimState) -> None:
    """Apply one AdamW update to every trainable parameter.

    Gradients are left untouched; the caller zeroes them.
    """
    state.step += 1
    for name, t in params.trainable_items():
        if t.grad is None:
            raise MissingGradient(f"parameter {name!r} has no gradient")
        if name not in state.m:
            state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        wd = state.weight_decay if params.decays(name) else 0.0
        kernels.adamw_update(
            t.data, t.grad, state.m[name], state.v[name],
            state.step, state.lr, state.beta1, state.beta2, state.eps, wd,
        )


def clip_global_norm(params: ParamStore, max_norm: float) -> float:
    """Scale all trainable gradients so their global L2 norm is <= max_norm."""
    total = 0.0
    for _, t in params.trainable_items():
        if t.grad is not None:
            total += float((t.grad.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        s = max_norm / norm
        for _, t in params.trainable_items():
            if t.grad is not None:
                t.grad *= s
    return norm
