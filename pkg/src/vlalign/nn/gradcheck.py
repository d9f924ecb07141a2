"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .tensor import Tensor, no_grad


def finite_diff_check(
    fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    epsilon: float = 1e-5,
    n_samples: int = 200,
    rng: np.random.Generator | None = None,
    grad_floor: float = 0.0,
) -> float:
    """Compare analytic gradients of a deterministic scalar fn against
    central differences on sampled coordinates.

    Returns the max over sampled coordinates of
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.

    ``grad_floor`` restricts sampling to coordinates whose analytic
    gradient magnitude reaches the floor; coordinates a loss genuinely
    does not depend on are better asserted exactly zero by the caller.
    """
    if epsilon <= 0.0:
        raise ValueError("epsilon must be positive")
    params = [p for p in params if p.requires_grad]
    if not params:
        raise ValueError("no trainable parameters to check")
    rng = rng if rng is not None else np.random.default_rng(0)

    for p in params:
        p.zero_grad()
    loss = fn()
    if not np.isfinite(loss.data):
        raise ValueError("fn returned a non-finite value")
    loss.backward()
    analytic = [np.array(p.grad, dtype=np.float64) for p in params]

    coords: list[tuple[int, tuple[int, ...]]] = []
    for pi, g in enumerate(analytic):
        for idx in np.ndindex(g.shape):
            if abs(g[idx]) >= grad_floor:
                coords.append((pi, idx))
    if not coords:
        raise ValueError("no coordinates pass the gradient floor")
    if len(coords) > n_samples:
        chosen = rng.choice(len(coords), size=n_samples, replace=False)
        coords = [coords[i] for i in chosen]

    max_rel = 0.0
    with no_grad():
        for pi, idx in coords:
            p = params[pi]
            x0 = p.data[idx]
            p.data[idx] = x0 + epsilon
            f_plus = fn().item()
            p.data[idx] = x0 - epsilon
            f_minus = fn().item()
            p.data[idx] = x0
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise ValueError("fn returned a non-finite value during probing")
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            a = analytic[pi][idx]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            max_rel = max(max_rel, rel)
    return max_rel
