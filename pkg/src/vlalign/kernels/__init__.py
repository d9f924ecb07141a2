"""Kernel backend selection.

The compiled Cython extension is preferred when it imported cleanly;
otherwise the pure numpy module is used.  Set ``VLALIGN_PURE=1`` to
force the pure backend (useful for benchmarking and debugging).
"""

from __future__ import annotations

import os

from . import pure as _pure

if os.environ.get("VLALIGN_PURE", "") == "1":
    _impl = _pure
else:
    try:
        from . import _fast as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = _pure

BACKEND: str = _impl.BACKEND

gelu_fwd = _impl.gelu_fwd
gelu_bwd = _impl.gelu_bwd
layernorm_fwd = _impl.layernorm_fwd
layernorm_bwd = _impl.layernorm_bwd
softmax_fwd = _impl.softmax_fwd
softmax_bwd = _impl.softmax_bwd
adamw_update = _impl.adamw_update
lap_min = _impl.lap_min

__all__ = [
    "BACKEND",
    "adamw_update",
    "gelu_bwd",
    "gelu_fwd",
    "lap_min",
    "layernorm_bwd",
    "layernorm_fwd",
    "softmax_bwd",
    "softmax_fwd",
    "pure",
]
