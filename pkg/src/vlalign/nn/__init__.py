from .gradcheck import finite_diff_check
from .optim import MissingGradient, OptimState, ParamStore, adamw_step, clip_global_norm
from .serialize import CheckpointError, load_tensors, save_tensors
from .tensor import (
    ShapeMismatch,
    Tensor,
    add,
    clamp_min,
    concat,
    cross_entropy,
    div,
    dropout,
    embedding_lookup,
    exp,
    gather_positions,
    gelu,
    l2_normalize,
    layer_norm,
    log,
    matmul,
    mul,
    narrow,
    no_grad,
    reshape,
    scale,
    scaled_dot_product_attention,
    softmax,
    sub,
    swap_last2,
    take_rows,
    tmax,
    tmean,
    transpose,
    tsum,
)

__all__ = [
    "CheckpointError",
    "MissingGradient",
    "OptimState",
    "ParamStore",
    "ShapeMismatch",
    "Tensor",
    "adamw_step",
    "add",
    "clamp_min",
    "clip_global_norm",
    "concat",
    "cross_entropy",
    "div",
    "dropout",
    "embedding_lookup",
    "exp",
    "finite_diff_check",
    "gather_positions",
    "gelu",
    "l2_normalize",
    "layer_norm",
    "load_tensors",
    "log",
    "matmul",
    "mul",
    "narrow",
    "no_grad",
    "reshape",
    "save_tensors",
    "scale",
    "scaled_dot_product_attention",
    "softmax",
    "sub",
    "swap_last2",
    "take_rows",
    "tmax",
    "tmean",
    "transpose",
    "tsum",
]
