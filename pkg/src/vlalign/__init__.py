"""Desk-scale two-stage vision-language alignment.

Synthetic corpora with exact phrase-to-region ground truth, multi-level
input construction, uni-modal + cross-modal transformer encoders over a
small reverse-mode autodiff core, five training objectives, and a
retrieval / grounding / ablation evaluation harness.
"""

from .kernels import BACKEND as kernel_backend

__version__ = "0.1.0"
__all__ = ["kernel_backend", "__version__"]
