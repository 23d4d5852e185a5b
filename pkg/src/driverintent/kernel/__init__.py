"""Numeric core: float64 tensors, tape autodiff, and the hot kernels.

``BACKEND`` names the kernel implementation selected at import ("c" for
the compiled extension, "py" for the numpy fallback); see
:mod:`driverintent.kernel.backend`.
"""

from .backend import BACKEND
from .ops import (
    add,
    add_bias,
    add_tiled,
    affine,
    batch_step_penalty,
    block_attention,
    clamp_min,
    concat_tokens,
    gelu,
    interleave_blocks,
    layer_norm,
    log,
    matmul,
    mean_block_rows,
    mean_rows,
    mul,
    multihead_attention,
    pick,
    scale,
    slice_block_rows,
    slice_cols,
    slice_tokens,
    softmax_rows,
    sum_all,
)
from .tensor import (
    GradCheckReport,
    Tape,
    Tensor,
    backward,
    finite_diff_grad_check,
    parameter,
)

__all__ = [
    "BACKEND",
    "GradCheckReport",
    "Tape",
    "Tensor",
    "add",
    "add_bias",
    "add_tiled",
    "affine",
    "backward",
    "batch_step_penalty",
    "block_attention",
    "clamp_min",
    "concat_tokens",
    "finite_diff_grad_check",
    "gelu",
    "interleave_blocks",
    "layer_norm",
    "log",
    "matmul",
    "mean_block_rows",
    "mean_rows",
    "mul",
    "multihead_attention",
    "parameter",
    "pick",
    "scale",
    "slice_block_rows",
    "slice_cols",
    "slice_tokens",
    "softmax_rows",
    "sum_all",
]
