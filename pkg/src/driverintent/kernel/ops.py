"""Differentiable tensor operations.

Each op computes its forward result, and, when handed a :class:`Tape` and
at least one differentiable input, records a closure implementing its
backward rule. Passing ``tape=None`` runs the identical numeric path with
no recording, which is what evaluation and streaming inference use.

Shape discipline is strict: the only broadcast allowed anywhere is the
row-vector bias in :func:`add_bias`; every other mismatch is an error.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from ..errors import ContractError, DimensionError, IndexRangeError, NumericError
from . import backend
from .tensor import Tape, Tensor, _wrap


def _emit(tape, op, inputs, values, backward_fn) -> Tensor:
    # One-pass screen: any NaN/Inf in the result drives the sum non-finite
    # (a finite array can only sum to Inf near the float64 ceiling, where
    # the very next op overflows anyway); confirm exactly before raising.
    if not math.isfinite(float(values.sum())) and not np.all(np.isfinite(values)):
        raise NumericError(f"{op} produced non-finite values")
    rg = False
    for t in inputs:
        if t.requires_grad:
            rg = True
            break
    out = _wrap(values, rg)
    if tape is not None and rg:
        tape.record(op, inputs, out, backward_fn)
    return out


def _need_2d(op: str, *tensors: Tensor) -> None:
    for t in tensors:
        if t.values.ndim != 2:
            raise DimensionError(f"{op} needs 2-D operands, got shape {t.shape}")


def matmul(tape: Tape | None, a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; backward is dA = dC @ B^T, dB = A^T @ dC."""
    _need_2d("matmul", a, b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} vs {b.shape}")
    av, bv = a.values, b.values

    def bwd(g):
        return g @ bv.T, av.T @ g

    return _emit(tape, "matmul", (a, b), av @ bv, bwd)


def add(tape: Tape | None, a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add shapes differ: {a.shape} vs {b.shape}")

    def bwd(g):
        return g, g

    return _emit(tape, "add", (a, b), a.values + b.values, bwd)


def add_bias(tape: Tape | None, x: Tensor, bias: Tensor) -> Tensor:
    """Row-vector bias addition, the single permitted broadcast."""
    _need_2d("add_bias", x)
    if bias.values.ndim != 1 or bias.shape[0] != x.shape[1]:
        raise DimensionError(
            f"add_bias needs a ({x.shape[1]},) bias, got {bias.shape}"
        )

    def bwd(g):
        return g, g.sum(axis=0)

    return _emit(tape, "add_bias", (x, bias), x.values + bias.values, bwd)


def mul(tape: Tape | None, a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul shapes differ: {a.shape} vs {b.shape}")
    av, bv = a.values, b.values

    def bwd(g):
        return g * bv, g * av

    return _emit(tape, "mul", (a, b), av * bv, bwd)


def affine(tape: Tape | None, x: Tensor, scale_by: float, shift: float) -> Tensor:
    """Elementwise scale_by*x + shift with constant coefficients."""

    def bwd(g):
        return (g * scale_by,)

    return _emit(tape, "affine", (x,), scale_by * x.values + shift, bwd)


def scale(tape: Tape | None, x: Tensor, factor: float) -> Tensor:
    return affine(tape, x, factor, 0.0)


def gelu(tape: Tape | None, x: Tensor) -> Tensor:
    """Exact error-function GELU, x * Phi(x)."""
    _need_2d("gelu", x)
    xv = x.values

    def bwd(g):
        return (backend.gelu_bwd(xv, g),)

    return _emit(tape, "gelu", (x,), backend.gelu_fwd(xv), bwd)


def softmax_rows(tape: Tape | None, x: Tensor) -> Tensor:
    """Row-wise softmax with per-row max subtraction."""
    _need_2d("softmax_rows", x)
    p = backend.softmax_fwd(x.values)

    def bwd(g):
        return (backend.softmax_bwd(p, g),)

    return _emit(tape, "softmax_rows", (x,), p, bwd)


def layer_norm(
    tape: Tape | None, x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6
) -> Tensor:
    """Per-row normalization to mean 0 / variance 1, then affine."""
    _need_2d("layer_norm", x)
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    d = x.shape[1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm affine params must be ({d},), got {gamma.shape}/{beta.shape}"
        )
    y, xhat, rstd = backend.layernorm_fwd(x.values, gamma.values, beta.values, eps)
    gv = gamma.values

    def bwd(g):
        return backend.layernorm_bwd(xhat, rstd, gv, g)

    return _emit(tape, "layer_norm", (x, gamma, beta), y, bwd)


def concat_tokens(tape: Tape | None, parts: Sequence[Tensor]) -> Tensor:
    """Stack token rows; backward splits the gradient at the same offsets."""
    if not parts:
        raise ContractError("concat_tokens needs at least one part")
    _need_2d("concat_tokens", *parts)
    width = parts[0].shape[1]
    for t in parts[1:]:
        if t.shape[1] != width:
            raise DimensionError(
                f"concat_tokens width mismatch: {t.shape[1]} vs {width}"
            )
    sizes = [t.shape[0] for t in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(sizes)))

    return _emit(
        tape, "concat_tokens", tuple(parts),
        np.concatenate([t.values for t in parts], axis=0), bwd,
    )


def slice_tokens(tape: Tape | None, x: Tensor, lo: int, hi: int) -> Tensor:
    """Rows lo..hi; backward scatters into that range, zero elsewhere."""
    _need_2d("slice_tokens", x)
    n = x.shape[0]
    if not (0 <= lo <= hi <= n):
        raise IndexRangeError(f"slice_tokens range [{lo}, {hi}) outside {n} rows")
    shape = x.shape

    def bwd(g):
        full = np.zeros(shape)
        full[lo:hi] = g
        return (full,)

    return _emit(tape, "slice_tokens", (x,), x.values[lo:hi].copy(), bwd)


def slice_cols(tape: Tape | None, x: Tensor, lo: int, hi: int) -> Tensor:
    _need_2d("slice_cols", x)
    d = x.shape[1]
    if not (0 <= lo <= hi <= d):
        raise IndexRangeError(f"slice_cols range [{lo}, {hi}) outside {d} columns")
    shape = x.shape

    def bwd(g):
        full = np.zeros(shape)
        full[:, lo:hi] = g
        return (full,)

    return _emit(tape, "slice_cols", (x,), np.ascontiguousarray(x.values[:, lo:hi]), bwd)


def mean_rows(tape: Tape | None, x: Tensor) -> Tensor:
    """Mean over rows, keeping a (1, d) shape."""
    _need_2d("mean_rows", x)
    n = x.shape[0]
    if n == 0:
        raise ContractError("mean_rows needs at least one row")

    def bwd(g):
        return (np.repeat(g, n, axis=0) / n,)

    return _emit(tape, "mean_rows", (x,), x.values.mean(axis=0, keepdims=True), bwd)


def pick(tape: Tape | None, x: Tensor, i: int, j: int) -> Tensor:
    """Select one element as a (1, 1) scalar; backward scatters it back."""
    _need_2d("pick", x)
    n, d = x.shape
    if not (0 <= i < n and 0 <= j < d):
        raise IndexRangeError(f"pick ({i}, {j}) outside shape {x.shape}")
    shape = x.shape

    def bwd(g):
        full = np.zeros(shape)
        full[i, j] = g[0, 0]
        return (full,)

    return _emit(tape, "pick", (x,), x.values[i:i + 1, j:j + 1].copy(), bwd)


def clamp_min(tape: Tape | None, x: Tensor, lo: float) -> Tensor:
    """max(x, lo); gradient passes only where x was strictly above lo."""
    mask = x.values > lo

    def bwd(g):
        return (g * mask,)

    return _emit(tape, "clamp_min", (x,), np.maximum(x.values, lo), bwd)


def log(tape: Tape | None, x: Tensor) -> Tensor:
    xv = x.values

    def bwd(g):
        return (g / xv,)

    return _emit(tape, "log", (x,), np.log(xv), bwd)


def sum_all(tape: Tape | None, x: Tensor) -> Tensor:
    shape = x.shape

    def bwd(g):
        return (np.full(shape, g.reshape(-1)[0]),)

    return _emit(tape, "sum_all", (x,), x.values.sum().reshape(1, 1), bwd)


def block_attention(
    tape: Tape | None, q: Tensor, k: Tensor, v: Tensor, n_heads: int,
    n_blocks: int = 1,
) -> tuple[Tensor, np.ndarray]:
    """Fused scaled-dot-product self-attention, blockwise over the rows.

    Inputs are already-projected (B*n, d) query/key/value matrices holding
    B contiguous row blocks; attention runs independently inside each
    block (B=1 is plain full self-attention). Returns the (B*n, d) output
    together with the attention probabilities shaped (B, heads, n, n) —
    these are saved for the backward pass anyway, and attention extraction
    reads them.
    """
    _need_2d("block_attention", q, k, v)
    if not (q.shape == k.shape == v.shape):
        raise DimensionError(
            f"attention operands differ: {q.shape}, {k.shape}, {v.shape}"
        )
    rows, d = q.shape
    if n_blocks < 1 or rows % n_blocks != 0:
        raise ContractError(f"{rows} rows do not split into {n_blocks} blocks")
    n = rows // n_blocks
    if n_heads < 1 or d % n_heads != 0:
        raise ContractError(f"width {d} not divisible into {n_heads} heads")
    dh = d // n_heads
    inv = 1.0 / math.sqrt(dh)

    def split(t: np.ndarray) -> np.ndarray:
        # (B*n, d) -> (B, heads, n, dh)
        return np.ascontiguousarray(
            t.reshape(n_blocks, n, n_heads, dh).transpose(0, 2, 1, 3)
        )

    qh, kh, vh = split(q.values), split(k.values), split(v.values)
    scores = np.matmul(qh, kh.transpose(0, 1, 3, 2)) * inv
    probs = backend.softmax_fwd(
        scores.reshape(n_blocks * n_heads * n, n)
    ).reshape(n_blocks, n_heads, n, n)
    out = np.ascontiguousarray(
        np.matmul(probs, vh).transpose(0, 2, 1, 3)
    ).reshape(rows, d)

    def bwd(g):
        gh = np.ascontiguousarray(
            g.reshape(n_blocks, n, n_heads, dh).transpose(0, 2, 1, 3)
        )
        gprobs = np.matmul(gh, vh.transpose(0, 1, 3, 2))
        gv_h = np.matmul(probs.transpose(0, 1, 3, 2), gh)
        gscores = backend.softmax_bwd(
            probs.reshape(n_blocks * n_heads * n, n),
            np.ascontiguousarray(gprobs.reshape(n_blocks * n_heads * n, n)),
        ).reshape(n_blocks, n_heads, n, n) * inv
        gq_h = np.matmul(gscores, kh)
        gk_h = np.matmul(gscores.transpose(0, 1, 3, 2), qh)

        def merge(t):
            return np.ascontiguousarray(t.transpose(0, 2, 1, 3)).reshape(rows, d)

        return merge(gq_h), merge(gk_h), merge(gv_h)

    return _emit(tape, "block_attention", (q, k, v), out, bwd), probs


def multihead_attention(
    tape: Tape | None, q: Tensor, k: Tensor, v: Tensor, n_heads: int
) -> tuple[Tensor, np.ndarray]:
    """Single-sequence self-attention; probabilities come back (heads, n, n)."""
    out, probs = block_attention(tape, q, k, v, n_heads, n_blocks=1)
    return out, probs[0]


def interleave_blocks(
    tape: Tape | None, parts: Sequence[Tensor], n_blocks: int
) -> Tensor:
    """Merge B-blocked tensors so each output block concatenates the parts.

    Every part holds B contiguous row blocks; output block b is the
    row-wise concatenation of each part's b-th block. With one block this
    is plain token concatenation.
    """
    if not parts:
        raise ContractError("interleave_blocks needs at least one part")
    _need_2d("interleave_blocks", *parts)
    d = parts[0].shape[1]
    sizes = []
    for t in parts:
        if t.shape[1] != d:
            raise DimensionError(f"width mismatch: {t.shape[1]} vs {d}")
        if t.shape[0] % n_blocks != 0:
            raise ContractError(
                f"{t.shape[0]} rows do not split into {n_blocks} blocks"
            )
        sizes.append(t.shape[0] // n_blocks)
    total = sum(sizes)
    out = np.empty((n_blocks * total, d))
    offsets = np.cumsum([0] + sizes)
    views = [t.values.reshape(n_blocks, s, d) for t, s in zip(parts, sizes)]
    stacked = out.reshape(n_blocks, total, d)
    for i, view in enumerate(views):
        stacked[:, offsets[i]:offsets[i + 1], :] = view

    def bwd(g):
        gb = g.reshape(n_blocks, total, d)
        return tuple(
            np.ascontiguousarray(gb[:, offsets[i]:offsets[i + 1], :])
            .reshape(n_blocks * sizes[i], d)
            for i in range(len(sizes))
        )

    return _emit(tape, "interleave_blocks", tuple(parts), out, bwd)


def slice_block_rows(
    tape: Tape | None, x: Tensor, n_blocks: int, lo: int, hi: int
) -> Tensor:
    """Rows lo..hi of every block; backward scatters into each block."""
    _need_2d("slice_block_rows", x)
    rows, d = x.shape
    if n_blocks < 1 or rows % n_blocks != 0:
        raise ContractError(f"{rows} rows do not split into {n_blocks} blocks")
    n = rows // n_blocks
    if not (0 <= lo <= hi <= n):
        raise IndexRangeError(f"block slice [{lo}, {hi}) outside {n} rows")
    width = hi - lo
    out = np.ascontiguousarray(
        x.values.reshape(n_blocks, n, d)[:, lo:hi, :]
    ).reshape(n_blocks * width, d)

    def bwd(g):
        full = np.zeros((n_blocks, n, d))
        full[:, lo:hi, :] = g.reshape(n_blocks, width, d)
        return (full.reshape(rows, d),)

    return _emit(tape, "slice_block_rows", (x,), out, bwd)


def mean_block_rows(tape: Tape | None, x: Tensor, block_size: int) -> Tensor:
    """Mean over each consecutive block of rows; (B*k, d) -> (B, d)."""
    _need_2d("mean_block_rows", x)
    rows, d = x.shape
    if block_size < 1 or rows % block_size != 0:
        raise ContractError(f"{rows} rows do not split into blocks of {block_size}")
    n_blocks = rows // block_size
    out = x.values.reshape(n_blocks, block_size, d).mean(axis=1)

    def bwd(g):
        return (np.repeat(g / block_size, block_size, axis=0),)

    return _emit(tape, "mean_block_rows", (x,), out, bwd)


def add_tiled(tape: Tape | None, x: Tensor, tile: Tensor, reps: int) -> Tensor:
    """Add a (n, d) tensor to each of the reps row blocks of a (reps*n, d) one."""
    _need_2d("add_tiled", x, tile)
    n, d = tile.shape
    if x.shape != (reps * n, d):
        raise DimensionError(
            f"add_tiled expects {(reps * n, d)} rows for tile {tile.shape}, "
            f"got {x.shape}"
        )

    def bwd(g):
        return g, g.reshape(reps, n, d).sum(axis=0)

    out = (x.values.reshape(reps, n, d) + tile.values).reshape(reps * n, d)
    return _emit(tape, "add_tiled", (x, tile), out, bwd)


def batch_step_penalty(
    tape: Tape | None,
    p: Tensor,
    labels: np.ndarray,
    rule_classes: np.ndarray,
    rule_masks: np.ndarray,
    floor: float,
) -> Tensor:
    """Per-sample (ce, cc) column pair for a batch of probability rows.

    ``p`` is (B, C) probabilities; column 0 of the output is
    ``-log max(p[b, y_b], floor)`` and column 1 sums, over every rule,
    ``-mask[r, b] * log max(1 - p[b, class_r], floor)``. Semantics mirror
    the per-sample objectives exactly (including the double penalty when
    one class appears in two fired rules); this fused form exists for the
    batched training path and is tested against them.
    """
    _need_2d("batch_step_penalty", p)
    b, c = p.shape
    labels = np.asarray(labels)
    if labels.shape != (b,) or labels.min(initial=0) < 0 or \
            labels.max(initial=0) >= c:
        raise ContractError(f"labels must be (B,) class indices, got {labels}")
    rule_classes = np.asarray(rule_classes, dtype=np.int64)
    rule_masks = np.asarray(rule_masks, dtype=np.float64)
    if rule_masks.shape != (rule_classes.size, b):
        raise ContractError(
            f"rule masks {rule_masks.shape} do not match {rule_classes.size} "
            f"rules x {b} samples"
        )
    rows = np.arange(b)
    picked = p.values[rows, labels]
    ce_live = picked > floor
    ce = -np.log(np.maximum(picked, floor))
    complements = 1.0 - p.values[:, rule_classes]  # (B, R)
    cc_live = complements > floor
    cc_terms = -np.log(np.maximum(complements, floor)) * rule_masks.T
    cc = cc_terms.sum(axis=1) if rule_classes.size else np.zeros(b)
    out = np.stack([ce, cc], axis=1)

    def bwd(g):
        gp = np.zeros((b, c))
        np.add.at(gp, (rows, labels), -g[:, 0] * ce_live / np.maximum(picked, floor))
        if rule_classes.size:
            per_rule = (g[:, 1:2] * rule_masks.T * cc_live
                        / np.maximum(complements, floor))  # (B, R)
            np.add.at(gp, (rows[:, None], rule_classes[None, :]), per_rule)
        return (gp,)

    return _emit(tape, "batch_step_penalty", (p,), out, bwd)
