"""Spatial-temporal encoder with episodic memory recurrence.

At each timestep the K memory tokens are prepended to the frame's patch
tokens, the combined sequence passes through L pre-norm transformer
blocks with full bidirectional attention, and the first K output rows
become the next timestep's memory. That carried block is the only
channel between timesteps, so causality holds by construction; it also
feeds the prediction head (mean-pooled, then linear + softmax).

The initial memory is a learned parameter, shared across episodes, and
gradients flow through the carry by default (full backpropagation
through the unrolled steps).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernel as K
from .errors import ConfigurationError, ContractError, NumericError


@dataclass(frozen=True)
class EncoderConfig:
    n_layers: int
    dim: int
    n_heads: int
    n_mem: int
    mlp_ratio: float = 4.0
    n_classes: int = 5

    def __post_init__(self):
        if self.n_layers < 0 or self.n_mem < 0:
            raise ConfigurationError("layer and memory counts must be >= 0")
        if self.dim < 1 or self.n_heads < 1 or self.dim % self.n_heads:
            raise ConfigurationError(
                f"width {self.dim} must divide into {self.n_heads} heads"
            )
        if self.n_classes < 2:
            raise ConfigurationError("need at least two classes")
        if self.mlp_ratio <= 0:
            raise ConfigurationError("mlp_ratio must be positive")

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.dim * self.mlp_ratio))


@dataclass
class MemoryState:
    """The K episodic memory embeddings carried between timesteps."""

    tokens: K.Tensor  # (K, D)
    t: int = 0

    def __post_init__(self):
        if self.t < 0:
            raise ContractError("timestep index must be >= 0")


def init_encoder_params(
    config: EncoderConfig, rng: np.random.Generator, init_std: float = 0.02
) -> dict[str, K.Tensor]:
    """Allocate encoder, memory-init, and head parameters by name."""
    d, hidden = config.dim, config.mlp_hidden
    params: dict[str, K.Tensor] = {}

    def normal(shape):
        return rng.normal(0.0, init_std, size=shape)

    params["memory.init"] = K.parameter(normal((config.n_mem, d)), name="memory.init")
    for i in range(config.n_layers):
        pre = f"block{i}"
        params[f"{pre}.ln1.gamma"] = K.parameter(np.ones(d), name=f"{pre}.ln1.gamma")
        params[f"{pre}.ln1.beta"] = K.parameter(np.zeros(d), name=f"{pre}.ln1.beta")
        for piece in ("q", "k", "v", "out"):
            params[f"{pre}.attn.{piece}.w"] = K.parameter(
                normal((d, d)), name=f"{pre}.attn.{piece}.w"
            )
            params[f"{pre}.attn.{piece}.b"] = K.parameter(
                np.zeros(d), name=f"{pre}.attn.{piece}.b"
            )
        params[f"{pre}.ln2.gamma"] = K.parameter(np.ones(d), name=f"{pre}.ln2.gamma")
        params[f"{pre}.ln2.beta"] = K.parameter(np.zeros(d), name=f"{pre}.ln2.beta")
        params[f"{pre}.mlp.fc1.w"] = K.parameter(normal((d, hidden)),
                                                 name=f"{pre}.mlp.fc1.w")
        params[f"{pre}.mlp.fc1.b"] = K.parameter(np.zeros(hidden),
                                                 name=f"{pre}.mlp.fc1.b")
        params[f"{pre}.mlp.fc2.w"] = K.parameter(normal((hidden, d)),
                                                 name=f"{pre}.mlp.fc2.w")
        params[f"{pre}.mlp.fc2.b"] = K.parameter(np.zeros(d), name=f"{pre}.mlp.fc2.b")
    params["head.w"] = K.parameter(normal((d, config.n_classes)), name="head.w")
    params["head.b"] = K.parameter(np.zeros(config.n_classes), name="head.b")
    return params


def init_memory(config: EncoderConfig, params: dict[str, K.Tensor]) -> MemoryState:
    """Fresh session state: the learned initial memory block at t=0."""
    mem = params["memory.init"]
    if mem.shape != (config.n_mem, config.dim):
        raise ContractError(
            f"memory parameter shape {mem.shape} does not match config "
            f"({config.n_mem}, {config.dim})"
        )
    return MemoryState(tokens=mem, t=0)


def prepend_memory(tape: K.Tape | None, mem: MemoryState, tokens: K.Tensor) -> K.Tensor:
    """Memory rows first, then the frame's combined token sequence."""
    if mem.tokens.shape[0] == 0:
        return tokens
    return K.concat_tokens(tape, [mem.tokens, tokens])


def _linear(tape, x, params, name):
    return K.add_bias(tape, K.matmul(tape, x, params[f"{name}.w"]),
                      params[f"{name}.b"])


def encode_step(
    tape: K.Tape | None,
    x: K.Tensor,
    params: dict[str, K.Tensor],
    config: EncoderConfig,
    attention_sink: list[np.ndarray] | None = None,
    n_seqs: int = 1,
) -> K.Tensor:
    """Run the L pre-norm blocks over one timestep's token sequence.

    Attention is full (every token attends to every token); shape is
    preserved, and L=0 is the identity. When ``attention_sink`` is given,
    each layer appends its (heads, n, n) attention probabilities to it.

    ``n_seqs > 1`` treats the rows as that many independent token
    sequences stacked back to back (the batched training path); attention
    then acts within each sequence only, and recording is unsupported.
    """
    if attention_sink is not None and n_seqs != 1:
        raise ContractError("attention recording needs a single sequence")
    for i in range(config.n_layers):
        pre = f"block{i}"
        try:
            h = K.layer_norm(tape, x, params[f"{pre}.ln1.gamma"],
                             params[f"{pre}.ln1.beta"])
            q = _linear(tape, h, params, f"{pre}.attn.q")
            k = _linear(tape, h, params, f"{pre}.attn.k")
            v = _linear(tape, h, params, f"{pre}.attn.v")
            attn, probs = K.block_attention(tape, q, k, v, config.n_heads,
                                            n_blocks=n_seqs)
            if attention_sink is not None:
                attention_sink.append(probs[0])
            x = K.add(tape, x, _linear(tape, attn, params, f"{pre}.attn.out"))
            h = K.layer_norm(tape, x, params[f"{pre}.ln2.gamma"],
                             params[f"{pre}.ln2.beta"])
            h = K.gelu(tape, _linear(tape, h, params, f"{pre}.mlp.fc1"))
            x = K.add(tape, x, _linear(tape, h, params, f"{pre}.mlp.fc2"))
        except NumericError as exc:
            raise NumericError(f"non-finite activations in block {i}") from exc
    return x


def carry_memory(tape: K.Tape | None, encoded: K.Tensor, config: EncoderConfig,
                 t: int) -> MemoryState:
    """Extract the first K output rows as the next timestep's memory.

    Gradients flow through this extraction; truncated-backprop detaching
    is the training loop's decision, not this op's.
    """
    if encoded.shape[0] < config.n_mem:
        raise ContractError(
            f"cannot carry {config.n_mem} memory rows from {encoded.shape[0]} tokens"
        )
    return MemoryState(tokens=K.slice_tokens(tape, encoded, 0, config.n_mem), t=t + 1)


def predict(
    tape: K.Tape | None, mem_out: K.Tensor, params: dict[str, K.Tensor]
) -> tuple[K.Tensor, int]:
    """Mean-pool rows, apply the linear head, softmax to probabilities.

    Returns the (1, n_classes) probability row and the argmax label
    (ties resolved to the lowest class index).
    """
    if mem_out.shape[0] == 0:
        raise ContractError("prediction requires at least one memory token")
    pooled = K.mean_rows(tape, mem_out)
    logits = K.add_bias(tape, K.matmul(tape, pooled, params["head.w"]),
                        params["head.b"])
    p = K.softmax_rows(tape, logits)
    return p, int(np.argmax(p.values[0]))


def extract_attention(
    layer_probs: list[np.ndarray],
    config: EncoderConfig,
    view_grids: list[tuple[int, int]],
) -> tuple[list[np.ndarray], list[list[np.ndarray]]]:
    """Reshape recorded attention into per-view spatial grids.

    ``layer_probs`` holds one (heads, n, n) matrix per layer from a single
    timestep. For each layer, the memory-to-patch block (rows 0..K,
    columns K..) is averaged over memory rows and heads, then the slice
    belonging to each view is reshaped to that view's patch grid. Returns
    the raw per-layer matrices and the per-layer, per-view grids.
    """
    if config.n_mem < 1:
        raise ContractError("attention grids need at least one memory token")
    n_patches = sum(gh * gw for gh, gw in view_grids)
    grids: list[list[np.ndarray]] = []
    for probs in layer_probs:
        if probs.shape[1] != config.n_mem + n_patches:
            raise ContractError(
                f"attention matrix has {probs.shape[1]} tokens, expected "
                f"{config.n_mem + n_patches}"
            )
        mem_to_patch = probs[:, : config.n_mem, config.n_mem:].mean(axis=(0, 1))
        per_view = []
        offset = 0
        for gh, gw in view_grids:
            per_view.append(mem_to_patch[offset:offset + gh * gw].reshape(gh, gw))
            offset += gh * gw
        grids.append(per_view)
    return list(layer_probs), grids
