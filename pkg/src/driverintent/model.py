"""The assembled model: per-view embedders + recurrent encoder + head.

One ``step`` embeds a frame, prepends the carried memory, encodes, slices
the new memory off the output, and predicts from it. ``roll`` threads the
memory through a whole frame sequence; streaming inference calls ``step``
directly, so the two paths are numerically the same code.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernel as K
from .embed import (
    MultiViewFrame,
    PatchConfig,
    ViewEmbedder,
    ViewGeometry,
    concat_views,
    embed_view,
    init_view_embedder,
    patchify,
)
from .encoder import (
    EncoderConfig,
    MemoryState,
    carry_memory,
    encode_step,
    init_encoder_params,
    init_memory,
    predict,
    prepend_memory,
)
from .errors import ContractError
from .rules import CLASS_NAMES


@dataclass(frozen=True)
class ModelConfig:
    views: tuple[ViewGeometry, ...]
    patch_size: int
    encoder: EncoderConfig
    class_names: tuple[str, ...] = CLASS_NAMES

    def __post_init__(self):
        if not self.views:
            raise ContractError("model needs at least one view")
        if len(self.class_names) != self.encoder.n_classes:
            raise ContractError(
                f"{len(self.class_names)} class names for "
                f"{self.encoder.n_classes} classes"
            )
        patch = PatchConfig(self.patch_size)
        for geom in self.views:
            patch.grid(geom)  # validates divisibility

    @property
    def patch(self) -> PatchConfig:
        return PatchConfig(self.patch_size)

    @property
    def tokens_per_frame(self) -> int:
        return sum(self.patch.n_patches(g) for g in self.views)

    def view_grids(self) -> list[tuple[int, int]]:
        return [self.patch.grid(g) for g in self.views]


def desk_model_config(
    n_mem: int = 4,
    n_layers: int = 2,
    dim: int = 64,
    n_heads: int = 4,
    mlp_ratio: float = 2.0,
    patch_size: int = 8,
    n_views: int = 2,
    side: int = 32,
) -> ModelConfig:
    """The default desk-scale geometry: two 32x32 single-channel views."""
    return ModelConfig(
        views=tuple(ViewGeometry(1, side, side) for _ in range(n_views)),
        patch_size=patch_size,
        encoder=EncoderConfig(
            n_layers=n_layers, dim=dim, n_heads=n_heads, n_mem=n_mem,
            mlp_ratio=mlp_ratio, n_classes=len(CLASS_NAMES),
        ),
    )


@dataclass
class StepOutput:
    memory: MemoryState
    probs: np.ndarray          # (n_classes,)
    label: int
    attention: list[np.ndarray] | None = None  # per layer, (heads, n, n)


class IntentModel:
    """Parameter registry plus the per-frame forward step."""

    def __init__(self, config: ModelConfig, params: dict[str, K.Tensor],
                 embedders: list[ViewEmbedder]):
        self.config = config
        self.params = params
        self.embedders = embedders

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0) -> "IntentModel":
        rng = np.random.default_rng(seed)
        embedders = [
            init_view_embedder(geom, config.patch, config.encoder.dim, rng, m)
            for m, geom in enumerate(config.views)
        ]
        params = init_encoder_params(config.encoder, rng)
        for m, emb in enumerate(embedders):
            params[f"view{m}.proj"] = emb.proj
            params[f"view{m}.pos"] = emb.pos
        return cls(config, params, embedders)

    # ------------------------------------------------------------- forward

    def memory0(self) -> MemoryState:
        return init_memory(self.config.encoder, self.params)

    def check_frame(self, frame: MultiViewFrame) -> None:
        expected = self.config.views
        got = frame.geometry
        if got != expected:
            raise ContractError(
                f"frame geometry {got} does not match model views {expected}"
            )

    def step(
        self,
        tape: K.Tape | None,
        mem: MemoryState,
        frame: MultiViewFrame,
        record_attention: bool = False,
    ) -> tuple[MemoryState, K.Tensor, StepOutput]:
        """One online update: embed, prepend memory, encode, carry, predict."""
        self.check_frame(frame)
        cfg = self.config.encoder
        tokens = concat_views(tape, [
            embed_view(tape, patchify(view, self.config.patch), emb)
            for view, emb in zip(frame.views, self.embedders)
        ])
        combined = prepend_memory(tape, mem, tokens)
        sink: list[np.ndarray] | None = [] if record_attention else None
        encoded = encode_step(tape, combined, self.params, cfg, attention_sink=sink)
        if cfg.n_mem > 0:
            new_mem = carry_memory(tape, encoded, cfg, mem.t)
            head_input = new_mem.tokens
        else:
            # No-memory ablation: each frame stands alone, so the head
            # pools over every encoded token instead.
            new_mem = MemoryState(tokens=mem.tokens, t=mem.t + 1)
            head_input = encoded
        p, label = predict(tape, head_input, self.params)
        out = StepOutput(new_mem, p.values[0].copy(), label, sink)
        return new_mem, p, out

    def roll(
        self,
        tape: K.Tape | None,
        frames: list[MultiViewFrame],
        record_attention: bool = False,
        detach_before: int | None = None,
    ) -> tuple[list[K.Tensor], list[StepOutput]]:
        """Run a whole episode, threading memory; returns per-step outputs.

        ``detach_before`` is the truncation window: when set to W, the
        carried memory is detached from the graph at every W-step
        boundary, so gradients reach back at most W steps (W >= T is full
        backpropagation through time and is bitwise identical to None).
        """
        mem = self.memory0()
        p_tensors: list[K.Tensor] = []
        outputs: list[StepOutput] = []
        for t, frame in enumerate(frames):
            if (detach_before is not None and t > 0
                    and t % max(detach_before, 1) == 0):
                mem = MemoryState(tokens=mem.tokens.detach(), t=mem.t)
            mem, p, out = self.step(tape, mem, frame, record_attention)
            p_tensors.append(p)
            outputs.append(out)
        return p_tensors, outputs

    def roll_batch(
        self,
        tape: K.Tape | None,
        episodes_frames: list[list[MultiViewFrame]],
        detach_before: int | None = None,
    ) -> list[K.Tensor]:
        """Roll several same-length frame sequences through one tape.

        Token sequences are stacked as contiguous row blocks and attention
        runs blockwise, so this is numerically the per-episode recurrence,
        vectorized. Returns one (B, n_classes) probability tensor per
        timestep. Streaming inference and evaluation use :meth:`step`;
        this path exists for training throughput.
        """
        if not episodes_frames:
            raise ContractError("roll_batch needs at least one episode")
        n_eps = len(episodes_frames)
        t_steps = len(episodes_frames[0])
        for frames in episodes_frames:
            if len(frames) != t_steps:
                raise ContractError("all episodes in a batch must share length")
            self.check_frame(frames[0])
        cfg = self.config.encoder
        n_tokens = self.config.tokens_per_frame
        mem_param = self.params["memory.init"]
        mem_all: K.Tensor | None = None
        if cfg.n_mem > 0:
            zeros = K.Tensor(np.zeros((n_eps * cfg.n_mem, cfg.dim)))
            mem_all = K.add_tiled(tape, zeros, mem_param, n_eps)
        p_tensors: list[K.Tensor] = []
        for t in range(t_steps):
            if (mem_all is not None and detach_before is not None and t > 0
                    and t % max(detach_before, 1) == 0):
                mem_all = mem_all.detach()
            parts: list[K.Tensor] = [] if mem_all is None else [mem_all]
            for m, emb in enumerate(self.embedders):
                stacked = np.concatenate([
                    patchify(frames[t].views[m], self.config.patch)
                    for frames in episodes_frames
                ])
                tokens = K.matmul(tape, K.Tensor(stacked), emb.proj)
                parts.append(K.add_tiled(tape, tokens, emb.pos, n_eps))
            combined = K.interleave_blocks(tape, parts, n_eps)
            encoded = encode_step(tape, combined, self.params, cfg, n_seqs=n_eps)
            if mem_all is not None:
                mem_all = K.slice_block_rows(tape, encoded, n_eps, 0, cfg.n_mem)
                pooled = K.mean_block_rows(tape, mem_all, cfg.n_mem)
            else:
                pooled = K.mean_block_rows(tape, encoded, n_tokens)
            logits = K.add_bias(tape, K.matmul(tape, pooled, self.params["head.w"]),
                                self.params["head.b"])
            p_tensors.append(K.softmax_rows(tape, logits))
        return p_tensors

    # ---------------------------------------------------------- inventory

    def named_parameters(self) -> dict[str, K.Tensor]:
        return dict(self.params)

    def parameters(self) -> list[K.Tensor]:
        return list(self.params.values())

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    @property
    def class_names(self) -> tuple[str, ...]:
        return self.config.class_names
