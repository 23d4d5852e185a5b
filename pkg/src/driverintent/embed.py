"""Multi-view patch embeddings.

Each camera view is cut into a grid of square patches, flattened, and
linearly projected to the shared token width; a learned per-view position
embedding is added and the views are concatenated into one token sequence.
Projection and position parameters are per view — views are never shared.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernel as K
from .errors import ConfigurationError, ContractError, DimensionError

# Patch rows flatten pixels row-major with channels innermost, i.e.
# (py, px, c) order. Fixed so serialized models are reproducible bit for bit.


@dataclass(frozen=True)
class ViewGeometry:
    channels: int
    height: int
    width: int

    def __post_init__(self):
        if min(self.channels, self.height, self.width) < 1:
            raise ConfigurationError(f"degenerate view geometry {self}")


@dataclass(frozen=True)
class PatchConfig:
    """Square patch size plus derived per-view patch counts."""

    patch_size: int

    def __post_init__(self):
        if self.patch_size < 1:
            raise ConfigurationError("patch size must be >= 1")

    def grid(self, geom: ViewGeometry) -> tuple[int, int]:
        p = self.patch_size
        if geom.height % p or geom.width % p:
            raise ConfigurationError(
                f"view {geom.height}x{geom.width} not divisible by patch size {p}"
            )
        return geom.height // p, geom.width // p

    def n_patches(self, geom: ViewGeometry) -> int:
        gh, gw = self.grid(geom)
        return gh * gw

    def patch_dim(self, geom: ViewGeometry) -> int:
        return self.patch_size * self.patch_size * geom.channels


class MultiViewFrame:
    """One timestep's images across all camera views.

    Pixel payloads are float32 in [0, 1] (the raster storage type);
    embedding promotes them to float64.
    """

    __slots__ = ("views",)

    def __init__(self, views: Sequence[np.ndarray]):
        if not views:
            raise ContractError("a frame needs at least one view")
        checked = []
        for i, v in enumerate(views):
            arr = np.ascontiguousarray(v, dtype=np.float32)
            if arr.ndim != 3:
                raise DimensionError(f"view {i} must be (C, H, W), got {arr.shape}")
            if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
                raise ContractError(f"view {i} pixels must be finite and in [0, 1]")
            checked.append(arr)
        self.views = checked

    @property
    def geometry(self) -> tuple[ViewGeometry, ...]:
        return tuple(ViewGeometry(*v.shape) for v in self.views)


def patchify(image: np.ndarray, config: PatchConfig) -> np.ndarray:
    """Cut a (C, H, W) image into a (N, P*P*C) float64 patch matrix.

    Patches run row-major over the grid; within a patch, pixels run
    row-major with the channel values of each pixel adjacent.
    """
    if image.ndim != 3:
        raise DimensionError(f"image must be (C, H, W), got {image.shape}")
    c, h, w = image.shape
    p = config.patch_size
    gh, gw = config.grid(ViewGeometry(c, h, w))
    blocks = image.astype(np.float64).reshape(c, gh, p, gw, p)
    return np.ascontiguousarray(
        blocks.transpose(1, 3, 2, 4, 0).reshape(gh * gw, p * p * c)
    )


def unpatchify(patches: np.ndarray, geom: ViewGeometry, config: PatchConfig) -> np.ndarray:
    """Inverse of :func:`patchify`; reassembles the (C, H, W) image."""
    p = config.patch_size
    gh, gw = config.grid(geom)
    if patches.shape != (gh * gw, p * p * geom.channels):
        raise DimensionError(
            f"patch matrix {patches.shape} does not match geometry {geom}"
        )
    blocks = patches.reshape(gh, gw, p, p, geom.channels)
    return np.ascontiguousarray(
        blocks.transpose(4, 0, 2, 1, 3).reshape(geom.channels, geom.height, geom.width)
    )


@dataclass
class ViewEmbedder:
    """Per-view projection and learned position embedding."""

    proj: K.Tensor  # (P*P*C, D)
    pos: K.Tensor   # (N, D)

    @property
    def dim(self) -> int:
        return self.proj.shape[1]

    def param_count(self) -> int:
        return self.proj.size + self.pos.size


def init_view_embedder(
    geom: ViewGeometry, config: PatchConfig, dim: int, rng: np.random.Generator,
    view_index: int,
) -> ViewEmbedder:
    # Position embeddings are learned, initialized N(0, 0.02^2); only patch
    # tokens get them (memory tokens are position-free).
    pdim = config.patch_dim(geom)
    n = config.n_patches(geom)
    proj = K.parameter(rng.normal(0.0, 0.02, size=(pdim, dim)),
                       name=f"view{view_index}.proj")
    pos = K.parameter(rng.normal(0.0, 0.02, size=(n, dim)),
                      name=f"view{view_index}.pos")
    return ViewEmbedder(proj=proj, pos=pos)


def embed_view(tape: K.Tape | None, patches: np.ndarray, embedder: ViewEmbedder) -> K.Tensor:
    """Project patch rows to tokens and add the position embedding."""
    if patches.shape[1] != embedder.proj.shape[0]:
        raise DimensionError(
            f"patch width {patches.shape[1]} does not match projection "
            f"input {embedder.proj.shape[0]}"
        )
    if patches.shape[0] != embedder.pos.shape[0]:
        raise DimensionError(
            f"{patches.shape[0]} patches vs {embedder.pos.shape[0]} position rows"
        )
    tokens = K.matmul(tape, K.Tensor(patches), embedder.proj)
    return K.add(tape, tokens, embedder.pos)


def concat_views(tape: K.Tape | None, view_tokens: Sequence[K.Tensor]) -> K.Tensor:
    """Join per-view token blocks into the combined sequence, in view order."""
    return K.concat_tokens(tape, view_tokens)
