"""Streaming inference sessions, attention export, throughput reporting.

A session owns a model reference and the carried memory; each fed frame
advances the state by exactly one step and yields the per-frame intent
distribution. Feeding is the only way to move time forward, so a session
can never peek at future frames. A numeric failure poisons the session:
subsequent feeds are refused instead of silently propagating NaNs.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embed import MultiViewFrame
from .encoder import extract_attention
from .errors import ContractError, NumericError, StateError
from .model import IntentModel, StepOutput


@dataclass
class AttentionMap:
    """One spatial attention grid: memory-to-patch weights for one view."""

    timestep: int
    layer: int
    view: int
    grid: np.ndarray
    head: int | None = None  # None: averaged over heads


class InferenceSession:
    """Online, feed-only inference over one camera stream."""

    def __init__(self, model: IntentModel, record_attention: bool = False):
        self.model = model
        self.record_attention = record_attention
        self.memory = model.memory0()
        self.t = 0
        self.history: list[StepOutput] = []
        self.poisoned = False

    def feed(self, frame: MultiViewFrame) -> tuple[np.ndarray, int]:
        """Advance one timestep; returns (probabilities, predicted label)."""
        if self.poisoned:
            raise StateError("session is poisoned by an earlier numeric failure")
        try:
            self.memory, _, out = self.model.step(
                None, self.memory, frame, record_attention=self.record_attention
            )
        except NumericError:
            self.poisoned = True
            raise
        self.t += 1
        self.history.append(out)
        return out.probs, out.label

    def reset(self) -> None:
        """Back to t=0 with the learned initial memory; history cleared."""
        self.memory = self.model.memory0()
        self.t = 0
        self.history = []
        self.poisoned = False

    # -------------------------------------------------------------- attention

    def attention_maps(self) -> list[AttentionMap]:
        if not self.record_attention:
            raise StateError("attention recording was not enabled for this session")
        maps: list[AttentionMap] = []
        grids_geom = self.model.config.view_grids()
        for t, out in enumerate(self.history, start=1):
            _, grids = extract_attention(
                out.attention, self.model.config.encoder, grids_geom
            )
            for layer, per_view in enumerate(grids):
                for view, grid in enumerate(per_view):
                    maps.append(AttentionMap(t, layer, view, grid))
        return maps

    def export_attention(self, out_dir) -> list[Path]:
        """Write each map as a binary PGM plus a comma-separated table.

        PGM payloads are max-normalized per map to use the full 8-bit
        range; the CSV keeps the raw weights.
        """
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written: list[Path] = []
        for amap in self.attention_maps():
            stem = f"attn_t{amap.timestep}_l{amap.layer}_v{amap.view}"
            pgm = out / f"{stem}.pgm"
            pgm.write_bytes(_to_pgm(amap.grid))
            csv = out / f"{stem}.csv"
            csv.write_text(
                "\n".join(",".join(f"{v:.12e}" for v in row) for row in amap.grid)
                + "\n",
                encoding="utf-8",
            )
            written.extend([pgm, csv])
        return written


def _to_pgm(grid: np.ndarray) -> bytes:
    peak = float(grid.max())
    scaled = np.zeros_like(grid) if peak <= 0 else grid / peak
    payload = np.round(scaled * 255.0).astype(np.uint8)
    h, w = grid.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + payload.tobytes()


# ---------------------------------------------------------------- throughput


@dataclass
class FpsReport:
    n_frames: int
    wall_seconds: float
    fps: float
    mean_latency: float
    p95_latency: float
    latencies: list[float] = field(default_factory=list)

    def __str__(self) -> str:
        return (f"{self.n_frames} frames in {self.wall_seconds:.3f}s -> "
                f"{self.fps:.2f} FPS (mean {self.mean_latency * 1e3:.2f} ms, "
                f"p95 {self.p95_latency * 1e3:.2f} ms per frame)")


def fps_report(session: InferenceSession, frames: list[MultiViewFrame]) -> FpsReport:
    """Feed every frame once, timing each step; informational only."""
    if not frames:
        raise ContractError("fps measurement needs at least one frame")
    latencies = []
    start = time.perf_counter()
    for frame in frames:
        t0 = time.perf_counter()
        session.feed(frame)
        latencies.append(time.perf_counter() - t0)
    wall = time.perf_counter() - start
    ordered = sorted(latencies)
    p95 = ordered[min(len(ordered) - 1, int(np.ceil(0.95 * len(ordered))) - 1)]
    return FpsReport(
        n_frames=len(frames),
        wall_seconds=wall,
        fps=len(frames) / wall if wall > 0 else float("inf"),
        mean_latency=float(np.mean(latencies)),
        p95_latency=float(p95),
        latencies=latencies,
    )
