"""Synthetic multi-view episodes, dataset serialization, and fold splits.

Each episode is a short two-view "drive": the cabin view shows a Gaussian
blob whose horizontal drift rate encodes the upcoming maneuver, and the
road view shows vertical stripes whose phase advances at the same rate,
with the traffic-context bits rendered as small corner markers. Heavy
pixel noise makes any single frame weakly informative — the drift only
becomes readable by integrating several frames — which is what makes the
memory recurrence earn its keep.

Labels are drawn uniformly; contexts are drawn uniformly over the
contexts that do NOT contradict the label under the active ruleset, so
generated data is consistent by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .embed import MultiViewFrame, ViewGeometry
from .errors import ConfigurationError, ContractError, FormatError
from .rules import CLASS_NAMES, ScenarioSet

# px/frame horizontal drift per maneuver, in class order.
DRIFT_SPEEDS = (0.0, -0.75, -1.5, 0.75, 1.5)


@dataclass(frozen=True)
class GenConfig:
    n_frames: int = 10
    height: int = 32
    width: int = 32
    n_views: int = 2
    blob_sigma: float = 3.0
    # Peak blob intensity. Calibrated against the pixel noise so one frame
    # pins the blob's position only coarsely; the drift rate (the class
    # signal) only becomes readable across several frames.
    blob_amplitude: float = 0.4
    stripe_period: float = 8.0
    marker_size: int = 4
    noise_sigma: float = 0.25
    class_names: tuple[str, ...] = CLASS_NAMES
    drift_speeds: tuple[float, ...] = DRIFT_SPEEDS

    def __post_init__(self):
        if self.n_frames < 1:
            raise ConfigurationError("episodes need at least one frame")
        if self.n_views not in (1, 2):
            raise ConfigurationError("generator renders 1 or 2 views")
        if len(self.drift_speeds) != len(self.class_names):
            raise ConfigurationError("one drift speed per class")

    @property
    def views(self) -> tuple[ViewGeometry, ...]:
        return tuple(ViewGeometry(1, self.height, self.width)
                     for _ in range(self.n_views))


@dataclass
class Episode:
    frames: list[MultiViewFrame]
    label: int
    context: tuple[int, ...]
    episode_id: int
    seed: int

    @property
    def n_frames(self) -> int:
        return len(self.frames)


def _render_cabin(cfg: GenConfig, center_x: float) -> np.ndarray:
    ys = np.arange(cfg.height)[:, None]
    xs = np.arange(cfg.width)[None, :]
    cy = cfg.height / 2.0
    blob = cfg.blob_amplitude * np.exp(
        -((xs - center_x) ** 2 + (ys - cy) ** 2) / (2.0 * cfg.blob_sigma**2)
    )
    return blob


def _render_road(cfg: GenConfig, phase: float, context: Sequence[int]) -> np.ndarray:
    xs = np.arange(cfg.width)[None, :]
    img = np.tile(0.5 * (1.0 + np.sin(2.0 * np.pi * (xs - phase)
                                       / cfg.stripe_period)),
                  (cfg.height, 1))
    # Context bits as solid corner markers: top-left, top-right, bottom-left.
    m = cfg.marker_size
    corners = (
        (slice(0, m), slice(0, m)),
        (slice(0, m), slice(cfg.width - m, cfg.width)),
        (slice(cfg.height - m, cfg.height), slice(0, m)),
    )
    for bit, corner in zip(context, corners):
        img[corner] = float(bit)
    return img


def draw_label_context(
    rng: np.random.Generator, cfg: GenConfig, ruleset: ScenarioSet
) -> tuple[int, tuple[int, ...]]:
    """Uniform label, then uniform context among non-contradicting ones."""
    label = int(rng.integers(len(cfg.class_names)))
    allowed = ruleset.consistent_contexts(label)
    if not allowed:
        raise ConfigurationError(
            f"ruleset contradicts {cfg.class_names[label]!r} in every context"
        )
    context = allowed[int(rng.integers(len(allowed)))]
    return label, context


def generate_episode(
    seed: int, cfg: GenConfig, ruleset: ScenarioSet, episode_id: int = 0
) -> Episode:
    """Deterministic episode synthesis from a single integer seed."""
    rng = np.random.default_rng(seed)
    label, context = draw_label_context(rng, cfg, ruleset)
    speed = cfg.drift_speeds[label]
    # Random stripe-phase origin per episode: the absolute phase carries no
    # class information, only its frame-to-frame advance does.
    phase0 = float(rng.uniform(0.0, cfg.stripe_period))
    frames = []
    half = cfg.n_frames / 2.0
    for t in range(1, cfg.n_frames + 1):
        offset = speed * (t - half)
        views = [_render_cabin(cfg, cfg.width / 2.0 + offset)]
        if cfg.n_views == 2:
            views.append(_render_road(cfg, phase0 + offset, context))
        noisy = [
            np.clip(v + rng.normal(0.0, cfg.noise_sigma, size=v.shape), 0.0, 1.0)
            .astype(np.float32)[None, :, :]
            for v in views
        ]
        frames.append(MultiViewFrame(noisy))
    return Episode(frames, label, context, episode_id, seed)


def episode_seed(base_seed: int, index: int) -> int:
    """A stable per-episode seed derived from the dataset seed."""
    ss = np.random.SeedSequence(entropy=base_seed, spawn_key=(index,))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def generate_dataset(
    n: int, cfg: GenConfig, ruleset: ScenarioSet, base_seed: int = 0
) -> list[Episode]:
    return [
        generate_episode(episode_seed(base_seed, i), cfg, ruleset, episode_id=i)
        for i in range(n)
    ]


# --------------------------------------------------------------- raster I/O

_RASTER_MAGIC = b"EPVR"
_DTYPE_F32 = 1


def write_raster(path, frames: np.ndarray) -> None:
    """Write a (T, C, H, W) float32 stack: magic, dims, dtype tag, payload."""
    arr = np.ascontiguousarray(frames, dtype="<f4")
    if arr.ndim != 4:
        raise ContractError(f"raster stack must be 4-D, got {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(_RASTER_MAGIC)
        fh.write(np.array([_DTYPE_F32, *arr.shape], dtype="<u4").tobytes())
        fh.write(arr.tobytes())


def read_raster(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FormatError("raster file missing", path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _RASTER_MAGIC:
            raise FormatError(f"bad raster magic {magic!r}", path)
        head = fh.read(20)
        if len(head) != 20:
            raise FormatError("truncated raster header", path)
        dtype_tag, t, c, h, w = np.frombuffer(head, dtype="<u4")
        if dtype_tag != _DTYPE_F32:
            raise FormatError(f"unsupported dtype tag {dtype_tag}", path)
        count = int(t) * int(c) * int(h) * int(w)
        payload = fh.read(4 * count)
        if len(payload) != 4 * count:
            raise FormatError(
                f"truncated raster payload ({len(payload)} of {4 * count} bytes)",
                path,
            )
        if fh.read(1):
            raise FormatError("trailing bytes after raster payload", path)
    return np.frombuffer(payload, dtype="<f4").reshape(int(t), int(c), int(h), int(w))


# ----------------------------------------------------------------- manifest

MANIFEST_NAME = "manifest.txt"
_MANIFEST_MAGIC = "dataset-manifest 1"


@dataclass
class ManifestEntry:
    episode_id: int
    label: int
    context: tuple[int, ...]
    seed: int
    view_files: tuple[str, ...]


@dataclass
class DatasetManifest:
    version: str
    class_names: tuple[str, ...]
    context_dim: int
    views: tuple[ViewGeometry, ...]
    n_frames: int
    rules_path: str
    entries: list[ManifestEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)


def write_dataset(
    episodes: Sequence[Episode],
    out_dir,
    cfg: GenConfig,
    rules_path: str = "",
) -> DatasetManifest:
    """Store per-view raster stacks plus the text manifest; manifest last."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest(
        version="1",
        class_names=cfg.class_names,
        context_dim=len(episodes[0].context) if episodes else 3,
        views=cfg.views,
        n_frames=cfg.n_frames,
        rules_path=str(rules_path),
    )
    for ep in episodes:
        files = []
        for m in range(len(ep.frames[0].views)):
            stack = np.stack([fr.views[m] for fr in ep.frames])
            name = f"ep_{ep.episode_id}_view{m}.bin"
            write_raster(out / name, stack)
            files.append(name)
        manifest.entries.append(ManifestEntry(
            ep.episode_id, ep.label, ep.context, ep.seed, tuple(files)
        ))
    lines = [
        _MANIFEST_MAGIC,
        f"classes = {','.join(manifest.class_names)}",
        f"context_dim = {manifest.context_dim}",
        "views = " + ";".join(f"{g.channels}x{g.height}x{g.width}"
                              for g in manifest.views),
        f"frames = {manifest.n_frames}",
        f"rules = {manifest.rules_path}",
        f"count = {len(manifest.entries)}",
    ]
    for e in manifest.entries:
        ctx = "".join(str(b) for b in e.context)
        lines.append(f"{e.episode_id}\t{manifest.class_names[e.label]}\t{ctx}\t"
                     f"{e.seed}\t{','.join(e.view_files)}")
    (out / MANIFEST_NAME).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def read_manifest(dataset_dir) -> DatasetManifest:
    path = Path(dataset_dir) / MANIFEST_NAME
    if not path.exists():
        raise FormatError("missing manifest", path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != _MANIFEST_MAGIC:
        raise FormatError("bad manifest magic line", path)
    fields: dict[str, str] = {}
    body_start = 1
    for i, line in enumerate(lines[1:], start=1):
        if "=" not in line:
            body_start = i
            break
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip()
        body_start = i + 1
    try:
        class_names = tuple(fields["classes"].split(","))
        context_dim = int(fields["context_dim"])
        views = tuple(ViewGeometry(*(int(x) for x in spec.split("x")))
                      for spec in fields["views"].split(";"))
        n_frames = int(fields["frames"])
        rules_path = fields.get("rules", "")
        count = int(fields["count"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad manifest field: {exc}", path) from exc
    manifest = DatasetManifest("1", class_names, context_dim, views, n_frames,
                               rules_path)
    label_index = {name: i for i, name in enumerate(class_names)}
    for line in lines[body_start:]:
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise FormatError(f"bad manifest row {line!r}", path)
        eid, label_name, ctx, seed, files = parts
        if label_name not in label_index:
            raise FormatError(f"unknown label {label_name!r}", path)
        if len(ctx) != context_dim or set(ctx) - {"0", "1"}:
            raise FormatError(f"bad context field {ctx!r}", path)
        manifest.entries.append(ManifestEntry(
            int(eid), label_index[label_name], tuple(int(b) for b in ctx),
            int(seed), tuple(files.split(",")),
        ))
    if len(manifest.entries) != count:
        raise FormatError(
            f"manifest count {count} != {len(manifest.entries)} rows", path
        )
    return manifest


def load_episode(dataset_dir, entry: ManifestEntry) -> Episode:
    stacks = [read_raster(Path(dataset_dir) / name) for name in entry.view_files]
    n_frames = stacks[0].shape[0]
    frames = [
        MultiViewFrame([stack[t] for stack in stacks]) for t in range(n_frames)
    ]
    return Episode(frames, entry.label, entry.context, entry.episode_id, entry.seed)


def read_dataset(dataset_dir) -> tuple[DatasetManifest, list[Episode]]:
    manifest = read_manifest(dataset_dir)
    episodes = [load_episode(dataset_dir, e) for e in manifest.entries]
    return manifest, episodes


# -------------------------------------------------------------- fold splits

@dataclass
class FoldSplit:
    n_folds: int
    fold_ids: list[list[int]]

    def train_ids(self, fold: int) -> list[int]:
        return [eid for f, ids in enumerate(self.fold_ids) if f != fold
                for eid in ids]


def kfold_split(manifest: DatasetManifest, n_folds: int, seed: int = 0) -> FoldSplit:
    """Stratified k-fold: seeded shuffle per class, then round-robin.

    The round-robin cursor runs on across classes so both total fold sizes
    and per-class fold counts differ by at most one.
    """
    n = len(manifest.entries)
    if n_folds < 2:
        raise ConfigurationError("need at least two folds")
    if n < n_folds:
        raise ConfigurationError(f"{n} episodes cannot fill {n_folds} folds")
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[int]] = {}
    for e in manifest.entries:
        by_class.setdefault(e.label, []).append(e.episode_id)
    folds: list[list[int]] = [[] for _ in range(n_folds)]
    cursor = 0
    for label in sorted(by_class):
        ids = by_class[label]
        order = rng.permutation(len(ids))
        for k in order:
            folds[cursor % n_folds].append(ids[int(k)])
            cursor += 1
    return FoldSplit(n_folds, folds)
