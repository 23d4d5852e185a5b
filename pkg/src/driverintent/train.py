"""Training: adaptive-moment optimization, segment sampling, the unrolled
recurrent loop, and the cross-validation harness.

Each batch rolls the model over every episode's sampled frames, threading
memory, and backpropagates the exponentially weighted joint loss through
the whole unrolled graph (optionally truncated to a window of W steps).
Gradients are clipped at a global norm of 1.0 — the late-step loss
weighting concentrates gradient mass at the end of episodes and small
batches otherwise see occasional spikes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fnmatch import fnmatch
from typing import Callable, Sequence

import numpy as np

from . import kernel as K
from .kernel import backend as kernel_backend
from .embed import MultiViewFrame
from .encoder import EncoderConfig
from .episodes import DatasetManifest, Episode, FoldSplit, load_episode
from .errors import ConfigurationError, ContractError, NumericError
from .losses import (
    PROB_FLOOR,
    LossBreakdown,
    cc_loss,
    cross_entropy,
    joint_loss,
    step_weights,
)
from .metrics import (
    FoldMetrics,
    MetricsReport,
    accuracy,
    contradiction_rate,
    macro_f1,
    precision_recall,
)
from .model import IntentModel, ModelConfig, ViewGeometry
from .rules import ScenarioSet, matches


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    lr_floor: float = 1e-5
    weight_decay: float = 0.05
    epochs: int = 30
    batch_size: int = 10
    n_mem: int = 4
    n_layers: int = 2
    dim: int = 64
    n_heads: int = 4
    mlp_ratio: float = 2.0
    patch_size: int = 8
    t_steps: int = 5
    truncation: int | None = None
    seed: int = 0
    freeze: tuple[str, ...] = ()
    time_weighting: str = "exponential"
    crop_pad: int = 2       # 0 disables the random-crop augmentation
    flip: bool = False      # horizontal flip with label/context swap
    grad_clip: float = 1.0
    checkpoint_every: int = 10  # epochs between periodic checkpoints (CLI)

    def __post_init__(self):
        if min(self.lr, self.batch_size, self.epochs, self.t_steps) <= 0:
            raise ConfigurationError("hyperparameters must be positive")
        if self.weight_decay < 0 or self.crop_pad < 0:
            raise ConfigurationError("weight decay and crop pad must be >= 0")


def model_config_for(train: TrainConfig, views: Sequence[ViewGeometry],
                     class_names) -> ModelConfig:
    return ModelConfig(
        views=tuple(views),
        patch_size=train.patch_size,
        encoder=EncoderConfig(
            n_layers=train.n_layers, dim=train.dim, n_heads=train.n_heads,
            n_mem=train.n_mem, mlp_ratio=train.mlp_ratio,
            n_classes=len(class_names),
        ),
        class_names=tuple(class_names),
    )


# ------------------------------------------------------------------ optimizer

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class OptimizerState:
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_model(cls, model: IntentModel) -> "OptimizerState":
        return cls(moments={
            name: (np.zeros_like(p.values), np.zeros_like(p.values))
            for name, p in model.params.items()
        })


def optimizer_step(
    params: dict[str, K.Tensor],
    state: OptimizerState,
    lr: float,
    wd: float,
    frozen: Callable[[str], bool] | None = None,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
) -> None:
    """One decoupled-weight-decay adaptive-moment update, in place.

    Parameters with no gradient contribute a zero gradient (their moments
    still decay and weight decay still applies); frozen parameters are
    untouched entirely.
    """
    state.step += 1
    for name, p in params.items():
        if frozen is not None and frozen(name):
            continue
        m, v = state.moments[name]
        if m.shape != p.values.shape:
            raise ContractError(f"moment shape {m.shape} != param {p.values.shape}")
        if not p.values.flags.c_contiguous:
            # reshape(-1) must alias the parameter for the in-place update
            p.values = np.ascontiguousarray(p.values)
        grad = p.grad if p.grad is not None else np.zeros_like(p.values)
        kernel_backend.adamw_update(
            p.values.reshape(-1), np.ascontiguousarray(grad.reshape(-1)),
            m.reshape(-1), v.reshape(-1), state.step, lr, wd, beta1, beta2, eps,
        )


def freeze_matcher(patterns: Sequence[str]) -> Callable[[str], bool] | None:
    if not patterns:
        return None

    def frozen(name: str) -> bool:
        return any(fnmatch(name, pat) for pat in patterns)

    return frozen


def clip_gradients(params: dict[str, K.Tensor], max_norm: float,
                   frozen: Callable[[str], bool] | None = None) -> float:
    """Scale all live gradients so their global norm is at most max_norm."""
    total = 0.0
    live = []
    for name, p in params.items():
        if p.grad is None or (frozen is not None and frozen(name)):
            continue
        live.append(p)
        total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0:
        factor = max_norm / norm
        for p in live:
            p.grad = p.grad * factor
    return norm


def cosine_lr(step: int, total_steps: int, base: float, floor: float = 0.0) -> float:
    """Half-cosine decay from base (step 0) to floor (final step)."""
    if not 0 <= step <= total_steps or total_steps < 1:
        raise ContractError(f"step {step} outside schedule of {total_steps}")
    return floor + 0.5 * (base - floor) * (1.0 + math.cos(math.pi * step / total_steps))


# --------------------------------------------------------------- frame sampling


def segment_bounds(n_frames: int, t_steps: int) -> list[tuple[int, int]]:
    return [(i * n_frames // t_steps, (i + 1) * n_frames // t_steps)
            for i in range(t_steps)]


def sample_frames(
    frames: Sequence[MultiViewFrame],
    t_steps: int,
    mode: str,
    rng: np.random.Generator | None = None,
) -> list[MultiViewFrame]:
    """Pick one frame per equal-duration segment.

    Training picks uniformly inside each segment; evaluation picks the
    segment center, deterministically.
    """
    n = len(frames)
    if n < t_steps:
        raise ContractError(f"{n} frames cannot fill {t_steps} segments")
    picks = []
    for lo, hi in segment_bounds(n, t_steps):
        if mode == "train":
            if rng is None:
                raise ContractError("train-mode sampling needs an rng")
            picks.append(int(rng.integers(lo, hi)))
        elif mode == "eval":
            picks.append(lo + (hi - lo) // 2)
        else:
            raise ContractError(f"unknown sampling mode {mode!r}")
    return [frames[i] for i in picks]


# ----------------------------------------------------------------- augmentation

_FLIP_LABEL = {0: 0, 1: 3, 2: 4, 3: 1, 4: 2}  # swap left/right maneuvers


def augment_episode(
    frames: list[MultiViewFrame],
    label: int,
    context: tuple[int, ...],
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> tuple[list[MultiViewFrame], int, tuple[int, ...]]:
    """Train-time augmentation: per-episode crop shift, optional flip.

    The crop offset is drawn once per episode and applied to every frame
    and view, so absolute positions jitter while frame-to-frame motion is
    preserved. Flipping mirrors the images horizontally and swaps the
    left/right maneuver labels and lane-context bits to keep semantics
    intact; it is off by default.
    """
    if cfg.flip and rng.integers(2) == 1:
        frames = [MultiViewFrame([v[:, :, ::-1].copy() for v in f.views])
                  for f in frames]
        label = _FLIP_LABEL[label]
        context = (context[1], context[0], *context[2:])
    if cfg.crop_pad > 0:
        pad = cfg.crop_pad
        dy = int(rng.integers(0, 2 * pad + 1))
        dx = int(rng.integers(0, 2 * pad + 1))
        shifted = []
        for f in frames:
            views = []
            for v in f.views:
                c, h, w = v.shape
                canvas = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=v.dtype)
                canvas[:, pad:pad + h, pad:pad + w] = v
                views.append(canvas[:, dy:dy + h, dx:dx + w])
            shifted.append(MultiViewFrame(views))
        frames = shifted
    return frames, label, context


# ------------------------------------------------------------------- training


@dataclass
class EpochStats:
    epoch: int
    joint: float
    ce: float
    cc: float
    lr: float

    def line(self) -> str:
        return (f"epoch={self.epoch}\tjoint={self.joint:.6f}\tce={self.ce:.6f}\t"
                f"cc={self.cc:.6f}\tlr={self.lr:.8f}")


def episode_loss(
    tape: K.Tape | None,
    model: IntentModel,
    frames: list[MultiViewFrame],
    label: int,
    context: tuple[int, ...],
    ruleset: ScenarioSet,
    weighting: str = "exponential",
    truncation: int | None = None,
) -> LossBreakdown:
    """Reference per-episode objective via the per-sample loss ops."""
    ps, _ = model.roll(tape, frames, detach_before=truncation)
    per_step = [
        (cross_entropy(tape, p, label), cc_loss(tape, p, context, ruleset))
        for p in ps
    ]
    return joint_loss(tape, per_step, weights=step_weights(len(ps), weighting))


def batch_objective(
    tape: K.Tape | None,
    model: IntentModel,
    batch: Sequence[tuple[list[MultiViewFrame], int, tuple[int, ...]]],
    ruleset: ScenarioSet,
    weighting: str = "exponential",
    truncation: int | None = None,
) -> tuple[K.Tensor, np.ndarray]:
    """Mean joint loss over a batch, rolled through one vectorized tape.

    Same semantics as averaging :func:`episode_loss` over the batch (the
    parity is covered by tests); returns the scalar loss tensor plus the
    summed (joint, ce, cc) components for logging.
    """
    frames = [b[0] for b in batch]
    labels = np.array([b[1] for b in batch])
    contexts = [b[2] for b in batch]
    rule_classes = np.array([r.class_index for r in ruleset.rules], dtype=np.int64)
    rule_masks = np.array(
        [[1.0 if matches(r.pattern, c) else 0.0 for c in contexts]
         for r in ruleset.rules]
    ).reshape(len(ruleset.rules), len(batch))
    ps = model.roll_batch(tape, frames, detach_before=truncation)
    weights = step_weights(len(ps), weighting)
    inv_batch = 1.0 / len(batch)
    total: K.Tensor | None = None
    joint_sum = ce_sum = cc_sum = 0.0
    for w, p in zip(weights, ps):
        pen = K.batch_step_penalty(tape, p, labels, rule_classes, rule_masks,
                                   PROB_FLOOR)
        term = K.affine(tape, K.sum_all(tape, pen), w * inv_batch, 0.0)
        total = term if total is None else K.add(tape, total, term)
        ce_sum += float(pen.values[:, 0].sum())
        cc_sum += float(pen.values[:, 1].sum())
        joint_sum += w * float(pen.values.sum())
    assert total is not None
    return total, np.array([joint_sum, ce_sum, cc_sum])


def train_model(
    model: IntentModel,
    episodes: Sequence[Episode],
    cfg: TrainConfig,
    ruleset: ScenarioSet,
    log: Callable[[str], None] | None = None,
    on_epoch: Callable[[int, IntentModel], None] | None = None,
) -> list[EpochStats]:
    """Full training run; deterministic given the config seed."""
    if not episodes:
        raise ContractError("cannot train on an empty episode list")
    rng = np.random.default_rng(cfg.seed)
    state = OptimizerState.for_model(model)
    frozen = freeze_matcher(cfg.freeze)
    n_batches = max(1, math.ceil(len(episodes) / cfg.batch_size))
    total_steps = cfg.epochs * n_batches
    history: list[EpochStats] = []
    global_step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(episodes))
        sums = np.zeros(3)
        count = 0
        for b in range(n_batches):
            batch = [episodes[int(i)] for i in
                     order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
            if not batch:
                continue
            model.zero_grads()
            prepared = []
            for ep in batch:
                frames = sample_frames(ep.frames, cfg.t_steps, "train", rng)
                prepared.append(augment_episode(frames, ep.label, ep.context,
                                                cfg, rng))
            tape = K.Tape()
            try:
                total, component_sums = batch_objective(
                    tape, model, prepared, ruleset, cfg.time_weighting,
                    cfg.truncation,
                )
            except NumericError as exc:
                ids = [ep.episode_id for ep in batch]
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, batch {b} "
                    f"(episodes {ids}): {exc}"
                ) from exc
            K.backward(total, tape)
            sums += component_sums
            count += len(batch)
            lr = cosine_lr(global_step, total_steps, cfg.lr, cfg.lr_floor)
            clip_gradients(model.params, cfg.grad_clip, frozen)
            optimizer_step(model.params, state, lr, cfg.weight_decay, frozen)
            global_step += 1
        stats = EpochStats(epoch, sums[0] / count, sums[1] / count,
                           sums[2] / count, lr)
        history.append(stats)
        if log is not None:
            log(stats.line())
        if on_epoch is not None:
            on_epoch(epoch, model)
    return history


# ----------------------------------------------------------------- evaluation


@dataclass
class EvalResult:
    final_preds: list[int]
    step_preds: list[list[int]]
    labels: list[int]
    contexts: list[tuple[int, ...]]

    def metrics(self, ruleset: ScenarioSet, n_classes: int) -> FoldMetrics:
        return FoldMetrics(
            accuracy=accuracy(self.final_preds, self.labels),
            macro_f1=macro_f1(self.final_preds, self.labels, n_classes),
            contradiction_rate=contradiction_rate(
                self.final_preds, self.contexts, ruleset
            ),
            per_class=precision_recall(self.final_preds, self.labels, n_classes),
        )

    def stepwise_contradiction_rate(self, ruleset: ScenarioSet) -> float:
        preds = [p for steps in self.step_preds for p in steps]
        contexts = [c for c, steps in zip(self.contexts, self.step_preds)
                    for _ in steps]
        return contradiction_rate(preds, contexts, ruleset)


def evaluate(model: IntentModel, episodes: Sequence[Episode],
             t_steps: int) -> EvalResult:
    """Deterministic evaluation: center-of-segment frames, no augmentation."""
    result = EvalResult([], [], [], [])
    for ep in episodes:
        frames = sample_frames(ep.frames, t_steps, "eval")
        _, outs = model.roll(None, frames)
        result.step_preds.append([o.label for o in outs])
        result.final_preds.append(outs[-1].label)
        result.labels.append(ep.label)
        result.contexts.append(ep.context)
    return result


# ------------------------------------------------------------------- k-fold CV


def run_cv(
    dataset_dir,
    manifest: DatasetManifest,
    split: FoldSplit,
    cfg: TrainConfig,
    ruleset: ScenarioSet,
    log: Callable[[str], None] | None = None,
) -> tuple[MetricsReport, list[IntentModel]]:
    """Train one model per held-out fold and aggregate the metrics."""
    by_id = {e.episode_id: e for e in manifest.entries}
    model_cfg = model_config_for(cfg, manifest.views, manifest.class_names)
    folds: list[FoldMetrics] = []
    models: list[IntentModel] = []
    for fold in range(split.n_folds):
        train_eps = [load_episode(dataset_dir, by_id[i])
                     for i in split.train_ids(fold)]
        test_eps = [load_episode(dataset_dir, by_id[i])
                    for i in split.fold_ids[fold]]
        fold_seed = int(np.random.SeedSequence(
            entropy=cfg.seed, spawn_key=(fold,)).generate_state(1)[0])
        model = IntentModel.create(model_cfg, seed=fold_seed)
        try:
            train_model(model, train_eps, replace(cfg, seed=fold_seed), ruleset,
                        log=log)
        except NumericError as exc:
            raise NumericError(f"fold {fold}: {exc}") from exc
        result = evaluate(model, test_eps, cfg.t_steps)
        folds.append(result.metrics(ruleset, len(manifest.class_names)))
        models.append(model)
        if log is not None:
            log(f"fold={fold}\taccuracy={folds[-1].accuracy:.6f}\t"
                f"macro_f1={folds[-1].macro_f1:.6f}")
    return MetricsReport(folds, manifest.class_names), models
