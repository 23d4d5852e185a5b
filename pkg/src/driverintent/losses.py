"""Classification and context-consistency objectives.

Per timestep the model pays the usual cross-entropy plus a context
penalty: for every contradiction rule fired by the sample's traffic
context, probability mass on the contradicted maneuver costs
``-log(1 - p_r)``. Rules contribute independently, so a maneuver matched
by two fired rules is penalized twice.

Timesteps are combined with weights ``exp(-(T - t))`` — the final step
weighs 1 and earlier steps decay geometrically — so confident late
predictions dominate while early correctness still pays off.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from . import kernel as K
from .errors import ContractError
from .rules import ScenarioSet, validate_context

PROB_FLOOR = 1e-12  # clamp applied before every log


def _scalar(value: float) -> K.Tensor:
    return K.Tensor([[float(value)]])


def cross_entropy(tape: K.Tape | None, p: K.Tensor, y: int) -> K.Tensor:
    """-log p_y with the probability clamped at the floor."""
    if p.values.ndim != 2 or p.shape[0] != 1:
        raise ContractError(f"expected a (1, n) probability row, got {p.shape}")
    if not 0 <= y < p.shape[1]:
        raise ContractError(f"label {y} outside {p.shape[1]} classes")
    picked = K.clamp_min(tape, K.pick(tape, p, 0, y), PROB_FLOOR)
    return K.scale(tape, K.log(tape, picked), -1.0)


def cc_loss(
    tape: K.Tape | None, p: K.Tensor, context: Sequence[int], ruleset: ScenarioSet
) -> K.Tensor:
    """Context-consistency penalty: -sum over fired rules of log(1 - p_r)."""
    if p.values.ndim != 2 or p.shape[0] != 1:
        raise ContractError(f"expected a (1, n) probability row, got {p.shape}")
    c = validate_context(context, ruleset.context_dim)
    total: K.Tensor | None = None
    for rule in ruleset.matched_rules(c):
        if rule.class_index >= p.shape[1]:
            raise ContractError(
                f"rule class {rule.class_index} outside {p.shape[1]} classes"
            )
        complement = K.affine(tape, K.pick(tape, p, 0, rule.class_index), -1.0, 1.0)
        term = K.scale(tape, K.log(tape, K.clamp_min(tape, complement, PROB_FLOOR)), -1.0)
        total = term if total is None else K.add(tape, total, term)
    return total if total is not None else _scalar(0.0)


def step_weights(n_steps: int, mode: str = "exponential") -> list[float]:
    """Per-timestep loss weights; the last step always weighs exactly 1."""
    if n_steps < 1:
        raise ContractError("need at least one timestep")
    if mode == "exponential":
        return [math.exp(-(n_steps - t)) for t in range(1, n_steps + 1)]
    if mode == "uniform":
        return [1.0] * n_steps
    raise ContractError(f"unknown weighting mode {mode!r}")


@dataclass
class LossBreakdown:
    """Per-timestep components and the combined scalar for one sample."""

    ce: list[float]
    cc: list[float]
    weights: list[float]
    total: float
    total_tensor: K.Tensor

    @property
    def n_steps(self) -> int:
        return len(self.ce)


def joint_loss(
    tape: K.Tape | None,
    per_step: Sequence[tuple[K.Tensor, K.Tensor]],
    weights: Sequence[float] | None = None,
) -> LossBreakdown:
    """Combine per-step (ce, cc) scalars into the weighted joint objective.

    ``weights`` defaults to the exponential schedule; passing explicit
    weights supports the uniform-weighting ablation.
    """
    if not per_step:
        raise ContractError("joint_loss needs at least one timestep")
    w = list(weights) if weights is not None else step_weights(len(per_step))
    if len(w) != len(per_step):
        raise ContractError(f"{len(w)} weights for {len(per_step)} steps")
    total: K.Tensor | None = None
    ce_vals, cc_vals = [], []
    for weight, (ce_t, cc_t) in zip(w, per_step):
        ce_vals.append(ce_t.item())
        cc_vals.append(cc_t.item())
        term = K.scale(tape, K.add(tape, ce_t, cc_t), weight)
        total = term if total is None else K.add(tape, total, term)
    assert total is not None
    return LossBreakdown(ce_vals, cc_vals, w, total.item(), total)
