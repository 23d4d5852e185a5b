"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every model quantity flows through :class:`Tensor`; every differentiable
operation appends one entry to a :class:`Tape`. The tape is an execution
log, so it is topologically ordered by construction and :func:`backward`
replays it strictly in reverse. Gradients accumulate with ``+=`` so a
parameter reused at several timesteps (memory init, shared embedders)
collects contributions from all of them.

A tape and its tensors form a single-threaded unit of work; independent
tapes may live on independent threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..errors import ContractError, NumericError


class Tensor:
    """A row-major float64 array with an optional gradient slot.

    Values are finite by construction: any NaN/Inf raises
    :class:`NumericError` immediately rather than propagating.
    """

    __slots__ = ("values", "grad", "requires_grad", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        arr = np.ascontiguousarray(values, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError(
                f"tensor {name or '<anonymous>'} contains non-finite values"
            )
        self.values = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """A non-differentiable view of the same values."""
        return Tensor(self.values, requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"


def parameter(values, name: str) -> Tensor:
    return Tensor(values, requires_grad=True, name=name)


def _wrap(values: np.ndarray, requires_grad: bool) -> Tensor:
    """Internal fast constructor for op results.

    Callers guarantee a C-contiguous float64 array and run their own
    finiteness screen; the public constructor stays fully validating.
    """
    t = object.__new__(Tensor)
    t.values = values
    t.grad = None
    t.requires_grad = requires_grad
    t.name = None
    return t


@dataclass
class TapeEntry:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    # Maps d(output) to a gradient per input (None for non-differentiable slots).
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of executed differentiable ops."""

    entries: list[TapeEntry] = field(default_factory=list)

    def record(self, op, inputs, output, backward) -> None:
        self.entries.append(TapeEntry(op, tuple(inputs), output, backward))

    def __len__(self) -> int:
        return len(self.entries)


def backward(loss: Tensor, tape: Tape) -> dict[Tensor, np.ndarray]:
    """Reverse-traverse the tape, filling gradient slots.

    Returns the freshly computed gradient map for every requires-grad
    tensor reached from ``loss``; the same gradients are also added into
    each tensor's ``grad`` slot (accumulating across calls). Tensors not
    on the tape simply receive nothing. Traversal order is the exact
    reverse of execution order, so repeated calls are bitwise
    reproducible.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    by_id: dict[int, Tensor] = {id(loss): loss}
    for entry in reversed(tape.entries):
        gout = flowing.get(id(entry.output))
        if gout is None:
            continue
        for tensor, gin in zip(entry.inputs, entry.backward(gout)):
            if gin is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            held = flowing.get(key)
            flowing[key] = gin if held is None else held + gin
            by_id[key] = tensor
    result: dict[Tensor, np.ndarray] = {}
    for key, grad in flowing.items():
        tensor = by_id[key]
        if not tensor.requires_grad:
            continue
        result[tensor] = grad
        # Assignment, not copy: nothing mutates gradient arrays in place.
        tensor.grad = grad if tensor.grad is None else tensor.grad + grad
    return result


@dataclass
class GradCheckReport:
    max_rel_err: float
    per_param: dict[str, float]
    passed: bool
    h: float
    tol: float

    def __str__(self) -> str:
        lines = [f"gradient check: max_rel_err={self.max_rel_err:.3e} "
                 f"tol={self.tol:.1e} -> {'PASS' if self.passed else 'FAIL'}"]
        for name, err in self.per_param.items():
            lines.append(f"  {name}: {err:.3e}")
        return "\n".join(lines)


def finite_diff_grad_check(
    f: Callable[[], float],
    params: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 3e-6,
) -> GradCheckReport:
    """Compare each parameter's ``grad`` slot against central differences.

    ``f`` must be a deterministic scalar function of the current parameter
    values; it is re-evaluated with each coordinate nudged by ±h. The
    analytic gradients are read from the ``grad`` slots, so run
    :func:`backward` first. Relative error per coordinate is
    ``|a - n| / max(|a|, |n|)``; coordinates where both magnitudes sit
    below ``floor`` are below the oracle's resolution (float64
    cancellation in the difference quotient) and are not scored.
    """
    if h <= 0:
        raise ContractError("h must be positive")
    per_param: dict[str, float] = {}
    worst = 0.0
    for idx, p in enumerate(params):
        if p.grad is None:
            raise ContractError(
                f"parameter {p.name or idx} has no analytic gradient to check"
            )
        flat = p.values.reshape(-1)
        analytic = p.grad.reshape(-1)
        err = 0.0
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = f()
            flat[i] = keep - h
            down = f()
            flat[i] = keep
            numeric = (up - down) / (2.0 * h)
            denom = max(abs(analytic[i]), abs(numeric))
            if denom >= floor:
                err = max(err, abs(analytic[i] - numeric) / denom)
        name = p.name or f"param{idx}"
        per_param[name] = err
        worst = max(worst, err)
    return GradCheckReport(worst, per_param, worst < tol, h, tol)
