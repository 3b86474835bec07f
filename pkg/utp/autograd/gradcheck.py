"""Finite-difference verification of autodiff gradients."""

import logging
from typing import Callable, List, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, Field

from utp.autograd.tensor import Tensor
from utp.core.exceptions import NonDeterministicError, NonScalarError

logger = logging.getLogger(__name__)


class GradcheckReport(BaseModel):
    """Outcome of a gradient check."""

    max_relative_error: float = Field(..., description="Largest per-entry relative error")
    worst_entry: Optional[str] = Field(None, description="Tensor index and flat offset of the worst entry")
    checked_entries: int = Field(..., description="Number of entries compared")
    tol: float = Field(..., description="Pass threshold")
    passed: bool = Field(..., description="max_relative_error < tol")


def _evaluate(f: Callable[..., Tensor], xs: List[Tensor]) -> float:
    out = f(*xs)
    if out.size != 1:
        raise NonScalarError(f"gradcheck needs a scalar-valued function, got shape {out.shape}")
    return out.item()


def gradcheck(
    f: Callable[..., Tensor],
    x: Union[Tensor, Sequence[Tensor]],
    h: float = 1e-5,
    tol: float = 1e-5,
    floor: float = 1e-6,
    max_entries_per_tensor: Optional[int] = None,
    seed: int = 0,
    exhaustive_below: int = 0,
) -> GradcheckReport:
    """
    Compare autodiff gradients of ``f`` with central finite differences.

    ``f`` is called as ``f(*xs)`` and must return a scalar Tensor built from
    ``xs``. Each checked entry contributes |a − n| / max(|a| + |n|, floor);
    the floor keeps near-zero gradients from dominating through rounding noise.
    ``max_entries_per_tensor`` samples that many entries (seeded) from each
    input instead of checking all of them; inputs with at most
    ``exhaustive_below`` entries are always checked in full.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)

    first = _evaluate(f, xs)
    second = _evaluate(f, xs)
    if first != second:
        raise NonDeterministicError(f"two forward passes disagree: {first!r} vs {second!r}")

    for t in xs:
        t.zero_grad()
    loss = f(*xs)
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in xs]

    rng = np.random.default_rng(seed)
    worst = 0.0
    worst_entry = None
    checked = 0
    for ti, t in enumerate(xs):
        flat = t.data.reshape(-1)
        sampled = max_entries_per_tensor is not None and flat.size > max(max_entries_per_tensor, exhaustive_below)
        if sampled:
            entries = np.sort(rng.choice(flat.size, size=max_entries_per_tensor, replace=False))
        else:
            entries = np.arange(flat.size)
        for i in entries:
            orig = flat[i]
            flat[i] = orig + h
            plus = _evaluate(f, xs)
            flat[i] = orig - h
            minus = _evaluate(f, xs)
            flat[i] = orig
            numeric = (plus - minus) / (2.0 * h)
            a = analytic[ti].reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a) + abs(numeric), floor)
            checked += 1
            if err > worst:
                worst = err
                worst_entry = f"input {ti} entry {int(i)}"

    report = GradcheckReport(
        max_relative_error=float(worst),
        worst_entry=worst_entry,
        checked_entries=checked,
        tol=tol,
        passed=bool(worst < tol),
    )
    logger.debug(f"gradcheck over {checked} entries: max relative error {worst:.3e}")
    return report
