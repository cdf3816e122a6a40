"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class ParamCheck:
    name: str
    max_rel_error: float
    checked_entries: int


@dataclass
class GradCheckReport:
    tolerance: float
    params: list[ParamCheck] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((p.max_rel_error for p in self.params), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    @property
    def failures(self) -> list[ParamCheck]:
        return [p for p in self.params if p.max_rel_error > self.tolerance]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """Max-norm relative error, scaled by the larger of the two gradients.

    Normalising per parameter (rather than per entry) keeps entries whose
    true gradient is ~0 from reporting spurious huge ratios.
    """
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-4,
    tolerance: float = 1e-4,
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    names: Optional[Sequence[str]] = None,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Compare ``backward()`` gradients of ``f`` with central differences.

    ``f`` must rebuild its graph from the current parameter values on every
    call. With ``max_entries`` set, that many randomly chosen coordinates per
    parameter are perturbed instead of all of them. Gradients smaller than
    ``floor`` in max-norm are compared in absolute terms, since central
    differences cannot resolve them below round-off.
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.grad = None
    loss = f()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    report = GradCheckReport(tolerance=tolerance)
    for k, p in enumerate(params):
        flat = p.data.reshape(-1)
        if max_entries is None or max_entries >= flat.size:
            coords = np.arange(flat.size)
        else:
            coords = rng.choice(flat.size, size=max_entries, replace=False)
        numeric = np.empty(len(coords))
        for j, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + step
            plus = float(f().data)
            flat[c] = orig - step
            minus = float(f().data)
            flat[c] = orig
            numeric[j] = (plus - minus) / (2.0 * step)
        label = (names[k] if names else None) or p.name or f"param{k}"
        err = relative_error(analytic[k].reshape(-1)[coords], numeric, floor)
        report.params.append(ParamCheck(label, err, len(coords)))
    for p in params:
        p.grad = None
    return report
