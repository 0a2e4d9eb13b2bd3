"""Analytic vs finite-difference gradients on sampled trainable coordinates (float64).

The numeric side is the fourth-order central difference
``(f(x-2h) - 8f(x-h) + 8f(x+h) - f(x+2h)) / 12h``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np
import torch

from .errors import ConfigError
from .features import PairBatch
from .head import contrastive_loss
from .logs import emit
from .network import ConsorModel


@dataclass(frozen=True)
class CoordinateCheck:
    parameter: str
    index: Tuple[int, ...]
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        return abs(self.analytic - self.numeric) / max(abs(self.analytic), abs(self.numeric), 1e-8)


@dataclass
class GradCheckReport:
    step: float
    tol: float
    checks: List[CoordinateCheck] = field(default_factory=list)

    @property
    def n_coords(self) -> int:
        return len(self.checks)

    @property
    def max_rel_error(self) -> float:
        return max((check.rel_error for check in self.checks), default=0.0)

    @property
    def failures(self) -> List[CoordinateCheck]:
        return [check for check in self.checks if check.rel_error >= self.tol]

    @property
    def passed(self) -> bool:
        return not self.failures

    def parameters_covered(self) -> List[str]:
        return sorted({check.parameter for check in self.checks})

    def to_mapping(self) -> dict:
        return {
            "n_coords": self.n_coords,
            "step": self.step,
            "tol": self.tol,
            "max_rel_error": self.max_rel_error,
            "passed": self.passed,
            "failures": [
                {
                    "parameter": f.parameter,
                    "index": list(f.index),
                    "analytic": f.analytic,
                    "numeric": f.numeric,
                    "rel_error": f.rel_error,
                }
                for f in self.failures
            ],
        }


def batch_loss(model: ConsorModel, batch: PairBatch) -> torch.Tensor:
    return contrastive_loss(model(batch).logits, batch.labels)


def central_difference(f: Callable[[float], float], step: float) -> float:
    """Fourth-order central difference of ``f`` at 0."""

    return (f(-2 * step) - 8 * f(-step) + 8 * f(step) - f(2 * step)) / (12 * step)


def grad_check(
    model: ConsorModel,
    batch: PairBatch,
    n_coords: int = 200,
    step: float = 1e-3,
    tol: float = 1e-4,
    seed: int = 0,
    param_filter: Optional[Callable[[str], bool]] = None,
    loss_fn: Callable[[ConsorModel, PairBatch], torch.Tensor] = batch_loss,
) -> GradCheckReport:
    """Compare backprop against the fourth-order central difference at ``step``.

    Gradients are read from ``param.grad`` after ``backward()``, so tensor hooks registered on
    parameters take part in the comparison.
    """

    params = [
        (name, param)
        for name, param in model.named_parameters()
        if param.requires_grad and (param_filter is None or param_filter(name))
    ]
    if any(param.dtype != torch.float64 for _, param in params):
        raise ConfigError("grad_check needs a float64 model and batch; convert with .double()")
    report = GradCheckReport(step=step, tol=tol)
    total = sum(param.numel() for _, param in params)
    if n_coords <= 0 or total == 0:
        return report

    model.eval()
    model.zero_grad(set_to_none=True)
    loss_fn(model, batch).backward()
    analytic = {name: (param.grad.detach().clone() if param.grad is not None else torch.zeros_like(param)) for name, param in params}
    model.zero_grad(set_to_none=True)

    rng = np.random.default_rng(seed)
    picks = np.sort(rng.choice(total, size=min(n_coords, total), replace=False))
    offsets = np.cumsum([0] + [param.numel() for _, param in params])

    with torch.no_grad():
        for flat in picks:
            slot = int(np.searchsorted(offsets, flat, side="right") - 1)
            name, param = params[slot]
            local = int(flat - offsets[slot])
            view = param.view(-1)
            original = view[local].item()

            def shifted(delta: float) -> float:
                view[local] = original + delta
                return float(loss_fn(model, batch))

            numeric = central_difference(shifted, step)
            view[local] = original
            index = tuple(int(i) for i in np.unravel_index(local, tuple(param.shape))) if param.dim() else ()
            report.checks.append(CoordinateCheck(name, index, float(analytic[name].view(-1)[local]), numeric))

    emit("gradcheck.done", n_coords=report.n_coords, max_rel_error=report.max_rel_error, passed=report.passed)
    return report
