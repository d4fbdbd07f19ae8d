"""Central finite-difference verification of autograd gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_parameter: str
    worst_index: int
    checked: int

    def ok(self, tol: float = 1e-3) -> bool:
        return self.max_rel_error <= tol


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-6) -> torch.Tensor:
    """|a - n| / max(|a|, |n|, floor), elementwise.

    ``floor`` keeps entries whose true gradient is essentially zero from
    dominating through finite-difference truncation noise.
    """
    scale = torch.maximum(analytic.abs(), numeric.abs()).clamp_min(floor)
    return (analytic - numeric).abs() / scale


def check_gradients(
    model: torch.nn.Module,
    loss_fn: Callable[[], torch.Tensor],
    step: float = 1e-4,
    floor: float = 1e-6,
) -> GradCheckResult:
    """Compare autograd gradients of ``loss_fn()`` against central differences
    for every element of every parameter of ``model`` (use float64)."""
    model.zero_grad(set_to_none=True)
    loss_fn().backward()
    analytic = {n: p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
                for n, p in model.named_parameters()}

    worst = (0.0, "", -1)
    checked = 0
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat = p.view(-1)
            numeric = torch.empty_like(flat)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = loss_fn().item()
                flat[i] = orig - step
                down = loss_fn().item()
                flat[i] = orig
                numeric[i] = (up - down) / (2 * step)
            err = relative_error(analytic[name].view(-1), numeric, floor)
            checked += flat.numel()
            idx = int(err.argmax())
            if float(err[idx]) > worst[0]:
                worst = (float(err[idx]), name, idx)
    return GradCheckResult(worst[0], worst[1], worst[2], checked)
