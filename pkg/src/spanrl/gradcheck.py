"""Finite-difference gradient checking shared by the training losses.

Used on tiny model configurations where a full sweep over every parameter
is cheap. ``loss_fn`` must recompute the loss from scratch on every call.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch

from .model import SpanPolicy


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    n_params: int

    def ok(self, rel_tol: float) -> bool:
        return self.max_rel_error < rel_tol


def analytic_gradients(model: SpanPolicy, loss_fn: Callable[[], torch.Tensor]) -> dict:
    model.zero_grad()
    loss = loss_fn()
    loss.backward()
    return {
        name: (p.grad.clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in model.named_parameters()
    }


def finite_difference_gradients(
    model: SpanPolicy, loss_fn: Callable[[], torch.Tensor], step: float = 1e-5
) -> dict:
    """Central differences over every parameter element."""
    grads = {}
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat = p.view(-1)
            grad = torch.zeros_like(flat)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = float(loss_fn())
                flat[i] = orig - step
                down = float(loss_fn())
                flat[i] = orig
                grad[i] = (up - down) / (2.0 * step)
            grads[name] = grad.view_as(p)
    return grads


def check_gradients(
    model: SpanPolicy,
    loss_fn: Callable[[], torch.Tensor],
    step: float = 1e-5,
    denom_floor: float = 1e-6,
) -> GradCheckReport:
    """Compare autograd gradients against central finite differences.

    Relative error per element is |a - f| / max(|a|, |f|, denom_floor); the
    floor keeps finite-difference noise on near-zero gradients from blowing
    up the ratio.
    """
    analytic = analytic_gradients(model, loss_fn)
    numeric = finite_difference_gradients(model, loss_fn, step=step)
    worst = 0.0
    worst_name = ""
    n_params = 0
    for name in analytic:
        a = analytic[name]
        f = numeric[name]
        n_params += a.numel()
        denom = torch.maximum(
            torch.maximum(a.abs(), f.abs()), torch.tensor(denom_floor, dtype=a.dtype)
        )
        rel = ((a - f).abs() / denom).max().item()
        if rel > worst:
            worst = rel
            worst_name = name
    return GradCheckReport(max_rel_error=worst, worst_param=worst_name, n_params=n_params)
