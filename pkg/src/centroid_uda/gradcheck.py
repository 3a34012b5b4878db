"""Central-difference gradient verification for scalar torch objectives."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch


class NonFiniteObjective(ValueError):
    pass


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    worst_index: tuple[int, ...] | None
    analytic: np.ndarray
    numeric: np.ndarray

    # keep truthiness meaningful in asserts
    def __bool__(self) -> bool:
        return self.passed


def analytic_grad(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    y = f(x)
    if y.numel() != 1:
        raise ValueError(f"objective must be scalar, got shape {tuple(y.shape)}")
    if not y.requires_grad:
        return torch.zeros_like(x)
    (g,) = torch.autograd.grad(y, x, allow_unused=True)
    return torch.zeros_like(x) if g is None else g


def numeric_grad(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, step: float) -> torch.Tensor:
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h`` for every coordinate."""
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    x = x.detach().clone()
    flat = x.view(-1)
    out = torch.zeros_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            fp = float(f(x))
            flat[i] = orig - step
            fm = float(f(x))
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                idx = np.unravel_index(i, tuple(x.shape))
                raise NonFiniteObjective(f"non-finite objective at coordinate {tuple(int(j) for j in idx)}")
            out[i] = (fp - fm) / (2 * step)
    return out.view_as(x)


def grad_check(
    f: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    step: float = 1e-4,
    tol: float = 1e-3,
    floor: float = 1e-3,
) -> GradCheckReport:
    """Compare the autograd gradient of ``f`` at ``x`` against central differences.

    The per-coordinate relative error is ``|a - n| / max(|a|, |n|, floor * ||a||_inf, 1e-10)``;
    the ``floor`` term keeps coordinates whose true gradient is ~0 from being
    judged on pure truncation noise.
    """
    x = x.detach()
    f0 = float(f(x).detach())
    if not np.isfinite(f0):
        raise NonFiniteObjective("non-finite objective at the base point")
    a = analytic_grad(f, x).detach().double()
    n = numeric_grad(f, x, step).double()
    scale = max(float(a.abs().max()) if a.numel() else 0.0, 0.0)
    denom = torch.maximum(torch.maximum(a.abs(), n.abs()), torch.full_like(a, max(floor * scale, 1e-10)))
    rel = (a - n).abs() / denom
    if rel.numel() == 0:
        return GradCheckReport(0.0, True, None, a.numpy(), n.numpy())
    worst = int(rel.view(-1).argmax())
    err = float(rel.view(-1)[worst])
    idx = tuple(int(j) for j in np.unravel_index(worst, tuple(x.shape)))
    return GradCheckReport(err, err <= tol, idx, a.numpy(), n.numpy())
