import math

import pytest
import torch

from centroid_uda.gradcheck import NonFiniteObjective, grad_check, numeric_grad
from centroid_uda.losses import ContrastiveConfig, inter_domain_loss
from centroid_uda.centroids import CentroidSet


def test_quadratic_exact():
    rep = grad_check(lambda x: (x**2).sum(), torch.tensor([1.0, 2.0], dtype=torch.float64))
    assert rep.passed and rep.max_rel_err < 1e-6
    assert rep.analytic.tolist() == pytest.approx([2.0, 4.0])


def test_constant_function_has_zero_gradient():
    rep = grad_check(lambda x: torch.tensor(3.0, dtype=torch.float64), torch.randn(5, dtype=torch.float64))
    assert rep.passed
    assert (rep.analytic == 0).all() and (rep.numeric == 0).all()


def test_inter_domain_loss_k3_c8():
    g = torch.Generator().manual_seed(0)
    cs = torch.randn(3, 8, generator=g, dtype=torch.float64)
    cfg = ContrastiveConfig(tau=0.5)
    f = lambda ct: inter_domain_loss(CentroidSet(ct, torch.ones(3, dtype=ct.dtype)), CentroidSet(cs, torch.ones(3, dtype=cs.dtype)), cfg)
    assert grad_check(f, torch.randn(3, 8, generator=g, dtype=torch.float64))


def test_wrong_gradient_is_caught():
    class Bad(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return (x**2).sum()

        @staticmethod
        def backward(ctx, g):
            (x,) = ctx.saved_tensors
            return g * 3 * x

    rep = grad_check(Bad.apply, torch.tensor([1.0, -2.0], dtype=torch.float64))
    assert not rep.passed and rep.max_rel_err > 0.3


def test_non_finite_objective_names_coordinate():
    f = lambda x: torch.log(x).sum()
    with pytest.raises(NonFiniteObjective, match=r"\(1,\)"):
        numeric_grad(f, torch.tensor([1.0, 5e-5], dtype=torch.float64), 1e-4)


def test_step_must_be_positive():
    with pytest.raises(ValueError):
        numeric_grad(lambda x: x.sum(), torch.zeros(2), 0.0)


def test_deterministic_loss_values():
    x = torch.randn(3, 8, generator=torch.Generator().manual_seed(3))
    cfg = ContrastiveConfig()
    cs = CentroidSet(x.flip(0), torch.ones(3))
    a = inter_domain_loss(CentroidSet(x, torch.ones(3)), cs, cfg)
    b = inter_domain_loss(CentroidSet(x.clone(), torch.ones(3)), cs, cfg)
    assert a.item() == b.item() and math.isfinite(a.item())
