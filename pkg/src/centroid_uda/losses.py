"""Centroid contrastive losses: inter/intra-domain, norm regularizer and the multi-partition form."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import torch

from .centroids import CentroidSet

log = logging.getLogger(__name__)

EPS_NORM = 1e-8


@dataclass(frozen=True)
class ContrastiveConfig:
    tau: float = 0.1
    lambda_contrast: float = 1.0
    lambda_cnr: float = 0.5
    num_partitions: int = 4
    include_positive_in_denominator: bool = False

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.num_partitions < 1:
            raise ValueError(f"num_partitions must be >= 1, got {self.num_partitions}")
        if self.lambda_contrast < 0 or self.lambda_cnr < 0:
            raise ValueError("loss weights must be nonnegative")


def similarity(u: torch.Tensor, v: torch.Tensor, tau: float) -> torch.Tensor:
    """exp(cos(u, v) / tau)."""
    nu, nv = torch.linalg.vector_norm(u), torch.linalg.vector_norm(v)
    if nu <= EPS_NORM or nv <= EPS_NORM:
        raise ValueError("degenerate centroid: norm below %g" % EPS_NORM)
    return torch.exp(torch.dot(u, v) / (nu * nv * tau))


def _unit(x: torch.Tensor) -> torch.Tensor:
    return x / torch.linalg.vector_norm(x, dim=-1, keepdim=True).clamp_min(EPS_NORM)


def contrastive_loss(anchor: CentroidSet, other: CentroidSet, cfg: ContrastiveConfig) -> torch.Tensor:
    """Negatives-only NT-Xent between two centroid sets.

    For every class k present in both sets the positive pair is
    ``(anchor_k, other_k)``; negatives are ``anchor_k`` against every other
    present class of ``other`` and of ``anchor`` itself.
    """
    if anchor.values.shape != other.values.shape:
        raise ValueError(f"centroid shapes differ: {tuple(anchor.values.shape)} vs {tuple(other.values.shape)}")
    pa, po = anchor.present, other.present
    joint = pa & po
    if int(joint.sum()) < 2:
        log.warning("contrastive loss skipped: %d jointly present classes", int(joint.sum()))
        return anchor.values.new_zeros(())
    a, o = _unit(anchor.values), _unit(other.values)
    s_ao = a @ o.T / cfg.tau
    s_aa = a @ a.T / cfg.tau
    k = a.shape[0]
    off = ~torch.eye(k, dtype=torch.bool)
    neg_ao = s_ao.masked_fill(~(off & po.unsqueeze(0)), -math.inf)
    neg_aa = s_aa.masked_fill(~(off & pa.unsqueeze(0)), -math.inf)
    pos = torch.diagonal(s_ao)
    terms = [neg_ao, neg_aa]
    if cfg.include_positive_in_denominator:
        terms.append(pos.unsqueeze(1))
    log_denom = torch.logsumexp(torch.cat(terms, dim=1), dim=1)
    per_class = log_denom - pos
    return per_class[joint].sum()


def inter_domain_loss(ct: CentroidSet, cs: CentroidSet, cfg: ContrastiveConfig) -> torch.Tensor:
    return contrastive_loss(ct, cs, cfg)


def intra_domain_loss(ct: CentroidSet, ct_aug: CentroidSet, cfg: ContrastiveConfig) -> torch.Tensor:
    return contrastive_loss(ct, ct_aug, cfg)


def cnr(ct: CentroidSet, cs: CentroidSet) -> torch.Tensor:
    """Mean squared gap between target and source centroid norms; source treated as constant."""
    joint = ct.present & cs.present
    if not bool(joint.any()):
        return ct.values.new_zeros(())
    nt = torch.linalg.vector_norm(ct.values[joint], dim=1)
    ns = torch.linalg.vector_norm(cs.values.detach()[joint], dim=1)
    return ((nt - ns) ** 2).mean()


def mpccl(
    cs: CentroidSet, ct_parts: Sequence[CentroidSet], ct_aug: CentroidSet, cfg: ContrastiveConfig
) -> torch.Tensor:
    """Average over partitions of L(part, source) + L(augmented, part)."""
    if not ct_parts:
        raise ValueError("at least one partition is required")
    total = sum(contrastive_loss(p, cs, cfg) + contrastive_loss(ct_aug, p, cfg) for p in ct_parts)
    return total / len(ct_parts)


def cnr_over_partitions(ct_parts: Sequence[CentroidSet], cs: CentroidSet) -> torch.Tensor:
    """Sum (not mean) of the norm regularizer over partitions."""
    return sum(cnr(p, cs) for p in ct_parts)
