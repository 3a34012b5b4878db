"""Class-wise feature centroids, the source memory bank and random partitions."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

log = logging.getLogger(__name__)

EPS_MASS = 1e-6


@dataclass
class CentroidSet:
    values: torch.Tensor  # [K, C]
    mass: torch.Tensor  # [K], denominator of the masked mean

    @property
    def present(self) -> torch.Tensor:
        return self.mass > EPS_MASS

    @property
    def num_classes(self) -> int:
        return self.values.shape[0]

    def detach(self) -> "CentroidSet":
        return CentroidSet(self.values.detach(), self.mass.detach())


def compute_centroids(features: torch.Tensor, mask: torch.Tensor) -> CentroidSet:
    """Mask-weighted spatial mean of ``features`` [B,C,H,W] for every class of ``mask`` [B,K,H,W].

    Classes whose total mask weight is at most ``EPS_MASS`` are reported with
    zero values and are treated as absent by the losses.
    """
    if features.dim() != 4 or mask.dim() != 4:
        raise ValueError("features and mask must be rank-4 [B,C,H,W] / [B,K,H,W]")
    b, _, h, w = features.shape
    if mask.shape[0] != b or mask.shape[2:] != (h, w):
        raise ValueError(f"shape mismatch: features {tuple(features.shape)} vs mask {tuple(mask.shape)}")
    mask = mask.to(features.dtype)
    num = torch.einsum("bchw,bkhw->kc", features, mask)
    mass = mask.sum(dim=(0, 2, 3))
    present = mass > EPS_MASS
    values = num / mass.clamp_min(EPS_MASS).unsqueeze(1)
    values = torch.where(present.unsqueeze(1), values, torch.zeros_like(values))
    return CentroidSet(values, mass)


def target_soft_mask(logits: torch.Tensor) -> torch.Tensor:
    """Per-pixel softmax over the class axis; used as a soft pseudo label."""
    return torch.softmax(logits, dim=1)


def onehot(labels: torch.Tensor, num_classes: int, dtype=torch.float32) -> torch.Tensor:
    """[B,H,W] integer labels -> [B,K,H,W] one-hot."""
    return F.one_hot(labels.long(), num_classes).permute(0, 3, 1, 2).to(dtype)


@dataclass
class MemoryBank:
    """EMA store of source centroids.

    With ``weight_fresh`` (default) the update is ``rho * fresh + (1 - rho) * old``;
    otherwise the conventional ``rho * old + (1 - rho) * fresh``.
    """

    values: torch.Tensor  # [K, C]
    initialized: torch.Tensor  # [K] bool
    rho: float = 0.9
    weight_fresh: bool = True

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0:
            raise ValueError(f"rho must lie in (0, 1), got {self.rho}")

    @classmethod
    def empty(cls, num_classes: int, channels: int, rho: float = 0.9, weight_fresh: bool = True, dtype=torch.float32):
        return cls(
            torch.zeros(num_classes, channels, dtype=dtype),
            torch.zeros(num_classes, dtype=torch.bool),
            rho,
            weight_fresh,
        )

    def snapshot(self) -> CentroidSet:
        """Copy of the stored centroids; uninitialized classes come out absent."""
        return CentroidSet(self.values.clone(), self.initialized.to(self.values.dtype))


def update_bank(bank: MemoryBank, fresh: CentroidSet) -> MemoryBank:
    if tuple(fresh.values.shape) != tuple(bank.values.shape):
        raise ValueError(
            f"centroid shape {tuple(fresh.values.shape)} does not match bank {tuple(bank.values.shape)}"
        )
    new = fresh.values.detach().to(bank.values.dtype)
    present = fresh.present
    if bank.weight_fresh:
        blended = bank.rho * new + (1.0 - bank.rho) * bank.values
    else:
        blended = bank.rho * bank.values + (1.0 - bank.rho) * new
    first = present & ~bank.initialized
    upd = present & bank.initialized
    values = torch.where(first.unsqueeze(1), new, bank.values)
    values = torch.where(upd.unsqueeze(1), blended, values)
    return MemoryBank(values, bank.initialized | present, bank.rho, bank.weight_fresh)


@dataclass
class PartitionAssignment:
    pixel_to_partition: np.ndarray  # [B, H*W] ints in [0, P)
    num_partitions: int

    def sizes(self) -> np.ndarray:
        """[B, P] pixel counts."""
        return np.stack([np.bincount(row, minlength=self.num_partitions) for row in self.pixel_to_partition])


def random_partition(n_pixels: int, num_partitions: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly random assignment of pixels to partitions of sizes differing by at most one."""
    if not 1 <= num_partitions <= n_pixels:
        raise ValueError(f"partition count must satisfy 1 <= P <= {n_pixels}, got {num_partitions}")
    assign = np.empty(n_pixels, dtype=np.int64)
    for p, chunk in enumerate(np.array_split(rng.permutation(n_pixels), num_partitions)):
        assign[chunk] = p
    return assign


def partition_prediction(
    soft: torch.Tensor, num_partitions: int, seed
) -> tuple[list[torch.Tensor], PartitionAssignment]:
    """Split ``soft`` [B,K,H,W] into P copies, each zero outside one random pixel partition.

    Every image of the batch gets its own partition.  The copies add up to
    ``soft`` exactly.
    """
    b, _, h, w = soft.shape
    rng = np.random.default_rng(seed)
    assign = np.stack([random_partition(h * w, num_partitions, rng) for _ in range(b)])
    idx = torch.from_numpy(assign).view(b, 1, h, w)
    parts = [soft * (idx == p).to(soft.dtype) for p in range(num_partitions)]
    return parts, PartitionAssignment(assign, num_partitions)


def partition_centroids(features: torch.Tensor, parts: list[torch.Tensor]) -> list[CentroidSet]:
    return [compute_centroids(features, m) for m in parts]
