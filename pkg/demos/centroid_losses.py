"""Class centroids of a feature map and the losses built on them.

Run: python demos/centroid_losses.py
"""
import torch

from centroid_uda.centroids import (
    CentroidSet, MemoryBank, compute_centroids, onehot, partition_centroids, partition_prediction,
    target_soft_mask, update_bank,
)
from centroid_uda.losses import ContrastiveConfig, cnr, inter_domain_loss, mpccl

torch.manual_seed(0)
K, C = 4, 8

# a "source" feature map whose classes occupy separate directions, and a noisier "target" one
labels = torch.randint(K, (2, 16, 16))
proto = torch.nn.functional.normalize(torch.randn(K, C), dim=1)
src_feat = proto[labels].permute(0, 3, 1, 2) * 2 + 0.1 * torch.randn(2, C, 16, 16)
tgt_feat = proto[labels].permute(0, 3, 1, 2) * 1.2 + 0.6 * torch.randn(2, C, 16, 16)

cs = compute_centroids(src_feat, onehot(labels, K))
print("source centroid norms", cs.values.norm(dim=1).numpy().round(3))

bank = update_bank(MemoryBank.empty(K, C), cs)
print("bank initialized for classes", bank.initialized.tolist())

# target side uses a soft pseudo label from some logits
logits = 3 * onehot(labels, K) + torch.randn(2, K, 16, 16)
soft = target_soft_mask(logits)
ct = compute_centroids(tgt_feat, soft)

cfg = ContrastiveConfig(tau=0.1)
print("inter-domain loss   ", round(inter_domain_loss(ct, bank.snapshot(), cfg).item(), 4))
print("norm regularizer    ", round(cnr(ct, bank.snapshot()).item(), 4))

# random equal partitions of the soft prediction, one centroid set per partition
parts, _ = partition_prediction(soft, 4, seed=0)
pcs = partition_centroids(tgt_feat, parts)
aug = compute_centroids(tgt_feat + 0.05 * torch.randn_like(tgt_feat), soft)
print("MPCCL, P=4          ", round(mpccl(bank.snapshot(), pcs, aug, cfg).item(), 4))

# cosine kernel ignores scale, the norm term does not
scaled = CentroidSet(ct.values * 3, ct.mass)
print("inter after x3 scale", round(inter_domain_loss(scaled, bank.snapshot(), cfg).item(), 4),
      " cnr after x3 scale", round(cnr(scaled, bank.snapshot()).item(), 4))
