"""Small U-Net-style segmentation network and the CE + soft Jaccard loss."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


def _block(cin: int, cout: int, groups: int) -> nn.Sequential:
    layers: list[nn.Module] = [nn.Conv2d(cin, cout, 3, padding=1)]
    if groups:
        layers.append(nn.GroupNorm(groups, cout))
    layers += [nn.SiLU(), nn.Conv2d(cout, cout, 3, padding=1)]
    if groups:
        layers.append(nn.GroupNorm(groups, cout))
    layers.append(nn.SiLU())
    return nn.Sequential(*layers)


class Encoder(nn.Module):
    def __init__(self, in_ch: int = 1, width: int = 16, groups: int = 4):
        super().__init__()
        self.b1 = _block(in_ch, width, groups)
        self.b2 = _block(width, 2 * width, groups)
        self.b3 = _block(2 * width, 4 * width, groups)

    def forward(self, x):
        s1 = self.b1(x)
        s2 = self.b2(F.avg_pool2d(s1, 2))
        z = self.b3(F.avg_pool2d(s2, 2))
        return z, (s1, s2)


class Decoder(nn.Module):
    def __init__(self, width: int = 16, out_ch: int = 32, groups: int = 4):
        super().__init__()
        self.up2 = nn.ConvTranspose2d(4 * width, 2 * width, 2, stride=2)
        self.d2 = _block(4 * width, 2 * width, groups)
        self.up1 = nn.ConvTranspose2d(2 * width, width, 2, stride=2)
        self.d1 = _block(2 * width, out_ch, groups)

    def forward(self, z, skips):
        s1, s2 = skips
        x = self.d2(torch.cat([self.up2(z), s2], 1))
        return self.d1(torch.cat([self.up1(x), s1], 1))


class SegNet(nn.Module):
    """Encoder E, decoder D and a 1x1 convolutional classifier Cls.

    ``forward`` returns both the decoder features D(E(x)) (used for centroids)
    and the class logits Cls(D(E(x))).
    """

    downsample = 4

    def __init__(self, num_classes: int = 4, width: int = 16, dec_channels: int = 32, groups: int = 4, in_ch: int = 1):
        super().__init__()
        self.num_classes = num_classes
        self.dec_channels = dec_channels
        self.encoder = Encoder(in_ch, width, groups)
        self.decoder = Decoder(width, dec_channels, groups)
        self.cls = nn.Conv2d(dec_channels, num_classes, 1)

    def forward(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        if x.dim() != 4:
            raise ValueError(f"expected [B,C,H,W] input, got shape {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % self.downsample or w % self.downsample:
            raise ValueError(f"spatial size {h}x{w} is not divisible by {self.downsample}")
        z, skips = self.encoder(x)
        feats = self.decoder(z, skips)
        return {"decoder_features": feats, "logits": self.cls(feats)}


def soft_jaccard(probs: torch.Tensor, target: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """1 - soft IoU per class, averaged over classes present in ``target``."""
    dims = (0, 2, 3)
    inter = (probs * target).sum(dims)
    union = probs.sum(dims) + target.sum(dims) - inter
    j = 1.0 - (inter + smooth) / (union + smooth)
    present = target.sum(dims) > 0
    if not bool(present.any()):
        return probs.new_zeros(())
    return j[present].mean()


def seg_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Pixel-mean cross-entropy plus soft Jaccard loss; ``labels`` is [B,H,W] int or [B,K,H,W] one-hot."""
    k = logits.shape[1]
    if labels.dim() == 4:
        target = labels.to(logits.dtype)
        idx = labels.argmax(1)
    else:
        idx = labels.long()
        target = F.one_hot(idx, k).permute(0, 3, 1, 2).to(logits.dtype)
    if target.shape != logits.shape:
        raise ValueError(f"labels {tuple(target.shape)} do not match logits {tuple(logits.shape)}")
    ce = F.cross_entropy(logits, idx)
    return ce + soft_jaccard(torch.softmax(logits, 1), target)
