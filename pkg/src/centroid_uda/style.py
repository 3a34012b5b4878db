"""AdaIN-based style transfer with a VAE over style statistics (random AdaIN).

The VAE maps per-channel feature statistics to a Gaussian latent.  Sampling
the latent with a noise vector ``epsilon`` yields new styles; moving
``epsilon`` along the gradient of the segmentation loss produces
progressively harder stylized images.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

log = logging.getLogger(__name__)

EPS_STD = 1e-5


@dataclass
class StyleStats:
    mu: torch.Tensor  # [B, C]
    sigma: torch.Tensor  # [B, C]

    def vector(self) -> torch.Tensor:
        return torch.cat([self.mu, torch.log(self.sigma)], dim=1)

    @classmethod
    def from_vector(cls, v: torch.Tensor) -> "StyleStats":
        c = v.shape[1] // 2
        return cls(v[:, :c], torch.exp(v[:, c:]).clamp_min(EPS_STD))


@dataclass(frozen=True)
class RainWeights:
    lambda_s: float = 5.0
    lambda_kl: float = 1.0
    lambda_rec: float = 5.0


def feature_stats(feat: torch.Tensor, eps_std: float = EPS_STD) -> StyleStats:
    """Per-instance, per-channel mean and (biased) std of a [B,C,H,W] map."""
    mu = feat.mean(dim=(2, 3))
    var = feat.var(dim=(2, 3), unbiased=False)
    return StyleStats(mu, torch.sqrt(var.clamp_min(eps_std**2)))


def adain(content_feat: torch.Tensor, style: StyleStats, eps_std: float = EPS_STD) -> torch.Tensor:
    """Re-normalize ``content_feat`` so every channel takes the style's mean and std."""
    if content_feat.shape[1] != style.mu.shape[1]:
        raise ValueError(f"channel mismatch: content {content_feat.shape[1]} vs style {style.mu.shape[1]}")
    c = feature_stats(content_feat, eps_std)
    if bool((content_feat.var(dim=(2, 3), unbiased=False) < eps_std**2).any()):
        log.warning("adain: content channel std below %g floored", eps_std)
    norm = (content_feat - c.mu[..., None, None]) / c.sigma[..., None, None]
    return norm * style.sigma[..., None, None] + style.mu[..., None, None]


def _conv(cin, cout):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1), nn.SiLU())


class StyleEncoder(nn.Module):
    """Three convolutional blocks; returns every block's output."""

    def __init__(self, width: int = 16, in_ch: int = 1):
        super().__init__()
        self.blocks = nn.ModuleList([
            nn.Sequential(_conv(in_ch, width), _conv(width, width)),
            nn.Sequential(nn.AvgPool2d(2), _conv(width, 2 * width)),
            nn.Sequential(nn.AvgPool2d(2), _conv(2 * width, 2 * width)),
        ])
        self.channels = [width, 2 * width, 2 * width]

    def forward(self, x):
        feats = []
        for b in self.blocks:
            x = b(x)
            feats.append(x)
        return feats


class StyleDecoder(nn.Module):
    """Maps AdaIN features at encoder level ``level`` back to image space."""

    def __init__(self, width: int = 16, out_ch: int = 1, level: int = 0):
        super().__init__()
        chans = [width, 2 * width, 2 * width][: level + 1]
        layers: list[nn.Module] = []
        for cin, cout in zip(chans[::-1], chans[::-1][1:]):
            layers += [_conv(cin, cout), nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False)]
        layers += [_conv(width, width), _conv(width, width), nn.Conv2d(width, out_ch, 3, padding=1)]
        self.net = nn.Sequential(*layers)

    def forward(self, t):
        return torch.sigmoid(self.net(t))


class StyleVAE(nn.Module):
    """Gaussian VAE over the style vector (channel means and log-stds)."""

    def __init__(self, stat_dim: int, latent_dim: int = 16, hidden: int = 64):
        super().__init__()
        self.latent_dim = latent_dim
        self.enc = nn.Sequential(nn.Linear(stat_dim, hidden), nn.SiLU(), nn.Linear(hidden, 2 * latent_dim))
        self.dec = nn.Sequential(nn.Linear(latent_dim, hidden), nn.SiLU(), nn.Linear(hidden, stat_dim))

    def encode(self, v: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.enc(v)
        return h[:, : self.latent_dim], h[:, self.latent_dim:]

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.dec(z)


@dataclass
class StyleLatent:
    epsilon: torch.Tensor  # [B, Z] or [Z]
    z_mu: torch.Tensor
    z_logvar: torch.Tensor

    def sample(self) -> torch.Tensor:
        eps = self.epsilon if self.epsilon.dim() == 2 else self.epsilon.expand_as(self.z_mu)
        return self.z_mu + torch.exp(0.5 * self.z_logvar) * eps


class StyleModule(nn.Module):
    """Encoder, decoder and style VAE; AdaIN acts on encoder block ``level``."""

    def __init__(self, width: int = 16, latent_dim: int = 16, in_ch: int = 1, level: int = 0):
        super().__init__()
        self.level = level
        self.encoder = StyleEncoder(width, in_ch)
        self.decoder = StyleDecoder(width, in_ch, level)
        self.vae = StyleVAE(2 * self.encoder.channels[level], latent_dim)
        self.latent_dim = latent_dim
        self.register_buffer("pretrained", torch.zeros((), dtype=torch.bool))

    def content(self, img: torch.Tensor) -> torch.Tensor:
        return self.encoder(img)[self.level]

    def style_of(self, img: torch.Tensor) -> StyleStats:
        return feature_stats(self.content(img))

    def latent(self, base_style: StyleStats, epsilon: torch.Tensor) -> StyleLatent:
        z_mu, z_logvar = self.vae.encode(base_style.vector())
        return StyleLatent(epsilon, z_mu, z_logvar)


def kl_standard_normal(z_mu: torch.Tensor, z_logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)), summed over latent dims, averaged over the batch."""
    kl = -0.5 * (1.0 + z_logvar - z_mu**2 - torch.exp(z_logvar)).sum(dim=1)
    return kl.mean()


def _stats_distance(a: StyleStats, b: StyleStats) -> torch.Tensor:
    """Squared Euclidean distance of (mu, sigma), summed over channels, averaged over the batch."""
    return ((a.mu - b.mu) ** 2 + (a.sigma - b.sigma) ** 2).sum(dim=1).mean()


def rain_losses(
    content_img: torch.Tensor,
    style_img: torch.Tensor,
    module: StyleModule,
    weights: RainWeights = RainWeights(),
    epsilon: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
) -> dict[str, torch.Tensor]:
    """Content, style, KL and reconstruction losses of one stylization pass.

    The generated image is returned under ``"generated"``.
    """
    if content_img.shape[-2:] != style_img.shape[-2:]:
        raise ValueError("content and style images must share spatial size")
    fc = module.encoder(content_img)
    fs = module.encoder(style_img)
    s_style = feature_stats(fs[module.level])
    v = s_style.vector()
    z_mu, z_logvar = module.vae.encode(v)
    if epsilon is None:
        epsilon = torch.randn(z_mu.shape, generator=generator, dtype=z_mu.dtype)
    lat = StyleLatent(epsilon, z_mu, z_logvar)
    v_hat = module.vae.decode(lat.sample())
    s_hat = StyleStats.from_vector(v_hat)
    t = adain(fc[module.level], s_hat)
    g = module.decoder(t)
    fg = module.encoder(g)

    l_c = F.mse_loss(fg[module.level], t)
    l_s = sum(_stats_distance(feature_stats(a), feature_stats(b)) for a, b in zip(fg, fs))
    l_kl = kl_standard_normal(z_mu, z_logvar)
    l_rec = _stats_distance(s_hat, s_style)
    total = l_c + weights.lambda_s * l_s + weights.lambda_kl * l_kl + weights.lambda_rec * l_rec
    return {"L_c": l_c, "L_s": l_s, "L_KL": l_kl, "L_Rec": l_rec, "L_RAIN": total, "generated": g}


class StyleNotPretrained(RuntimeError):
    pass


def stylize_with_latent(
    content_img: torch.Tensor,
    base_style: StyleStats,
    epsilon: torch.Tensor,
    module: StyleModule,
    require_pretrained: bool = True,
) -> torch.Tensor:
    """Render ``content_img`` in the style decoded from the latent sample around ``base_style``."""
    if require_pretrained and not bool(module.pretrained):
        raise StyleNotPretrained("style module not pretrained")
    lat = module.latent(base_style, epsilon)
    stats = StyleStats.from_vector(module.vae.decode(lat.sample()))
    if stats.mu.shape[0] != content_img.shape[0]:
        stats = StyleStats(stats.mu.expand(content_img.shape[0], -1), stats.sigma.expand(content_img.shape[0], -1))
    return module.decoder(adain(module.content(content_img), stats))


def adversarial_epsilon_step(
    epsilon: torch.Tensor,
    seg_loss_grad: torch.Tensor,
    eta: float = 1.0,
    descent: bool = False,
    max_norm: float | None = None,
) -> torch.Tensor:
    """Move ``epsilon`` to increase the segmentation loss (or decrease it when ``descent``).

    The result is projected back onto the ball of radius ``max_norm``
    (default ``3 * sqrt(Z)``).
    """
    if not bool(torch.isfinite(seg_loss_grad).all()):
        log.warning("adversarial epsilon step skipped: non-finite gradient")
        return epsilon.detach().clone()
    sign = -1.0 if descent else 1.0
    out = epsilon.detach() + sign * eta * seg_loss_grad.detach()
    if max_norm is None:
        max_norm = 3.0 * math.sqrt(epsilon.shape[-1])
    norm = torch.linalg.vector_norm(out, dim=-1, keepdim=True)
    return torch.where(norm > max_norm, out * (max_norm / norm), out)
