"""Pretrain the style module on source and auxiliary slices, then push epsilon
against a frozen segmenter and save a strip of increasingly hard stylizations.

Run: python demos/style_transfer.py [out.png]
"""
import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

from centroid_uda.config import TrainConfig
from centroid_uda.data import generate_corpus
from centroid_uda.segnet import SegNet, seg_loss
from centroid_uda.style import adversarial_epsilon_step, stylize_with_latent
from centroid_uda.training import pretrain_style, style_pool

out = sys.argv[1] if len(sys.argv) > 1 else "style_demo.png"
cfg = TrainConfig(corpus_subjects=4, style_ae_steps=120, style_rain_steps=200)
corpus = generate_corpus(cfg.corpus_subjects, 0)
res = pretrain_style(cfg, style_pool(corpus))
print(f"L_RAIN {res.rain_history[0]:.2f} -> {res.rain_history[-1]:.2f}")
m = res.module

src = next(s for s in corpus if s.domain_tag == "source" and s.label.any())
tgt = next(s for s in corpus if s.domain_tag == "target" and s.label.any())
x, y = torch.from_numpy(src.image)[None], torch.from_numpy(src.label)[None]
base = m.style_of(torch.from_numpy(tgt.image)[None])

# a segmenter fitted briefly on source slices, then frozen
srcs = [s for s in corpus if s.domain_tag == "source"]
xb = torch.from_numpy(np.stack([s.image for s in srcs]))
yb = torch.from_numpy(np.stack([s.label for s in srcs]))
net = SegNet(4, width=8, dec_channels=16)
opt = torch.optim.Adam(net.parameters(), 3e-3)
for step in range(150):
    idx = torch.randint(len(srcs), (8,))
    l = seg_loss(net(xb[idx])["logits"], yb[idx])
    opt.zero_grad()
    l.backward()
    opt.step()
net.requires_grad_(False)
eps = torch.zeros(cfg.latent_dim)
frames = []
for i in range(5):  # between frames, two epsilon steps along the same gradient
    e = eps.clone().requires_grad_(True)
    img = stylize_with_latent(x, base, e, m)
    loss = seg_loss(net(img)["logits"], y)
    (g,) = torch.autograd.grad(loss, e)
    frames.append((img.detach()[0, 0], loss.item()))
    for _ in range(2):
        eps = adversarial_epsilon_step(eps, g, eta=cfg.epsilon_eta)

fig, ax = plt.subplots(1, 7, figsize=(14, 2.4))
for a, (pic, t) in zip(ax, [(src.image[0], "source"), (tgt.image[0], "target style")] + [(f, f"seg loss {l:.4f}") for f, l in frames]):
    a.imshow(pic, cmap="gray")
    a.set_title(t, fontsize=8)
    a.set_axis_off()
fig.tight_layout()
fig.savefig(out, dpi=90)
print("seg loss along epsilon ascent", [round(l, 4) for _, l in frames], "->", out)
