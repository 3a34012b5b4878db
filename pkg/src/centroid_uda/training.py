"""Two-phase adaptation training: style pretraining, warm-up, adversarial-style main phase."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import checkpoint as ckpt
from .centroids import (
    CentroidSet,
    MemoryBank,
    compute_centroids,
    onehot,
    partition_centroids,
    partition_prediction,
    target_soft_mask,
    update_bank,
)
from .config import TrainConfig
from .data import (
    NUM_CLASSES,
    Sample,
    Split,
    batch_at,
    generate_corpus,
    load_corpus,
    make_split,
    steps_per_epoch,
)
from .losses import ContrastiveConfig, cnr_over_partitions, mpccl
from .metrics import MetricsReport, evaluate_masks
from .segnet import SegNet, seg_loss
from .style import RainWeights, StyleModule, StyleNotPretrained, adversarial_epsilon_step, rain_losses

log = logging.getLogger(__name__)


def _seed_int(*parts: int) -> int:
    return int(np.random.default_rng(list(parts)).integers(2**62))


def _gen(*parts: int) -> torch.Generator:
    return torch.Generator().manual_seed(_seed_int(*parts))


def contrastive_config(cfg: TrainConfig) -> ContrastiveConfig:
    return ContrastiveConfig(
        tau=cfg.tau,
        lambda_contrast=cfg.lambda_contrast,
        lambda_cnr=cfg.lambda_cnr,
        num_partitions=cfg.partitions if cfg.use_mpccl else 1,
        include_positive_in_denominator=cfg.include_positive_in_denominator,
    )


# ---------------------------------------------------------------------------
# style pretraining


@dataclass
class StylePretrainResult:
    module: StyleModule
    ae_history: list[float]
    rain_history: list[float]
    rec_before: float = float("nan")
    rec_after: float = float("nan")


def _held_out_rec(module: StyleModule, images: torch.Tensor) -> float:
    with torch.no_grad():
        out = rain_losses(images, images, module, epsilon=torch.zeros(len(images), module.latent_dim))
    return float(out["L_Rec"])


def pretrain_style(cfg: TrainConfig, samples: Sequence[Sample], held_out: Sequence[Sample] = ()) -> StylePretrainResult:
    """Train the style module on source and auxiliary images only.

    Stage 1 fits encoder and decoder as an autoencoder; stage 2 freezes the
    encoder and fits decoder and VAE on the four-part style loss.
    """
    bad = [s for s in samples if s.domain_tag == "target"]
    assert not bad, f"style pretraining pool contains {len(bad)} target-domain samples"
    if not samples:
        raise ValueError("empty style pretraining pool")
    torch.manual_seed(_seed_int(cfg.seed, 11))
    module = StyleModule(cfg.style_width, cfg.latent_dim)
    pool = torch.from_numpy(np.stack([s.image for s in samples]))
    ho = torch.from_numpy(np.stack([s.image for s in held_out])) if held_out else pool[:16]
    g = _gen(cfg.seed, 12)
    rec_before = _held_out_rec(module, ho)

    ae_params = list(module.encoder.parameters()) + list(module.decoder.parameters())
    opt = torch.optim.Adam(ae_params, cfg.style_lr)
    ae_hist = []
    for _ in range(cfg.style_ae_steps):
        x = pool[torch.randint(len(pool), (cfg.style_bs,), generator=g)]
        loss = torch.nn.functional.mse_loss(module.decoder(module.content(x)), x)
        opt.zero_grad()
        loss.backward()
        opt.step()
        ae_hist.append(float(loss.detach()))

    module.encoder.requires_grad_(False)
    params = list(module.decoder.parameters()) + list(module.vae.parameters())
    opt = torch.optim.Adam(params, cfg.style_lr / 2)
    rain_hist = []
    for _ in range(cfg.style_rain_steps):
        x = pool[torch.randint(len(pool), (cfg.style_bs,), generator=g)]
        y = pool[torch.randint(len(pool), (cfg.style_bs,), generator=g)]
        out = rain_losses(x, y, module, generator=g)
        opt.zero_grad()
        out["L_RAIN"].backward()
        opt.step()
        rain_hist.append(float(out["L_RAIN"].detach()))
    module.encoder.requires_grad_(True)
    module.pretrained.fill_(True)
    return StylePretrainResult(module, ae_hist, rain_hist, rec_before, _held_out_rec(module, ho))


def style_pool(corpus: Sequence[Sample]) -> list[Sample]:
    return [s for s in corpus if s.domain_tag in ("source", "aux")]


# ---------------------------------------------------------------------------
# loss assembly


@dataclass
class LossBundle:
    terms: dict[str, torch.Tensor]
    total: torch.Tensor
    fresh_source: CentroidSet | None = None
    stylized_seg: torch.Tensor | None = None


def _zero() -> torch.Tensor:
    return torch.zeros(())


def total_loss(
    triple,
    model: SegNet,
    style_module: StyleModule | None,
    bank: MemoryBank,
    cfg: TrainConfig,
    epsilon: torch.Tensor | None = None,
    step: int = 0,
    hooks: Sequence[Callable[[str], None]] = (),
    contrast_active: bool = True,
) -> LossBundle:
    """RAIN + segmentation + weighted multi-partition contrast + weighted summed norm regularizer.

    Disabled terms contribute exactly zero.  The memory bank is only read here.
    """
    xs = torch.from_numpy(triple.source.images)
    ys = torch.from_numpy(triple.source.labels)
    xt = torch.from_numpy(triple.target.images)
    xta = torch.from_numpy(triple.target_aug.images)
    b = xs.shape[0]
    terms: dict[str, torch.Tensor] = {}

    gen = None
    if cfg.use_style:
        if style_module is None:
            raise StyleNotPretrained("style module not pretrained")
        if not bool(style_module.pretrained):
            raise StyleNotPretrained("style module not pretrained")
        style_imgs = xt[torch.arange(b) % xt.shape[0]]
        eps = epsilon.expand(b, -1) if epsilon is not None and epsilon.dim() == 1 else epsilon
        rain = rain_losses(xs, style_imgs, style_module, epsilon=eps)
        stylized = rain["generated"]
        for k in ("L_c", "L_s", "L_KL", "L_Rec", "L_RAIN"):
            terms[k] = rain[k]
        images = torch.cat([xs, stylized, xt, xta])
    else:
        terms["L_RAIN"] = _zero()
        images = torch.cat([xs, xt, xta])

    out = model(images)
    feats, logits = out["decoder_features"], out["logits"]
    n_src = 2 * b if cfg.use_style else b
    seg_src = seg_loss(logits[:b], ys)
    terms["L_seg_source"] = seg_src
    stylized_seg = None
    if cfg.use_style:
        stylized_seg = seg_loss(logits[b:n_src], ys)
        terms["L_seg_stylized"] = stylized_seg
        terms["L_Seg"] = seg_src + stylized_seg
    else:
        terms["L_Seg"] = seg_src

    nt = xt.shape[0]
    fresh = compute_centroids(feats[:n_src].detach(), onehot(torch.cat([ys] * (n_src // b)), NUM_CLASSES))
    terms["L_p_contrast"] = _zero()
    terms["R_cnr"] = _zero()
    if (cfg.use_ccl or cfg.use_cnr) and contrast_active:
        for h in hooks:
            h("bank_read")
        cs = bank.snapshot()
        ccfg = contrastive_config(cfg)
        ft, lt = feats[n_src:n_src + nt], logits[n_src:n_src + nt]
        fta, lta = feats[n_src + nt:], logits[n_src + nt:]
        if cfg.detach_pseudo_label:
            lt, lta = lt.detach(), lta.detach()
        soft_t, soft_ta = target_soft_mask(lt), target_soft_mask(lta)
        parts, _ = partition_prediction(soft_t, ccfg.num_partitions, _seed_int(cfg.seed, step, 3))
        ct_parts = partition_centroids(ft, parts)
        if cfg.use_ccl:
            ct_aug = compute_centroids(fta, soft_ta)
            terms["L_p_contrast"] = mpccl(cs, ct_parts, ct_aug, ccfg)
        if cfg.use_cnr:
            terms["R_cnr"] = cnr_over_partitions(ct_parts, cs)

    total = (
        terms["L_RAIN"]
        + terms["L_Seg"]
        + cfg.lambda_contrast * terms["L_p_contrast"]
        + cfg.lambda_cnr * terms["R_cnr"]
    )
    terms["total"] = total
    return LossBundle(terms, total, fresh, stylized_seg)


# ---------------------------------------------------------------------------
# trainer


def lr_at(cfg: TrainConfig, step: int, spe: int) -> float:
    warm = cfg.warmup_epochs * spe
    if step < warm:
        return cfg.lr_warmup
    main = max(cfg.main_epochs * spe, 1)
    frac = min((step - warm) / main, 1.0)
    return cfg.lr_main * (1.0 - frac) ** cfg.poly_power


class ConfigMismatch(RuntimeError):
    pass


def evaluate_model(model: SegNet, samples: Sequence[Sample], label: str = "", bs: int = 32) -> MetricsReport:
    model.eval()
    preds = []
    with torch.no_grad():
        for i in range(0, len(samples), bs):
            x = torch.from_numpy(np.stack([s.image for s in samples[i:i + bs]]))
            preds.append(model(x)["logits"].argmax(1).numpy())
    model.train()
    return evaluate_masks(np.concatenate(preds), np.stack([s.label for s in samples]), label=label)


class Trainer:
    def __init__(
        self,
        cfg: TrainConfig,
        split: Split,
        style_module: StyleModule | None = None,
        hooks: Sequence[Callable[[str], None]] = (),
    ):
        self.cfg = cfg
        self.split = split
        self.hooks = list(hooks)
        torch.manual_seed(_seed_int(cfg.seed, 21))
        self.model = SegNet(NUM_CLASSES, cfg.width, cfg.dec_channels)
        if cfg.use_style and style_module is None:
            raise StyleNotPretrained("style module not pretrained; run pretrain-style first")
        self.style = style_module
        if self.style is not None:
            self.style.encoder.requires_grad_(False)
        self.bank = MemoryBank.empty(NUM_CLASSES, cfg.dec_channels, cfg.rho, cfg.ema_weight_fresh)
        self.opt = torch.optim.SGD(
            self.model.parameters(), lr=cfg.lr_warmup, momentum=cfg.momentum, weight_decay=cfg.weight_decay
        )
        self.style_params = []
        self.style_opt = None
        if self.style is not None and cfg.style_lr_scale > 0:
            self.style_params = list(self.style.decoder.parameters()) + list(self.style.vae.parameters())
            self.style_opt = torch.optim.SGD(self.style_params, lr=cfg.lr_warmup * cfg.style_lr_scale, momentum=cfg.momentum)
        self.spe = steps_per_epoch(len(split.source_train), cfg.source_bs)
        self.total_steps = (cfg.warmup_epochs + cfg.main_epochs) * self.spe
        self.warm_steps = cfg.warmup_epochs * self.spe
        self.step = 0
        self.epsilon = torch.zeros(cfg.latent_dim)
        self.history: list[dict[str, float]] = []
        self.skipped_steps = 0

    # -- epsilon handling
    def _epsilon_for(self, step: int) -> torch.Tensor:
        adversarial = self.cfg.epsilon_on and step >= self.warm_steps
        if not adversarial:
            return torch.randn(self.cfg.latent_dim, generator=_gen(self.cfg.seed, step, 5))
        if step == self.warm_steps:
            self.epsilon = torch.randn(self.cfg.latent_dim, generator=_gen(self.cfg.seed, 6))
        return self.epsilon

    def train_step(self) -> dict[str, float]:
        cfg, step = self.cfg, self.step
        triple = batch_at(self.split, step, cfg.source_bs, cfg.target_bs, _seed_int(cfg.seed, 1))
        adversarial = cfg.use_style and cfg.epsilon_on and step >= self.warm_steps
        eps = self._epsilon_for(step).clone().requires_grad_(adversarial)
        contrast = cfg.contrast_in_warmup or step >= self.warm_steps
        bundle = total_loss(
            triple, self.model, self.style, self.bank, cfg, eps if cfg.use_style else None, step, self.hooks, contrast
        )
        values = {k: float(v.detach()) for k, v in bundle.terms.items()}
        if not all(math.isfinite(v) for v in values.values()):
            self._dump_nonfinite(step, values)
            self.skipped_steps += 1
            self.step += 1
            return values

        seg_params = list(self.model.parameters())
        if adversarial:
            (g_eps,) = torch.autograd.grad(bundle.stylized_seg, eps, retain_graph=True)
        style_grads = None
        if self.style_opt is not None:
            style_grads = torch.autograd.grad(bundle.terms["L_RAIN"], self.style_params, retain_graph=True, allow_unused=True)
        grads = torch.autograd.grad(bundle.total, seg_params, allow_unused=True)
        for h in self.hooks:
            h("grads")

        if adversarial:
            self.epsilon = adversarial_epsilon_step(
                eps.detach(), g_eps, cfg.epsilon_eta, descent=cfg.epsilon_descent
            )
        lr = lr_at(cfg, step, self.spe)
        for p, g in zip(seg_params, grads):
            p.grad = torch.zeros_like(p) if g is None else g
        if cfg.grad_clip > 0:
            values["grad_norm"] = float(torch.nn.utils.clip_grad_norm_(seg_params, cfg.grad_clip))
        for group in self.opt.param_groups:
            group["lr"] = lr
        self.opt.step()
        if self.style_opt is not None:
            for p, g in zip(self.style_params, style_grads):
                p.grad = torch.zeros_like(p) if g is None else g
            for group in self.style_opt.param_groups:
                group["lr"] = lr * cfg.style_lr_scale
            self.style_opt.step()

        self.bank = update_bank(self.bank, bundle.fresh_source)
        for h in self.hooks:
            h("bank_update")
        values["lr"] = lr
        self.history.append(values)
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("step %d/%d %s", step, self.total_steps, {k: round(v, 4) for k, v in values.items()})
        self.step += 1
        return values

    def _dump_nonfinite(self, step: int, values: dict[str, float]) -> None:
        log.error("non-finite loss at step %d, step aborted: %s", step, values)
        if self.cfg.out_dir:
            p = Path(self.cfg.out_dir)
            p.mkdir(parents=True, exist_ok=True)
            (p / f"nonfinite_step{step}.json").write_text(json.dumps({k: repr(v) for k, v in values.items()}))

    def run(self, until: int | None = None) -> None:
        until = self.total_steps if until is None else min(until, self.total_steps)
        while self.step < until:
            self.train_step()

    # -- persistence
    def checkpoint(self) -> ckpt.Checkpoint:
        arrays, blob = ckpt.flatten_optimizer("opt.seg", self.opt)
        meta = {"seg": blob}
        if self.style_opt is not None:
            a2, b2 = ckpt.flatten_optimizer("opt.style", self.style_opt)
            arrays.update(a2)
            meta["style"] = b2
        return ckpt.Checkpoint(
            step=self.step,
            config_hash=self.cfg.hash(),
            seg_state={k: v.clone() for k, v in self.model.state_dict().items()},
            style_state={k: v.clone() for k, v in self.style.state_dict().items()} if self.style is not None else {},
            bank_values=self.bank.values.clone(),
            bank_initialized=self.bank.initialized.clone(),
            epsilon=self.epsilon.clone(),
            optim_arrays=arrays,
            optim_meta=meta,
            rng_state=torch.get_rng_state(),
            extra={"variant": self.cfg.variant, "mode": self.cfg.mode, "fold": str(self.cfg.fold)},
        )

    def restore(self, c: ckpt.Checkpoint) -> None:
        if c.config_hash != self.cfg.hash():
            raise ConfigMismatch(f"checkpoint config hash {c.config_hash} != current {self.cfg.hash()}")
        self.model.load_state_dict(c.seg_state)
        if self.style is not None and c.style_state:
            self.style.load_state_dict(c.style_state)
        self.bank = MemoryBank(c.bank_values.clone(), c.bank_initialized.clone(), self.cfg.rho, self.cfg.ema_weight_fresh)
        self.epsilon = c.epsilon.clone()
        ckpt.restore_optimizer(self.opt, "opt.seg", c.optim_arrays, c.optim_meta["seg"])
        if self.style_opt is not None:
            ckpt.restore_optimizer(self.style_opt, "opt.style", c.optim_arrays, c.optim_meta["style"])
        if c.rng_state is not None:
            torch.set_rng_state(c.rng_state)
        self.step = c.step


# ---------------------------------------------------------------------------
# entry points


@dataclass
class TrainResult:
    checkpoint: ckpt.Checkpoint
    target: MetricsReport
    source: MetricsReport
    history: list[dict[str, float]] = field(default_factory=list)
    seconds: float = 0.0


def get_corpus(cfg: TrainConfig) -> list[Sample]:
    if cfg.corpus_dir and (Path(cfg.corpus_dir) / "manifest.txt").exists():
        return load_corpus(cfg.corpus_dir)
    return generate_corpus(cfg.corpus_subjects, cfg.corpus_seed)


def load_style(cfg: TrainConfig, path: str | Path) -> StyleModule:
    if not (Path(path) / "manifest.txt").exists():
        raise FileNotFoundError(f"no style checkpoint at {path}; run `pretrain-style` first")
    module = StyleModule(cfg.style_width, cfg.latent_dim)
    ckpt.load_module(path, module)
    return module


def run_training(
    cfg: TrainConfig,
    corpus: Sequence[Sample] | None = None,
    style_module: StyleModule | None = None,
    resume: ckpt.Checkpoint | None = None,
    stop_at: int | None = None,
    hooks: Sequence[Callable[[str], None]] = (),
) -> TrainResult:
    """Warm-up with random styles, then the main phase with adversarial style latents.

    Evaluates on the held-out target (and source) fold at the end.
    """
    torch.use_deterministic_algorithms(True)
    t0 = time.time()
    corpus = get_corpus(cfg) if corpus is None else corpus
    split = make_split(corpus, cfg.mode, cfg.fold, cfg.n_folds, cfg.corpus_seed)
    if cfg.use_style and style_module is None:
        if not cfg.style_checkpoint:
            raise StyleNotPretrained("style module not pretrained; run pretrain-style first")
        style_module = load_style(cfg, cfg.style_checkpoint)
    if style_module is not None:
        # training mutates the style module when style_lr_scale > 0
        clone = StyleModule(cfg.style_width, cfg.latent_dim)
        clone.load_state_dict(style_module.state_dict())
        style_module = clone
    trainer = Trainer(cfg, split, style_module if cfg.use_style else None, hooks)
    if resume is not None:
        trainer.restore(resume)
    trainer.run(stop_at)
    result = TrainResult(
        trainer.checkpoint(),
        evaluate_model(trainer.model, split.target_test, "target"),
        evaluate_model(trainer.model, split.source_test, "source"),
        trainer.history,
        time.time() - t0,
    )
    if cfg.out_dir:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        result.checkpoint.save(out / "checkpoint")
        (out / "config.txt").write_text(cfg.to_text())
        (out / "target_metrics.csv").write_text(result.target.to_csv())
        (out / "source_metrics.csv").write_text(result.source.to_csv())
    return result


def model_from_checkpoint(cfg: TrainConfig, c: ckpt.Checkpoint) -> SegNet:
    model = SegNet(NUM_CLASSES, cfg.width, cfg.dec_channels)
    model.load_state_dict(c.seg_state)
    return model


def evaluate(cfg: TrainConfig, c: ckpt.Checkpoint, fold: int | None = None, corpus=None) -> dict[str, MetricsReport]:
    corpus = get_corpus(cfg) if corpus is None else corpus
    split = make_split(corpus, cfg.mode, cfg.fold if fold is None else fold, cfg.n_folds, cfg.corpus_seed)
    model = model_from_checkpoint(cfg, c)
    return {
        "target": evaluate_model(model, split.target_test, "target"),
        "source": evaluate_model(model, split.source_test, "source"),
    }
