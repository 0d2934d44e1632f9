"""Loss terms for the two-stage tokenizer objective.

The reconstruction part is pixel MSE + weighted perceptual distance +
weighted generator hinge + weighted quantizer loss. Stage objectives add
a contrastive (or cosine) alignment term on the pooled quantized latents:
stage 1 aligns against projected frozen-vision embeddings, stage 2 against
projected caption embeddings, and the combined mode adds both at once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndgrad as ng
from .ndgrad import Tensor
from .vq import QuantizeResult, vq_loss

STAGES = ("s1", "s2", "combined")


@dataclass(frozen=True)
class LossWeights:
    lambda_vq: float = 1.0
    beta: float = 0.25
    lambda_perc: float = 1.0
    adv_mode: str = "adaptive"          # adaptive | fixed | off
    lambda_adv_fixed: float = 0.1
    lambda_vis: float = 0.1
    lambda_txt: float = 1.0
    contrast_temperature: float = 0.07
    align_kind: str = "contrastive"     # contrastive | cosine

    def __post_init__(self):
        for name in ("lambda_vq", "beta", "lambda_perc", "lambda_adv_fixed", "lambda_vis", "lambda_txt"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.contrast_temperature <= 0:
            raise ValueError("contrast temperature must be > 0")
        if self.adv_mode not in ("adaptive", "fixed", "off"):
            raise ValueError(f"unknown adversarial mode {self.adv_mode!r}")
        if self.align_kind not in ("contrastive", "cosine"):
            raise ValueError(f"unknown alignment kind {self.align_kind!r}")


@dataclass
class LossBreakdown:
    """Named scalar per term; ``total`` is the weighted sum used for training."""

    mse: Tensor
    perceptual: Tensor
    adversarial_g: Tensor
    vq: Tensor
    align_vis: Tensor
    align_txt: Tensor
    adv_weight: float
    total: Tensor

    def floats(self) -> dict:
        return {
            "mse": self.mse.item(),
            "perceptual": self.perceptual.item(),
            "adversarial_g": self.adversarial_g.item(),
            "vq": self.vq.item(),
            "align_vis": self.align_vis.item(),
            "align_txt": self.align_txt.item(),
            "adv_weight": self.adv_weight,
            "total": self.total.item(),
        }


def mse_loss(recon, target) -> Tensor:
    recon, target = ng._as_tensor(recon), ng._as_tensor(target)
    if recon.shape != target.shape:
        raise ValueError(f"shape mismatch: {recon.shape} vs {target.shape}")
    diff = recon - target
    return ng.mean(diff * diff)


def perceptual_loss(recon, target, feat_net) -> Tensor:
    """Mean squared distance between frozen feature maps at the net's two taps."""
    fa = feat_net.features(ng._as_tensor(recon))
    fb = feat_net.features(ng._as_tensor(target))
    total = None
    for a, b in zip(fa, fb):
        diff = a - b
        term = ng.mean(diff * diff)
        total = term if total is None else total + term
    return total * (1.0 / len(fa))


def adversarial_losses(real_logits, fake_logits) -> tuple[Tensor, Tensor]:
    """Hinge discriminator loss and non-saturating generator loss."""
    real, fake = ng._as_tensor(real_logits), ng._as_tensor(fake_logits)
    d_loss = 0.5 * (ng.mean(ng.relu(1.0 - real)) + ng.mean(ng.relu(1.0 + fake)))
    g_loss = -ng.mean(fake)
    return d_loss, g_loss


ADV_WEIGHT_CLAMP = 1e4
ADV_WEIGHT_DELTA = 1e-6


def adaptive_adv_weight(grad_rec_norm: float, grad_adv_norm: float) -> float:
    """Reconstruction-to-adversarial gradient-norm ratio, clamped to [0, 1e4]."""
    if grad_rec_norm < 0 or grad_adv_norm < 0:
        raise ValueError("gradient norms must be >= 0")
    return float(min(grad_rec_norm / (grad_adv_norm + ADV_WEIGHT_DELTA), ADV_WEIGHT_CLAMP))


def _normalize_rows(x: Tensor) -> Tensor:
    norms_sq = ng.tensor_sum(x * x, axis=-1, keepdims=True)
    if np.any(norms_sq.data < 1e-24):
        raise ValueError("cannot normalize a zero vector")
    return x / ng.sqrt(norms_sq)


def contrastive_align(pooled, targets, temperature: float = 0.07) -> Tensor:
    """Symmetric InfoNCE over cosine similarities; matched rows are positives."""
    pooled, targets = ng._as_tensor(pooled), ng._as_tensor(targets)
    if pooled.ndim != 2 or pooled.shape != targets.shape:
        raise ValueError(f"need matching (n, d) inputs, got {pooled.shape} and {targets.shape}")
    n = pooled.shape[0]
    if n < 2:
        raise ValueError(f"contrastive alignment needs at least 2 rows, got {n}")
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    a = _normalize_rows(pooled)
    b = _normalize_rows(targets)
    sim = ng.matmul(a, ng.transpose(b, (1, 0))) * (1.0 / temperature)
    diag = np.arange(n)
    fwd = ng.softmax_cross_entropy(sim, diag)
    bwd = ng.softmax_cross_entropy(ng.transpose(sim, (1, 0)), diag)
    return 0.5 * (fwd + bwd)


def cosine_align(pooled, targets) -> Tensor:
    """Mean over matched pairs of (1 - cosine similarity)."""
    pooled, targets = ng._as_tensor(pooled), ng._as_tensor(targets)
    if pooled.ndim != 2 or pooled.shape != targets.shape:
        raise ValueError(f"need matching (n, d) inputs, got {pooled.shape} and {targets.shape}")
    a = _normalize_rows(pooled)
    b = _normalize_rows(targets)
    return ng.mean(1.0 - ng.tensor_sum(a * b, axis=-1))


def pool_latent(latents) -> Tensor:
    """Spatial mean of an (h, w, d) or (n, h, w, d) latent grid."""
    latents = ng._as_tensor(latents)
    if latents.ndim not in (3, 4):
        raise ValueError(f"latent grid must be 3- or 4-D, got {latents.shape}")
    return ng.mean(latents, axis=(-3, -2))


def _align(kind: str, pooled: Tensor, target: Tensor, temperature: float) -> Tensor:
    if kind == "cosine":
        return cosine_align(pooled, target)
    return contrastive_align(pooled, target, temperature)


def stage_objective(stage: str, weights: LossWeights, *, recon: Tensor, target: Tensor,
                    quant: QuantizeResult, aligned_latents: Tensor, feat_net,
                    vis_target: Tensor = None, txt_target: Tensor = None,
                    fake_logits: Tensor = None, adv_weight: float = 0.0) -> LossBreakdown:
    """Compose the full objective for one training stage.

    ``aligned_latents`` is the straight-through quantized grid, so alignment
    gradients reach the encoder. ``vis_target`` / ``txt_target`` are already
    projected into the latent space.
    """
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}")
    need_vis = stage in ("s1", "combined")
    need_txt = stage in ("s2", "combined")
    if need_vis and vis_target is None:
        raise ValueError("visual alignment stage needs frozen-vision embeddings")
    if need_txt and txt_target is None:
        raise ValueError("textual alignment stage needs caption embeddings")

    mse = mse_loss(recon, target)
    perc = perceptual_loss(recon, target, feat_net)
    quant_term = vq_loss(quant, weights.beta)
    if fake_logits is not None and adv_weight != 0.0:
        adv_g = -ng.mean(fake_logits)
    else:
        adv_g = ng.tensor(0.0)
        adv_weight = 0.0

    pooled = pool_latent(aligned_latents)
    zero = ng.tensor(0.0)
    align_vis = _align(weights.align_kind, pooled, vis_target, weights.contrast_temperature) if need_vis else zero
    align_txt = _align(weights.align_kind, pooled, txt_target, weights.contrast_temperature) if need_txt else zero

    total = (mse + weights.lambda_perc * perc + adv_weight * adv_g
             + weights.lambda_vq * quant_term
             + weights.lambda_vis * align_vis
             + weights.lambda_txt * align_txt)
    return LossBreakdown(mse, perc, adv_g, quant_term, align_vis, align_txt, float(adv_weight), total)
