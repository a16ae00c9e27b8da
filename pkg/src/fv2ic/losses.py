"""Training objectives: VAE loss, supervised Dice + CE, intra-client
consistency (VAE reconstruction or Gaussian noise), the consistency ramp and
the server-side distillation KL.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F

from .config import ExperimentConfig
from .errors import ContractViolation
from .models import FedModel, UNet, VAE, predict_probs, reparameterize
from .synthdata import Batch


@dataclass
class LossBreakdown:
    kl: torch.Tensor | float = 0.0
    mse: torch.Tensor | float = 0.0
    dice: torch.Tensor | float = 0.0
    ce: torch.Tensor | float = 0.0
    cons: torch.Tensor | float = 0.0
    total: torch.Tensor | float = 0.0
    lambda_t: float = 0.0
    omega: float = 0.0

    def floats(self) -> dict[str, float]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        return out


def gaussian_kl(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, exp(logvar)) || N(0, 1)), summed over latent dims, averaged over the batch."""
    if mu.shape != logvar.shape:
        raise ContractViolation(f"mu {tuple(mu.shape)} and logvar {tuple(logvar.shape)} differ")
    if mu.dim() == 1:
        mu, logvar = mu[None], logvar[None]
    per_dim = 0.5 * (mu.pow(2) + torch.exp(logvar) - logvar - 1.0)
    return per_dim.sum(dim=-1).mean()


def recon_mse(x: torch.Tensor, x_hat: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """Squared reconstruction error.

    ``mean`` averages over pixels and batch. ``sum`` takes the squared norm
    of each image and averages that over the batch.
    """
    if x.shape != x_hat.shape:
        raise ContractViolation(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    sq = (x - x_hat).pow(2)
    if reduction == "mean":
        return sq.mean()
    if reduction == "sum":
        return sq.reshape(sq.shape[0], -1).sum(dim=1).mean()
    raise ValueError(f"unknown reduction {reduction!r}")


def vae_loss(
    vae: VAE,
    images: torch.Tensor,
    generator: torch.Generator | None = None,
    recon_reduction: str = "sum",
) -> LossBreakdown:
    mu, logvar = vae.encode(images)
    z = reparameterize(mu, logvar, generator)
    kl = gaussian_kl(mu, logvar)
    mse = recon_mse(images, vae.decode(z), recon_reduction)
    return LossBreakdown(kl=kl, mse=mse, total=kl + mse)


def one_hot(mask: torch.Tensor, num_classes: int, dtype=torch.float32) -> torch.Tensor:
    """(B, H, W) ids -> (B, C, H, W) one-hot."""
    return F.one_hot(mask.long(), num_classes).permute(0, 3, 1, 2).to(dtype)


def dice_loss(probs: torch.Tensor, mask_onehot: torch.Tensor, smooth: float = 1e-5) -> torch.Tensor:
    """1 - mean over classes of the soft Dice score, per image, averaged over the batch."""
    if probs.dim() == 3:
        probs, mask_onehot = probs[None], mask_onehot[None]
    inter = (probs * mask_onehot).sum(dim=(2, 3))
    denom = probs.sum(dim=(2, 3)) + mask_onehot.sum(dim=(2, 3))
    score = (2.0 * inter + smooth) / (denom + smooth)
    return 1.0 - score.mean()


def ce_loss(probs: torch.Tensor, mask: torch.Tensor, clamp: float = 1e-8) -> torch.Tensor:
    if probs.dim() == 3:
        probs, mask = probs[None], mask[None]
    p_true = probs.gather(1, mask.long().unsqueeze(1)).squeeze(1)
    return -torch.log(p_true.clamp_min(clamp)).mean()


def ramp_weight(t: float, lambda_max: float, ramp_rounds: float) -> float:
    """lambda_max * exp(-5 (1 - min(t, T_r) / T_r)^2)."""
    phase = 1.0 - min(max(float(t), 0.0), ramp_rounds) / ramp_rounds
    return lambda_max * math.exp(-5.0 * phase * phase)


def _pair_mse(a_logits: torch.Tensor, b_logits: torch.Tensor, target: str = "probs") -> torch.Tensor:
    if target == "probs":
        return (predict_probs(a_logits) - predict_probs(b_logits)).pow(2).mean()
    return (a_logits - b_logits).pow(2).mean()


def latent_codes(vae: VAE, images: torch.Tensor, generator=None, sample: bool = True):
    mu, logvar = vae.encode(images)
    return mu, logvar, reparameterize(mu, logvar, generator, sample)


def consistency_loss(
    unet: UNet,
    vae: VAE,
    images: torch.Tensor,
    generator: torch.Generator | None = None,
    *,
    sample: bool = True,
    target: str = "probs",
    detach_recon: bool = True,
) -> torch.Tensor:
    """MSE between the UNet's predictions on ``images`` and on their VAE reconstructions.

    Both branches share the same ``z``. With ``detach_recon`` the
    reconstruction is a constant input, so no gradient reaches the decoder.
    """
    _, _, z = latent_codes(vae, images, generator, sample)
    recon = vae.decode(z)
    if detach_recon:
        recon = recon.detach()
    return _pair_mse(unet(images, z), unet(recon, z), target)


def gaussian_noise_like(images: torch.Tensor, sigma: float, generator=None) -> torch.Tensor:
    noise = torch.randn(images.shape, generator=generator, dtype=images.dtype) * sigma
    return (images + noise).clamp(0.0, 1.0)


def gaussian_aug_consistency(
    unet: UNet,
    images: torch.Tensor,
    sigma_noise: float,
    generator: torch.Generator | None = None,
    z: torch.Tensor | None = None,
    target: str = "probs",
) -> torch.Tensor:
    """Consistency against ``images`` plus clipped N(0, sigma^2) noise."""
    if sigma_noise <= 0:
        raise ValueError("sigma_noise must be > 0")
    if z is None:
        z = images.new_zeros(images.shape[0], unet.inject.in_features)
    noisy = gaussian_noise_like(images, sigma_noise, generator)
    return _pair_mse(unet(images, z), unet(noisy, z), target)


def seg_loss(
    model: FedModel,
    batch: Batch,
    t: float,
    cfg: ExperimentConfig,
    generator: torch.Generator | None = None,
) -> LossBreakdown:
    """Dice + omega * CE on the labeled rows plus lambda(t) * consistency on all rows."""
    lo = cfg.loss
    lam = ramp_weight(t, lo.lambda_max, cfg.ramp_rounds)
    images = batch.all_images
    n_l = batch.n_labeled
    need_z = cfg.model.latent_injection or lo.consistency == "vae"
    if need_z:
        _, _, z = latent_codes(model.vae, images, generator, cfg.model.seg_z == "sample")
    else:
        z = images.new_zeros(images.shape[0], cfg.model.latent_dim)

    use_cons = lo.consistency != "off" and lam > 0.0
    if use_cons:
        logits = model.unet(images, z)
        sup_logits = logits[:n_l]
    else:
        logits = None
        sup_logits = model.unet(images[:n_l], z[:n_l])

    probs = predict_probs(sup_logits)
    num_classes = probs.shape[1]
    dice = dice_loss(probs, one_hot(batch.labeled_masks, num_classes, probs.dtype), lo.dice_smooth)
    ce = ce_loss(probs, batch.labeled_masks, lo.prob_clamp)
    total = dice + lo.omega * ce

    cons = images.new_zeros(())
    if use_cons:
        if lo.consistency == "vae":
            second = model.vae.decode(z)
            if lo.detach_recon:
                second = second.detach()
        else:
            second = gaussian_noise_like(images, lo.sigma_noise, generator)
        cons = _pair_mse(logits, model.unet(second, z), lo.cons_target)
        total = total + lam * cons
    return LossBreakdown(dice=dice, ce=ce, cons=cons, total=total, lambda_t=lam, omega=lo.omega)


def distill_kl(ensemble_probs: torch.Tensor, global_probs: torch.Tensor, clamp: float = 1e-8) -> torch.Tensor:
    """Mean over pixels of KL(ensemble || global); the ensemble side is a constant target."""
    p = ensemble_probs.detach()
    per_pixel = (p * (torch.log(p.clamp_min(clamp)) - torch.log(global_probs.clamp_min(clamp)))).sum(dim=1)
    return per_pixel.mean()


class _KLToSoftmax(torch.autograd.Function):
    """KL(p || softmax(logits)) with the closed-form logit gradient (q - p) / n_pixels.

    Going through autograd's softmax/log chain leaves a residual of order
    1e-8 when p == q, which an adaptive optimizer would amplify into a full
    step. The closed form is exactly zero in that case.
    """

    @staticmethod
    def forward(ctx, target, logits, clamp):
        q = torch.softmax(logits, dim=1)
        kl = (target * (torch.log(target.clamp_min(clamp)) - torch.log(q.clamp_min(clamp)))).sum(dim=1).mean()
        ctx.save_for_backward(target, q)
        return kl

    @staticmethod
    def backward(ctx, grad_out):
        target, q = ctx.saved_tensors
        n_pixels = target.numel() // target.shape[1]
        return None, grad_out * (q - target) / n_pixels, None


def distill_kl_logits(
    ensemble_probs: torch.Tensor, global_logits: torch.Tensor, clamp: float = 1e-8, reverse: bool = False
) -> torch.Tensor:
    """Training form of :func:`distill_kl` taking the global model's logits."""
    p = ensemble_probs.detach()
    if reverse:
        q = predict_probs(global_logits)
        return (q * (torch.log(q.clamp_min(clamp)) - torch.log(p.clamp_min(clamp)))).sum(dim=1).mean()
    return _KLToSoftmax.apply(p, global_logits, clamp)
