import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from fv2ic.config import ExperimentConfig
from fv2ic.errors import ContractViolation
from fv2ic.losses import (
    ce_loss,
    consistency_loss,
    dice_loss,
    distill_kl,
    distill_kl_logits,
    gaussian_aug_consistency,
    gaussian_kl,
    gaussian_noise_like,
    one_hot,
    ramp_weight,
    recon_mse,
    seg_loss,
    vae_loss,
)
from fv2ic.models import UNet, VAE, init_weights, predict_probs
from fv2ic.synthdata import Batch

from .helpers import gen, numeric_grad, rel_err, toy_model


def kl_by_quadrature(mu, sigma):
    q = stats.norm(mu, sigma)
    p = stats.norm(0.0, 1.0)

    def integrand(z):
        return q.pdf(z) * (q.logpdf(z) - p.logpdf(z))

    val, _ = integrate.quad(integrand, mu - 30 * sigma, mu + 30 * sigma, epsabs=1e-12, epsrel=1e-12, limit=200)
    return val


def test_gaussian_kl_matches_quadrature():
    rng = np.random.default_rng(0)
    for _ in range(10):
        mu, sigma = rng.uniform(-2, 2), rng.uniform(0.3, 2.5)
        got = gaussian_kl(torch.tensor([[mu]], dtype=torch.float64), torch.tensor([[2 * math.log(sigma)]], dtype=torch.float64))
        assert abs(got.item() - kl_by_quadrature(mu, sigma)) <= 1e-6


def test_gaussian_kl_examples():
    z = torch.zeros(1, 1, dtype=torch.float64)
    assert gaussian_kl(z, z).item() == 0.0
    assert gaussian_kl(z + 1, z).item() == pytest.approx(0.5, abs=1e-12)
    assert gaussian_kl(z, z + math.log(4)).item() == pytest.approx(0.8069, abs=1e-4)
    # sums over dims, averages over the batch
    mu = torch.tensor([[1.0, 1.0], [0.0, 0.0]], dtype=torch.float64)
    assert gaussian_kl(mu, torch.zeros_like(mu)).item() == pytest.approx(0.5)


def test_recon_mse_examples():
    x = torch.rand(2, 1, 4, 4, generator=gen(0))
    assert recon_mse(x, x).item() == 0.0
    assert recon_mse(torch.zeros(2, 1, 4, 4), torch.ones(2, 1, 4, 4)).item() == 1.0
    assert recon_mse(torch.zeros(2, 1, 4, 4), torch.ones(2, 1, 4, 4), "sum").item() == 16.0
    y = torch.rand(2, 1, 4, 4, generator=gen(1))
    total = 0.0
    for a, b in zip(x.flatten().tolist(), y.flatten().tolist()):
        total += (a - b) ** 2
    assert recon_mse(x, y).item() == pytest.approx(total / 32, rel=1e-6)
    with pytest.raises(ContractViolation):
        recon_mse(x, y[:1])


class _IdentityVAE(VAE):
    """encode -> (0, 0); decode returns whatever image was last encoded."""

    def __init__(self):
        super().__init__(4, 2, depth=1, width=1)
        self._last = None

    def encode(self, x):
        self._last = x
        z = x.new_zeros(x.shape[0], 2)
        return z, z

    def decode(self, z):
        return self._last


def test_vae_loss_identity_stub_is_zero_at_zero_codes():
    vae = _IdentityVAE()
    x = torch.rand(3, 1, 4, 4, generator=gen(2))
    out = vae_loss(vae, x, gen(0), recon_reduction="mean")
    assert out.total.item() == 0.0


def test_vae_loss_breakdown_identity():
    model = toy_model()
    x = torch.rand(5, 1, 4, 4, generator=gen(3), dtype=torch.float64)
    out = vae_loss(model.vae, x, gen(0))
    assert out.total.item() == pytest.approx(out.kl.item() + out.mse.item(), abs=1e-6)
    assert out.total.item() >= out.kl.item() >= 0 and out.total.item() >= out.mse.item() >= 0


def test_dice_examples():
    mask = torch.randint(0, 3, (2, 5, 5), generator=gen(4))
    oh = one_hot(mask, 3)
    assert dice_loss(oh, oh).item() <= 1e-4
    n = 16
    probs = torch.full((1, 2, 4, 4), 0.5)
    all_one = one_hot(torch.zeros(1, 4, 4, dtype=torch.long), 2)
    # class 0: 2*(0.5 n)/(0.5 n + n); class 1: smoothing only -> (s)/(0.5 n + s)
    expected = 1 - 0.5 * (2 * 0.5 * n / (1.5 * n) + 1e-5 / (0.5 * n + 1e-5))
    assert dice_loss(probs, all_one).item() == pytest.approx(expected, rel=1e-5)
    perm = torch.randperm(25, generator=gen(5))
    p = predict_probs(torch.randn(1, 3, 5, 5, generator=gen(6)))
    flat_p, flat_m = p.reshape(1, 3, 25), oh[:1].reshape(1, 3, 25)
    torch.testing.assert_close(
        dice_loss(p, oh[:1]),
        dice_loss(flat_p[..., perm].reshape(1, 3, 5, 5), flat_m[..., perm].reshape(1, 3, 5, 5)),
    )


def test_dice_two_class_both_present_is_one_third():
    # every class is present, each a half of the pixels, uniform prediction
    mask = torch.tensor([[[0, 1], [0, 1]]])
    probs = torch.full((1, 2, 2, 2), 0.5)
    # 2 * (0.5 * 2) / (0.5 * 4 + 2) = 0.5 per class -> loss 0.5
    assert dice_loss(probs, one_hot(mask, 2)).item() == pytest.approx(0.5, rel=1e-5)


def test_ce_examples():
    mask = torch.randint(0, 4, (2, 4, 4), generator=gen(7))
    assert ce_loss(one_hot(mask, 4), mask).item() == pytest.approx(0.0, abs=1e-7)
    assert ce_loss(torch.full((2, 4, 4, 4), 0.25), mask).item() == pytest.approx(math.log(4), abs=1e-6)
    probs = predict_probs(torch.randn(2, 4, 4, 4, generator=gen(8), dtype=torch.float64))
    ref = 0.0
    for b in range(2):
        for i in range(4):
            for j in range(4):
                ref -= math.log(max(probs[b, mask[b, i, j], i, j].item(), 1e-8))
    assert ce_loss(probs, mask).item() == pytest.approx(ref / 32, rel=1e-12)


def test_ce_clamps_zero_probability():
    probs = torch.zeros(1, 2, 1, 1)
    probs[0, 1] = 1.0
    assert ce_loss(probs, torch.zeros(1, 1, 1, dtype=torch.long)).item() == pytest.approx(-math.log(1e-8), rel=1e-6)


def test_consistency_identity_stub_is_zero():
    vae = _IdentityVAE()
    unet = UNet(3, 2, depth=1, width=2, injection_channels=1)
    init_weights(unet, gen(0))
    x = torch.rand(4, 1, 4, 4, generator=gen(9))
    assert consistency_loss(unet, vae, x, gen(1)).item() == 0.0


def test_consistency_matches_hand_mse():
    model = toy_model()
    x = torch.rand(3, 1, 4, 4, generator=gen(10), dtype=torch.float64)
    got = consistency_loss(model.unet, model.vae, x, gen(1))
    mu, logvar = model.vae.encode(x)
    eps = torch.randn(mu.shape, generator=gen(1), dtype=mu.dtype)
    z = mu + torch.exp(0.5 * logvar) * eps
    a = predict_probs(model.unet(x, z)).detach().numpy()
    b = predict_probs(model.unet(model.vae.decode(z), z)).detach().numpy()
    assert got.item() == pytest.approx(float(np.mean((a - b) ** 2)), rel=1e-10)


def test_consistency_detach_blocks_decoder_gradient():
    model = toy_model()
    x = torch.rand(3, 1, 4, 4, generator=gen(11), dtype=torch.float64)
    consistency_loss(model.unet, model.vae, x, gen(1)).backward()
    assert all(p.grad is None or torch.all(p.grad == 0) for p in model.vae.decoder.parameters())
    assert any(p.grad is not None and torch.any(p.grad != 0) for p in model.unet.parameters())


def test_gaussian_aug_limits():
    model = toy_model()
    x = torch.rand(3, 1, 4, 4, generator=gen(12), dtype=torch.float64)
    assert gaussian_aug_consistency(model.unet, x, 1e-12, gen(0)).item() < 1e-20
    noisy = gaussian_noise_like(x, 5.0, gen(0))
    assert noisy.min() >= 0 and noisy.max() <= 1
    with pytest.raises(ValueError):
        gaussian_aug_consistency(model.unet, x, 0.0, gen(0))


def test_gaussian_aug_matches_hand_mse():
    model = toy_model()
    x = torch.rand(3, 1, 4, 4, generator=gen(13), dtype=torch.float64)
    got = gaussian_aug_consistency(model.unet, x, 0.2, gen(4))
    noisy = (x + torch.randn(x.shape, generator=gen(4), dtype=x.dtype) * 0.2).clamp(0, 1)
    z = torch.zeros(3, 2, dtype=x.dtype)
    a = predict_probs(model.unet(x, z)).detach().numpy()
    b = predict_probs(model.unet(noisy, z)).detach().numpy()
    assert got.item() == pytest.approx(float(np.mean((a - b) ** 2)), rel=1e-10)


def test_ramp_examples():
    assert ramp_weight(0, 1.0, 10) == pytest.approx(0.006738, abs=1e-6)
    assert ramp_weight(5, 1.0, 10) == pytest.approx(0.2865, abs=1e-4)
    assert ramp_weight(10, 0.3, 10) == 0.3
    assert ramp_weight(25, 0.3, 10) == 0.3


@given(st.floats(0, 100), st.floats(0, 100), st.floats(1, 50))
def test_ramp_monotone(t1, t2, tr):
    lo, hi = sorted((t1, t2))
    assert ramp_weight(lo, 0.1, tr) <= ramp_weight(hi, 0.1, tr)


def test_distill_examples():
    p = predict_probs(torch.randn(2, 4, 3, 3, generator=gen(14)))
    assert distill_kl(p, p).item() == 0.0
    ens = torch.zeros(1, 2, 2, 2)
    ens[:, 0] = 1
    glob = torch.full((1, 2, 2, 2), 0.5)
    assert distill_kl(ens, glob).item() == pytest.approx(math.log(2), abs=1e-6)


def test_distill_logits_value_matches_prob_form():
    logits = torch.randn(2, 4, 3, 3, generator=gen(15), dtype=torch.float64)
    ens = predict_probs(torch.randn(2, 4, 3, 3, generator=gen(16), dtype=torch.float64))
    a = distill_kl_logits(ens, logits).item()
    b = distill_kl(ens, predict_probs(logits)).item()
    assert a == pytest.approx(b, rel=1e-12)


def test_distill_logits_zero_gradient_at_match():
    logits = torch.randn(2, 4, 3, 3, generator=gen(17), dtype=torch.float64, requires_grad=True)
    loss = distill_kl_logits(predict_probs(logits).detach(), logits)
    loss.backward()
    assert torch.all(logits.grad == 0)


# ---- nonnegativity on random inputs -------------------------------------------


def _random_inputs(seed):
    g = gen(seed)
    c = int(torch.randint(2, 6, (1,), generator=g))
    logits = torch.randn(2, c, 4, 4, generator=g, dtype=torch.float64) * 4
    mask = torch.randint(0, c, (2, 4, 4), generator=g)
    return c, predict_probs(logits), mask, g


def test_losses_nonnegative_on_random_inputs():
    for seed in range(1000):
        c, probs, mask, g = _random_inputs(seed)
        other = predict_probs(torch.randn(2, c, 4, 4, generator=g, dtype=torch.float64) * 4)
        mu = torch.randn(3, 5, generator=g, dtype=torch.float64) * 3
        logvar = torch.randn(3, 5, generator=g, dtype=torch.float64) * 3
        x, y = torch.rand(2, 8, generator=g), torch.rand(2, 8, generator=g)
        assert gaussian_kl(mu, logvar).item() >= 0
        assert recon_mse(x, y).item() >= 0
        d = dice_loss(probs, one_hot(mask, c, probs.dtype)).item()
        assert 0 <= d <= 1
        assert ce_loss(probs, mask).item() >= 0
        assert distill_kl(probs, other).item() >= -1e-15


# ---- seg loss composition -----------------------------------------------------


def _toy_cfg(**over):
    cfg = ExperimentConfig().replace(
        **{"model.latent_dim": 2, "dataset.num_classes": 3, "federation.rounds": 10, "loss.lambda_max": 0.5, **over}
    )
    return cfg


def _toy_batch(seed=20, n_l=2, n_u=3):
    g = gen(seed)
    images = torch.rand(n_l + n_u, 1, 4, 4, generator=g, dtype=torch.float64)
    masks = torch.randint(0, 3, (n_l, 4, 4), generator=g)
    return Batch(images[:n_l], masks, images, n_l, n_u)


def test_seg_loss_breakdown_identity():
    model = toy_model()
    cfg = _toy_cfg()
    out = seg_loss(model, _toy_batch(), 8, cfg, gen(0))
    f = out.floats()
    assert f["lambda_t"] > 0 and f["cons"] > 0
    assert f["total"] == pytest.approx(f["dice"] + f["omega"] * f["ce"] + f["lambda_t"] * f["cons"], abs=1e-6)


def test_seg_loss_without_ramp_is_supervised_only():
    model = toy_model()
    cfg = _toy_cfg(**{"loss.lambda_max": 0.0})
    batch = _toy_batch()
    out = seg_loss(model, batch, 8, cfg, gen(0))
    assert out.cons.item() == 0.0
    assert out.total.item() == out.dice.item() + cfg.loss.omega * out.ce.item()


# ---- finite-difference gradient checks (float64, step 1e-5) ---------------------


def _check_grad(model, params, loss_fn):
    params = list(params)
    assert 0 < sum(p.numel() for p in params) <= 500
    model.zero_grad()
    loss_fn().backward()
    analytic = torch.cat([p.grad.flatten() if p.grad is not None else torch.zeros(p.numel(), dtype=p.dtype) for p in params])
    numeric = numeric_grad(loss_fn, params, step=1e-5)
    assert rel_err(analytic, numeric) <= 1e-4


def test_vae_loss_gradient():
    model = toy_model()
    x = torch.rand(4, 1, 4, 4, generator=gen(30), dtype=torch.float64)
    _check_grad(model, model.vae.parameters(), lambda: vae_loss(model.vae, x, gen(5)).total)


def test_seg_loss_gradient_all_terms():
    # undetached reconstruction so the whole objective is a function of every parameter
    model = toy_model()
    cfg = _toy_cfg(**{"loss.detach_recon": False})
    batch = _toy_batch(31)
    params = [*model.vae.parameters(), *model.unet.parameters()]
    assert ramp_weight(8, cfg.loss.lambda_max, cfg.ramp_rounds) > 0
    _check_grad(model, params, lambda: seg_loss(model, batch, 8, cfg, gen(6)).total)


def test_seg_loss_gradient_detached_recon_unet_params():
    model = toy_model()
    cfg = _toy_cfg()
    batch = _toy_batch(32)
    _check_grad(model, model.unet.parameters(), lambda: seg_loss(model, batch, 8, cfg, gen(7)).total)


def test_seg_loss_gradient_gaussian_consistency():
    model = toy_model()
    cfg = _toy_cfg(**{"loss.consistency": "gaussian"})
    batch = _toy_batch(33)
    params = [*model.vae.encoder.parameters(), *model.unet.parameters()]
    _check_grad(model, params, lambda: seg_loss(model, batch, 8, cfg, gen(8)).total)


def test_distill_gradient():
    model = toy_model()
    teacher = toy_model(seed=9)
    z = torch.randn(5, 2, generator=gen(34), dtype=torch.float64)
    with torch.no_grad():
        target = predict_probs(teacher.unet(teacher.vae.decode(z), z))
    params = [*model.vae.decoder.parameters(), *model.unet.parameters()]
    _check_grad(model, params, lambda: distill_kl_logits(target, model.unet(model.vae.decode(z), z)))
