"""VAE (encoder/decoder) and the latent-conditioned UNet.

The segmentation network receives the VAE latent code ``z`` at its
bottleneck: ``z`` goes through a learned affine map, is broadcast over the
bottleneck grid and concatenated channel-wise before the decoder path.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .config import ExperimentConfig, ModelConfig
from .errors import ConfigError, NumericFault

DTYPES = {"float32": torch.float32, "float64": torch.float64}


class CheckedModule(nn.Module):
    """Runs ``_run`` and raises NumericFault on non-finite outputs.

    Only the outputs are checked on the hot path. On failure the forward is
    replayed with hooks to name the first leaf layer that produced NaN/inf.
    """

    fault_prefix = ""

    def forward(self, *inputs):
        out = self._run(*inputs)
        for t in out if isinstance(out, tuple) else (out,):
            if not torch.isfinite(t).all():
                raise NumericFault(self._first_bad_layer(inputs) or self.fault_prefix)
        return out

    @torch.no_grad()
    def _first_bad_layer(self, inputs) -> str | None:
        bad: list[str] = []

        def hook(name):
            def fn(_mod, _inp, out):
                if not bad and isinstance(out, torch.Tensor) and not torch.isfinite(out).all():
                    bad.append(f"{self.fault_prefix}.{name}")

            return fn

        leaves = [(n, m) for n, m in self.named_modules() if n and not list(m.children())]
        handles = [m.register_forward_hook(hook(n)) for n, m in leaves]
        try:
            self._run(*inputs)
        finally:
            for h in handles:
                h.remove()
        return bad[0] if bad else None


class VAEEncoder(CheckedModule):
    fault_prefix = "vae.encoder"

    def __init__(self, image_size: int, latent_dim: int, depth: int, width: int):
        super().__init__()
        chans = [1] + [width * 2**i for i in range(depth)]
        self.convs = nn.ModuleList(
            nn.Conv2d(cin, cout, 3, stride=2, padding=1) for cin, cout in zip(chans, chans[1:])
        )
        side = image_size // 2**depth
        self.flat_dim = chans[-1] * side * side
        self.mu = nn.Linear(self.flat_dim, latent_dim)
        self.logvar = nn.Linear(self.flat_dim, latent_dim)

    def _run(self, x):
        h = x
        for conv in self.convs:
            h = F.relu(conv(h))
        h = h.flatten(1)
        return self.mu(h), self.logvar(h)


class VAEDecoder(CheckedModule):
    fault_prefix = "vae.decoder"

    def __init__(self, image_size: int, latent_dim: int, depth: int, width: int):
        super().__init__()
        chans = [width * 2**i for i in range(depth)][::-1] + [1]
        self.side = image_size // 2**depth
        self.top_channels = chans[0]
        self.fc = nn.Linear(latent_dim, chans[0] * self.side * self.side)
        self.deconvs = nn.ModuleList(
            nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1) for cin, cout in zip(chans, chans[1:])
        )

    def _run(self, z):
        h = F.relu(self.fc(z)).view(-1, self.top_channels, self.side, self.side)
        last = len(self.deconvs) - 1
        for i, deconv in enumerate(self.deconvs):
            h = deconv(h)
            h = torch.sigmoid(h) if i == last else F.relu(h)
        return h


class VAE(nn.Module):
    def __init__(self, image_size: int, latent_dim: int, depth: int = 3, width: int = 8):
        super().__init__()
        self.latent_dim = latent_dim
        self.encoder = VAEEncoder(image_size, latent_dim, depth, width)
        self.decoder = VAEDecoder(image_size, latent_dim, depth, width)

    def encode(self, x):
        return self.encoder(x)

    def decode(self, z):
        return self.decoder(z)


def reparameterize(mu, logvar, generator: torch.Generator | None = None, sample: bool = True):
    """z = mu + exp(logvar / 2) * eps; returns ``mu`` itself when ``sample`` is false."""
    if not sample:
        return mu
    eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
    return mu + torch.exp(0.5 * logvar) * eps


def _norm(kind: str, channels: int) -> nn.Module:
    # parameter-free so that FedAvg has no running statistics to reconcile
    if kind == "instance":
        return nn.InstanceNorm2d(channels)
    return nn.Identity()


class DoubleConv(nn.Sequential):
    def __init__(self, cin: int, cout: int, norm: str = "none"):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=1),
            _norm(norm, cout),
            nn.ReLU(),
            nn.Conv2d(cout, cout, 3, padding=1),
            _norm(norm, cout),
            nn.ReLU(),
        )


class UNet(CheckedModule):
    """UNet with ``depth`` down-sampling steps and a latent-injection block at the bottleneck."""

    fault_prefix = "unet"

    def __init__(
        self,
        num_classes: int,
        latent_dim: int,
        depth: int = 3,
        width: int = 8,
        injection_channels: int = 8,
        latent_injection: bool = True,
        in_channels: int = 1,
        norm: str = "none",
    ):
        super().__init__()
        chans = [width * 2**i for i in range(depth + 1)]
        self.down = nn.ModuleList()
        cin = in_channels
        for c in chans[:-1]:
            self.down.append(DoubleConv(cin, c, norm))
            cin = c
        self.bottleneck = DoubleConv(chans[-2], chans[-1], norm)
        self.inject = nn.Linear(latent_dim, injection_channels)
        self.latent_injection = latent_injection
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        cin = chans[-1] + injection_channels
        for c in reversed(chans[:-1]):
            self.up.append(nn.ConvTranspose2d(cin, c, 2, stride=2))
            self.dec.append(DoubleConv(2 * c, c, norm))
            cin = c
        self.head = nn.Conv2d(chans[0], num_classes, 1)

    def _run(self, x, z):
        skips = []
        h = x
        for block in self.down:
            h = block(h)
            skips.append(h)
            h = F.max_pool2d(h, 2)
        h = self.bottleneck(h)
        lat = self.inject(z)[:, :, None, None].expand(-1, -1, h.shape[2], h.shape[3])
        h = torch.cat([h, lat], dim=1)
        for i, (up, block) in enumerate(zip(self.up, self.dec)):
            h = block(torch.cat([up(h), skips[-1 - i]], dim=1))
        return self.head(h)


class FedModel(nn.Module):
    """The pair exchanged between clients and server: ``vae`` and ``unet``."""

    def __init__(self, vae: VAE, unet: UNet):
        super().__init__()
        self.vae = vae
        self.unet = unet

    def trainable_unet_parameters(self):
        return [p for n, p in self.unet.named_parameters() if p.requires_grad]


def predict_probs(logits: torch.Tensor) -> torch.Tensor:
    """Per-pixel softmax over the class axis (dim 1)."""
    return torch.softmax(logits, dim=1)


@torch.no_grad()
def init_weights(module: nn.Module, generator: torch.Generator) -> None:
    """Fan-in scaled normal weights, zero biases, in named-parameter order."""
    for name, p in module.named_parameters():
        if name.endswith("bias"):
            p.zero_()
            continue
        if p.dim() == 2:  # Linear: (out, in)
            fan_in = p.shape[1]
        elif isinstance(_owner(module, name), nn.ConvTranspose2d):  # (in, out, k, k)
            fan_in = p.shape[0] * p.shape[2] * p.shape[3] / 4.0
        else:  # Conv2d: (out, in, k, k)
            fan_in = p.shape[1] * p.shape[2] * p.shape[3]
        std = math.sqrt(2.0 / fan_in)
        p.copy_(torch.randn(p.shape, generator=generator, dtype=p.dtype) * std)


def _owner(root: nn.Module, param_name: str) -> nn.Module:
    mod = root
    for part in param_name.split(".")[:-1]:
        mod = getattr(mod, part)
    return mod


def build_model(
    mcfg: ModelConfig, image_size: int, num_classes: int, generator: torch.Generator | None = None
) -> FedModel:
    vae = VAE(image_size, mcfg.latent_dim, mcfg.vae_depth, mcfg.vae_width)
    unet = UNet(
        num_classes,
        mcfg.latent_dim,
        mcfg.unet_depth,
        mcfg.unet_width,
        mcfg.injection_channels,
        mcfg.latent_injection,
        norm=mcfg.norm,
    )
    model = FedModel(vae, unet).to(DTYPES[mcfg.dtype])
    if generator is not None:
        init_weights(model, generator)
    if not mcfg.latent_injection:
        with torch.no_grad():
            unet.inject.weight.zero_()
            unet.inject.bias.zero_()
        unet.inject.weight.requires_grad_(False)
        unet.inject.bias.requires_grad_(False)
    return model


def init_params(cfg: ExperimentConfig, generator: torch.Generator) -> FedModel:
    """Validated, seeded construction of the shared initial model."""
    m, d = cfg.model, cfg.dataset
    checks = [
        (m.latent_dim >= 2, "model.latent_dim", "must be >= 2"),
        (m.unet_depth >= 2, "model.unet_depth", "must be >= 2"),
        (m.unet_width >= 4, "model.unet_width", "must be >= 4"),
        (d.num_classes >= 2, "dataset.num_classes", "must be >= 2"),
    ]
    for ok, name, msg in checks:
        if not ok:
            raise ConfigError(name, msg)
    for depth, name in ((m.unet_depth, "model.unet_depth"), (m.vae_depth, "model.vae_depth")):
        if d.image_size % 2**depth:
            raise ConfigError(name, f"image size {d.image_size} not divisible by 2^{depth}={2**depth}")
    return build_model(m, d.image_size, d.num_classes, generator)
