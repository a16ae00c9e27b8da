import torch

from fv2ic.models import FedModel, UNet, VAE, init_weights


def gen(seed=0):
    g = torch.Generator()
    g.manual_seed(seed)
    return g


def toy_model(seed=0, num_classes=3, dtype=torch.float64):
    """A VAE + UNet pair on 4x4 images with latent size 2 and under 200 parameters."""
    model = FedModel(VAE(4, 2, depth=1, width=1), UNet(num_classes, 2, depth=1, width=1, injection_channels=1))
    model = model.to(dtype)
    init_weights(model, gen(seed))
    with torch.no_grad():
        # small nonzero biases keep every unit away from the ReLU kink at zero inputs
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.copy_(0.1 + 0.05 * torch.rand(p.shape, generator=gen(seed + 1000), dtype=dtype))
    return model


def numeric_grad(loss_fn, params, step=1e-5):
    out = []
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + step
                up = loss_fn().item()
                flat[i] = old - step
                down = loss_fn().item()
                flat[i] = old
                out.append((up - down) / (2 * step))
    return torch.tensor(out, dtype=torch.float64)


def rel_err(a, b):
    a, b = a.to(torch.float64), b.to(torch.float64)
    return ((a - b).norm() / max(a.norm().item(), b.norm().item(), 1e-30)).item()
