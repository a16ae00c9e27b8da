"""Procedural multi-class segmentation benchmark.

Each image holds a cardiac-like layout: a bright inner ellipse (class 3),
a dark ring around it (class 2) and a bright crescent-shaped neighbour
(class 1) on a textured background (class 0). Ring and background share an
intensity range and the two bright structures look alike, so pixel
intensity alone does not determine the class; shape and position do.

Clients differ by an intensity offset and a bias on the structure position
(non-IID). Everything is derived from one integer seed through
``numpy.random.SeedSequence``, so a dataset is reproducible bit for bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from .config import DatasetConfig, ExperimentConfig, from_dict
from .errors import ConfigError, ProtocolError

# spawn keys for independent streams
_STREAM_STYLE = 0
_STREAM_CLIENT = 1
_STREAM_HELDOUT = 2
_STREAM_TRAIN = 3


@dataclass
class Sample:
    image: np.ndarray  # (H, W) float32 in [0, 1]
    mask: np.ndarray  # (H, W) uint8 class ids
    sample_id: int
    client_id: int  # -1 for held-out splits
    labeled: bool


@dataclass
class ClientDataset:
    client_id: int
    labeled: list[Sample]
    unlabeled: list[Sample]

    def __post_init__(self):
        self._cache: dict[str, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.labeled) + len(self.unlabeled)

    def _stack(self, which: str) -> np.ndarray:
        if which not in self._cache:
            pool = self.labeled if which.startswith("l") else self.unlabeled
            attr = "image" if which.endswith("img") else "mask"
            if pool:
                self._cache[which] = np.stack([getattr(s, attr) for s in pool])
            else:
                self._cache[which] = np.zeros((0, 0, 0), np.float32)
        return self._cache[which]

    @property
    def labeled_images(self) -> np.ndarray:
        return self._stack("l_img")

    @property
    def labeled_masks(self) -> np.ndarray:
        return self._stack("l_mask")

    @property
    def unlabeled_images(self) -> np.ndarray:
        return self._stack("u_img")


@dataclass
class FederatedDataset:
    clients: list[ClientDataset]
    val: list[Sample]
    test: list[Sample]
    config: DatasetConfig
    seed: int
    meta: dict = field(default_factory=dict)

    def split_arrays(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        """(images, masks) of a held-out split, or of all training samples for ``train``."""
        if split == "train":
            samples = [s for c in self.clients for s in (*c.labeled, *c.unlabeled)]
        elif split in ("val", "test"):
            samples = getattr(self, split)
        else:
            raise ValueError(f"unknown split {split!r}")
        return np.stack([s.image for s in samples]), np.stack([s.mask for s in samples])


@dataclass
class Batch:
    labeled_images: torch.Tensor  # (n_l, 1, H, W)
    labeled_masks: torch.Tensor  # (n_l, H, W) int64
    all_images: torch.Tensor  # (n_l + n_u, 1, H, W); the first n_l rows are the labeled images
    n_labeled: int
    n_unlabeled: int


def normalize(image: np.ndarray) -> np.ndarray:
    """Min-max normalisation to [0, 1]; a constant image maps to zeros."""
    x = np.asarray(image, dtype=np.float64)
    if x.size == 0:
        raise ValueError("normalize() needs a non-empty image")
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def _split_sizes(cfg: DatasetConfig) -> tuple[int, int, int]:
    n_train = cfg.num_clients * cfg.samples_per_client
    train_frac = 1.0 - cfg.val_fraction - cfg.test_fraction
    total = n_train / train_frac
    n_val = max(1, int(math.floor(total * cfg.val_fraction + 0.5)))
    n_test = max(1, int(math.floor(total * cfg.test_fraction + 0.5)))
    return n_train, n_val, n_test


def labeled_count(ratio: float, total: int) -> int:
    """round(ratio * total), halves rounded up, at least one labeled sample."""
    return min(total, max(1, int(math.floor(ratio * total + 0.5))))


def _client_style(rng: np.random.Generator, cfg: DatasetConfig) -> dict[str, float]:
    return {
        "offset": float(rng.uniform(-cfg.intensity_shift, cfg.intensity_shift)),
        "dx": float(rng.uniform(-cfg.position_shift, cfg.position_shift)),
        "dy": float(rng.uniform(-cfg.position_shift, cfg.position_shift)),
    }


def _ellipse(xx, yy, cx, cy, a, b, theta):
    c, s = math.cos(theta), math.sin(theta)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return (u / a) ** 2 + (v / b) ** 2


def _render(rng: np.random.Generator, style: dict[str, float], cfg: DatasetConfig) -> tuple[np.ndarray, np.ndarray]:
    n = cfg.image_size
    coords = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    yy, xx = np.meshgrid(coords, coords, indexing="ij")

    cx = style["dx"] + rng.normal(0.0, 0.12)
    cy = style["dy"] + rng.normal(0.0, 0.12)
    a = rng.uniform(0.14, 0.3)
    b = a * rng.uniform(0.75, 1.0)
    theta = rng.uniform(0.0, math.pi)
    wall = rng.uniform(0.07, 0.12)

    inner = _ellipse(xx, yy, cx, cy, a, b, theta) <= 1.0
    outer = _ellipse(xx, yy, cx, cy, a + wall, b + wall, theta) <= 1.0

    phi = math.pi + rng.uniform(-0.5, 0.5)
    ra = rng.uniform(0.14, 0.22)
    rb = rng.uniform(0.28, 0.4)
    dist = a + wall + 0.55 * ra
    rx, ry = cx + dist * math.cos(phi), cy + dist * math.sin(phi)
    side = _ellipse(xx, yy, rx, ry, ra, rb, phi) <= 1.0

    mask = np.zeros((n, n), np.uint8)
    labels = [side & ~outer, outer & ~inner, inner]
    for cls, region in enumerate(labels[: cfg.num_classes - 1], start=1):
        mask[region] = cls

    texture = gaussian_filter(rng.normal(0.0, 1.0, (n, n)), sigma=n / 10.0, mode="wrap")
    texture = texture / (texture.std() + 1e-12)
    img = 0.38 + 0.05 * texture
    level = {1: rng.uniform(0.72, 0.88), 2: rng.uniform(0.3, 0.42), 3: rng.uniform(0.75, 0.9)}
    for cls in range(1, cfg.num_classes):
        img[mask == cls] = level[min(cls, 3)] + 0.04 * texture[mask == cls]
    img = gaussian_filter(img, sigma=0.6)
    img = normalize(img + rng.normal(0.0, cfg.noise_std, (n, n)))
    # per-client contrast: a gamma curve keeps the range at [0, 1]
    img = img ** math.exp(2.0 * style["offset"])
    return img.astype(np.float32), mask


def generate_dataset(config: ExperimentConfig, seed: int | None = None) -> FederatedDataset:
    """Build the federated benchmark; ``seed`` defaults to ``config.seed``."""
    cfg = config.dataset
    if cfg.num_classes < 2:
        raise ConfigError("dataset.num_classes", "must be >= 2")
    if cfg.image_size < 16:
        raise ConfigError("dataset.image_size", "must be >= 16")
    if cfg.num_clients < 1:
        raise ConfigError("dataset.num_clients", "must be >= 1")
    seed = config.seed if seed is None else seed

    style_rng = np.random.default_rng(np.random.SeedSequence([seed, _STREAM_STYLE]))
    styles = [_client_style(style_rng, cfg) for _ in range(cfg.num_clients)]

    n_train, n_val, n_test = _split_sizes(cfg)
    next_id = 0
    clients = []
    for cid in range(cfg.num_clients):
        rng = np.random.default_rng(np.random.SeedSequence([seed, _STREAM_CLIENT, cid]))
        samples = []
        for _ in range(cfg.samples_per_client):
            img, mask = _render(rng, styles[cid], cfg)
            samples.append(Sample(img, mask, next_id, cid, False))
            next_id += 1
        n_lab = labeled_count(cfg.labeled_ratio, len(samples))
        chosen = set(rng.permutation(len(samples))[:n_lab].tolist())
        labeled, unlabeled = [], []
        for i, s in enumerate(samples):
            s.labeled = i in chosen
            (labeled if s.labeled else unlabeled).append(s)
        clients.append(ClientDataset(cid, labeled, unlabeled))

    held_rng = np.random.default_rng(np.random.SeedSequence([seed, _STREAM_HELDOUT]))
    heldout = []
    for i in range(n_val + n_test):
        # held-out images cycle through the client styles
        img, mask = _render(held_rng, styles[i % cfg.num_clients], cfg)
        heldout.append(Sample(img, mask, next_id, -1, True))
        next_id += 1
    meta = {"styles": styles, "n_train": n_train, "n_val": n_val, "n_test": n_test}
    return FederatedDataset(clients, heldout[:n_val], heldout[n_val:], cfg, seed, meta)


def client_rng(seed: int, client_id: int) -> np.random.Generator:
    """Batch-sampling stream owned by one client."""
    return np.random.default_rng(np.random.SeedSequence([seed, _STREAM_TRAIN, client_id]))


def _draw(rng: np.random.Generator, pool_size: int, n: int) -> np.ndarray:
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    if pool_size >= n:
        return rng.choice(pool_size, size=n, replace=False)
    return rng.integers(0, pool_size, size=n)


def make_batch(
    client: ClientDataset,
    n_labeled: int,
    n_unlabeled: int,
    rng: np.random.Generator,
    dtype: torch.dtype = torch.float32,
) -> Batch:
    """Sample a mixed batch from one client.

    Draws are without replacement inside the batch unless the pool is
    smaller than the request. When the client has no unlabeled images (ratio
    1.0) the unlabeled slots are filled from the labeled pool, images only.
    """
    if not client.labeled:
        raise ProtocolError(f"client {client.client_id} has no labeled samples for a supervised batch")
    if n_labeled < 1:
        raise ProtocolError("a supervised batch needs n_labeled >= 1")
    li = _draw(rng, len(client.labeled), n_labeled)
    lab_img = client.labeled_images[li]
    lab_mask = client.labeled_masks[li]
    if n_unlabeled > 0:
        if client.unlabeled:
            ui = _draw(rng, len(client.unlabeled), n_unlabeled)
            unl_img = client.unlabeled_images[ui]
        else:
            unl_img = client.labeled_images[_draw(rng, len(client.labeled), n_unlabeled)]
        all_img = np.concatenate([lab_img, unl_img])
    else:
        all_img = lab_img
    lab_t = torch.from_numpy(lab_img).to(dtype).unsqueeze(1)
    return Batch(
        labeled_images=lab_t,
        labeled_masks=torch.from_numpy(lab_mask.astype(np.int64)),
        all_images=torch.from_numpy(all_img).to(dtype).unsqueeze(1) if n_unlabeled > 0 else lab_t,
        n_labeled=n_labeled,
        n_unlabeled=n_unlabeled,
    )


def iterations_per_epoch(client: ClientDataset, n_labeled: int, n_unlabeled: int) -> int:
    """Batches needed for one pass over each pool the batches are drawn from.

    Mixed batches run until both the labeled and the unlabeled pool have been
    covered once, so a larger labeled share does not cut labeled steps.
    """
    n = math.ceil(len(client.labeled) / max(n_labeled, 1))
    if n_unlabeled > 0:
        n = max(n, math.ceil(len(client.unlabeled) / n_unlabeled))
    return max(1, n)


# ---------------------------------------------------------------- disk cache


def save_dataset(ds: FederatedDataset, out_dir: str | Path, config: ExperimentConfig | None = None) -> Path:
    """Write one ``<split>.bin`` per split plus ``manifest.json``.

    Each binary file is the float32 image block (row-major, little endian)
    followed by the uint8 mask block.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = ds.config.image_size
    splits = {
        "train": [s for c in ds.clients for s in (*c.labeled, *c.unlabeled)],
        "val": ds.val,
        "test": ds.test,
    }
    manifest = {
        "format": "fv2ic-dataset/1",
        "seed": ds.seed,
        "image_shape": [n, n],
        "num_classes": ds.config.num_classes,
        "num_clients": len(ds.clients),
        "splits": {},
        "config": config.to_dict() if config is not None else None,
    }
    for name, samples in splits.items():
        imgs = np.stack([s.image for s in samples]).astype("<f4")
        masks = np.stack([s.mask for s in samples]).astype(np.uint8)
        with open(out / f"{name}.bin", "wb") as fh:
            fh.write(imgs.tobytes(order="C"))
            fh.write(masks.tobytes(order="C"))
        manifest["splits"][name] = {
            "file": f"{name}.bin",
            "count": len(samples),
            "images_dtype": "<f4",
            "masks_dtype": "u1",
            "images_offset": 0,
            "masks_offset": int(imgs.nbytes),
            "sample_ids": [s.sample_id for s in samples],
            "client_ids": [s.client_id for s in samples],
            "labeled": [bool(s.labeled) for s in samples],
        }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out


def load_dataset(path: str | Path) -> FederatedDataset:
    src = Path(path)
    manifest = json.loads((src / "manifest.json").read_text())
    h, w = manifest["image_shape"]
    loaded: dict[str, list[Sample]] = {}
    for name, info in manifest["splits"].items():
        raw = (src / info["file"]).read_bytes()
        count = info["count"]
        imgs = np.frombuffer(raw, dtype="<f4", count=count * h * w).reshape(count, h, w)
        masks = np.frombuffer(raw, dtype=np.uint8, offset=info["masks_offset"]).reshape(count, h, w)
        loaded[name] = [
            Sample(imgs[i].astype(np.float32), masks[i].copy(), sid, cid, lab)
            for i, (sid, cid, lab) in enumerate(zip(info["sample_ids"], info["client_ids"], info["labeled"]))
        ]
    clients = []
    for cid in range(manifest["num_clients"]):
        own = [s for s in loaded["train"] if s.client_id == cid]
        clients.append(ClientDataset(cid, [s for s in own if s.labeled], [s for s in own if not s.labeled]))
    if manifest.get("config"):
        cfg = from_dict(manifest["config"]).dataset
    else:
        cfg = DatasetConfig(image_size=h, num_classes=manifest["num_classes"], num_clients=manifest["num_clients"])
    return FederatedDataset(clients, loaded["val"], loaded["test"], cfg, manifest["seed"])
