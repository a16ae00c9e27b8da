"""Experiment configuration: nested dataclasses, JSON parsing, presets.

Every field is validated before any computation starts. Unknown keys are
rejected with the full key path (``dataset.labeled_ratoi``) so that typos in
sweep files fail loudly instead of silently falling back to defaults.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError


@dataclass
class DatasetConfig:
    image_size: int = 32
    num_classes: int = 4
    num_clients: int = 4
    samples_per_client: int = 60
    labeled_ratio: float = 0.2
    # held-out splits, as fractions of the whole universe (70/10/20 split)
    val_fraction: float = 0.1
    test_fraction: float = 0.2
    # non-IID knobs; 0 gives IID clients
    intensity_shift: float = 0.15
    position_shift: float = 0.15
    noise_std: float = 0.2


@dataclass
class ModelConfig:
    latent_dim: int = 16
    unet_depth: int = 3
    unet_width: int = 8
    vae_depth: int = 3
    vae_width: int = 8
    latent_injection: bool = True
    injection_channels: int = 8
    # "instance" (parameter-free instance normalisation in the UNet blocks) or "none"
    norm: str = "instance"
    # z fed to the UNet while training: "sample" (reparameterized) or "mean"
    seg_z: str = "sample"
    dtype: str = "float32"


@dataclass
class LossConfig:
    omega: float = 0.5
    lambda_max: float = 0.1
    # ramp length in rounds; None means 0.6 * rounds
    ramp_rounds: float | None = None
    consistency: str = "vae"  # vae | gaussian | off
    sigma_noise: float = 0.1
    cons_target: str = "probs"  # probs | logits
    recon_reduction: str = "sum"  # sum (per-image squared norm) | mean
    detach_recon: bool = True
    dice_smooth: float = 1e-5
    prob_clamp: float = 1e-8


@dataclass
class FederationConfig:
    rounds: int = 40
    # None means one pass over the client's data per round
    iter_max_vae: int | None = None
    iter_max_seg: int | None = None
    iter_max_distill: int = 5
    distill_batch: int = 24
    distill_fixed_z: bool = False
    distill_reverse_kl: bool = False
    # 40 short rounds on small images need a larger UNet step than the paper_scale preset
    lr_unet: float = 5e-3
    lr_vae: float = 1e-3
    # None reuses lr_vae
    lr_distill: float | None = 2e-4
    batch_labeled: int = 4
    batch_unlabeled: int = 20
    workers: int = 1


@dataclass
class OutputConfig:
    out_dir: str = "runs/default"
    checkpoint_every: int = 0
    plots: bool = True


@dataclass
class ExperimentConfig:
    seed: int = 0
    preset: str = "desk"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    @property
    def ramp_rounds(self) -> float:
        if self.loss.ramp_rounds is not None:
            return float(self.loss.ramp_rounds)
        return 0.6 * self.federation.rounds

    @property
    def lr_distill(self) -> float:
        f = self.federation
        return f.lr_vae if f.lr_distill is None else f.lr_distill

    @property
    def uses_vae(self) -> bool:
        """Whether the VAE takes part in training at all (and is transmitted)."""
        return (
            self.model.latent_injection
            or self.loss.consistency == "vae"
            or self.federation.iter_max_distill > 0
            or self.federation.iter_max_vae != 0
        )

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def replace(self, **overrides: Any) -> "ExperimentConfig":
        """Copy with dotted-path overrides, e.g. ``replace(**{"loss.omega": 0.0})``."""
        d = self.to_dict()
        for key, value in overrides.items():
            _set_path(d, key, value)
        return from_dict(d)


# Presets are partial dicts layered under the user's file.
PRESETS: dict[str, dict[str, Any]] = {
    "desk": {},
    "paper_scale": {
        "dataset": {"num_clients": 10, "samples_per_client": 70, "image_size": 64},
        "federation": {
            "rounds": 200,
            "batch_labeled": 4,
            "batch_unlabeled": 20,
            "lr_unet": 2e-4,
            "lr_vae": 1e-3,
            "lr_distill": None,
        },
    },
    # labeled-only FedAvg: no VAE, no consistency, no distillation
    "fedavg_baseline": {
        "model": {"latent_injection": False},
        "loss": {"lambda_max": 0.0, "consistency": "off"},
        "federation": {"iter_max_vae": 0, "iter_max_distill": 0, "batch_unlabeled": 0},
    },
    # VAE trained alone on the same data (latent-distance reference)
    "vae_only": {
        "model": {"latent_injection": False},
        "loss": {"lambda_max": 0.0, "consistency": "off"},
        "federation": {"iter_max_seg": 0, "iter_max_distill": 0},
    },
}

_SECTIONS = {
    "dataset": DatasetConfig,
    "model": ModelConfig,
    "loss": LossConfig,
    "federation": FederationConfig,
    "output": OutputConfig,
}


def _set_path(d: dict, dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    node = d
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value


def _deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _coerce(path: str, value: Any, default: Any, annotation: str) -> Any:
    optional = "None" in annotation
    if value is None:
        if optional:
            return None
        raise ConfigError(path, "must not be null")
    if "bool" in annotation:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value
    if "int" in annotation and "float" not in annotation:
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if "float" in annotation:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        if not math.isfinite(value):
            raise ConfigError(path, "must be finite")
        return float(value)
    if "str" in annotation:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    return value


def _build_section(name: str, cls: type, raw: Any) -> Any:
    if not isinstance(raw, dict):
        raise ConfigError(name, "expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in fields:
            raise ConfigError(f"{name}.{key}", "unknown key")
    kwargs = {}
    for fname, f in fields.items():
        default = f.default if f.default is not dataclasses.MISSING else None
        if fname in raw:
            kwargs[fname] = _coerce(f"{name}.{fname}", raw[fname], default, str(f.type))
    return cls(**kwargs)


def from_dict(raw: dict[str, Any]) -> ExperimentConfig:
    """Build and validate a config from a plain dict (presets applied first)."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "expected a JSON object")
    allowed = {"seed", "preset", *_SECTIONS}
    for key in raw:
        if key not in allowed:
            raise ConfigError(key, "unknown key")
    preset = raw.get("preset", "desk")
    if preset not in PRESETS:
        raise ConfigError("preset", f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    merged = _deep_merge(PRESETS[preset], raw)
    seed = _coerce("seed", merged.get("seed", 0), 0, "int")
    sections = {name: _build_section(name, cls, merged.get(name, {})) for name, cls in _SECTIONS.items()}
    cfg = ExperimentConfig(seed=seed, preset=preset, **sections)
    validate(cfg)
    return cfg


def parse_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read config file ({exc.strerror})") from exc
    try:
        raw = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(str(path), f"malformed JSON at line {exc.lineno} col {exc.colno}: {exc.msg}") from exc
    return from_dict(raw)


def _check(cond: bool, path: str, message: str) -> None:
    if not cond:
        raise ConfigError(path, message)


def validate(cfg: ExperimentConfig) -> None:
    d, m, lo, f, o = cfg.dataset, cfg.model, cfg.loss, cfg.federation, cfg.output
    _check(cfg.seed >= 0, "seed", "must be >= 0")

    _check(d.image_size >= 16, "dataset.image_size", "must be >= 16")
    _check(d.num_classes >= 2, "dataset.num_classes", "must be >= 2")
    _check(d.num_classes <= 8, "dataset.num_classes", "must be <= 8")
    _check(d.num_clients >= 1, "dataset.num_clients", "must be >= 1")
    _check(d.samples_per_client >= 1, "dataset.samples_per_client", "must be >= 1")
    _check(0.0 < d.labeled_ratio <= 1.0, "dataset.labeled_ratio", "must be in (0, 1]")
    _check(0.0 < d.val_fraction < 1.0, "dataset.val_fraction", "must be in (0, 1)")
    _check(0.0 < d.test_fraction < 1.0, "dataset.test_fraction", "must be in (0, 1)")
    _check(d.val_fraction + d.test_fraction < 1.0, "dataset.test_fraction", "val + test fractions must be < 1")
    _check(0.0 <= d.intensity_shift <= 0.5, "dataset.intensity_shift", "must be in [0, 0.5]")
    _check(0.0 <= d.position_shift <= 0.4, "dataset.position_shift", "must be in [0, 0.4]")
    _check(0.0 <= d.noise_std <= 0.5, "dataset.noise_std", "must be in [0, 0.5]")

    _check(m.latent_dim >= 2, "model.latent_dim", "must be >= 2")
    _check(2 <= m.unet_depth <= 6, "model.unet_depth", "must be in [2, 6]")
    _check(m.unet_width >= 4, "model.unet_width", "must be >= 4")
    _check(1 <= m.vae_depth <= 6, "model.vae_depth", "must be in [1, 6]")
    _check(m.vae_width >= 1, "model.vae_width", "must be >= 1")
    _check(m.injection_channels >= 1, "model.injection_channels", "must be >= 1")
    _check(m.norm in ("instance", "none"), "model.norm", "must be 'instance' or 'none'")
    _check(m.seg_z in ("sample", "mean"), "model.seg_z", "must be 'sample' or 'mean'")
    _check(m.dtype in ("float32", "float64"), "model.dtype", "must be 'float32' or 'float64'")
    for depth, name in ((m.unet_depth, "model.unet_depth"), (m.vae_depth, "model.vae_depth")):
        _check(
            d.image_size % (2**depth) == 0,
            name,
            f"image size {d.image_size} not divisible by 2^{depth}={2**depth}",
        )

    _check(lo.omega >= 0.0, "loss.omega", "must be >= 0")
    _check(lo.lambda_max >= 0.0, "loss.lambda_max", "must be >= 0")
    _check(lo.ramp_rounds is None or lo.ramp_rounds > 0, "loss.ramp_rounds", "must be > 0")
    _check(lo.consistency in ("vae", "gaussian", "off"), "loss.consistency", "must be vae|gaussian|off")
    _check(lo.sigma_noise > 0.0, "loss.sigma_noise", "must be > 0")
    _check(lo.cons_target in ("probs", "logits"), "loss.cons_target", "must be probs|logits")
    _check(lo.recon_reduction in ("sum", "mean"), "loss.recon_reduction", "must be sum|mean")
    _check(lo.dice_smooth > 0.0, "loss.dice_smooth", "must be > 0")
    _check(0.0 < lo.prob_clamp < 0.1, "loss.prob_clamp", "must be in (0, 0.1)")

    _check(f.rounds >= 1, "federation.rounds", "must be >= 1")
    for name in ("iter_max_vae", "iter_max_seg"):
        v = getattr(f, name)
        _check(v is None or v >= 0, f"federation.{name}", "must be >= 0 or null")
    _check(f.iter_max_distill >= 0, "federation.iter_max_distill", "must be >= 0")
    _check(f.distill_batch >= 1, "federation.distill_batch", "must be >= 1")
    _check(f.lr_unet >= 0.0, "federation.lr_unet", "must be >= 0")
    _check(f.lr_vae >= 0.0, "federation.lr_vae", "must be >= 0")
    _check(f.lr_distill is None or f.lr_distill >= 0.0, "federation.lr_distill", "must be >= 0")
    _check(f.batch_labeled >= 1, "federation.batch_labeled", "must be >= 1")
    _check(f.batch_unlabeled >= 0, "federation.batch_unlabeled", "must be >= 0")
    _check(f.workers >= 1, "federation.workers", "must be >= 1")

    _check(o.checkpoint_every >= 0, "output.checkpoint_every", "must be >= 0")
