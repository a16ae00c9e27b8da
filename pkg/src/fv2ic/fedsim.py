"""In-process federation: local two-phase training on clients, FedAvg plus
ensemble distillation on the server, round loop and communication ledger.

Parameters cross the client/server boundary only as cloned state dicts.
Every client owns its model instance and its random streams, so the result
of a round does not depend on the order in which clients execute.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import ExperimentConfig
from .errors import NumericFault, ProtocolError
from .losses import distill_kl_logits, ramp_weight, seg_loss, vae_loss
from .metrics import METRICS, evaluate_masks
from .models import DTYPES, FedModel, build_model, init_params, predict_probs
from .params import check_manifests, clone_state, manifest, payload_bytes, save_checkpoint
from .synthdata import (
    ClientDataset,
    FederatedDataset,
    client_rng,
    generate_dataset,
    iterations_per_epoch,
    make_batch,
)

log = logging.getLogger(__name__)

# spawn keys for torch streams
_TORCH_INIT = 100
_TORCH_CLIENT = 101
_TORCH_SERVER = 102

UNET_PREFIX = "unet."


def torch_stream(seed: int, *key: int) -> torch.Generator:
    state = np.random.SeedSequence([seed, *key]).generate_state(1, np.uint32)[0]
    g = torch.Generator()
    g.manual_seed(int(state))
    return g


@dataclass
class ClientState:
    client_id: int
    model: FedModel
    data: ClientDataset
    rng: np.random.Generator
    generator: torch.Generator

    @property
    def dataset_size(self) -> int:
        return len(self.data)


@dataclass
class ServerState:
    model: FedModel
    round: int
    total_rounds: int
    generator: torch.Generator


@dataclass
class CommLedger:
    rows: list[dict] = field(default_factory=list)

    def record(self, round_idx: int, client_ids: list[int], payload: int) -> int:
        for cid in client_ids:
            self.rows.append({"round": round_idx, "client": cid, "bytes_up": payload, "bytes_down": payload})
        return 2 * payload * len(client_ids)

    def round_total(self, round_idx: int) -> int:
        return sum(r["bytes_up"] + r["bytes_down"] for r in self.rows if r["round"] == round_idx)

    @property
    def total(self) -> int:
        return sum(r["bytes_up"] + r["bytes_down"] for r in self.rows)


def exchanged_keys(model: FedModel, cfg: ExperimentConfig) -> list[str]:
    """Parameter names sent over the wire: both models, or only the UNet when the VAE is unused."""
    keys = list(model.state_dict().keys())
    if cfg.uses_vae:
        return keys
    return [k for k in keys if k.startswith(UNET_PREFIX)]


def round_payload_bytes(model: FedModel, cfg: ExperimentConfig) -> int:
    keys = set(exchanged_keys(model, cfg))
    return payload_bytes([(n, s) for n, s in manifest(model.state_dict()) if n in keys])


def _mean_rows(rows: list[dict[str, float]]) -> dict[str, float]:
    if not rows:
        return {}
    return {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}


def client_local_train(
    state: ClientState, global_params: dict, t: int, cfg: ExperimentConfig
) -> tuple[OrderedDict, dict[str, float]]:
    """Local update: copy the global model, VAE phase, then segmentation phase."""
    model = state.model
    check_manifests(manifest(model.state_dict()), manifest(global_params), f"client {state.client_id}")
    model.load_state_dict(global_params)
    model.train()
    f = cfg.federation
    dtype = DTYPES[cfg.model.dtype]
    n_l, n_u = f.batch_labeled, f.batch_unlabeled
    summary: dict[str, float] = {}

    try:
        if cfg.uses_vae:
            iters = f.iter_max_vae
            if iters is None:
                iters = iterations_per_epoch(state.data, n_l, max(n_u, 1))
            if iters > 0:
                opt = torch.optim.Adam(model.vae.parameters(), lr=f.lr_vae)
                rows = []
                for _ in range(iters):
                    batch = make_batch(state.data, n_l, n_u, state.rng, dtype)
                    out = vae_loss(model.vae, batch.all_images, state.generator, cfg.loss.recon_reduction)
                    opt.zero_grad()
                    out.total.backward()
                    opt.step()
                    rows.append({"vae_kl": out.kl.item(), "vae_mse": out.mse.item()})
                summary.update(_mean_rows(rows))

        iters = f.iter_max_seg
        if iters is None:
            iters = iterations_per_epoch(state.data, n_l, n_u)
        if iters > 0:
            opt = torch.optim.Adam(
                [
                    {"params": model.trainable_unet_parameters(), "lr": f.lr_unet},
                    {"params": list(model.vae.parameters()), "lr": f.lr_vae},
                ]
            )
            rows = []
            for _ in range(iters):
                batch = make_batch(state.data, n_l, n_u, state.rng, dtype)
                out = seg_loss(model, batch, t, cfg, state.generator)
                opt.zero_grad()
                out.total.backward()
                opt.step()
                b = out.floats()
                rows.append({"dice": b["dice"], "ce": b["ce"], "cons": b["cons"], "seg_total": b["total"]})
            summary.update(_mean_rows(rows))
    except NumericFault as exc:
        raise NumericFault(exc.where, "non-finite values during local training", state.client_id) from exc
    return clone_state(model.state_dict()), summary


def weighted_average(states: list[dict], sizes: list[int], keys: list[str] | None = None) -> OrderedDict:
    """Parameter-wise mean weighted by dataset size, accumulated in float64 in list order."""
    if not states:
        raise ProtocolError("cannot aggregate an empty client list")
    ref = manifest(states[0])
    for i, s in enumerate(states[1:], start=1):
        check_manifests(ref, manifest(s), f"client #{i}")
    total = float(sum(sizes))
    weights = [n / total for n in sizes]
    keys = list(states[0].keys()) if keys is None else keys
    out = OrderedDict()
    for k in keys:
        acc = torch.zeros(states[0][k].shape, dtype=torch.float64)
        for w, s in zip(weights, states):
            acc += w * s[k].to(torch.float64)
        out[k] = acc.to(states[0][k].dtype)
    return out


def fedavg_aggregate(clients: list[ClientState], keys: list[str] | None = None) -> OrderedDict:
    """FedAvg over the clients' current local parameters, ascending client id."""
    ordered = sorted(clients, key=lambda c: c.client_id)
    return weighted_average(
        [c.model.state_dict() for c in ordered], [c.dataset_size for c in ordered], keys
    )


def client_weights(clients: list[ClientState]) -> list[float]:
    total = float(sum(c.dataset_size for c in clients))
    return [c.dataset_size / total for c in clients]


@torch.no_grad()
def ensemble_predict(clients: list[ClientState], z: torch.Tensor) -> torch.Tensor:
    """Size-weighted mixture of each client's prediction on its own decoding of ``z``."""
    ordered = sorted(clients, key=lambda c: c.client_id)
    out = None
    for w, c in zip(client_weights(ordered), ordered):
        probs = predict_probs(c.model.unet(c.model.vae.decode(z), z))
        out = w * probs if out is None else out + w * probs
    return out


def distill(server: ServerState, clients: list[ClientState], cfg: ExperimentConfig) -> list[float]:
    """Pull the global decoder + UNet towards the client ensemble on generated images.

    Returns the KL value at every iteration. The global encoder is not on
    this computation path and stays fixed.
    """
    f = cfg.federation
    if f.iter_max_distill == 0:
        return []
    model = server.model
    dtype = DTYPES[cfg.model.dtype]
    params = list(model.vae.decoder.parameters()) + model.trainable_unet_parameters()
    opt = torch.optim.Adam(params, lr=cfg.lr_distill)
    shape = (f.distill_batch, cfg.model.latent_dim)
    fixed = torch.randn(shape, generator=server.generator, dtype=dtype) if f.distill_fixed_z else None
    trajectory = []
    model.train()
    try:
        for _ in range(f.iter_max_distill):
            z = fixed if fixed is not None else torch.randn(shape, generator=server.generator, dtype=dtype)
            target = ensemble_predict(clients, z)
            logits = model.unet(model.vae.decode(z), z)
            loss = distill_kl_logits(target, logits, cfg.loss.prob_clamp, f.distill_reverse_kl)
            opt.zero_grad()
            loss.backward()
            opt.step()
            trajectory.append(loss.item())
    except NumericFault as exc:
        raise NumericFault(exc.where, "non-finite values during distillation") from exc
    return trajectory


@torch.no_grad()
def predict_masks(model: FedModel, images: np.ndarray, dtype=torch.float32, batch_size: int = 64):
    """Argmax masks and latent means, with z = mu (deterministic)."""
    model.eval()
    masks, mus = [], []
    for i in range(0, len(images), batch_size):
        x = torch.from_numpy(images[i : i + batch_size]).to(dtype).unsqueeze(1)
        mu, _ = model.vae.encode(x)
        masks.append(model.unet(x, mu).argmax(dim=1).numpy())
        mus.append(mu.numpy())
    return np.concatenate(masks), np.concatenate(mus)


def evaluate_model(model: FedModel, images: np.ndarray, masks: np.ndarray, num_classes: int, dtype=torch.float32):
    pred, _ = predict_masks(model, images, dtype)
    return evaluate_masks(pred, masks, num_classes)


def _train_all(clients, global_state, t, cfg):
    workers = min(cfg.federation.workers, int(os.environ.get("FV2IC_THREADS", cfg.federation.workers)))
    if workers > 1 and len(clients) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(client_local_train, c, global_state, t, cfg) for c in clients]
            return [fut.result() for fut in futures]
    return [client_local_train(c, global_state, t, cfg) for c in clients]


def run_round(
    server: ServerState,
    clients: list[ClientState],
    t: int,
    cfg: ExperimentConfig,
    ledger: CommLedger,
    val: tuple[np.ndarray, np.ndarray] | None = None,
) -> dict:
    """One broadcast / local-train / aggregate / distill / evaluate cycle."""
    if t >= server.total_rounds:
        raise ProtocolError(f"round {t} outside [0, {server.total_rounds})")
    clients = sorted(clients, key=lambda c: c.client_id)
    global_state = clone_state(server.model.state_dict())
    results = _train_all(clients, global_state, t, cfg)

    keys = exchanged_keys(server.model, cfg)
    aggregated = fedavg_aggregate(clients, keys)
    merged = clone_state(global_state)
    merged.update(aggregated)
    server.model.load_state_dict(merged)
    trajectory = distill(server, clients, cfg)
    server.round = t + 1

    payload = round_payload_bytes(server.model, cfg)
    ledger.record(t, [c.client_id for c in clients], payload)

    row: dict = {"round": t + 1}
    for c, (_, summary) in zip(clients, results):
        for k in ("vae_kl", "vae_mse", "dice", "ce", "cons", "seg_total"):
            row[f"c{c.client_id}_{k}"] = summary.get(k, float("nan"))
    row["lambda_t"] = ramp_weight(t, cfg.loss.lambda_max, cfg.ramp_rounds)
    row["distill_kl_first"] = trajectory[0] if trajectory else float("nan")
    row["distill_kl_last"] = trajectory[-1] if trajectory else float("nan")
    row["distill_kl_mean"] = float(np.mean(trajectory)) if trajectory else float("nan")
    if val is not None:
        scores, _ = evaluate_model(server.model, val[0], val[1], cfg.dataset.num_classes, DTYPES[cfg.model.dtype])
        for k in METRICS:
            row[f"val_{k}"] = scores[k]
    row["bytes_up"] = payload * len(clients)
    row["bytes_down"] = payload * len(clients)
    row["bytes_total"] = ledger.round_total(t)
    return row


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    rows: list[dict]
    ledger: CommLedger
    test_metrics: dict[str, float]
    test_metrics_last: dict[str, float]
    best_round: int
    final_state: OrderedDict
    best_state: OrderedDict
    wall_time: float
    out_dir: Path | None = None


def setup_federation(cfg: ExperimentConfig, dataset: FederatedDataset | None = None):
    ds = generate_dataset(cfg) if dataset is None else dataset
    dtype = DTYPES[cfg.model.dtype]
    server_model = init_params(cfg, torch_stream(cfg.seed, _TORCH_INIT))
    server = ServerState(server_model, 0, cfg.federation.rounds, torch_stream(cfg.seed, _TORCH_SERVER))
    clients = []
    for c in ds.clients:
        model = build_model(cfg.model, cfg.dataset.image_size, cfg.dataset.num_classes)
        model.load_state_dict(server_model.state_dict())
        clients.append(
            ClientState(
                c.client_id,
                model.to(dtype),
                c,
                client_rng(cfg.seed, c.client_id),
                torch_stream(cfg.seed, _TORCH_CLIENT, c.client_id),
            )
        )
    return ds, server, clients


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()), lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: _fmt(v) for k, v in r.items()})


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        conv = {}
        for k, v in r.items():
            try:
                conv[k] = int(v)
            except ValueError:
                try:
                    conv[k] = float(v)
                except ValueError:
                    conv[k] = v
        out.append(conv)
    return out


def run_experiment(
    cfg: ExperimentConfig,
    out_dir: str | Path | None = None,
    dataset: FederatedDataset | None = None,
) -> ExperimentResult:
    """Train for ``cfg.federation.rounds`` rounds and test the best-validation model.

    When ``out_dir`` is given, writes ``report.csv``, ``ledger.csv``,
    ``summary.json``, ``config.json`` and ``final``/``best`` checkpoints.
    """
    start = time.perf_counter()
    ds, server, clients = setup_federation(cfg, dataset)
    val = ds.split_arrays("val")
    dtype = DTYPES[cfg.model.dtype]
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    ledger = CommLedger()
    rows = []
    best_dice, best_round, best_state = -1.0, 0, clone_state(server.model.state_dict())
    for t in range(cfg.federation.rounds):
        row = run_round(server, clients, t, cfg, ledger, val)
        rows.append(row)
        log.info("round %d val_dice=%.4f", row["round"], row["val_dice"])
        if row["val_dice"] > best_dice:
            best_dice, best_round = row["val_dice"], row["round"]
            best_state = clone_state(server.model.state_dict())
        every = cfg.output.checkpoint_every
        if out is not None and every and row["round"] % every == 0:
            save_checkpoint(out / "checkpoints" / f"round_{row['round']:04d}", server.model.state_dict(), _ckpt_meta(cfg, row["round"]))

    final_state = clone_state(server.model.state_dict())
    test_img, test_mask = ds.split_arrays("test")
    test_last, _ = evaluate_model(server.model, test_img, test_mask, cfg.dataset.num_classes, dtype)
    server.model.load_state_dict(best_state)
    test_best, _ = evaluate_model(server.model, test_img, test_mask, cfg.dataset.num_classes, dtype)
    server.model.load_state_dict(final_state)
    wall = time.perf_counter() - start

    result = ExperimentResult(cfg, rows, ledger, test_best, test_last, best_round, final_state, best_state, wall, out)
    if out is not None:
        write_outputs(result, out)
    return result


def _ckpt_meta(cfg: ExperimentConfig, round_idx: int) -> dict:
    return {"round": round_idx, "config": cfg.to_dict(), "config_hash": cfg.config_hash()}


def write_outputs(result: ExperimentResult, out: Path) -> None:
    cfg = result.config
    write_csv(out / "report.csv", result.rows)
    write_csv(out / "ledger.csv", result.ledger.rows)
    (out / "config.json").write_text(cfg.to_json())
    save_checkpoint(out / "final", result.final_state, _ckpt_meta(cfg, len(result.rows)))
    save_checkpoint(out / "best", result.best_state, _ckpt_meta(cfg, result.best_round))
    summary = {
        "test": result.test_metrics,
        "test_last_round": result.test_metrics_last,
        "best_round": result.best_round,
        "config_hash": cfg.config_hash(),
        "wall_time_s": result.wall_time,
        "comm_bytes_total": result.ledger.total,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
