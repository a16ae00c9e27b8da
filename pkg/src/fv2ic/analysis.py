"""Experiment pipelines built on top of the federation engine: labeled-ratio
sweep, ablation grid, latent-space statistics and convergence curves.

Every pipeline writes a CSV (the contract) and optionally a PNG.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
from scipy.spatial.distance import pdist

from .config import PRESETS, ExperimentConfig
from .errors import ContractViolation, Fv2icError
from .fedsim import ExperimentResult, predict_masks, read_csv, run_experiment, write_csv
from .metrics import METRICS, image_scores
from .models import FedModel

log = logging.getLogger(__name__)

Runner = Callable[[ExperimentConfig], ExperimentResult]

GOOD_DICE = 0.9


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def with_preset(base: ExperimentConfig, preset: str) -> ExperimentConfig:
    """``base`` with the switches of a named preset layered on top."""
    return base.replace(**_flatten(PRESETS[preset]))


def baseline_config(base: ExperimentConfig) -> ExperimentConfig:
    return with_preset(base, "fedavg_baseline")


def _run_cell(cfg: ExperimentConfig) -> ExperimentResult:
    return run_experiment(cfg)


def _run_many(cfgs: list[ExperimentConfig], runner: Runner | None, workers: int):
    """Run configs, returning (result | None, error message) per cell in input order."""
    runner = runner or _run_cell

    def safe(cfg):
        try:
            return runner(cfg), ""
        except Fv2icError as exc:
            log.error("cell failed: %s", exc)
            return None, f"{exc.kind}: {exc}"

    if workers > 1 and runner is _run_cell:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_cell, c) for c in cfgs]
            out = []
            for fut in futures:
                try:
                    out.append((fut.result(), ""))
                except Fv2icError as exc:
                    out.append((None, f"{exc.kind}: {exc}"))
            return out
    return [safe(c) for c in cfgs]


# ---------------------------------------------------------------- ratio sweep


def sweep_labeled_ratio(
    base: ExperimentConfig,
    ratios: Iterable[float],
    seeds: Iterable[int],
    out_dir: str | Path | None = None,
    plots: bool = True,
    runner: Runner | None = None,
    workers: int = 1,
) -> list[dict]:
    """Framework vs labeled-only baseline at every labeled ratio and seed.

    Rows: ratio, method, seed, dice, status. A failed cell keeps its row
    with dice NaN and the error in ``status``.
    """
    ratios, seeds = list(ratios), list(seeds)
    for r in ratios:
        if not 0.0 < r <= 1.0:
            raise ContractViolation(f"ratio {r} outside (0, 1]")
    if not seeds:
        raise ContractViolation("need at least one seed")
    cells, cfgs = [], []
    for r in ratios:
        for method in ("framework", "baseline"):
            for s in seeds:
                cfg = base.replace(**{"dataset.labeled_ratio": r, "seed": s})
                if method == "baseline":
                    cfg = baseline_config(cfg)
                cells.append((r, method, s))
                cfgs.append(cfg)
    rows = []
    for (r, method, s), (res, err) in zip(cells, _run_many(cfgs, runner, workers)):
        dice = res.test_metrics["dice"] if res is not None else float("nan")
        rows.append({"ratio": r, "method": method, "seed": s, "dice": dice, "status": err or "ok"})
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "sweep_ratio.csv", rows)
        if plots:
            plot_sweep(rows, out / "sweep_ratio.png")
    return rows


def summarize_sweep(rows: list[dict]) -> dict[tuple[float, str], float]:
    """Mean dice per (ratio, method) over seeds."""
    groups: dict[tuple[float, str], list[float]] = {}
    for r in rows:
        groups.setdefault((float(r["ratio"]), r["method"]), []).append(float(r["dice"]))
    return {k: float(np.nanmean(v)) for k, v in groups.items()}


def plot_sweep(rows: list[dict], path: Path) -> None:
    plt = _pyplot()
    means = summarize_sweep(rows)
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for method in ("framework", "baseline"):
        pts = sorted((r, v) for (r, m), v in means.items() if m == method)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=method)
    ax.set_xlabel("labeled ratio")
    ax.set_ylabel("test dice")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ------------------------------------------------------------------- ablation

ABLATION_ROWS = (
    "dice_only",
    "dice_ce",
    "gaussian_aug",
    "vae_aug",
    "gaussian_aug_feature",
    "vae_aug_feature",
    "full",
)


def ablation_configs(base: ExperimentConfig) -> list[tuple[str, ExperimentConfig]]:
    """Seven configurations, each adding one component to the previous group.

    The first two rows are the labeled-only baseline without and with the
    CE term. Gaussian-augmentation rows train the VAE only when its
    features are injected.
    """
    no_distill = {"federation.iter_max_distill": 0}
    rows = {
        "dice_only": baseline_config(base).replace(**{"loss.omega": 0.0}),
        "dice_ce": baseline_config(base),
        "gaussian_aug": base.replace(
            **no_distill,
            **{"loss.consistency": "gaussian", "model.latent_injection": False, "federation.iter_max_vae": 0},
        ),
        "vae_aug": base.replace(**no_distill, **{"model.latent_injection": False}),
        "gaussian_aug_feature": base.replace(**no_distill, **{"loss.consistency": "gaussian"}),
        "vae_aug_feature": base.replace(**no_distill),
        "full": base,
    }
    return [(name, rows[name]) for name in ABLATION_ROWS]


def run_ablation(
    base: ExperimentConfig,
    seeds: Iterable[int],
    out_dir: str | Path | None = None,
    runner: Runner | None = None,
    workers: int = 1,
) -> list[dict]:
    """One row per (configuration, seed) with the four test metrics."""
    seeds = list(seeds)
    if not seeds:
        raise ContractViolation("need at least one seed")
    cells, cfgs = [], []
    for name, cfg in ablation_configs(base):
        for s in seeds:
            cells.append((name, s))
            cfgs.append(cfg.replace(seed=s))
    rows = []
    for (name, s), (res, err) in zip(cells, _run_many(cfgs, runner, workers)):
        row = {"config": name, "seed": s}
        for k in METRICS:
            row[k] = res.test_metrics[k] if res is not None else float("nan")
        row["status"] = err or "ok"
        rows.append(row)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "ablation.csv", rows)
    return rows


def summarize_ablation(rows: list[dict]) -> dict[str, dict[str, float]]:
    out: dict[str, dict[str, float]] = {}
    for name in dict.fromkeys(r["config"] for r in rows):
        sel = [r for r in rows if r["config"] == name]
        out[name] = {k: float(np.nanmean([float(r[k]) for r in sel])) for k in METRICS}
    return out


# ------------------------------------------------------------ latent analysis


def avg_pairwise_distance(vectors: np.ndarray) -> float:
    """Mean Euclidean distance over all unordered pairs; 0 with fewer than two rows."""
    v = np.asarray(vectors, dtype=np.float64)
    if v.ndim != 2:
        raise ContractViolation(f"expected (N, D) vectors, got shape {v.shape}")
    if len(v) < 2:
        return 0.0
    return float(pdist(v).mean())


def classical_mds(vectors: np.ndarray, dims: int = 2) -> np.ndarray:
    """Distance-preserving projection via the top eigenvectors of the double-centred Gram matrix."""
    v = np.asarray(vectors, dtype=np.float64)
    n = len(v)
    if n == 0:
        return np.zeros((0, dims))
    centred = v - v.mean(axis=0)
    gram = centred @ centred.T
    vals, vecs = np.linalg.eigh(gram)
    order = np.argsort(vals)[::-1][:dims]
    coords = vecs[:, order] * np.sqrt(np.clip(vals[order], 0.0, None))
    # fix the sign so the projection is reproducible
    signs = np.sign(coords[np.argmax(np.abs(coords), axis=0), range(coords.shape[1])])
    coords = coords * np.where(signs == 0, 1.0, signs)
    if coords.shape[1] < dims:
        coords = np.pad(coords, ((0, 0), (0, dims - coords.shape[1])))
    return coords


def analyze_latent(
    models: dict[str, FedModel],
    images: np.ndarray,
    masks: np.ndarray,
    num_classes: int,
    out_dir: str | Path | None = None,
    plots: bool = True,
) -> dict[str, dict]:
    """Latent means of every image under each model, their avg pairwise distance and a 2-D projection.

    Per-sample dice comes from each model's own segmentation output; for a
    model whose UNet was never trained this is just a label for colouring.
    """
    dims = {name: m.vae.latent_dim for name, m in models.items()}
    if len(set(dims.values())) > 1:
        raise ContractViolation(f"latent sizes differ: {dims}")
    report: dict[str, dict] = {}
    rows = []
    for name, model in models.items():
        pred, mu = predict_masks(model, images)
        dice = np.array([image_scores(p, t, num_classes)["dice"] for p, t in zip(pred, masks)])
        coords = classical_mds(mu)
        report[name] = {"avg_d": avg_pairwise_distance(mu), "mu": mu, "coords": coords, "dice": dice}
        for i in range(len(mu)):
            rows.append(
                {
                    "model": name,
                    "index": i,
                    "x": float(coords[i, 0]),
                    "y": float(coords[i, 1]),
                    "dice": float(dice[i]),
                    "good": int(dice[i] > GOOD_DICE),
                }
            )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "latent_points.csv", rows)
        write_csv(out / "latent_summary.csv", [{"model": k, "avg_d": v["avg_d"]} for k, v in report.items()])
        if plots:
            plot_latent(report, out / "latent_scatter.png")
    return report


def plot_latent(report: dict[str, dict], path: Path) -> None:
    plt = _pyplot()
    fig, axes = plt.subplots(1, len(report), figsize=(4 * len(report), 3.6), squeeze=False)
    for ax, (name, r) in zip(axes[0], report.items()):
        good = r["dice"] > GOOD_DICE
        ax.scatter(*r["coords"][~good].T, s=10, c="tab:blue", label=f"dice <= {GOOD_DICE}")
        ax.scatter(*r["coords"][good].T, s=10, c="tab:red", label=f"dice > {GOOD_DICE}")
        ax.set_title(f"{name}  avg_d={r['avg_d']:.3f}")
    axes[0][0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ----------------------------------------------------------------- convergence


def moving_average(values: Iterable[float], window: int) -> np.ndarray:
    """Trailing mean over the last ``window`` points (fewer at the start)."""
    if window < 1:
        raise ContractViolation("window must be >= 1")
    v = np.asarray(list(values), dtype=np.float64)
    csum = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (csum[idx] - csum[lo]) / (idx - lo)


def convergence_series(
    rows: list[dict], clients: Iterable[int] | None = None, window: int = 5
) -> dict[str, dict[str, np.ndarray]]:
    """Smoothed supervised (dice) and unsupervised (consistency) loss per client plus the distillation KL."""
    if len(rows) < 2:
        raise ContractViolation("convergence needs at least two rounds")
    cols = rows[0].keys()
    ids = sorted(int(k[1:].split("_")[0]) for k in cols if k.startswith("c") and k.endswith("_dice"))
    clients = ids if clients is None else list(clients)
    out: dict[str, dict[str, np.ndarray]] = {"supervised": {}, "consistency": {}, "distill": {}}
    for cid in clients:
        for panel, col in (("supervised", f"c{cid}_dice"), ("consistency", f"c{cid}_cons")):
            if col not in cols:
                raise ContractViolation(f"report has no column {col!r}")
            out[panel][f"client {cid}"] = moving_average([float(r[col]) for r in rows], window)
    if "distill_kl_mean" not in cols:
        raise ContractViolation("report has no column 'distill_kl_mean'")
    kl = [float(r["distill_kl_mean"]) for r in rows]
    if not all(math.isnan(x) for x in kl):
        out["distill"]["server"] = moving_average(kl, window)
    return out


def plot_convergence(
    report_csv: str | Path,
    out_dir: str | Path,
    clients: Iterable[int] | None = None,
    window: int = 5,
    plots: bool = True,
) -> dict[str, dict[str, np.ndarray]]:
    rows = read_csv(report_csv)
    series = convergence_series(rows, clients, window)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    flat = [{"round": i + 1} for i in range(len(rows))]
    for panel, curves in series.items():
        for name, ys in curves.items():
            for row, y in zip(flat, ys):
                row[f"{panel}:{name}"] = float(y)
    write_csv(out / "convergence.csv", flat)
    if plots:
        plt = _pyplot()
        fig, axes = plt.subplots(1, 2, figsize=(9, 3.4))
        for name, ys in series["supervised"].items():
            axes[0].plot(range(1, len(ys) + 1), ys, label=name)
        for name, ys in series["consistency"].items():
            axes[1].plot(range(1, len(ys) + 1), ys, label=f"{name} intra")
        for name, ys in series["distill"].items():
            axes[1].plot(range(1, len(ys) + 1), ys, "k--", label="inter (server KL)")
        axes[0].set_title("supervised dice loss")
        axes[1].set_title("unsupervised losses")
        for ax in axes:
            ax.set_xlabel("round")
            ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(out / "convergence.png", dpi=120)
        plt.close(fig)
    return series


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt
