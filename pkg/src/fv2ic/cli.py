"""Command-line front end.

    fv2ic [--config F] [--seed N] [--out DIR] [--no-plots] <command> ...

Errors are printed to stderr as a single JSON line and the process exits
non-zero (2 for configuration errors, 1 otherwise).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import torch

from .analysis import analyze_latent, plot_convergence, run_ablation, summarize_ablation, summarize_sweep, sweep_labeled_ratio
from .config import ExperimentConfig, from_dict, parse_config
from .errors import ConfigError, Fv2icError
from .fedsim import evaluate_model, run_experiment
from .metrics import METRICS
from .models import DTYPES, build_model
from .params import load_checkpoint
from .synthdata import generate_dataset, load_dataset, save_dataset

log = logging.getLogger("fv2ic")


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fv2ic", description=__doc__.splitlines()[0])
    p.add_argument("--config", type=Path, help="JSON config file (defaults: desk preset)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", type=Path, help="output directory (default: config output.out_dir)")
    p.add_argument("--no-plots", action="store_true", help="write CSVs only")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("generate", help="write the synthetic federated dataset to --out")

    t = sub.add_parser("train", help="run one federated experiment")
    t.add_argument("--data", type=Path, help="dataset directory written by `generate`")

    e = sub.add_parser("evaluate", help="score a checkpoint on a data split")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.add_argument("--data", type=Path, help="dataset directory (default: regenerate from the checkpoint config)")

    s = sub.add_parser("sweep-ratio", help="framework vs labeled-only baseline over labeled ratios")
    s.add_argument("--ratios", type=_float_list, default=[0.1, 0.2, 0.4])
    s.add_argument("--seeds", type=_int_list, default=[0, 1, 2])

    a = sub.add_parser("ablation", help="the seven-row component ablation")
    a.add_argument("--seeds", type=_int_list, default=[0, 1, 2])

    la = sub.add_parser("analyze-latent", help="latent distance and projection for two checkpoints")
    la.add_argument("--combined", type=Path, required=True, help="checkpoint of the jointly trained model")
    la.add_argument("--vae-only", type=Path, required=True, help="checkpoint of the VAE trained alone")
    la.add_argument("--split", choices=("train", "val", "test"), default="test")

    pl = sub.add_parser("plot", help="convergence curves from a report.csv")
    pl.add_argument("--report", type=Path, required=True)
    pl.add_argument("--clients", type=_int_list, help="client ids to plot (default: all)")
    pl.add_argument("--window", type=int, default=5)
    return p


def load_config(args) -> ExperimentConfig:
    cfg = parse_config(args.config) if args.config else from_dict({})
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.no_plots:
        over["output.plots"] = False
    threads = os.environ.get("FV2IC_THREADS")
    if threads:
        try:
            cap = int(threads)
        except ValueError:
            raise ConfigError("FV2IC_THREADS", f"expected an integer, got {threads!r}")
        if cap < 1:
            raise ConfigError("FV2IC_THREADS", "must be >= 1")
        over["federation.workers"] = min(cfg.federation.workers, cap)
    return cfg.replace(**over) if over else cfg


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    return args.out if args.out is not None else Path(cfg.output.out_dir)


def _workers() -> int:
    return max(1, int(os.environ.get("FV2IC_THREADS", "1")))


def _model_from_checkpoint(path: Path):
    state, meta = load_checkpoint(path)
    if "config" not in meta:
        raise ConfigError(str(path), "checkpoint carries no config")
    cfg = from_dict(meta["config"])
    model = build_model(cfg.model, cfg.dataset.image_size, cfg.dataset.num_classes)
    model.load_state_dict({k: v.to(DTYPES[cfg.model.dtype]) for k, v in state.items()})
    return model, cfg


def _split(cfg: ExperimentConfig, data: Path | None, split: str):
    ds = load_dataset(data) if data is not None else generate_dataset(cfg)
    return ds.split_arrays(split)


def _print_table(rows: list[dict], keys: list[str]) -> None:
    print(",".join(keys))
    for r in rows:
        print(",".join(f"{r[k]:.6f}" if isinstance(r[k], float) else str(r[k]) for k in keys))


def cmd_generate(args, cfg):
    out = _out_dir(args, cfg)
    ds = generate_dataset(cfg)
    save_dataset(ds, out, cfg)
    print(json.dumps({"out": str(out), "clients": len(ds.clients), "val": len(ds.val), "test": len(ds.test)}))


def cmd_train(args, cfg):
    out = _out_dir(args, cfg)
    ds = load_dataset(args.data) if args.data else None
    res = run_experiment(cfg, out, ds)
    if cfg.output.plots:
        plot_convergence(out / "report.csv", out)
    print(json.dumps({"out": str(out), "best_round": res.best_round, "test": res.test_metrics}))


def cmd_evaluate(args, cfg):
    model, ckpt_cfg = _model_from_checkpoint(args.checkpoint)
    images, masks = _split(ckpt_cfg, args.data, args.split)
    scores, _ = evaluate_model(model, images, masks, ckpt_cfg.dataset.num_classes, DTYPES[ckpt_cfg.model.dtype])
    _print_table([{"split": args.split, **scores}], ["split", *METRICS])
    print()
    for k in METRICS:
        print(f"{k:>12s}  {scores[k]:.4f}")


def cmd_sweep(args, cfg):
    out = _out_dir(args, cfg)
    rows = sweep_labeled_ratio(cfg, args.ratios, args.seeds, out, cfg.output.plots, workers=_workers())
    means = summarize_sweep(rows)
    _print_table(
        [{"ratio": r, "method": m, "mean_dice": v} for (r, m), v in sorted(means.items())],
        ["ratio", "method", "mean_dice"],
    )


def cmd_ablation(args, cfg):
    out = _out_dir(args, cfg)
    rows = run_ablation(cfg, args.seeds, out, workers=_workers())
    summary = summarize_ablation(rows)
    _print_table([{"config": k, **v} for k, v in summary.items()], ["config", *METRICS])


def cmd_analyze_latent(args, cfg):
    combined, c_cfg = _model_from_checkpoint(args.combined)
    alone, _ = _model_from_checkpoint(args.vae_only)
    images, masks = _split(c_cfg, None, args.split)
    report = analyze_latent(
        {"combined": combined, "vae_only": alone}, images, masks, c_cfg.dataset.num_classes, _out_dir(args, cfg), cfg.output.plots
    )
    _print_table([{"model": k, "avg_d": v["avg_d"]} for k, v in report.items()], ["model", "avg_d"])


def cmd_plot(args, cfg):
    out = _out_dir(args, cfg)
    series = plot_convergence(args.report, out, args.clients, args.window, cfg.output.plots)
    print(json.dumps({"out": str(out), "curves": {k: sorted(v) for k, v in series.items()}}))


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sweep-ratio": cmd_sweep,
    "ablation": cmd_ablation,
    "analyze-latent": cmd_analyze_latent,
    "plot": cmd_plot,
}


def _error_line(kind: str, message: str, **extra) -> str:
    return json.dumps({"error": kind, "message": message, **extra})


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    threads = os.environ.get("FV2IC_THREADS")
    if threads and threads.isdigit() and int(threads) > 0:
        torch.set_num_threads(int(threads))
    try:
        cfg = load_config(args)
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(_error_line(exc.kind, str(exc), field=exc.field), file=sys.stderr)
        return 2
    except Fv2icError as exc:
        print(_error_line(exc.kind, str(exc)), file=sys.stderr)
        return 1
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        print(_error_line("io", f"{type(exc).__name__}: {exc}"), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
