"""Command line front end: ``crosel train | ablate | plot``.

Exit codes: 0 success, 2 bad arguments or missing inputs, 3 training diverged.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .data import load_split, make_pll
from .errors import DivergenceError, NumericError
from .training import TrainConfig, read_metrics, train, write_artifacts

log = logging.getLogger("crosel")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 2, 3

# flag name -> TrainConfig field
CONFIG_FLAGS = {
    "q": "q", "gamma": "gamma", "t": "t", "temp": "temperature", "alpha": "alpha",
    "lambda-cr": "lambda_cr", "lambda-mode": "lambda_mode", "epochs": "epochs",
    "warmup-epochs": "warmup_epochs", "batch-size": "batch_size", "seed": "seed",
    "reg-scope": "reg_scope", "sel-aug": "sel_aug", "method": "method", "arch": "arch",
    "lr": "lr", "momentum": "momentum", "weight-decay": "weight_decay",
}

PRESETS = {
    "scope": [{"reg_scope": s} for s in ("all", "unselected", "none")],
    "strictness": [{"t": t, "gamma": g} for t in (2, 3, 4) for g in (0.8, 0.9, 0.95)],
    "sel-aug": [{"sel_aug": a} for a in ("none", "weak", "strong")],
    "dual": [{"dual": True}, {"dual": False}],
}


class UsageError(Exception):
    pass


def code_hash() -> str:
    """sha256 over the package sources (relative path, NUL, bytes), sorted by path."""
    root = Path(__file__).parent
    h = hashlib.sha256()
    for p in sorted(root.rglob("*.py")):
        h.update(str(p.relative_to(root)).encode() + b"\0" + p.read_bytes())
    return h.hexdigest()


def _add_run_flags(p: argparse.ArgumentParser):
    d = TrainConfig()
    p.add_argument("--config", type=Path, help="JSON file with flat keys named like the flags")
    p.add_argument("--dataset", default="synthetic-gaussians")
    p.add_argument("--n", type=int, default=2000, help="training subset size")
    p.add_argument("--k", type=int, default=4, help="class count (synthetic data only)")
    p.add_argument("--data-root", default=None)
    p.add_argument("--q", type=float, default=d.q)
    p.add_argument("--gamma", type=float, default=d.gamma)
    p.add_argument("--t", type=int, default=d.t)
    p.add_argument("--temp", type=float, default=d.temperature)
    p.add_argument("--alpha", type=float, default=d.alpha)
    p.add_argument("--lambda-cr", type=float, default=d.lambda_cr)
    p.add_argument("--lambda-mode", choices=("dynamic", "fixed"), default=d.lambda_mode)
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--warmup-epochs", type=int, default=d.warmup_epochs)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--reg-scope", choices=("all", "unselected", "none"), default=d.reg_scope)
    p.add_argument("--sel-aug", choices=("none", "weak", "strong"), default=d.sel_aug)
    p.add_argument("--single-model", action="store_true")
    p.add_argument("--method", choices=("crosel", "cc"), default=d.method)
    p.add_argument("--arch", choices=("mlp", "small-cnn"), default=d.arch)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--momentum", type=float, default=d.momentum)
    p.add_argument("--weight-decay", type=float, default=d.weight_decay)
    p.add_argument("--out", type=Path, required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crosel", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one training job")
    _add_run_flags(p)
    p.add_argument("--overwrite", action="store_true", help="reuse an existing run directory")

    p = sub.add_parser("ablate", help="run an ablation sweep")
    p.add_argument("--preset", required=True)
    p.add_argument("--parallel", type=int, default=1, help="worker processes")
    _add_run_flags(p)

    p = sub.add_parser("plot", help="plot metrics curves of one or more runs")
    p.add_argument("run_dirs", nargs="+", type=Path)
    p.add_argument("--out", type=Path, default=None)
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        if not args.config.exists():
            parser.error(f"config file not found: {args.config}")
        values = json.loads(args.config.read_text())
        defaults = {k.replace("-", "_"): v for k, v in values.items()}
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(defaults) - known)
        if unknown:
            parser.error(f"unknown keys in {args.config}: {unknown}")
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)  # explicit flags still win
    return args


def config_from_args(args) -> TrainConfig:
    values = {field: getattr(args, flag.replace("-", "_")) for flag, field in CONFIG_FLAGS.items()}
    values["dual"] = not args.single_model
    if args.dataset in ("mnist-like", "mnist"):
        values["hflip"] = False
    return TrainConfig(**values)


def _load(args, seed: int):
    kw = {"k": args.k} if args.dataset.startswith("synthetic") else {}
    if args.dataset in ("cifar10-subset", "cifar10"):
        kw["root"] = args.data_root
    train_split, test = load_split(args.dataset, args.n, seed, **kw)
    dataset, truth = make_pll(train_split, args.q, seed)
    return dataset, truth, test


def _manifest(cfg: TrainConfig, args, out: Path, **extra) -> dict:
    return {
        "config": asdict(cfg),
        "dataset": {"source": args.dataset, "n": args.n, "k": args.k},
        "code_hash": code_hash(),
        "out_dir": str(out),
        "started_at": datetime.now(timezone.utc).isoformat(),
        **extra,
    }


def execute_run(cfg: TrainConfig, args, out: Path) -> dict:
    """Write the manifest, train, write artifacts. Returns the summary dict."""
    out.mkdir(parents=True, exist_ok=True)
    manifest = _manifest(cfg, args, out)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    dataset, truth, test = _load(args, cfg.seed)
    result = train(cfg, dataset, test, truth)
    write_artifacts(result, cfg, out)
    manifest["finished_at"] = datetime.now(timezone.utc).isoformat()
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return json.loads((out / "summary.json").read_text())


def cmd_train(args) -> int:
    cfg = config_from_args(args).validate()
    out = args.out
    if (out / "manifest.json").exists() and not args.overwrite:
        raise UsageError(f"{out} already holds a run; pick a new --out or pass --overwrite")
    summary = execute_run(cfg, args, out)
    log.info("final ensemble accuracy %.4f -> %s", summary["final"]["ensemble_acc"], out)
    return EXIT_OK


def preset_runs(name: str, base: TrainConfig) -> list[tuple[str, TrainConfig]]:
    if name not in PRESETS:
        raise UsageError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    runs = []
    for change in PRESETS[name]:
        values = {**asdict(base), **change}
        label = "_".join(f"{k}={'dual' if v is True else 'single' if v is False else v}" for k, v in change.items())
        runs.append((label, TrainConfig(**values)))
    return runs


def _ablation_job(job):
    label, cfg, args, out = job
    return label, cfg, execute_run(cfg, args, out)


def _final_means(summary) -> tuple[float, float | None]:
    ratios = [r for r in summary["final"]["s_ratio"] if r is not None]
    accs = [a for a in summary["final"]["s_acc"] if a is not None]
    return (float(np.mean(ratios)) if ratios else None, float(np.mean(accs)) if accs else None)


def cmd_ablate(args) -> int:
    base = config_from_args(args)
    runs = preset_runs(args.preset, base)
    for _, cfg in runs:
        cfg.validate()
    root = args.out / args.preset
    jobs = [(label, cfg, args, root / label) for label, cfg in runs]
    if args.parallel > 1:
        with ProcessPoolExecutor(args.parallel) as pool:
            results = list(pool.map(_ablation_job, jobs))
    else:
        results = [_ablation_job(j) for j in jobs]
    axes = list(PRESETS[args.preset][0])
    with open(root / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", *axes, "accuracy", "s_ratio", "s_acc"])
        for label, cfg, summary in results:
            ratio, acc = _final_means(summary)
            w.writerow([
                label, *[getattr(cfg, a) for a in axes], f"{summary['final']['ensemble_acc']:.6f}",
                "NA" if ratio is None else f"{ratio:.6f}", "NA" if acc is None else f"{acc:.6f}",
            ])
    plot_runs([root / label for label, _, _ in results], root)
    log.info("wrote %s", root / "comparison.csv")
    return EXIT_OK


def _metrics_paths(run_dirs) -> list[Path]:
    paths = []
    for d in run_dirs:
        d = Path(d)
        if (d / "metrics.csv").exists():
            paths.append(d / "metrics.csv")
        else:
            found = sorted(d.glob("*/metrics.csv"))
            if not found:
                raise UsageError(f"no metrics.csv in {d}")
            paths.extend(found)
    return paths


def plot_runs(run_dirs, out_dir=None) -> list[Path]:
    """One PNG per metric (test_acc, s_ratio, s_acc) against epoch, one curve per
    run (ensemble accuracy and model-averaged selection metrics)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = _metrics_paths(run_dirs)
    out_dir = Path(out_dir) if out_dir else Path(run_dirs[0])
    out_dir.mkdir(parents=True, exist_ok=True)
    series = {}
    for p in paths:
        rows = read_metrics(p)
        by_epoch = {}
        for r in rows:
            by_epoch.setdefault(r["epoch"], []).append(r)
        epochs = sorted(by_epoch)

        def mean(key, rs):
            vals = [r[key] for r in rs if r[key] is not None]
            return float(np.mean(vals)) if vals else np.nan

        series[p.parent.name] = {
            "epoch": epochs,
            "test_acc": [mean("ensemble_acc", by_epoch[e]) for e in epochs],
            "s_ratio": [mean("s_ratio", by_epoch[e]) for e in epochs],
            "s_acc": [mean("s_acc", by_epoch[e]) for e in epochs],
        }
    written = []
    for metric, title in (("test_acc", "test accuracy"), ("s_ratio", "selected ratio"), ("s_acc", "selected accuracy")):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for name, s in series.items():
            ax.plot(s["epoch"], s[metric], marker="o" if len(s["epoch"]) == 1 else None, label=name)
        ax.set_xlabel("epoch")
        ax.set_ylabel(title)
        if len(series) > 1:
            ax.legend(fontsize="small")
        fig.tight_layout()
        target = out_dir / f"{metric}.png"
        fig.savefig(target, dpi=100)
        plt.close(fig)
        written.append(target)
    return written


def cmd_plot(args) -> int:
    for p in plot_runs(args.run_dirs, args.out):
        print(p)
    return EXIT_OK


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    handler = {"train": cmd_train, "ablate": cmd_ablate, "plot": cmd_plot}[args.command]
    try:
        return handler(args)
    except (UsageError, ValueError, FileNotFoundError) as e:
        print(f"crosel: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, NumericError) as e:
        print(f"crosel: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
