"""Command-line entry point: ``basis-selection <subcommand> [--config FILE] [flags]``.

Exit codes: 0 success, 2 usage or configuration error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import VOCAB
from .harness import (
    METHODS,
    PRESETS,
    GridPoint,
    HarnessConfig,
    finetune,
    pretrain_from_config,
    presets,
    run_experiment,
)
from .deembed import inspect_basis
from .pipeline import (
    CompressionConfig,
    ConfigError,
    baseline_fwsvd,
    baseline_svd_truncate,
    compress,
    compression_ratio,
)
from .report import format_table, merge_reports, plot_summary, summarize, write_report, write_summary
from .train import MinibatchStream, evaluate

log = logging.getLogger("basis_selection")

COMPRESSION_KEYS = {f.name for f in dataclasses.fields(CompressionConfig)}
HARNESS_KEYS = {f.name for f in dataclasses.fields(HarnessConfig)}
OTHER_KEYS = {"method", "preset", "seeds", "checkpoint", "out", "task", "layer", "top_k", "dtype"}

# flag dest -> config key
FLAG_KEYS = {
    "keep_ratio": "keep_ratio",
    "pruning_times": "pruning_times",
    "keeping_epoch": "keeping_epoch",
    "pruning_epoch": "pruning_epoch",
    "post_finetune_epoch": "post_finetune_epoch",
    "additional_dim": "additional_dim",
    "seed": "seed",
    "method": "method",
    "checkpoint": "checkpoint",
    "out": "out",
    "preset": "preset",
    "seeds": "seeds",
    "task": "task",
    "layer": "layer",
    "top_k": "top_k",
    "dtype": "dtype",
}


class UsageError(Exception):
    pass


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML file of flat key: value settings")
    p.add_argument("--keep-ratio", type=float)
    p.add_argument("--pruning-times", type=int)
    p.add_argument("--keeping-epoch", type=float)
    p.add_argument("--pruning-epoch", type=float)
    p.add_argument("--post-finetune-epoch", type=float)
    p.add_argument("--additional-dim", type=int)
    p.add_argument("--seed", type=int, help="defaults to $BS_SEED, then 0")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--task", choices=("arithmetic", "patterns"))
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="basis-selection", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train a fresh toy model on the mixed corpus")
    _common(p)
    p.add_argument("--epochs", type=float)
    p.add_argument("--dtype", choices=("f32", "f64"))

    p = sub.add_parser("finetune", help="finetune a checkpoint on one target task")
    _common(p)
    p.add_argument("--epochs", type=float)
    p.add_argument("--dtype", choices=("f32", "f64"))

    p = sub.add_parser("compress", help="compress a checkpoint with one method")
    _common(p)
    p.add_argument("--dtype", choices=("f32", "f64"))

    p = sub.add_parser("eval", help="exact-match accuracy of a checkpoint")
    _common(p)

    p = sub.add_parser("experiment", help="run a grid and write a RunReport CSV")
    _common(p)
    p.add_argument("--preset", choices=PRESETS)
    p.add_argument("--seeds", type=int, nargs="+")

    p = sub.add_parser("inspect", help="de-embed the top bases of a layer")
    _common(p)
    p.add_argument("--layer", help="block name, e.g. blocks.2")
    p.add_argument("--top-k", type=int)

    p = sub.add_parser("report", help="merge RunReport CSVs, summarize and plot")
    _common(p)
    p.add_argument("inputs", nargs="+", type=Path)
    return parser


def load_config(path: Path | None) -> dict:
    if path is None:
        return {}
    try:
        data = yaml.safe_load(path.read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict) or any(isinstance(v, dict) for v in data.values()):
        raise UsageError(f"config {path} must be a flat key: value mapping")
    unknown = set(data) - COMPRESSION_KEYS - HARNESS_KEYS - OTHER_KEYS
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    return data


def effective_settings(args) -> dict:
    settings = load_config(args.config)
    for dest, key in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            settings[key] = str(value) if isinstance(value, Path) else value
    if getattr(args, "epochs", None) is not None:
        settings[f"{args.command}_epochs"] = args.epochs
    if "seed" not in settings:
        env = os.environ.get("BS_SEED")
        try:
            settings["seed"] = int(env) if env else 0
        except ValueError:
            raise UsageError(f"BS_SEED must be an integer, got {env!r}") from None
    return settings


def compression_config(settings) -> CompressionConfig:
    kw = {k: v for k, v in settings.items() if k in COMPRESSION_KEYS}
    try:
        return CompressionConfig(**kw)
    except (ConfigError, TypeError) as exc:
        raise UsageError(str(exc)) from None


def harness_config(settings) -> HarnessConfig:
    kw = {k: v for k, v in settings.items() if k in HARNESS_KEYS}
    return HarnessConfig(**kw)


def require(settings, key) -> str:
    if settings.get(key) is None:
        raise UsageError(f"--{key.replace('_', '-')} is required")
    return settings[key]


def _dtype(settings) -> str:
    return "<f4" if settings.get("dtype") == "f32" else "<f8"


def _load(settings):
    return load_checkpoint(require(settings, "checkpoint"))


def _harness_for(model, settings) -> HarnessConfig:
    settings = dict(settings)
    settings.setdefault("data_seed", int(model.meta.get("data_seed", 0)))
    return harness_config(settings)


def cmd_pretrain(settings) -> None:
    cfg = harness_config(settings)
    out = Path(require(settings, "out"))
    model, losses = pretrain_from_config(cfg, settings["seed"])
    save_checkpoint(out, model, _dtype(settings))
    log.info("pretrained %d iterations, final loss %.4f -> %s", len(losses),
             losses[-1] if losses else float("nan"), out)


def cmd_finetune(settings) -> None:
    model = _load(settings)
    cfg = _harness_for(model, settings)
    task = cfg.corpora().tasks[settings.get("task", cfg.target_task)]
    tuned = finetune(model, task.train_lines, cfg.finetune_epochs, settings["seed"], cfg.finetune_lr,
                     cfg.batch_size, cfg.lr_floor)
    save_checkpoint(require(settings, "out"), tuned, _dtype(settings))


def write_events(events, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "layer", "rank", "kept_mass_fraction", "loss", "elapsed_seconds"])
        for e in events:
            for layer, rank, mass in zip(e.layers, e.ranks, e.kept_mass):
                w.writerow([e.iteration, f"blocks.{layer}", rank, repr(mass), repr(e.loss),
                            f"{e.elapsed:.3f}"])


def cmd_compress(settings) -> None:
    config = compression_config(settings)
    log.info("keep_ratio_per_pruning=%s", repr(config.keep_ratio_per_pruning))
    model = _load(settings)
    cfg = _harness_for(model, settings)
    task = cfg.corpora().tasks[settings.get("task", cfg.target_task)]
    out = Path(require(settings, "out"))
    stream = MinibatchStream.from_lines(task.train_lines, model.context, cfg.batch_size, [config.seed, 2])
    method = settings.get("method", "basis-selection")
    layers = config.selected(model)
    if method == "basis-selection":
        result = compress(model, stream, config)
        compressed = result.model
        log.info("iterations_per_pruning=%d", result.iterations_per_pruning)
        write_events(result.events, out.with_suffix(".events.csv"))
    elif method == "svd":
        compressed = baseline_svd_truncate(model, mass_ratio=config.keep_ratio, layers=layers,
                                           stream=stream, config=config)
    else:
        ranks = [baseline_svd_truncate(model, mass_ratio=config.keep_ratio, layers=layers).blocks[i].rank
                 for i in layers]
        compressed = baseline_fwsvd(model, stream, ranks, layers=layers, config=config,
                                    fisher_batches=cfg.fisher_batches)
    save_checkpoint(out, compressed, _dtype(settings))
    print(f"method={method} ranks={[compressed.blocks[i].rank for i in layers]} "
          f"compression_ratio={compression_ratio(model, compressed):.4f}")


def cmd_eval(settings) -> None:
    model = _load(settings)
    cfg = _harness_for(model, settings)
    tasks = cfg.corpora().tasks
    names = [settings["task"]] if settings.get("task") else sorted(tasks)
    for name in names:
        print(f"{name}\t{evaluate(model, tasks[name]):.6f}")


def cmd_experiment(settings) -> None:
    model = _load(settings)
    cfg = _harness_for(model, settings)
    base = compression_config(settings)
    seeds = settings.get("seeds") or [settings["seed"]]
    task = settings.get("task", cfg.target_task)
    if settings.get("preset"):
        grid = presets(settings["preset"], seeds, base, task)
    else:
        grid = [GridPoint(settings.get("method", "basis-selection"), dataclasses.replace(base, seed=s), task)
                for s in seeds]
    out = Path(require(settings, "out"))
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective_config.yaml").write_text(yaml.safe_dump(
        {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(settings.items())}))
    rows = run_experiment(model, grid, cfg)
    write_report(rows, out / "report.csv")
    print(format_table(summarize(rows)))


def cmd_inspect(settings) -> None:
    model = _load(settings)
    layer = require(settings, "layer")
    top_k = int(settings.get("top_k", 10))
    for entry in inspect_basis(model, layer, top_k):
        tokens = " ".join(repr(VOCAB[t]) for t in entry.tokens)
        print(f"basis {entry.basis_index:>4}  weight {entry.weight:+.4f}  {tokens}")


def cmd_report(settings, inputs) -> None:
    out = Path(require(settings, "out"))
    out.mkdir(parents=True, exist_ok=True)
    rows = merge_reports(inputs)
    write_report(rows, out / "merged.csv")
    summary = summarize(rows)
    write_summary(summary, out / "summary.csv")
    plot_summary(summary, out)
    print(format_table(summary))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on unknown flags
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        settings = effective_settings(args)
        if args.command in ("compress", "experiment"):
            compression_config(settings)
        handler = {
            "pretrain": cmd_pretrain,
            "finetune": cmd_finetune,
            "compress": cmd_compress,
            "eval": cmd_eval,
            "experiment": cmd_experiment,
            "inspect": cmd_inspect,
        }.get(args.command)
        if handler is None:
            cmd_report(settings, args.inputs)
        else:
            handler(settings)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, OSError, RuntimeError, ValueError, KeyError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
