"""Command-line entry point: ``cass <command> [options]``."""

from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import plotting
from .data import SyntheticSpec, generate_synthetic, save_folder, split_dataset
from .experiment import (
    SWEEP_AXES,
    ConfigError,
    aggregate,
    load_config,
    load_data,
    pretrained_or_random,
    read_results,
    resolved_for_seed,
    run_analysis,
    run_id,
    sweep,
    write_results,
)
from .finetune import evaluate, label_fraction_subset, run_finetune
from .models import CheckpointError, GeometryError, KindError, checkpoint_load, swap_head
from .pretrain import DivergenceError, read_trace, run_pretrain

COMMANDS = ("gen-data", "pretrain", "finetune", "evaluate", "sweep", "analyze", "report")


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--out", help="output directory (default: the config's 'out')")
    common.add_argument("--seed", type=int, action="append", help="seed to run; repeatable (default: config seeds)")
    common.add_argument("--set", action="append", default=[], metavar="PATH=VALUE", help="override a config leaf")

    parser = _Parser(prog="cass", description="Cross-architecture self-supervision at desk scale.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    sub.add_parser("gen-data", parents=[common], help="write the synthetic dataset as a PNG folder")

    p = sub.add_parser("pretrain", parents=[common], help="pretrain both arms")
    p.add_argument("--epochs", type=int, help="override pretrain.epochs")

    p = sub.add_parser("finetune", parents=[common], help="fine-tune one arm at the configured label fractions")
    p.add_argument("--checkpoint", help="initial weights (default: random init, the supervised baseline)")
    p.add_argument("--arm", choices=("a", "b"), default="a", help="arm spec to use without a checkpoint")
    p.add_argument("--fraction", type=float, help="single label fraction instead of the configured list")

    p = sub.add_parser("evaluate", parents=[common], help="score a fine-tuned checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")

    p = sub.add_parser("sweep", parents=[common], help="run every seed over one ablation axis")
    p.add_argument("--axis", choices=SWEEP_AXES, help="ablation axis (omit to run the base config)")
    p.add_argument("--values", help="comma-separated axis values")

    p = sub.add_parser("analyze", parents=[common], help="attention maps, feature grids and timing")
    p.add_argument("--checkpoint", action="append", default=[], help="arm checkpoint; repeatable")
    p.add_argument("--run", help="cell directory holding pretrain/arm_a.ckpt and pretrain/arm_b.ckpt")
    p.add_argument("--timing", action="store_true", help="also measure joint vs single-arm epoch time")

    p = sub.add_parser("report", parents=[common], help="mean and variance tables plus figures")
    p.add_argument("--results", help="results.csv (default: <out>/results.csv)")
    return parser


def _config(args):
    overrides = list(args.set)
    if getattr(args, "epochs", None) is not None:
        overrides.append(f"pretrain.epochs={args.epochs}")
    cfg = load_config(args.config, overrides)
    if args.out:
        cfg.out = args.out
    if args.seed:
        cfg.seeds = list(args.seed)
    return cfg


def _print(line):
    print(line, flush=True)


def cmd_gen_data(args):
    cfg = _config(args)
    if cfg.dataset["source"] != "synthetic":
        raise ConfigError("gen-data needs dataset.source = 'synthetic'")
    data = split_dataset(generate_synthetic(SyntheticSpec(**cfg.dataset["synthetic"])),
                         tuple(cfg.dataset["ratios"]), seed=int(cfg.dataset["split_seed"]))
    root = save_folder(data, cfg.out)
    _print(f"wrote {len(data)} images in {data.num_classes} classes to {root}")


def cmd_pretrain(args):
    cfg = _config(args)
    data = load_data(cfg)
    for seed in cfg.seeds:
        rid = run_id(cfg, seed)
        out = Path(cfg.out) / rid
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(resolved_for_seed(cfg, seed), indent=2, sort_keys=True))
        pcfg = dataclasses.replace(cfg.pretrain, seed=seed)
        result = run_pretrain(pcfg, data, out_dir=out / "pretrain")
        final = f"{result.trace[-1]['loss']:.6f}" if result.trace else "n/a"
        _print(f"seed={seed} run_id={rid} epochs={len(result.trace)} final_loss={final} "
               f"checkpoints={result.checkpoint_a},{result.checkpoint_b}")


def cmd_finetune(args):
    cfg = _config(args)
    data = load_data(cfg)
    fcfgs = cfg.finetune
    if args.fraction is not None:
        fcfgs = [dataclasses.replace(fcfgs[0], label_fraction=args.fraction)]
    source = "checkpoint" if args.checkpoint else "supervised"
    rows = []
    for seed in cfg.seeds:
        rid = run_id(cfg, seed)
        out = Path(cfg.out) / rid
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(resolved_for_seed(cfg, seed), indent=2, sort_keys=True))
        for fcfg in fcfgs:
            fcfg = dataclasses.replace(fcfg, seed=seed)
            arm = swap_head(pretrained_or_random(cfg, args.checkpoint, args.arm, seed), data.num_classes, seed)
            subset = label_fraction_subset(data, fcfg.label_fraction, seed=seed)
            frac = f"{fcfg.label_fraction:g}"
            result = run_finetune(fcfg, arm, subset, out_dir=out / f"finetune_{frac}")
            for metric in ("f1_macro", "balanced_recall"):
                rows.append({"run_id": rid, "seed": seed, "axis": "", "value": "",
                             "metric_name": f"{source}.{args.arm}.{metric}@{frac}",
                             "metric_value": getattr(result.report, metric)})
            _print(f"seed={seed} fraction={frac} f1_macro={result.report.f1_macro:.4f} "
                   f"balanced_recall={result.report.balanced_recall:.4f} epochs={result.epochs_trained}")
    write_results(rows, Path(cfg.out) / "results.csv")


def cmd_evaluate(args):
    cfg = _config(args)
    data = load_data(cfg)
    arm = checkpoint_load(args.checkpoint)
    if arm.spec.head_dim_out != data.num_classes:
        raise ConfigError(f"checkpoint head width {arm.spec.head_dim_out} does not match {data.num_classes} classes")
    report = evaluate(arm, data, cfg.finetune[0].augment_config if cfg.finetune else cfg.pretrain.augment, args.split)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "metrics.json")
    _print(json.dumps({"f1_macro": report.f1_macro, "balanced_recall": report.balanced_recall}))


def cmd_sweep(args):
    cfg = _config(args)
    if args.axis and not args.values:
        raise ConfigError("--values is required with --axis")
    if args.values and not args.axis:
        raise ConfigError("--axis is required with --values")
    values = [v.strip() for v in args.values.split(",") if v.strip()] if args.axis else [None]
    out = Path(cfg.out)

    def log(event):
        if "cell" in event:
            _print(f"cell {event['cell']} axis={event['axis']} value={event['value']} seed={event['seed']}")

    rows = sweep(cfg, args.axis, values, cfg.seeds, out, log=log)
    _print(f"wrote {len(rows)} rows to {out / 'results.csv'}")


def cmd_analyze(args):
    cfg = _config(args)
    cfg.analysis = dict(cfg.analysis, timing=bool(args.timing or cfg.analysis.get("timing")))
    data = load_data(cfg)
    paths = list(args.checkpoint)
    if args.run:
        paths += [Path(args.run) / "pretrain" / "arm_a.ckpt", Path(args.run) / "pretrain" / "arm_b.ckpt"]
    models = {Path(p).parent.name + "_" + Path(p).stem if args.run else Path(p).stem: checkpoint_load(p) for p in paths}
    if not models and not cfg.analysis["timing"]:
        raise ConfigError("analyze needs --checkpoint, --run or --timing")
    tag = Path(args.run).name if args.run else run_id(cfg, cfg.seeds[0])
    out = Path(cfg.out) / "analysis" / tag
    summary = run_analysis(cfg, models, data, out)
    for name, info in summary.get("attention", {}).items():
        _print(f"attention {name}: connectedness={info['connectedness']:.3f}")
    for name in summary.get("features", {}):
        _print(f"features {name}: {out / f'features_{name}.png'}")
    if "timing" in summary:
        t = summary["timing"]
        ratio = f"{t['ratio']:.3f}" if t["ratio_available"] else "unavailable"
        _print(f"timing: joint epoch {t['cass_epoch_seconds']:.3f}s, ratio to single-arm sum {ratio}")


def cmd_report(args):
    cfg = _config(args)
    out = Path(cfg.out)
    results = Path(args.results) if args.results else out / "results.csv"
    if not results.exists():
        raise ConfigError(f"results file {results} does not exist")
    rows = read_results(results)
    table = aggregate(rows)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=("axis", "value", "metric_name", "n", "mean", "variance"),
                                lineterminator="\n")
        writer.writeheader()
        for r in table:
            writer.writerow(dict(r, mean=repr(r["mean"]), variance=repr(r["variance"])))
    lines = ["| axis | value | metric | n | mean ± variance |", "|---|---|---|---|---|"]
    for r in table:
        lines.append(f"| {r['axis'] or '-'} | {r['value'] or '-'} | {r['metric_name']} | {r['n']} | "
                     f"{r['mean']:.4f} ± {r['variance']:.4f} |")
    (out / "report.md").write_text("\n".join(lines) + "\n")
    figures = []
    for axis in sorted({r["axis"] for r in table if r["axis"]}):
        path = plotting.robustness_series(table, axis, out / "figures" / f"series_{axis}.png")
        if path:
            figures.append(path)
    base = results.parent
    traces = {p.parent.parent.name[:8]: read_trace(p) for p in sorted(base.glob("cells/*/pretrain/trace.csv"))}
    path = plotting.loss_curves(traces, out / "figures" / "pretrain_loss.png")
    if path:
        figures.append(path)
    grids = {}
    for p in sorted(base.glob("analysis/*/attention_*.npy"))[:6]:
        grids[f"{p.parent.name[:6]}:{p.stem[len('attention_'):]}"] = np.load(p)
    path = plotting.attention_panels(grids, out / "figures" / "attention.png")
    if path:
        figures.append(path)
    _print("axis,value,metric_name,n,mean,variance")
    for r in table:
        _print(f"{r['axis']},{r['value']},{r['metric_name']},{r['n']},{r['mean']!r},{r['variance']!r}")
    for f in figures:
        _print(f"figure {f}")


HANDLERS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "analyze": cmd_analyze,
    "report": cmd_report,
}


def _thread_limit():
    value = os.environ.get("CASS_THREADS")
    if not value:
        return contextlib.nullcontext()
    try:
        n = int(value)
    except ValueError:
        raise CliError(f"CASS_THREADS must be a positive integer, got {value!r}") from None
    if n < 1:
        raise CliError(f"CASS_THREADS must be a positive integer, got {value!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        with _thread_limit():
            HANDLERS[args.command](args)
    except (CliError, ConfigError, CheckpointError, GeometryError, KindError, DivergenceError,
            FileNotFoundError, ValueError, KeyError) as exc:
        message = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"cass: error: {message}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
