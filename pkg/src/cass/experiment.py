"""Run configuration, per-seed experiment cells and ablation sweeps."""

from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .analysis import average_attention_map, connectedness, first_layer_features, measure_timing, save_png
from .augment import AugmentConfig, augmentation_set, eval_batch
from .data import SyntheticSpec, generate_synthetic, load_folder, split_dataset
from .finetune import FinetuneConfig, label_fraction_subset, run_finetune
from .models import ArmSpec, build_arm, checkpoint_load, swap_head
from .pretrain import DivergenceError, PretrainConfig, build_arms, run_pretrain

RESULT_COLUMNS = ("run_id", "seed", "axis", "value", "metric_name", "metric_value")
SWEEP_AXES = (
    "batch_size",
    "epochs",
    "augmentation",
    "optimizer",
    "head_activation",
    "arch_pair",
    "init",
    "label_fraction",
)
DEFAULT_FRACTIONS = (0.01, 0.1, 1.0)


class ConfigError(ValueError):
    """Malformed run configuration; the message names the offending field."""


def _default_dataset():
    return {
        "source": "synthetic",
        "synthetic": SyntheticSpec().to_dict(),
        "path": None,
        "split_seed": 0,
        "ratios": [0.7, 0.1, 0.2],
    }


def _default_analysis():
    return {"attention": True, "features": True, "timing": False, "attention_samples": 30, "timing_epochs": 3}


@dataclass
class RunConfig:
    dataset: dict = field(default_factory=_default_dataset)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: list = field(default_factory=lambda: [FinetuneConfig(label_fraction=f) for f in DEFAULT_FRACTIONS])
    baseline: bool = True
    analysis: dict = field(default_factory=_default_analysis)
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    out: str = "runs"

    def to_dict(self):
        return {
            "dataset": copy.deepcopy(self.dataset),
            "pretrain": self.pretrain.to_dict(),
            "finetune": [f.to_dict() for f in self.finetune],
            "baseline": self.baseline,
            "analysis": dict(self.analysis),
            "seeds": list(self.seeds),
            "out": self.out,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config field {sorted(unknown)[0]!r}")
        base = cls()
        dataset = dict(base.dataset, **d.get("dataset", {}))
        if dataset["source"] not in ("synthetic", "folder"):
            raise ConfigError(f"dataset.source must be 'synthetic' or 'folder', got {dataset['source']!r}")
        if dataset["source"] == "folder" and not dataset.get("path"):
            raise ConfigError("dataset.path is required when dataset.source is 'folder'")
        dataset["synthetic"] = dict(base.dataset["synthetic"], **dataset.get("synthetic") or {})
        analysis = dict(base.analysis, **d.get("analysis", {}))
        pretrain = _build(PretrainConfig, d.get("pretrain", {}), "pretrain")
        finetune = d.get("finetune")
        if finetune is None:
            finetune = base.finetune
        elif isinstance(finetune, dict):
            finetune = [_build(FinetuneConfig, finetune, "finetune")]
        else:
            finetune = [_build(FinetuneConfig, f, f"finetune.{i}") for i, f in enumerate(finetune)]
        seeds = [int(s) for s in d.get("seeds", base.seeds)]
        if not seeds:
            raise ConfigError("seeds must list at least one seed")
        return cls(dataset, pretrain, finetune, bool(d.get("baseline", True)), analysis, seeds, str(d.get("out", base.out)))


def _build(kind, values, where):
    if isinstance(values, kind):
        return values
    if not isinstance(values, dict):
        raise ConfigError(f"{where} must be an object")
    names = {f.name for f in dataclasses.fields(kind)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown config field {where}.{sorted(unknown)[0]}")
    try:
        if kind is PretrainConfig:
            values = dict(values)
            for arm in ("arm_a", "arm_b"):
                if isinstance(values.get(arm), dict):
                    values[arm] = _build(ArmSpec, values[arm], f"{where}.{arm}")
        return kind(**values)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{where}: {exc}") from exc


def load_config(path=None, overrides=()) -> RunConfig:
    """Read a JSON run config (defaults when ``path`` is None) and apply ``dotted.path=value`` overrides."""
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} does not exist") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON ({exc})") from None
    resolved = RunConfig.from_dict(raw).to_dict()
    for item in overrides:
        apply_override(resolved, item)
    return RunConfig.from_dict(resolved)


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(tree, item):
    """Set ``tree[a][b]... = value`` for ``item = "a.b...=value"``.

    A non-numeric key applied to a list sets that field on every element,
    so ``finetune.lr=1e-4`` changes all fine-tune entries.
    """
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form dotted.path=value")
    path, text = item.split("=", 1)
    keys = path.strip().split(".")
    _set_path(tree, keys, _parse_value(text), path)


def _set_path(node, keys, value, full):
    key, rest = keys[0], keys[1:]
    if isinstance(node, list):
        if key.isdigit():
            idx = int(key)
            if idx >= len(node):
                raise ConfigError(f"override {full!r}: index {idx} out of range")
            if rest:
                _set_path(node[idx], rest, value, full)
            else:
                node[idx] = value
            return
        for child in node:
            _set_path(child, keys, value, full)
        return
    if not isinstance(node, dict) or key not in node:
        raise ConfigError(f"override {full!r}: unknown field {key!r}")
    if rest:
        _set_path(node[key], rest, value, full)
    else:
        node[key] = value


def resolved_for_seed(cfg: RunConfig, seed):
    """Loadable config of one cell: ``seeds`` is just ``[seed]``, every nested seed follows it, ``out`` is dropped."""
    d = cfg.to_dict()
    d.pop("out")
    d["seeds"] = [int(seed)]
    d["pretrain"]["seed"] = int(seed)
    for f in d["finetune"]:
        f["seed"] = int(seed)
    return d


def run_id(cfg: RunConfig, seed) -> str:
    blob = json.dumps(resolved_for_seed(cfg, seed), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def load_data(cfg: RunConfig):
    ds = cfg.dataset
    if ds["source"] == "folder":
        data = load_folder(ds["path"])
        if data.split is not None:
            return data
    else:
        data = generate_synthetic(SyntheticSpec(**ds["synthetic"]))
    return split_dataset(data, tuple(ds["ratios"]), seed=int(ds["split_seed"]))


def _fmt_fraction(f):
    return f"{f:g}"


def run_cell(cfg: RunConfig, seed, out_dir, data=None, log=None, analysis_dir=None):
    """Pretrain both arms, then fine-tune each arm at every configured label fraction.

    With ``cfg.baseline`` the same fine-tune is also run from random
    initialization (the same initial weights the pretraining started from).
    Returns ``(metric_name, metric_value)`` pairs and writes every artifact
    under ``out_dir``. A finished cell (``rows.json`` present) is reloaded.
    Qualitative analyses go to ``analysis_dir`` (default ``out_dir/analysis``)
    and never into the returned rows.
    """
    out_dir = Path(out_dir)
    done = out_dir / "rows.json"
    if done.exists():
        return [tuple(r) for r in json.loads(done.read_text())]
    out_dir.mkdir(parents=True, exist_ok=True)
    frozen = resolved_for_seed(cfg, seed)
    (out_dir / "config.json").write_text(json.dumps(frozen, indent=2, sort_keys=True))
    data = data if data is not None else load_data(cfg)
    pcfg = dataclasses.replace(cfg.pretrain, seed=int(seed))
    rows = []
    try:
        pre = run_pretrain(pcfg, data, out_dir=out_dir / "pretrain", log=log)
    except DivergenceError as exc:
        rows.append(("pretrain.diverged", 1.0))
        rows.append(("pretrain.diverged_epoch", float(exc.epoch)))
        done.write_text(json.dumps(rows))
        return rows
    rows.append(("pretrain.diverged", 0.0))
    rows.append(("pretrain.final_loss", pre.trace[-1]["loss"] if pre.trace else math.nan))
    sources = [("cass", (pre.arm_a, pre.arm_b))]
    if cfg.baseline:
        sources.append(("supervised", build_arms(pcfg)))
    k = data.num_classes
    tuned_arms = {}
    for fcfg in cfg.finetune:
        fcfg = dataclasses.replace(fcfg, seed=int(seed))
        subset = label_fraction_subset(data, fcfg.label_fraction, seed=int(seed))
        frac = _fmt_fraction(fcfg.label_fraction)
        for source, arms in sources:
            for key, arm in zip(("a", "b"), arms):
                tuned = swap_head(arm, k, seed=int(seed))
                where = out_dir / "finetune" / f"{source}_{key}_{frac}"
                try:
                    result = run_finetune(fcfg, tuned, subset, out_dir=where)
                except DivergenceError:
                    rows.append((f"{source}.{key}.diverged@{frac}", 1.0))
                    continue
                rows.append((f"{source}.{key}.f1_macro@{frac}", result.report.f1_macro))
                rows.append((f"{source}.{key}.balanced_recall@{frac}", result.report.balanced_recall))
                rows.append((f"{source}.{key}.epochs@{frac}", float(result.epochs_trained)))
                tuned_arms[f"{source}_{key}_{frac}"] = result.arm
    models = {"pretrained_a": pre.arm_a, "pretrained_b": pre.arm_b}
    if cfg.finetune:
        last = _fmt_fraction(cfg.finetune[-1].label_fraction)
        models.update({name: arm for name, arm in tuned_arms.items() if name.endswith(f"_{last}")})
    run_analysis(cfg, models, data, Path(analysis_dir) if analysis_dir else out_dir / "analysis")
    done.write_text(json.dumps(rows))
    return rows


def run_analysis(cfg: RunConfig, models, data, out_dir):
    """Attention maps, first-layer feature grids and timing per ``cfg.analysis``; returns the summary dict."""
    opts = cfg.analysis
    if not (opts.get("attention") or opts.get("features") or opts.get("timing")):
        return {}
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    test_images = data.images_for("test")
    samples = eval_batch(cfg.pretrain.augment, test_images[: int(opts.get("attention_samples", 30))])
    summary = {"attention": {}, "features": {}}
    for name, arm in models.items():
        if arm.kind == "transformer" and opts.get("attention"):
            amap = average_attention_map(arm, samples, model_id=name)
            save_png(amap.grid, out_dir / f"attention_{name}.png", extra=amap.provenance)
            np.save(out_dir / f"attention_{name}.npy", amap.grid)
            summary["attention"][name] = {"connectedness": connectedness(amap.grid), **amap.provenance}
        if arm.kind == "cnn" and opts.get("features"):
            raw, _ = first_layer_features(arm, samples[0], out_dir / f"features_{name}.png")
            summary["features"][name] = {"filters": int(raw.shape[0])}
    if opts.get("timing"):
        report = measure_timing(cfg.pretrain, data, epochs=int(opts.get("timing_epochs", 3)))
        report.save(out_dir / "timing.json")
        summary["timing"] = report.to_dict()
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def apply_axis(cfg: RunConfig, axis, value) -> RunConfig:
    """Copy of ``cfg`` with one ablation axis set to ``value`` (a string from the command line)."""
    d = cfg.to_dict()
    pre = d["pretrain"]
    value = str(value).strip()
    if axis == "batch_size":
        pre["batch_size"] = int(value)
    elif axis == "epochs":
        pre["epochs"] = int(value)
    elif axis == "augmentation":
        pre["augment"] = augmentation_set(value, AugmentConfig(**pre["augment"])).to_dict()
    elif axis == "optimizer":
        a, _, b = value.partition("+")
        pre["optimizer_a"], pre["optimizer_b"] = a, b or a
    elif axis == "head_activation":
        pre["arm_a"]["head_activation"] = value
        pre["arm_b"]["head_activation"] = value
    elif axis == "arch_pair":
        a, sep, b = value.partition("+")
        if not sep:
            raise ConfigError(f"arch_pair value must look like 'cnn+transformer', got {value!r}")
        for slot, kind in (("arm_a", a), ("arm_b", b)):
            if kind not in ("cnn", "transformer"):
                raise ConfigError(f"arch_pair: unknown arm kind {kind!r}")
            keep = {"depth": pre[slot]["depth"], "image_size": pre[slot]["image_size"],
                    "channels": pre[slot]["channels"], "head_dim_out": pre[slot]["head_dim_out"],
                    "head_activation": pre[slot]["head_activation"]}
            pre[slot] = ArmSpec(kind=kind, **keep).to_dict()
    elif axis == "init":
        a, _, b = value.partition("+")
        pre["init_a"], pre["init_b"] = a, b or a
    elif axis == "label_fraction":
        base = d["finetune"][0] if d["finetune"] else FinetuneConfig().to_dict()
        d["finetune"] = [dict(base, label_fraction=float(value))]
    else:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {', '.join(SWEEP_AXES)}")
    try:
        return RunConfig.from_dict(d)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"axis {axis}={value}: {exc}") from exc


def sweep(cfg: RunConfig, axis=None, values=(None,), seeds=None, out=None, log=None):
    """Run every (value, seed) cell, reusing finished cells, and write ``results.csv``.

    Rows of other axes already in ``results.csv`` are kept, so several sweeps
    can share one output directory. Returns this sweep's rows.
    """
    out = Path(out or cfg.out)
    seeds = list(seeds) if seeds else list(cfg.seeds)
    data_cache = {}
    results = []
    for value in values:
        cell_cfg = cfg if axis is None else apply_axis(cfg, axis, value)
        key = json.dumps(cell_cfg.dataset, sort_keys=True)
        if key not in data_cache:
            data_cache[key] = load_data(cell_cfg)
        for seed in seeds:
            rid = run_id(cell_cfg, seed)
            if log is not None:
                log({"cell": rid, "axis": axis or "", "value": "" if value is None else value, "seed": seed})
            rows = run_cell(cell_cfg, seed, out / "cells" / rid, data=data_cache[key], log=log,
                            analysis_dir=out / "analysis" / rid)
            for name, metric in rows:
                results.append({
                    "run_id": rid,
                    "seed": int(seed),
                    "axis": axis or "",
                    "value": "" if value is None else str(value),
                    "metric_name": name,
                    "metric_value": metric,
                })
    path = out / "results.csv"
    previous = [r for r in read_results(path) if r["axis"] != (axis or "")] if path.exists() else []
    write_results(previous + results, path)
    return results


def write_results(rows, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(dict(row, metric_value=repr(float(row["metric_value"]))))
    return path


def read_results(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    missing = set(RESULT_COLUMNS) - set(rows[0] if rows else RESULT_COLUMNS)
    if missing:
        raise ConfigError(f"{path}: missing column {sorted(missing)[0]!r}")
    for r in rows:
        r["seed"] = int(r["seed"])
        r["metric_value"] = float(r["metric_value"])
    return rows


def aggregate(rows):
    """Mean and population variance of each (axis, value, metric) group, in first-seen order."""
    groups = {}
    for r in rows:
        groups.setdefault((r["axis"], r["value"], r["metric_name"]), []).append(r["metric_value"])
    table = []
    for (axis, value, name), vals in groups.items():
        arr = np.asarray(vals, dtype=np.float64)
        table.append({
            "axis": axis,
            "value": value,
            "metric_name": name,
            "n": len(arr),
            "mean": float(arr.mean()),
            "variance": float(arr.var()),
        })
    return table


def pretrained_or_random(cfg: RunConfig, checkpoint=None, arm="a", seed=0):
    """Arm loaded from ``checkpoint``, or the configured arm at random initialization."""
    if checkpoint is not None:
        return checkpoint_load(checkpoint)
    spec = cfg.pretrain.arm_a if arm == "a" else cfg.pretrain.arm_b
    return build_arm(spec, seed=seed)

