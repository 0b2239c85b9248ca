import csv
import json
import shutil

import numpy as np
import pytest

from cass.cli import main
from cass.experiment import ConfigError, RunConfig, apply_override, load_config, read_results, run_id
from cass.models import checkpoint_load
from cass.pretrain import build_arms

TINY = {
    "dataset": {"synthetic": {"samples_per_class": [12, 10, 8, 6], "image_size": 16}},
    "pretrain": {
        "epochs": 1,
        "batch_size": 8,
        "arm_a": {"kind": "cnn", "image_size": 16, "stem_filters": 4, "stage_widths": [4, 8], "head_dim_out": 8},
        "arm_b": {"kind": "transformer", "image_size": 16, "embed_dim": 16, "num_heads": 2, "num_blocks": 1, "head_dim_out": 8},
        "augment": {"resize": 16},
    },
    "finetune": [{"label_fraction": 0.5, "max_epochs": 2, "augment_config": {"resize": 16}}],
    "analysis": {"attention": True, "features": True, "timing": False, "attention_samples": 4},
    "seeds": [0, 1],
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


@pytest.fixture(autouse=True)
def single_thread(monkeypatch):
    monkeypatch.setenv("CASS_THREADS", "1")


def results(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_pretrain_zero_epochs_writes_init_checkpoints(config, tmp_path):
    assert main(["pretrain", "--config", str(config), "--epochs", "0", "--seed", "0", "--out", str(tmp_path / "o")]) == 0
    cfg = load_config(config, ["pretrain.epochs=0"])
    cell = tmp_path / "o" / run_id(cfg, 0)
    a, b = build_arms(cfg.pretrain)
    for arm, name in ((a, "arm_a.ckpt"), (b, "arm_b.ckpt")):
        loaded = checkpoint_load(cell / "pretrain" / name)
        for k, v in arm.state_arrays().items():
            assert loaded.state_arrays()[k].tobytes() == v.tobytes()
    frozen = json.loads((cell / "config.json").read_text())
    assert frozen["seeds"] == [0] and frozen["pretrain"]["epochs"] == 0


def test_sweep_rows_report_and_determinism(config, tmp_path, capsys):
    out1, out2 = tmp_path / "s1", tmp_path / "s2"
    args = ["sweep", "--config", str(config), "--axis", "batch_size", "--values", "8,16,32"]
    assert main(args + ["--out", str(out1)]) == 0
    rows = results(out1 / "results.csv")
    assert list(rows[0]) == ["run_id", "seed", "axis", "value", "metric_name", "metric_value"]
    f1 = [r for r in rows if r["metric_name"] == "cass.a.f1_macro@0.5"]
    assert len(f1) == 3 * 2
    assert {(r["value"], r["seed"]) for r in f1} == {(v, s) for v in ("8", "16", "32") for s in ("0", "1")}

    assert main(args + ["--out", str(out2)]) == 0
    assert (out1 / "results.csv").read_bytes() == (out2 / "results.csv").read_bytes()

    capsys.readouterr()
    assert main(["report", "--out", str(out1)]) == 0
    report = {(r["value"], r["metric_name"]): r for r in results(out1 / "report.csv")}
    for value in ("8", "16", "32"):
        vals = [float(r["metric_value"]) for r in rows if r["value"] == value and r["metric_name"] == "cass.b.f1_macro@0.5"]
        mean = (vals[0] + vals[1]) / 2
        var = ((vals[0] - mean) ** 2 + (vals[1] - mean) ** 2) / 2
        got = report[(value, "cass.b.f1_macro@0.5")]
        assert float(got["mean"]) == pytest.approx(mean, abs=1e-15)
        assert float(got["variance"]) == pytest.approx(var, abs=1e-15)
        assert got["n"] == "2"
    assert (out1 / "report.md").exists()
    for fig in ("series_batch_size.png", "pretrain_loss.png", "attention.png"):
        assert (out1 / "figures" / fig).stat().st_size > 0
    printed = capsys.readouterr().out
    assert printed.startswith("axis,value,metric_name,n,mean,variance")


def test_sweep_cells_are_resumable(config, tmp_path):
    out = tmp_path / "s"
    args = ["sweep", "--config", str(config), "--axis", "epochs", "--values", "1,2", "--seed", "0", "--out", str(out)]
    assert main(args) == 0
    first = (out / "results.csv").read_bytes()
    cells = sorted((out / "cells").iterdir())
    assert len(cells) == 2
    keep_mtime = (cells[1] / "rows.json").stat().st_mtime_ns
    shutil.rmtree(cells[0])
    assert main(args) == 0
    assert (cells[0] / "rows.json").exists()
    assert (cells[1] / "rows.json").stat().st_mtime_ns == keep_mtime
    assert (out / "results.csv").read_bytes() == first


def test_frozen_config_reproduces_cell(config, tmp_path):
    out = tmp_path / "a"
    assert main(["sweep", "--config", str(config), "--seed", "1", "--out", str(out)]) == 0
    cell = next((out / "cells").iterdir())
    again = tmp_path / "b"
    assert main(["sweep", "--config", str(cell / "config.json"), "--out", str(again)]) == 0
    assert (out / "results.csv").read_bytes() == (again / "results.csv").read_bytes()


def test_gen_data_then_folder_config(config, tmp_path):
    root = tmp_path / "data"
    assert main(["gen-data", "--config", str(config), "--out", str(root)]) == 0
    assert (root / "splits.json").exists()
    cfg = dict(TINY, dataset={"source": "folder", "path": str(root)}, seeds=[0])
    folder_cfg = tmp_path / "folder.json"
    folder_cfg.write_text(json.dumps(cfg))
    assert main(["finetune", "--config", str(folder_cfg), "--arm", "b", "--out", str(tmp_path / "ft")]) == 0
    rows = read_results(tmp_path / "ft" / "results.csv")
    assert {r["metric_name"] for r in rows} == {"supervised.b.f1_macro@0.5", "supervised.b.balanced_recall@0.5"}


def test_finetune_evaluate_and_analyze(config, tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["pretrain", "--config", str(config), "--seed", "0", "--out", str(out)]) == 0
    cfg = load_config(config)
    cell = out / run_id(cfg, 0)
    ckpt = cell / "pretrain" / "arm_b.ckpt"
    assert main(["finetune", "--config", str(config), "--seed", "0", "--checkpoint", str(ckpt), "--out", str(out)]) == 0
    tuned = cell / "finetune_0.5" / "finetuned.ckpt"
    capsys.readouterr()
    assert main(["evaluate", "--config", str(config), "--checkpoint", str(tuned), "--out", str(tmp_path / "ev")]) == 0
    scores = json.loads(capsys.readouterr().out)
    saved = json.loads((cell / "finetune_0.5" / "metrics.json").read_text())
    assert scores["f1_macro"] == pytest.approx(saved["f1_macro"])
    assert main(["analyze", "--config", str(config), "--run", str(cell), "--out", str(tmp_path / "an")]) == 0
    produced = {p.name for p in (tmp_path / "an" / "analysis" / cell.name).iterdir()}
    assert "attention_pretrain_arm_b.png" in produced and "features_pretrain_arm_a.png" in produced


@pytest.mark.parametrize(
    "argv, fragment",
    [
        (["bogus"], "invalid choice"),
        (["sweep", "--nope"], "unrecognized arguments"),
        (["sweep", "--config", "/does/not/exist.json"], "does not exist"),
        (["sweep", "--axis", "batch_size"], "--values"),
        (["sweep", "--set", "pretrain.nope=1"], "nope"),
        (["sweep", "--set", "pretrain.batch_size=0"], "batch_size"),
        (["evaluate", "--checkpoint", "/does/not/exist.ckpt"], "exist"),
        (["report", "--out", "/does/not/exist"], "does not exist"),
    ],
)
def test_errors_are_one_line(argv, fragment, capsys):
    assert main(argv) != 0
    err = capsys.readouterr().err.strip()
    assert len(err.splitlines()) == 1
    assert fragment in err


def test_malformed_config_names_field(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"pretrain": {"lr": 1e-3, "learning_rate": 2}}))
    assert main(["sweep", "--config", str(bad)]) == 2
    assert "learning_rate" in capsys.readouterr().err
    bad.write_text("{not json")
    assert main(["sweep", "--config", str(bad)]) == 2


def test_overrides_reach_every_list_entry():
    tree = RunConfig().to_dict()
    apply_override(tree, "finetune.lr=0.01")
    apply_override(tree, "finetune.1.max_epochs=7")
    apply_override(tree, "pretrain.arm_b.head_activation=softmax")
    cfg = RunConfig.from_dict(tree)
    assert [f.lr for f in cfg.finetune] == [0.01] * 3
    assert [f.max_epochs for f in cfg.finetune] == [50, 7, 50]
    assert cfg.pretrain.arm_b.head_activation == "softmax"
    with pytest.raises(ConfigError):
        apply_override(tree, "finetune")


def test_run_config_defaults():
    cfg = RunConfig()
    assert cfg.seeds == [0, 1, 2, 3, 4]
    assert [f.label_fraction for f in cfg.finetune] == [0.01, 0.1, 1.0]
    assert cfg.pretrain.epochs == 100 and cfg.pretrain.batch_size == 16 and cfg.pretrain.lr == 1e-3
    assert all(f.lr == 3e-4 and f.patience == 5 and f.focal_alpha == 1.0 for f in cfg.finetune)


def test_run_id_ignores_output_directory():
    a, b = RunConfig(), RunConfig(out="elsewhere")
    assert run_id(a, 0) == run_id(b, 0) != run_id(a, 1)
    assert np.all([len(run_id(a, s)) == 16 for s in range(3)])
