import csv
import hashlib
import json
from pathlib import Path

import pytest

from weaksep.cli import main
from weaksep.config import ConfigError, ExperimentConfig, set_override
from weaksep.evaluation import EvalReport
from weaksep.pipeline import axis_overrides

ROOT = Path(__file__).resolve().parents[1]
SMOKE = ROOT / "configs" / "smoke.yaml"


def md5(path):
    return hashlib.md5(Path(path).read_bytes()).hexdigest()


# --- configuration ------------------------------------------------------------

def test_shipped_configs_validate():
    for name in ("default.yaml", "toy.yaml", "smoke.yaml"):
        ExperimentConfig.load(ROOT / "configs" / name).validate()


def test_overrides_parse_yaml_values():
    raw = {}
    set_override(raw, "loss.alpha=3.5")
    set_override(raw, "dataset.counts.train=7")
    set_override(raw, "classifier.conv_channels=[1, 2, 3]")
    set_override(raw, "train.lr=3e-4")
    assert raw == {"loss": {"alpha": 3.5}, "dataset": {"counts": {"train": 7}},
                   "classifier": {"conv_channels": [1, 2, 3]}, "train": {"lr": 3e-4}}
    with pytest.raises(ConfigError):
        set_override(raw, "no_equals_sign")
    cfg = ExperimentConfig.load(SMOKE, ["loss.alpha=0", "seed=5"])
    assert cfg.loss.alpha == 0 and cfg.seed == 5 and cfg.scene_spec.rng_seed == 5


@pytest.mark.parametrize("overrides,match", [
    (["loss.label_mode=strong"], "strategy"),
    (["loss.label_mode=clip"], "class weights"),
    (["loss.label_mode=strong", "train.strategy=none", "loss.mixture_loss_variant=vanilla"], "vanilla"),
    (["loss.label_mode=frame", "train.strategy=none"], "strategy"),
    (["classifier.n_mels=999"], "n_mels"),
    (["dataset.counts.train=-1"], "counts"),
    (["bogus.key=1"], "unknown"),
    (["loss.colour=red"], "unknown"),
    (["train.patience=0"], "patience"),
])
def test_inconsistent_configs_are_rejected(overrides, match):
    with pytest.raises(ConfigError, match=match):
        ExperimentConfig.load(SMOKE, overrides).validate()


def test_sweep_axis_overrides():
    assert [o.replace(".0", "") for o in axis_overrides("alpha", 0)] == ["loss.alpha=0"]
    assert "loss.use_class_weights=false" in [o.lower() for o in axis_overrides("label_mode", "clip")]
    assert "train.strategy=none" in axis_overrides("label_mode", "strong")
    assert any(o.startswith("stft.hop_ms=") for o in axis_overrides("window_ms", 64))
    with pytest.raises(ConfigError):
        axis_overrides("colour", 1)


# --- commands -------------------------------------------------------------------

def cli(*args, out, config=SMOKE):
    return main([args[0], "--config", str(config), "--out", str(out), *args[1:]])


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    assert cli("synth", out=out) == 0
    assert cli("train", "--role", "classifier", out=out) == 0
    assert cli("train", "--role", "separator", out=out) == 0
    assert cli("eval", out=out) == 0
    return out


def test_synth_writes_three_manifests(pipeline_dir):
    counts = {s: len((pipeline_dir / "data" / f"{s}.jsonl").read_text().splitlines())
              for s in ("train", "valid", "test")}
    assert counts == {"train": 8, "valid": 4, "test": 4}


def test_synth_lambda_flag_and_rerun_determinism(tmp_path):
    assert cli("synth", "--lambda", "2.5", "--set", "dataset.counts={train: 3, valid: 0, test: 0}",
               out=tmp_path / "a") == 0
    assert cli("synth", "--lambda", "2.5", "--set", "dataset.counts={train: 3, valid: 0, test: 0}",
               out=tmp_path / "b") == 0
    a = (tmp_path / "a/data/train.jsonl").read_text()
    assert a == (tmp_path / "b/data/train.jsonl").read_text()
    assert all(json.loads(line)["lambda"] == 2.5 for line in a.splitlines())


def test_training_artifacts_and_idempotency(pipeline_dir):
    assert (pipeline_dir / "classifier.ckpt").exists()
    log = [json.loads(x) for x in (pipeline_dir / "logs/separator.jsonl").read_text().splitlines()]
    assert log[0]["epoch"] == 0 and "valid_loss" in log[0]
    assert any("loss_total" in r for r in log)
    before = md5(pipeline_dir / "separator.ckpt")
    assert cli("train", "--role", "separator", out=pipeline_dir) == 0
    assert md5(pipeline_dir / "separator.ckpt") == before


def test_eval_outputs_parse_and_rerun_identically(pipeline_dir):
    report = EvalReport.load(pipeline_dir / "eval")
    assert report.entries and report.classes == ["tone", "chirp", "noise_burst"]
    assert "frame" in report.classifier_scores
    before = md5(pipeline_dir / "eval/entries.csv")
    assert cli("eval", out=pipeline_dir) == 0
    assert md5(pipeline_dir / "eval/entries.csv") == before


def test_plot_command(pipeline_dir, tmp_path):
    assert cli("plot", out=pipeline_dir) == 0
    meta = json.loads((pipeline_dir / "plots/si_sdr_scatter.json").read_text())
    assert meta["panels"] == ["tone", "chirp", "noise_burst"]
    report = EvalReport.load(pipeline_dir / "eval")
    for name in meta["panels"]:
        assert meta["points"][name] == len(report.included(name))
    assert cli("plot", "--report", str(tmp_path / "empty"), out=tmp_path) == 3


def test_eval_on_train_beats_test_after_overfitting(tmp_path):
    sets = ["--set", "train.max_epochs=40", "--set", "train.patience=40", "--set", "train.lr=3e-3",
            "--set", "separator.hidden_per_direction=32", "--set", "classifier_train.max_epochs=20",
            "--set", "classifier_train.patience=20"]
    assert cli("synth", *sets, out=tmp_path) == 0
    assert cli("train", "--role", "classifier", *sets, out=tmp_path) == 0
    assert cli("train", "--role", "separator", *sets, out=tmp_path) == 0
    assert cli("eval", "--split", "train", *sets, "--set", "eval.out_dir=eval_train", out=tmp_path) == 0
    assert cli("eval", "--split", "test", *sets, out=tmp_path) == 0
    train = EvalReport.load(tmp_path / "eval_train").mean_delta
    test = EvalReport.load(tmp_path / "eval").mean_delta
    assert train >= test


def test_exit_codes(tmp_path, capsys):
    assert cli("train", "--role", "separator", out=tmp_path) == 3
    assert cli("synth", out=tmp_path) == 0
    assert cli("train", "--role", "separator", out=tmp_path) == 3
    assert "classifier checkpoint required" in capsys.readouterr().err
    assert cli("eval", out=tmp_path) == 3
    assert cli("train", "--role", "classifier", "--set", "loss.label_mode=strong", "--set", "train.strategy=none",
               out=tmp_path) == 2
    assert cli("train", "--role", "classifier", "--set", "loss.label_mode=clip", out=tmp_path) == 2
    assert cli("sweep", "--axis", "alpha", "--values", "1,-3", out=tmp_path) == 2
    assert cli("sweep", "--axis", "colour", "--values", "1", out=tmp_path) == 2
    assert not (tmp_path / "runs").exists()
    bad = tmp_path / "bad.yaml"
    bad.write_text("dataset: [unclosed\n")
    assert cli("synth", out=tmp_path, config=bad) == 2
    assert cli("synth", out=tmp_path, config=tmp_path / "missing.yaml") == 3


def test_sweep_table_and_run_reuse(tmp_path):
    assert cli("sweep", "--axis", "alpha", "--values", "0,100", out=tmp_path) == 0
    rows = list(csv.DictReader(open(tmp_path / "sweep_alpha.csv")))
    assert [r["alpha"] for r in rows] == ["0", "100"]
    assert {"overall_delta_mean", "classifier_frame_f"} <= set(rows[0])
    index = json.loads((tmp_path / "sweep_alpha.json").read_text())["runs"]
    assert len(set(index.values())) == 2
    # both alpha values share one pre-trained classifier
    assert len(list((tmp_path / "classifiers").glob("*.ckpt"))) == 1
    stamp = md5(tmp_path / index["100"] / "separator.ckpt")
    assert cli("sweep", "--axis", "alpha", "--values", "100", out=tmp_path) == 0
    assert md5(tmp_path / index["100"] / "separator.ckpt") == stamp
