"""Experiment stages (synthesis, training, evaluation, sweeps) over an output directory.

Layout under ``out``::

    data/<split>.jsonl, data/<split>/*.wav, data/synth.json
    classifier.ckpt, separator.ckpt
    logs/classifier.jsonl, logs/separator.jsonl
    eval/ (entries.csv, report.json, summary.csv, summary.json, scatter_*.txt)

Training stages record a hash of the config sections they depend on and
skip work when a matching checkpoint already exists.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, ExperimentConfig
from .evaluation import evaluate_classifier, evaluate_separator, plot_scatter, summarize_report
from .scenes import SPLITS, Manifest, build_dataset, load_pool
from .training import checkpoint_load, checkpoint_save, train_classifier, train_separator

logger = logging.getLogger(__name__)

DATA_SECTIONS = ("seed", "dataset", "stft")
SEPARATOR_SECTIONS = (*DATA_SECTIONS, "classifier", "classifier_train", "train", "loss", "separator")


class MissingPrerequisite(FileNotFoundError):
    pass


# --- synthesis --------------------------------------------------------------

def synthesize(cfg: ExperimentConfig, data_dir) -> dict:
    """Render every split with a nonzero count; a matching stamp makes this a no-op."""
    data_dir = Path(data_dir)
    stamp = data_dir / "synth.json"
    key = cfg.section_hash(*DATA_SECTIONS)
    counts = cfg.raw["dataset"]["counts"]
    if stamp.exists() and json.loads(stamp.read_text()).get("config_hash") == key \
            and all((data_dir / f"{s}.jsonl").exists() for s in counts):
        logger.info("dataset in %s is up to date", data_dir)
        return {s: Manifest.load(data_dir / f"{s}.jsonl") for s in counts}
    d = cfg.raw["dataset"]
    manifests = {}
    for split in SPLITS:
        if split not in counts:
            continue
        pool = load_pool(cfg.pool_description(), split, cfg.base_dir, int(d["events_per_class"]), cfg.seed)
        manifests[split] = build_dataset(cfg.scene_spec, pool, int(counts[split]), data_dir, cfg.stft,
                                         bool(d["write_references"]))
        logger.info("wrote %d %s clips", len(manifests[split]), split)
    stamp.write_text(json.dumps({"config_hash": key, "counts": counts,
                                 "lambda": float(d["lambda"])}, sort_keys=True) + "\n")
    return manifests


def load_manifest(data_dir, split) -> Manifest:
    path = Path(data_dir) / f"{split}.jsonl"
    if not path.exists():
        raise MissingPrerequisite(f"manifest {path} not found; run `synth` first")
    return Manifest.load(path)


# --- training ---------------------------------------------------------------

def _up_to_date(path: Path, key: str) -> bool:
    if not path.exists():
        return False
    try:
        _, _, run_state = load_checkpoint(path)
    except CheckpointError:
        return False
    return run_state.get("config_hash") == key


def classifier_key(cfg: ExperimentConfig) -> str:
    """Hash of everything classifier pre-training depends on (not alpha, strategy or separator)."""
    train = asdict(cfg.classifier_train)
    train.pop("strategy")
    loss = cfg.classifier_loss
    payload = {"data": cfg.section_hash(*DATA_SECTIONS), "spec": cfg.classifier_spec.to_dict(), "train": train,
               "loss": [loss.label_mode, loss.use_class_weights, loss.clip_pooling]}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def _open_log(path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    return open(path, "w")


def _run_state(run, key):
    return {"config_hash": key, **run.to_dict()}


def train_classifier_stage(cfg: ExperimentConfig, data_dir, ckpt_path, log_path) -> Path:
    if cfg.loss.label_mode == "strong":
        raise ConfigError("classifier pre-training uses weak labels only; loss.label_mode is 'strong'")
    ckpt_path = Path(ckpt_path)
    key = classifier_key(cfg)
    if _up_to_date(ckpt_path, key):
        logger.info("classifier checkpoint %s is up to date", ckpt_path)
        return ckpt_path
    train, valid = load_manifest(data_dir, "train"), load_manifest(data_dir, "valid")
    with _open_log(Path(log_path)) as log:
        net, run = train_classifier(train, valid, cfg.classifier_spec, cfg.classifier_train, cfg.classifier_loss,
                                    cfg.stft, log)
    ckpt_path.parent.mkdir(parents=True, exist_ok=True)
    checkpoint_save(net, ckpt_path, _run_state(run, key))
    return ckpt_path


def load_classifier(cfg: ExperimentConfig, path):
    path = Path(path)
    if not path.exists():
        raise MissingPrerequisite(
            f"classifier checkpoint required for strategy {cfg.train.strategy!r}: {path} not found; "
            "run `train --role classifier` first")
    try:
        return checkpoint_load(path, cfg.classifier_spec)[0]
    except CheckpointError as exc:
        raise ConfigError(str(exc)) from exc


def needs_classifier(cfg: ExperimentConfig) -> bool:
    return cfg.loss.label_mode != "strong" and cfg.train.strategy != "joint"


def train_separator_stage(cfg: ExperimentConfig, data_dir, ckpt_path, log_path, classifier_path=None) -> Path:
    ckpt_path = Path(ckpt_path)
    key = cfg.section_hash(*SEPARATOR_SECTIONS)
    clf = None
    if needs_classifier(cfg):
        clf = load_classifier(cfg, classifier_path)
        key += "-" + load_checkpoint(classifier_path)[2].get("config_hash", "")
    if _up_to_date(ckpt_path, key):
        logger.info("separator checkpoint %s is up to date", ckpt_path)
        return ckpt_path
    train, valid = load_manifest(data_dir, "train"), load_manifest(data_dir, "valid")
    with _open_log(Path(log_path)) as log:
        model, run = train_separator(train, valid, cfg.separator_spec, cfg.train, cfg.loss, clf,
                                     cfg.classifier_spec, cfg.stft, log)
    ckpt_path.parent.mkdir(parents=True, exist_ok=True)
    checkpoint_save(model.separator, ckpt_path, _run_state(run, key))
    return ckpt_path


# --- evaluation -------------------------------------------------------------

def evaluate_stage(cfg: ExperimentConfig, data_dir, separator_path, out_dir, classifier_path=None,
                   split: str = "test") -> dict:
    separator_path = Path(separator_path)
    if not separator_path.exists():
        raise MissingPrerequisite(f"separator checkpoint {separator_path} not found; run `train --role separator`")
    try:
        separator = checkpoint_load(separator_path, cfg.separator_spec)[0]
    except CheckpointError as exc:
        raise ConfigError(str(exc)) from exc
    manifest = load_manifest(data_dir, split)
    report = evaluate_separator(separator, manifest, cfg.stft)
    if classifier_path is not None and Path(classifier_path).exists():
        clf = load_classifier(cfg, classifier_path)
        threshold = float(cfg.raw["eval"]["threshold"])
        report.classifier_scores = {
            "frame": evaluate_classifier(clf, manifest, "frame", cfg.loss.clip_pooling, cfg.stft, threshold),
            "clip": evaluate_classifier(clf, manifest, "clip", cfg.loss.clip_pooling, cfg.stft, threshold)}
    summary = summarize_report(report, out_dir)
    return {"summary": summary, "classifier_scores": report.classifier_scores}


# --- whole experiment and sweeps -------------------------------------------

def run_experiment(cfg: ExperimentConfig, out, data_dir=None, classifier_path=None) -> dict:
    """Synthesize (if needed), train what the config requires, and evaluate on the test split."""
    out = Path(out)
    data_dir = Path(data_dir) if data_dir else cfg.data_dir(out)
    synthesize(cfg, data_dir)
    if needs_classifier(cfg) and classifier_path is None:
        classifier_path = train_classifier_stage(cfg, data_dir, out / "classifier.ckpt", out / "logs/classifier.jsonl")
    sep = train_separator_stage(cfg, data_dir, out / "separator.ckpt", out / "logs/separator.jsonl",
                                classifier_path)
    return evaluate_stage(cfg, data_dir, sep, out / "eval", classifier_path)


def axis_overrides(axis: str, value) -> list:
    """Config overrides realising one point of a sweep axis."""
    if axis == "alpha":
        return [f"loss.alpha={float(value)}"]
    if axis == "n_mels":
        if str(value) == "linear":
            return ["classifier.input_kind=linear_magnitude"]
        return ["classifier.input_kind=mel_magnitude", f"classifier.n_mels={int(value)}"]
    if axis == "window_ms":
        out = [f"stft.window_ms={float(value)}", f"stft.hop_ms={float(value) / 4}"]
        # the 8 ms point was trained with batches of 8 at full scale
        return out + ["train.batch_size=8"] if float(value) == 8.0 else out
    if axis == "lambda":
        return [f"dataset.lambda={float(value)}"]
    if axis == "strategy":
        return [f"train.strategy={value}"]
    if axis == "label_mode":
        if value == "strong":
            return ["loss.label_mode=strong", "train.strategy=none"]
        if value == "clip":
            return ["loss.label_mode=clip", "loss.use_class_weights=false"]
        if value == "frame":
            return ["loss.label_mode=frame"]
        raise ConfigError(f"invalid label_mode value {value!r}")
    if "." in axis:
        return [f"{axis}={value}"]
    raise ConfigError(f"unknown sweep axis {axis!r}")


SWEEP_AXES = ("alpha", "n_mels", "window_ms", "lambda", "strategy", "label_mode")


def sweep(cfg: ExperimentConfig, axis: str, values, out) -> list:
    """One experiment per value with the shared seed; returns table rows and writes ``sweep_<axis>.csv``."""
    out = Path(out)
    configs = []
    for v in values:
        try:
            configs.append((v, cfg.with_overrides(axis_overrides(axis, v))))
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"invalid value {v!r} for sweep axis {axis!r}: {exc}") from exc
    rows, index = [], {}
    base_data = cfg.section_hash(*DATA_SECTIONS)
    for v, c in configs:
        data_key = c.section_hash(*DATA_SECTIONS)
        data_dir = out / "data" if data_key == base_data else out / f"data_{data_key}"
        if c.raw["dataset"]["data_dir"]:
            data_dir = c.data_dir(out)
        clf_path = None
        if needs_classifier(c):
            synthesize(c, data_dir)
            key = classifier_key(c)
            clf_path = train_classifier_stage(c, data_dir, out / "classifiers" / f"{key}.ckpt",
                                              out / "classifiers" / f"{key}.jsonl")
        # runs are keyed by their full config so sweeps sharing a point reuse it
        run_dir = out / "runs" / c.section_hash(*SEPARATOR_SECTIONS)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.yaml").write_text(c.dump())
        index[str(v)] = str(run_dir.relative_to(out))
        result = run_experiment(c, run_dir, data_dir, clf_path)
        summary = result["summary"]
        row = {axis: v}
        for name in [*c.classes, "overall"]:
            row[f"{name}_delta_mean"] = summary[name]["delta_si_sdr"]["mean"]
        row["overall_delta_median"] = summary["overall"]["delta_si_sdr"]["median"]
        row["overall_input_mean"] = summary["overall"]["input_si_sdr"]["mean"]
        frame = (result["classifier_scores"] or {}).get("frame")
        row["classifier_frame_f"] = float(sum(frame["f_measure"]) / len(frame["f_measure"])) if frame else math.nan
        rows.append(row)
    name = axis.replace(".", "_")
    (out / f"sweep_{name}.json").write_text(json.dumps({"axis": axis, "runs": index}, indent=2) + "\n")
    with open(out / f"sweep_{name}.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.4f}" if isinstance(v, float) else v) for k, v in row.items()})
    return rows


def plot_stage(report_dir, out_dir) -> Path:
    try:
        return plot_scatter(report_dir, out_dir)
    except FileNotFoundError as exc:
        raise MissingPrerequisite(str(exc)) from exc
