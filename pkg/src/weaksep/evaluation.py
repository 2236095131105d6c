"""Separation (SI-SDR) and detection (F-measure) metrics, report aggregation and export."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .dsp import AudioClip, Spectrogram, StftConfig, istft, read_wav, stft
from .networks import Classifier, Separator, clip_pool, downsample_labels, log_features
from .scenes import Manifest

SI_SDR_CAP = 80.0
SILENCE_RMS_DB = -80.0
EXCLUDE_SILENT = "silent_source"
EXCLUDE_SINGLE = "single_source_clip"


def _samples(x):
    return x.samples if isinstance(x, AudioClip) else np.asarray(x, dtype=np.float64)


def is_silent(x) -> bool:
    s = _samples(x)
    rms = np.sqrt(np.mean(s ** 2)) if s.size else 0.0
    return rms == 0 or 20 * np.log10(rms) < SILENCE_RMS_DB


def si_sdr(estimate, reference, cap: float = SI_SDR_CAP) -> float:
    """Scale-invariant SDR in dB, clipped to ``[-cap, cap]``; NaN when the reference is silent."""
    est, ref = _samples(estimate), _samples(reference)
    if est.shape != ref.shape:
        raise ValueError(f"estimate and reference lengths differ: {est.shape} vs {ref.shape}")
    ref_energy = np.dot(ref, ref)
    if is_silent(ref):
        return math.nan
    target = (np.dot(est, ref) / ref_energy) * ref
    noise = est - target
    t_energy, n_energy = np.dot(target, target), np.dot(noise, noise)
    if t_energy == 0:
        return -cap
    if n_energy == 0:
        return cap
    return float(np.clip(10 * np.log10(t_energy / n_energy), -cap, cap))


def f_measure(pred_probs, labels, threshold: float = 0.5, class_axis: int = 1):
    """Per-class ``(P, R, F)`` arrays, counting over every axis except ``class_axis``.

    A class with no positives in either predictions or labels scores 1 on all
    three; an empty denominator otherwise yields 0.
    """
    pred = np.moveaxis(np.asarray(pred_probs) >= threshold, class_axis, 0)
    true = np.moveaxis(np.asarray(labels) > 0.5, class_axis, 0)
    if pred.shape != true.shape:
        raise ValueError(f"prediction shape {pred.shape} != label shape {true.shape}")
    axes = tuple(range(1, pred.ndim))
    tp = np.sum(pred & true, axis=axes).astype(float)
    fp = np.sum(pred & ~true, axis=axes).astype(float)
    fn = np.sum(~pred & true, axis=axes).astype(float)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(tp + fp > 0, tp / (tp + fp), (fn == 0).astype(float))
        r = np.where(tp + fn > 0, tp / (tp + fn), (fp == 0).astype(float))
        f = np.where(p + r > 0, 2 * p * r / (p + r), 0.0)
    return p, r, f


ENTRY_FIELDS = ("clip_id", "class_name", "input_si_sdr", "output_si_sdr", "delta_si_sdr", "excluded", "reason")


@dataclass
class EvalReport:
    classes: list
    entries: list = field(default_factory=list)
    cap_db: float = SI_SDR_CAP
    classifier_scores: dict = field(default_factory=dict)

    def add(self, clip_id, class_name, input_db, output_db, reason=None):
        delta = output_db - input_db if reason is None else math.nan
        self.entries.append({"clip_id": clip_id, "class_name": class_name, "input_si_sdr": input_db,
                             "output_si_sdr": output_db, "delta_si_sdr": delta,
                             "excluded": reason is not None, "reason": reason or ""})

    def included(self, class_name=None):
        return [e for e in self.entries if not e["excluded"] and (class_name is None or e["class_name"] == class_name)]

    def exclusion_counts(self) -> dict:
        counts = {}
        for e in self.entries:
            if e["excluded"]:
                counts[e["reason"]] = counts.get(e["reason"], 0) + 1
        return counts

    def summary(self) -> dict:
        """Mean and median of input, output and delta SI-SDR per class and overall."""
        out = {}
        for name in [*self.classes, "overall"]:
            rows = self.included(None if name == "overall" else name)
            stats = {"count": len(rows)}
            for key in ("input_si_sdr", "output_si_sdr", "delta_si_sdr"):
                vals = np.array([r[key] for r in rows], dtype=float)
                stats[key] = {"mean": float(vals.mean()) if len(vals) else math.nan,
                              "median": float(np.median(vals)) if len(vals) else math.nan}
            out[name] = stats
        return out

    @property
    def mean_delta(self) -> float:
        return self.summary()["overall"]["delta_si_sdr"]["mean"]

    def save(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "entries.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(ENTRY_FIELDS)
            for e in self.entries:
                w.writerow([e["clip_id"], e["class_name"], repr(float(e["input_si_sdr"])),
                            repr(float(e["output_si_sdr"])), repr(float(e["delta_si_sdr"])),
                            int(e["excluded"]), e["reason"]])
        meta = {"classes": self.classes, "cap_db": self.cap_db, "classifier_scores": self.classifier_scores}
        (out_dir / "report.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, out_dir) -> "EvalReport":
        out_dir = Path(out_dir)
        meta = json.loads((out_dir / "report.json").read_text())
        report = cls(meta["classes"], cap_db=meta["cap_db"], classifier_scores=meta["classifier_scores"])
        with open(out_dir / "entries.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                report.entries.append({
                    "clip_id": row["clip_id"], "class_name": row["class_name"],
                    "input_si_sdr": float(row["input_si_sdr"]), "output_si_sdr": float(row["output_si_sdr"]),
                    "delta_si_sdr": float(row["delta_si_sdr"]), "excluded": bool(int(row["excluded"])),
                    "reason": row["reason"]})
        return report


def evaluate_masks(manifest: Manifest, mask_fn, config: StftConfig = StftConfig(), min_sources: int = 2) -> EvalReport:
    """Score ``mask_fn(mix_mag, record, refs) -> [n, F, T]`` masks on every clip of ``manifest``.

    Sources with a silent reference and clips with fewer than ``min_sources``
    active classes are recorded but flagged as excluded.
    """
    report = EvalReport(manifest.classes)
    for rec in manifest:
        if not rec.get("reference_paths"):
            raise ValueError(f"clip {rec['clip_id']} has no reference sources; cannot score separation")
        mix = read_wav(manifest.path(rec["mixture_path"]))
        refs = [read_wav(manifest.path(p)) for p in rec["reference_paths"]]
        spec = stft(mix, config)
        masks = np.asarray(mask_fn(np.abs(spec.values), rec, refs))
        single = sum(rec["clip_labels"]) < min_sources
        for ci, (name, ref) in enumerate(zip(rec["classes"], refs)):
            if is_silent(ref):
                report.add(rec["clip_id"], name, math.nan, math.nan, EXCLUDE_SILENT)
                continue
            est = istft(Spectrogram(masks[ci] * spec.values, config, "complex", len(mix)))
            input_db, output_db = si_sdr(mix, ref), si_sdr(est, ref)
            report.add(rec["clip_id"], name, input_db, output_db, EXCLUDE_SINGLE if single else None)
    return report


def separator_mask_fn(separator: Separator):
    separator.eval()

    def fn(mix_mag, rec, refs):
        with torch.no_grad():
            x = torch.as_tensor(mix_mag, dtype=torch.float32)[None]
            return separator(log_features(x))[0].double().numpy()
    return fn


def oracle_mask_fn(config: StftConfig = StftConfig()):
    """Ratio masks ``S_i / sum_j S_j`` built from the reference magnitudes."""
    def fn(mix_mag, rec, refs):
        mags = np.stack([np.abs(stft(r, config).values) for r in refs])
        total = mags.sum(axis=0)
        return np.divide(mags, total, out=np.zeros_like(mags), where=total > 0)
    return fn


def evaluate_separator(separator: Separator, manifest: Manifest, config: StftConfig = StftConfig()) -> EvalReport:
    return evaluate_masks(manifest, separator_mask_fn(separator), config)


def evaluate_classifier(classifier, manifest: Manifest, granularity: str = "frame", pooling: str = "max",
                        config: StftConfig = StftConfig(), threshold: float = 0.5) -> dict:
    """Per-class ``{"precision", "recall", "f_measure"}`` lists at frame or clip granularity.

    ``classifier`` is a :class:`Classifier` or any callable mapping a
    ``[F, T]`` magnitude array to ``[n, T']`` frame probabilities.
    """
    if granularity not in ("frame", "clip"):
        raise ValueError(f"unknown granularity {granularity!r}")
    labels = manifest.frame_labels(config)
    preds, truth = [], []
    for rec, frame_labels in zip(manifest, labels):
        mag = np.abs(stft(read_wav(manifest.path(rec["mixture_path"])), config).values)
        probs = _frame_probs(classifier, mag)
        factor = int(math.ceil(frame_labels.shape[1] / probs.shape[1]))
        if granularity == "frame":
            preds.append(probs)
            truth.append(downsample_labels(frame_labels, factor))
        else:
            preds.append(clip_pool(probs, pooling)[:, None])
            truth.append(frame_labels.max(axis=1)[:, None])
    pred = np.concatenate(preds, axis=1)
    true = np.concatenate(truth, axis=1)
    p, r, f = f_measure(pred, true, threshold, class_axis=0)
    return {"classes": manifest.classes, "precision": p.tolist(), "recall": r.tolist(), "f_measure": f.tolist()}


def _frame_probs(classifier, mag):
    if isinstance(classifier, Classifier):
        classifier.eval()
        with torch.no_grad():
            return classifier.probs(torch.as_tensor(mag, dtype=torch.float32)[None])[0].double().numpy()
    return np.asarray(classifier(mag))


def summarize_report(report: EvalReport, out_dir) -> dict:
    """Write the per-entry table, a summary table and per-class scatter files."""
    if not report.entries:
        raise ValueError("cannot summarize an empty report")
    out_dir = Path(out_dir)
    report.save(out_dir)
    summary = report.summary()
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        names = [*report.classes, "overall"]
        w.writerow(["row", *[f"{n}_{stat}" for n in names for stat in ("mean", "median")]])
        for key, label in (("input_si_sdr", "Input SI-SDR"), ("output_si_sdr", "Output SI-SDR"),
                           ("delta_si_sdr", "Delta SI-SDR")):
            w.writerow([label, *[f"{summary[n][key][stat]:.4f}" for n in names for stat in ("mean", "median")]])
        w.writerow(["count", *[summary[n]["count"] for n in names for _ in range(2)]])
        for reason in (EXCLUDE_SILENT, EXCLUDE_SINGLE):
            w.writerow([f"excluded:{reason}", report.exclusion_counts().get(reason, 0)])
    for name in report.classes:
        rows = report.included(name)
        pts = np.array([[r["input_si_sdr"], r["delta_si_sdr"]] for r in rows]).reshape(-1, 2)
        np.savetxt(out_dir / f"scatter_{name}.txt", pts, fmt="%.6f", header="input_si_sdr delta_si_sdr")
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def plot_scatter(report_dir, out_dir) -> Path:
    """One panel per class of delta SI-SDR against input SI-SDR; returns the image path."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    report_dir, out_dir = Path(report_dir), Path(out_dir)
    files = sorted(report_dir.glob("scatter_*.txt")) if report_dir.is_dir() else []
    if not files:
        raise FileNotFoundError(f"no scatter files in {report_dir}")
    meta_path = report_dir / "report.json"
    classes = json.loads(meta_path.read_text())["classes"] if meta_path.exists() else [f.stem[8:] for f in files]
    out_dir.mkdir(parents=True, exist_ok=True)
    fig, axes = plt.subplots(1, len(classes), figsize=(3.2 * len(classes), 3.2), dpi=100, squeeze=False)
    counts = {}
    for ax, name in zip(axes[0], classes):
        pts = np.loadtxt(report_dir / f"scatter_{name}.txt", ndmin=2).reshape(-1, 2)
        ax.scatter(pts[:, 0], pts[:, 1], s=6, alpha=0.6)
        ax.set_title(name)
        ax.set_xlabel("input SI-SDR (dB)")
        ax.set_ylabel("ΔSI-SDR (dB)")
        counts[name] = int(len(pts))
    fig.tight_layout()
    path = out_dir / "si_sdr_scatter.png"
    fig.savefig(path)
    plt.close(fig)
    (out_dir / "si_sdr_scatter.json").write_text(json.dumps(
        {"panels": classes, "points": counts, "size_px": [int(fig.get_figwidth() * 100), int(fig.get_figheight() * 100)]},
        indent=2) + "\n")
    return path
