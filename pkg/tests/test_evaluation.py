import json
import math

import numpy as np
import pytest

import oracles
from weaksep.dsp import AudioClip
from weaksep.evaluation import (EXCLUDE_SILENT, EXCLUDE_SINGLE, EvalReport, evaluate_classifier, evaluate_masks,
                                f_measure, oracle_mask_fn, plot_scatter, si_sdr, summarize_report)
from weaksep.scenes import SceneSpec, build_dataset, toy_pool

RNG = np.random.default_rng(0)


# --- SI-SDR -------------------------------------------------------------------

def test_si_sdr_matches_oracle_and_is_scale_invariant():
    for _ in range(10):
        ref = RNG.standard_normal(1000)
        est = ref + 0.3 * RNG.standard_normal(1000)
        want = oracles.si_sdr(est, ref)
        assert si_sdr(est, ref) == pytest.approx(want, abs=1e-9)
        for c in (1e-3, 0.5, 7.0, -2.0):
            assert si_sdr(c * est, ref) == pytest.approx(want, abs=1e-9)


def test_si_sdr_reference_cases():
    ref = RNG.standard_normal(4000)
    noise = RNG.standard_normal(4000)
    noise -= np.dot(noise, ref) / np.dot(ref, ref) * ref
    noise *= np.linalg.norm(ref) / np.linalg.norm(noise)
    assert si_sdr(ref + noise, ref) == pytest.approx(0.0, abs=1e-9)
    # mixture as estimate: equal-power interference scores 0 dB, twice the power -3.01 dB
    s, o1, o2 = RNG.standard_normal((3, 200_000))
    assert si_sdr(s + o1, s) == pytest.approx(0.0, abs=0.05)
    assert si_sdr(s + o1 + o2, s) == pytest.approx(-10 * math.log10(2), abs=0.05)
    assert si_sdr(ref, ref) == 80.0
    assert si_sdr(np.zeros(4000), ref) == -80.0
    assert math.isnan(si_sdr(ref, np.zeros(4000)))
    assert si_sdr(AudioClip(ref, 16000), AudioClip(ref, 16000)) == 80.0
    with pytest.raises(ValueError):
        si_sdr(ref, ref[:-1])


# --- F-measure -------------------------------------------------------------------

def test_f_measure_worked_example():
    pred = np.array([[0.9, 0.8, 0.1, 0.2, 0.3]])
    true = np.array([[1, 0, 1, 1, 1]])
    p, r, f = f_measure(pred, true, class_axis=0)
    assert (p[0], r[0]) == (0.5, 0.25)
    assert f[0] == pytest.approx(1 / 3)


def test_f_measure_edge_cases():
    labels = (RNG.random((2, 50)) < 0.4).astype(int)
    assert all(np.all(v == 1) for v in f_measure(labels.astype(float), labels, class_axis=0))
    assert all(np.all(v == 1) for v in f_measure(np.zeros((2, 5)), np.zeros((2, 5)), class_axis=0))
    p, r, f = f_measure(1.0 - labels, labels, class_axis=0)
    assert np.all(f == 0)
    with pytest.raises(ValueError):
        f_measure(np.zeros((2, 5)), np.zeros((2, 4)), class_axis=0)


def test_f_measure_bounds_and_batch_axis():
    for _ in range(50):
        pred = RNG.random((4, 3, 20))
        true = (RNG.random((4, 3, 20)) < 0.3).astype(int)
        p, r, f = f_measure(pred, true)
        assert p.shape == (3,)
        assert np.all((0 <= f) & (f <= 1))
        assert np.all(f <= np.minimum(2 * p, 2 * r) + 1e-12)
        p0, r0, f0 = f_measure(np.moveaxis(pred, 1, 0).reshape(3, -1), np.moveaxis(true, 1, 0).reshape(3, -1),
                               class_axis=0)
        np.testing.assert_allclose(f, f0)


# --- reports ------------------------------------------------------------------

def synthetic_report(n=40):
    report = EvalReport(["a", "b"])
    for i in range(n):
        for name in ("a", "b"):
            reason = None if i % 7 else (EXCLUDE_SILENT if name == "a" else EXCLUDE_SINGLE)
            report.add(f"c{i}", name, float(RNG.normal(-3, 2)), float(RNG.normal(5, 4)), reason)
    return report


def sort_median(values):
    v = sorted(values)
    m = len(v) // 2
    return v[m] if len(v) % 2 else (v[m - 1] + v[m]) / 2


def test_summary_excludes_exactly_the_flagged_entries(tmp_path):
    report = synthetic_report()
    summary = summarize_report(report, tmp_path)
    for name in ("a", "b", "overall"):
        rows = [e for e in report.entries if not e["excluded"] and name in ("overall", e["class_name"])]
        for key in ("input_si_sdr", "output_si_sdr", "delta_si_sdr"):
            vals = [e[key] for e in rows]
            assert summary[name][key]["mean"] == pytest.approx(sum(vals) / len(vals), abs=1e-12)
            assert summary[name][key]["median"] == pytest.approx(sort_median(vals), abs=1e-12)
        assert summary[name]["count"] == len(rows)
    for e in report.entries:
        if not e["excluded"]:
            assert e["delta_si_sdr"] == e["output_si_sdr"] - e["input_si_sdr"]
    rows = (tmp_path / "summary.csv").read_text().splitlines()
    assert f"excluded:{EXCLUDE_SILENT},6" in rows and f"excluded:{EXCLUDE_SINGLE},6" in rows
    pts = np.loadtxt(tmp_path / "scatter_a.txt")
    assert pts.shape == (summary["a"]["count"], 2)


def test_single_entry_report(tmp_path):
    report = EvalReport(["a"])
    report.add("c0", "a", -2.0, 4.5)
    s = summarize_report(report, tmp_path)["a"]
    assert s["delta_si_sdr"]["mean"] == s["delta_si_sdr"]["median"] == 6.5
    assert s["output_si_sdr"]["mean"] == 4.5
    with pytest.raises(ValueError):
        summarize_report(EvalReport(["a"]), tmp_path)


def test_report_round_trip(tmp_path):
    report = synthetic_report(10)
    report.classifier_scores = {"frame": {"f_measure": [0.9, 0.8]}}
    report.save(tmp_path)
    back = EvalReport.load(tmp_path)
    assert back.classes == report.classes and back.classifier_scores == report.classifier_scores
    for a, b in zip(report.entries, back.entries):
        for k in a:
            if isinstance(a[k], float) and math.isnan(a[k]):
                assert math.isnan(b[k])
            else:
                assert a[k] == b[k]


def test_plot_scatter(tmp_path):
    summarize_report(synthetic_report(), tmp_path / "r")
    path = plot_scatter(tmp_path / "r", tmp_path / "plots")
    assert path.exists() and path.stat().st_size > 1000
    meta = json.loads((tmp_path / "plots/si_sdr_scatter.json").read_text())
    assert meta["panels"] == ["a", "b"]
    with pytest.raises(FileNotFoundError):
        plot_scatter(tmp_path / "missing", tmp_path / "plots")


# --- end-to-end scoring ----------------------------------------------------------

@pytest.fixture(scope="module")
def toy_manifest(tmp_path_factory):
    return build_dataset(SceneSpec(lam=4, rng_seed=3), toy_pool("test", 3), 6, tmp_path_factory.mktemp("toy"))


def test_oracle_masks_improve_every_entry(toy_manifest):
    report = evaluate_masks(toy_manifest, oracle_mask_fn())
    included = report.included()
    assert included
    assert all(e["delta_si_sdr"] > 0 for e in included)


def test_exclusion_rules(toy_manifest):
    report = evaluate_masks(toy_manifest, oracle_mask_fn())
    for rec in toy_manifest:
        entries = [e for e in report.entries if e["clip_id"] == rec["clip_id"]]
        assert len(entries) == len(rec["classes"])
        for ci, e in enumerate(entries):
            if not rec["clip_labels"][ci]:
                assert e["reason"] == EXCLUDE_SILENT
            elif sum(rec["clip_labels"]) < 2:
                assert e["reason"] == EXCLUDE_SINGLE
            else:
                assert not e["excluded"]


def test_ones_masks_give_zero_delta(toy_manifest):
    report = evaluate_masks(toy_manifest, lambda mag, rec, refs: np.ones((3, *mag.shape)))
    for e in report.included():
        assert e["delta_si_sdr"] == pytest.approx(0.0, abs=1e-6)


def test_classifier_scoring_with_perfect_callable(toy_manifest):
    labels = iter(toy_manifest.frame_labels())
    scores = evaluate_classifier(lambda mag: next(labels).astype(float), toy_manifest)
    assert scores["f_measure"] == [1.0, 1.0, 1.0]
    labels = iter(toy_manifest.frame_labels())
    clip = evaluate_classifier(lambda mag: next(labels).astype(float), toy_manifest, granularity="clip")
    assert clip["precision"] == [1.0, 1.0, 1.0]
    with pytest.raises(ValueError):
        evaluate_classifier(lambda mag: None, toy_manifest, granularity="segment")
