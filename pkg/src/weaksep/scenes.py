"""Synthetic scene generation, weak-label derivation and the clip manifest format."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal as sps
from scipy.stats import poisson

from .dsp import SAMPLE_RATE, AudioClip, StftConfig, read_wav, stft, write_wav
from .loudness import UNDEFINED_LOUDNESS, loudness_gain

SPLITS = ("train", "valid", "test")
TOY_CLASSES = ("tone", "chirp", "noise_burst")
PEAK_LIMIT = 0.99
LSB = 1.0 / 32768.0


@dataclass(frozen=True)
class SceneSpec:
    lam: float = 5.0
    clip_duration_s: float = 4.0
    event_duration_range_s: tuple = (0.5, 4.0)
    level_range_lufs: tuple = (-30.0, -25.0)
    rng_seed: int = 0
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")
        lo, hi = self.event_duration_range_s
        if not 0 < lo <= hi <= self.clip_duration_s:
            raise ValueError("event durations must satisfy 0 < min <= max <= clip duration")
        if self.level_range_lufs[0] > self.level_range_lufs[1]:
            raise ValueError("level range must be ordered")

    @property
    def n_samples(self) -> int:
        return int(round(self.clip_duration_s * self.sample_rate))


@dataclass
class EventPool:
    """Per-class lists of isolated event recordings for one split."""

    classes: list
    events: dict
    split: str = "train"

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        for name in self.classes:
            if not self.events.get(name):
                raise ValueError(f"event pool has no events for class {name!r}")

    @property
    def n_classes(self) -> int:
        return len(self.classes)


@dataclass(frozen=True)
class Event:
    class_index: int
    source_event_id: str
    start_s: float
    duration_s: float
    target_lufs: float
    start_sample: int
    n_samples: int

    def to_dict(self):
        return {"class_index": self.class_index, "source_event_id": self.source_event_id,
                "start_s": self.start_s, "duration_s": self.duration_s,
                "target_lufs": self.target_lufs, "start_sample": self.start_sample,
                "n_samples": self.n_samples}


@dataclass
class Scene:
    events: list
    mixture: AudioClip
    references: list
    gain: float = 1.0


@dataclass
class LabelSet:
    frame_labels: np.ndarray
    clip_labels: np.ndarray
    strong_refs: list | None = None

    @property
    def active_frame_sets(self):
        return [set(np.flatnonzero(col)) for col in self.frame_labels.T]

    @property
    def active_clip_set(self):
        return set(np.flatnonzero(self.clip_labels))


@dataclass(frozen=True)
class ClassPriors:
    gamma: np.ndarray

    def __post_init__(self):
        gamma = np.asarray(self.gamma, dtype=np.float64)
        if np.any(gamma < 0) or np.any(gamma > 1):
            raise ValueError("class priors must lie in [0, 1]")
        object.__setattr__(self, "gamma", gamma)


def sample_event_count(lam: float, rng: np.random.Generator) -> int:
    """Draw from a Poisson(lam) conditioned on at least one event (inverse CDF)."""
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    p_zero = np.exp(-lam)
    u = p_zero + rng.uniform() * (1.0 - p_zero)
    return max(int(poisson.ppf(u, lam)), 1)


def sample_event_counts(lam: float, rng: np.random.Generator, size: int) -> np.ndarray:
    """Vectorised :func:`sample_event_count`; consumes the same uniform stream."""
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    p_zero = np.exp(-lam)
    u = p_zero + rng.uniform(size=size) * (1.0 - p_zero)
    return np.maximum(poisson.ppf(u, lam).astype(np.int64), 1)


def _excerpt(source: np.ndarray, n: int, rng) -> tuple[np.ndarray, int]:
    if n >= len(source):
        return source, len(source)
    offset = int(rng.integers(0, len(source) - n + 1))
    return source[offset:offset + n], n


def sample_scene(spec: SceneSpec, pool: EventPool, rng: np.random.Generator, max_redraws: int = 20) -> Scene:
    n_classes = pool.n_classes
    length = spec.n_samples
    refs = np.zeros((n_classes, length))
    events = []
    for _ in range(sample_event_count(spec.lam, rng)):
        for _attempt in range(max_redraws):
            ci = int(rng.integers(n_classes))
            name = pool.classes[ci]
            ei = int(rng.integers(len(pool.events[name])))
            source = pool.events[name][ei]
            dur = rng.uniform(*spec.event_duration_range_s)
            excerpt, n = _excerpt(source.samples, int(round(dur * spec.sample_rate)), rng)
            n = min(n, length)
            excerpt = excerpt[:n]
            start = int(rng.integers(0, length - n + 1))
            level = rng.uniform(*spec.level_range_lufs)
            clip = AudioClip(excerpt, spec.sample_rate)
            try:
                gain = loudness_gain(clip, level)
            except ValueError:
                continue
            break
        else:
            raise ValueError(f"could not draw a non-silent event from class {name!r}")
        refs[ci, start:start + n] += excerpt * gain
        events.append(Event(ci, f"{name}/{ei}", start / spec.sample_rate, n / spec.sample_rate,
                            float(level), start, n))
    peak = np.abs(refs.sum(axis=0)).max()
    scale = PEAK_LIMIT / peak if peak > PEAK_LIMIT else 1.0
    # put references on the 16-bit grid so that sums are exact and survive WAV storage
    refs = np.round(refs * scale / LSB) * LSB
    mixture = refs.sum(axis=0)
    return Scene(events, AudioClip(mixture, spec.sample_rate),
                 [AudioClip(r, spec.sample_rate) for r in refs], scale)


def frame_activity(events, n_classes: int, n_samples: int, config: StftConfig) -> np.ndarray:
    """Binary ``[n, T]`` activity: a frame is active for a class when any of its events
    overlaps the frame's analysis window."""
    n_frames = config.n_frames(n_samples)
    spans = config.frame_spans(n_frames)
    labels = np.zeros((n_classes, n_frames), dtype=np.uint8)
    for ev in events:
        ci, s0, n = _event_fields(ev)
        s1 = s0 + n
        labels[ci] |= ((spans[:, 0] < s1) & (spans[:, 1] > s0)).astype(np.uint8)
    return labels


def _event_fields(ev):
    if isinstance(ev, Event):
        return ev.class_index, ev.start_sample, ev.n_samples
    return ev["class_index"], ev["start_sample"], ev["n_samples"]


def derive_labels(scene: Scene, config: StftConfig = StftConfig(), with_strong: bool = False) -> LabelSet:
    n_classes = len(scene.references)
    frames = frame_activity(scene.events, n_classes, len(scene.mixture), config)
    strong = [stft(ref, config).magnitude() for ref in scene.references] if with_strong else None
    return LabelSet(frames, frames.max(axis=1), strong)


def compute_class_priors(frame_labels) -> ClassPriors:
    """Fraction of frames in which each class is active.

    Accepts a :class:`Manifest` (use the training split) or an iterable of
    ``[n, T]`` binary arrays.
    """
    if isinstance(frame_labels, Manifest):
        frame_labels = frame_labels.frame_labels()
    frame_labels = list(frame_labels)
    if not frame_labels:
        raise ValueError("cannot compute class priors from an empty dataset")
    active = sum(np.asarray(f, dtype=np.int64).sum(axis=1) for f in frame_labels)
    total = sum(np.asarray(f).shape[1] for f in frame_labels)
    return ClassPriors(active / total)


# --- toy event pool -------------------------------------------------------

def _envelope(n, rng, sr):
    attack = int(sr * rng.uniform(0.005, 0.03))
    env = np.ones(n)
    env[:attack] = np.linspace(0.0, 1.0, attack)
    env[-attack:] = np.linspace(1.0, 0.0, attack)
    return env


def _toy_tone(rng, n, sr):
    t = np.arange(n) / sr
    f0 = rng.uniform(180.0, 320.0)
    vibrato = 1.0 + 0.01 * np.sin(2 * np.pi * rng.uniform(3, 6) * t)
    phase = 2 * np.pi * f0 * np.cumsum(vibrato) / sr
    x = sum(np.sin(h * phase + rng.uniform(0, 2 * np.pi)) / h for h in range(1, 6))
    return x * _envelope(n, rng, sr)


def _toy_chirp(rng, n, sr):
    period = rng.uniform(0.25, 0.5)
    f_lo, f_hi = rng.uniform(700.0, 1100.0), rng.uniform(2000.0, 3000.0)
    t = np.arange(n) / sr
    frac = (t % period) / period
    freq = f_lo + (f_hi - f_lo) * frac
    x = np.sin(2 * np.pi * np.cumsum(freq) / sr)
    return x * (0.6 + 0.4 * np.sin(np.pi * frac)) * _envelope(n, rng, sr)


def _toy_noise_burst(rng, n, sr):
    center = rng.uniform(4000.0, 6000.0)
    sos = sps.butter(4, [center - 700.0, center + 700.0], btype="bandpass", fs=sr, output="sos")
    x = sps.sosfilt(sos, rng.standard_normal(n))
    t = np.arange(n) / sr
    gate = 0.5 + 0.5 * np.tanh(8.0 * np.sin(2 * np.pi * rng.uniform(2.0, 5.0) * t))
    return x * (0.2 + 0.8 * gate) * _envelope(n, rng, sr)


TOY_GENERATORS = {"tone": _toy_tone, "chirp": _toy_chirp, "noise_burst": _toy_noise_burst}


def toy_event(kind: str, rng, duration_s: float = 4.0, sample_rate: int = SAMPLE_RATE) -> AudioClip:
    n = int(round(duration_s * sample_rate))
    x = TOY_GENERATORS[kind](rng, n, sample_rate)
    return AudioClip(0.5 * x / np.abs(x).max(), sample_rate)


def toy_pool(split: str = "train", events_per_class: int = 40, seed: int = 0,
             classes=TOY_CLASSES) -> EventPool:
    """Generated event pool; different splits draw from disjoint RNG streams."""
    events = {}
    for ci, kind in enumerate(classes):
        rng = np.random.default_rng([seed, SPLITS.index(split), ci])
        events[kind] = [toy_event(kind, rng) for _ in range(events_per_class)]
    return EventPool(list(classes), events, split)


def load_pool(description: dict, split: str, base_dir=".", events_per_class: int = 40, seed: int = 0) -> EventPool:
    """Build a pool from ``{class: generator_name | {split: [wav, ...]}}``."""
    classes, events = [], {}
    for ci, (name, source) in enumerate(description.items()):
        classes.append(name)
        if isinstance(source, str):
            if source not in TOY_GENERATORS:
                raise ValueError(f"unknown event generator {source!r} for class {name!r}")
            rng = np.random.default_rng([seed, SPLITS.index(split), ci])
            events[name] = [toy_event(source, rng) for _ in range(events_per_class)]
        else:
            paths = source.get(split, [])
            events[name] = [read_wav(Path(base_dir) / p) for p in paths]
    return EventPool(classes, events, split)


# --- manifest ---------------------------------------------------------------

def rle_encode(row) -> list:
    runs = []
    for v in np.asarray(row).tolist():
        if runs and runs[-1][0] == v:
            runs[-1][1] += 1
        else:
            runs.append([v, 1])
    return runs


def rle_decode(runs) -> np.ndarray:
    return np.concatenate([np.full(n, v, dtype=np.uint8) for v, n in runs]) if runs else np.zeros(0, np.uint8)


@dataclass
class Manifest:
    records: list
    root: Path = field(default_factory=Path)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def classes(self) -> list:
        return list(self.records[0]["classes"]) if self.records else []

    def path(self, rel) -> Path:
        return self.root / rel

    def frame_labels(self, config: StftConfig | None = None):
        """Frame labels per clip, re-derived from the events when ``config`` differs."""
        out = []
        for rec in self.records:
            if config is None or StftConfig(**rec["stft"]) == config:
                out.append(np.stack([rle_decode(r) for r in rec["frame_labels"]]))
            else:
                out.append(frame_activity(rec["events"], len(rec["classes"]), rec["n_samples"], config))
        return out

    def dumps(self) -> str:
        return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in self.records)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        lines = path.read_text().splitlines()
        return cls([json.loads(line) for line in lines if line.strip()], path.parent)


def build_dataset(spec: SceneSpec, pool: EventPool, count: int, out_dir, config: StftConfig = StftConfig(),
                  write_references: bool = True, n_jobs: int = 1) -> Manifest:
    """Render ``count`` scenes for ``pool.split`` under ``out_dir`` and write ``<split>.jsonl``.

    Clip ``i`` uses the RNG stream ``(spec.rng_seed, split, i)``, so the output
    does not depend on ``n_jobs``. Files written before a failure are removed.
    """
    out_dir = Path(out_dir)
    audio_dir = out_dir / pool.split
    manifest_path = out_dir / f"{pool.split}.jsonl"
    written = []
    try:
        if count:
            audio_dir.mkdir(parents=True, exist_ok=True)
        if n_jobs == 1:
            records = [_render_clip(spec, pool, i, out_dir, config, write_references, written) for i in range(count)]
        else:
            from joblib import Parallel, delayed

            records = Parallel(n_jobs=n_jobs)(
                delayed(_render_clip)(spec, pool, i, out_dir, config, write_references, None) for i in range(count))
            for rec in records:
                written.extend([rec["mixture_path"], *(rec.get("reference_paths") or [])])
        manifest = Manifest(records, out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        manifest.save(manifest_path)
        return manifest
    except BaseException:
        for rel in written:
            try:
                os.remove(out_dir / rel)
            except OSError:
                pass
        raise


def _render_clip(spec, pool, index, out_dir, config, write_references, written):
    rng = np.random.default_rng([spec.rng_seed, SPLITS.index(pool.split), index])
    scene = sample_scene(spec, pool, rng)
    labels = derive_labels(scene, config)
    clip_id = f"{pool.split}_{index:06d}"
    mix_rel = f"{pool.split}/{clip_id}_mix.wav"
    paths = [mix_rel]
    write_wav(out_dir / mix_rel, scene.mixture)
    if written is not None:
        written.append(mix_rel)
    ref_rels = None
    if write_references:
        ref_rels = []
        for name, ref in zip(pool.classes, scene.references):
            rel = f"{pool.split}/{clip_id}_{name}.wav"
            write_wav(out_dir / rel, ref)
            if written is not None:
                written.append(rel)
            ref_rels.append(rel)
        paths += ref_rels
    return {
        "clip_id": clip_id,
        "classes": list(pool.classes),
        "mixture_path": mix_rel,
        "reference_paths": ref_rels,
        "clip_labels": labels.clip_labels.astype(int).tolist(),
        "frame_labels": [rle_encode(row) for row in labels.frame_labels],
        "n_frames": int(labels.frame_labels.shape[1]),
        "n_samples": len(scene.mixture),
        "stft": config.to_dict(),
        "seed": spec.rng_seed,
        "lambda": spec.lam,
        "scene_gain": scene.gain,
        "events": [ev.to_dict() for ev in scene.events],
    }
