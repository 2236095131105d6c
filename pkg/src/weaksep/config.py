"""Experiment configuration: one YAML file with a section per component."""
from __future__ import annotations

import copy
import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .dsp import StftConfig
from .networks import ClassifierSpec, SeparatorSpec
from .objectives import LossConfig
from .scenes import SPLITS, TOY_CLASSES, SceneSpec
from .training import STRATEGIES, TrainConfig


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "seed": 0,
    "dataset": {
        "lambda": 5.0,
        "clip_duration_s": 4.0,
        "event_duration_range_s": [0.5, 4.0],
        "level_range_lufs": [-30.0, -25.0],
        "pool": "toy",
        "events_per_class": 40,
        "counts": {"train": 600, "valid": 100, "test": 100},
        "data_dir": None,
        "write_references": True,
    },
    "stft": {"window_ms": 32.0, "hop_ms": 8.0},
    "classifier": {"kind": "crnn2d", "input_kind": "linear_magnitude", "n_mels": 40, "rnn_layers": 2,
                   "rnn_hidden": 100, "conv_channels": [16, 32, 64], "conv_kernels": [3, 3, 3],
                   "freq_pools": [4, 4, 4], "time_pools": [1, 2, 2], "crnn_hidden": 100},
    "separator": {"recurrent_layers": 3, "hidden_per_direction": 600, "bidirectional": True,
                  "input_normalization": "none"},
    "loss": {"label_mode": "frame", "alpha": 100.0, "use_class_weights": True,
             "mixture_loss_variant": "constrained", "clip_pooling": "max"},
    "train": {"lr": 1e-4, "beta1": 0.9, "beta2": 0.999, "batch_size": 10, "max_epochs": 50, "patience": 5,
              "strategy": "fixed_classifier", "grad_clip": 5.0},
    "classifier_train": {},
    "eval": {"threshold": 0.5, "out_dir": "eval"},
}


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(out.get(key), dict) and key != "counts":
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads exponent floats without a dot, such as ``3e-4``."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^[-+]?(?:[0-9][0-9_]*\.[0-9_]*(?:[eE][-+]?[0-9]+)?|[0-9][0-9_]*[eE][-+]?[0-9]+
        |\.[0-9_]+(?:[eE][-+]?[0-9]+)?|[-+]?\.(?:inf|Inf|INF)|\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."))


def load_yaml(text: str):
    return yaml.load(text, Loader=_Loader)


def set_override(raw: dict, assignment: str) -> dict:
    """Apply ``section.key=value`` (value parsed as YAML) to a raw config dict."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form section.key=value")
    path, value = assignment.split("=", 1)
    keys = path.strip().split(".")
    node = raw
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {assignment!r} descends into a non-section")
    node[keys[-1]] = load_yaml(value)
    return raw


@dataclass
class ExperimentConfig:
    raw: dict
    base_dir: Path = field(default_factory=Path)

    @classmethod
    def from_dict(cls, raw: dict | None = None, base_dir=".", overrides=()) -> "ExperimentConfig":
        merged = _merge(DEFAULTS, raw or {})
        for assignment in overrides:
            set_override(merged, assignment)
        cfg = cls(merged, Path(base_dir))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path=None, overrides=()) -> "ExperimentConfig":
        if path is None:
            return cls.from_dict({}, ".", overrides)
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file {path} not found")
        try:
            raw = load_yaml(path.read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(raw, path.parent, overrides)

    def with_overrides(self, overrides) -> "ExperimentConfig":
        raw = copy.deepcopy(self.raw)
        for assignment in overrides:
            set_override(raw, assignment)
        cfg = ExperimentConfig(raw, self.base_dir)
        cfg.validate()
        return cfg

    def dump(self) -> str:
        return yaml.safe_dump(self.raw, sort_keys=True)

    # --- typed views ----------------------------------------------------

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def stft(self) -> StftConfig:
        return StftConfig(**self.raw["stft"])

    @property
    def classes(self) -> list:
        pool = self.raw["dataset"]["pool"]
        if pool == "toy":
            return list(TOY_CLASSES)
        return list(self.pool_description())

    def pool_description(self) -> dict:
        pool = self.raw["dataset"]["pool"]
        if pool == "toy":
            return {name: name for name in TOY_CLASSES}
        if isinstance(pool, dict):
            return pool
        path = self.base_dir / pool
        try:
            return load_yaml(path.read_text())["classes"]
        except (OSError, KeyError, TypeError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read pool description {path}: {exc}") from exc

    @property
    def scene_spec(self) -> SceneSpec:
        d = self.raw["dataset"]
        return SceneSpec(lam=float(d["lambda"]), clip_duration_s=float(d["clip_duration_s"]),
                         event_duration_range_s=tuple(d["event_duration_range_s"]),
                         level_range_lufs=tuple(d["level_range_lufs"]), rng_seed=self.seed,
                         sample_rate=self.stft.sample_rate)

    @property
    def classifier_spec(self) -> ClassifierSpec:
        return ClassifierSpec(n_classes=len(self.classes), n_bins=self.stft.n_bins, stft=self.stft.to_dict(),
                              **self.raw["classifier"])

    @property
    def separator_spec(self) -> SeparatorSpec:
        return SeparatorSpec(n_classes=len(self.classes), n_bins=self.stft.n_bins, **self.raw["separator"])

    @property
    def loss(self) -> LossConfig:
        return LossConfig(**self.raw["loss"])

    @property
    def train(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, **self.raw["train"])

    @property
    def classifier_train(self) -> TrainConfig:
        d = {**self.raw["train"], "strategy": "fixed_classifier", **self.raw["classifier_train"]}
        return TrainConfig(seed=self.seed, **d)

    @property
    def classifier_loss(self) -> LossConfig:
        """Loss settings for classifier pre-training (never strong, never vanilla)."""
        return LossConfig(**{**self.raw["loss"], "mixture_loss_variant": "constrained"})

    def data_dir(self, out_dir) -> Path:
        d = self.raw["dataset"]["data_dir"]
        return self.base_dir / d if d else Path(out_dir) / "data"

    def section_hash(self, *sections) -> str:
        payload = json.dumps({s: self.raw.get(s) for s in sections}, sort_keys=True, default=str)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    # --- validation -----------------------------------------------------

    def validate(self) -> None:
        known = set(DEFAULTS)
        unknown = set(self.raw) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        for section, defaults in DEFAULTS.items():
            if isinstance(defaults, dict) and defaults and section != "classifier_train":
                extra = set(self.raw[section]) - set(defaults)
                if extra:
                    raise ConfigError(f"unknown keys in [{section}]: {sorted(extra)}")
        extra = set(self.raw["classifier_train"]) - set(DEFAULTS["train"])
        if extra:
            raise ConfigError(f"unknown keys in [classifier_train]: {sorted(extra)}")
        counts = self.raw["dataset"]["counts"]
        if set(counts) - set(SPLITS) or any(int(v) < 0 for v in counts.values()):
            raise ConfigError(f"dataset.counts must map {SPLITS} to nonnegative integers")
        try:
            self.stft, self.scene_spec, self.classifier_spec, self.separator_spec
            loss = self.loss
            train = self.train
            self.classifier_train
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if loss.label_mode == "strong" and train.strategy != "none":
            raise ConfigError("strong labels train the separator alone; set train.strategy to 'none'")
        if loss.label_mode != "strong" and train.strategy not in STRATEGIES:
            raise ConfigError(f"weak labels need a training strategy among {STRATEGIES}")
        if loss.label_mode == "strong" and loss.mixture_loss_variant == "vanilla":
            raise ConfigError("the vanilla mixture loss does not apply to strong labels")
        if self.raw["classifier"]["input_kind"] == "mel_magnitude" and not 1 <= self.raw["classifier"]["n_mels"] <= self.stft.n_bins:
            raise ConfigError("classifier.n_mels must lie between 1 and the number of STFT bins")
        if self.raw["classifier"]["input_kind"] == "log_magnitude":
            import warnings

            warnings.warn("log-magnitude classifier input is known to make separator training unstable")
