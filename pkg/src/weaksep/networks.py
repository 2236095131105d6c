"""Mask-inference separator, frame-level sound event classifiers, and pooling helpers."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .dsp import Spectrogram, StftConfig, mel_filterbank

LOG_FLOOR = 1e-6


def _plain(d: dict) -> dict:
    """JSON-normalised copy (tuples become lists) so specs compare equal after a round trip."""
    return json.loads(json.dumps(d))


@dataclass(frozen=True)
class SeparatorSpec:
    n_classes: int
    n_bins: int = 257
    recurrent_layers: int = 3
    hidden_per_direction: int = 600
    bidirectional: bool = True
    input_normalization: str = "none"

    def __post_init__(self):
        if self.input_normalization not in ("none", "batchnorm"):
            raise ValueError(f"unknown input normalization {self.input_normalization!r}")
        if self.n_classes < 1 or self.n_bins < 1:
            raise ValueError("separator needs at least one class and one bin")

    def to_dict(self):
        return _plain({"type": "separator", **asdict(self)})


@dataclass(frozen=True)
class ClassifierSpec:
    n_classes: int
    kind: str = "crnn2d"
    n_bins: int = 257
    input_kind: str = "linear_magnitude"
    n_mels: int = 40
    rnn_layers: int = 2
    rnn_hidden: int = 100
    conv_channels: tuple = (16, 32, 64)
    conv_kernels: tuple = (3, 3, 3)
    freq_pools: tuple = (4, 4, 4)
    time_pools: tuple = (1, 2, 2)
    crnn_hidden: int = 100
    stft: dict = field(default_factory=lambda: StftConfig().to_dict())

    KINDS = ("rnn", "crnn2d")
    INPUT_KINDS = ("linear_magnitude", "mel_magnitude", "log_magnitude")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown classifier kind {self.kind!r}")
        if self.input_kind not in self.INPUT_KINDS:
            raise ValueError(f"unknown classifier input kind {self.input_kind!r}")
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))
        object.__setattr__(self, "conv_kernels", tuple(self.conv_kernels))
        object.__setattr__(self, "freq_pools", tuple(self.freq_pools))
        object.__setattr__(self, "time_pools", tuple(self.time_pools))
        if self.kind == "crnn2d" and not (len(self.conv_channels) == len(self.conv_kernels)
                                          == len(self.freq_pools) == len(self.time_pools)):
            raise ValueError("conv_channels, conv_kernels, freq_pools and time_pools must align")

    @property
    def feature_bins(self) -> int:
        return self.n_mels if self.input_kind == "mel_magnitude" else self.n_bins

    @property
    def time_downsample_factor(self) -> int:
        return math.prod(self.time_pools) if self.kind == "crnn2d" else 1

    def to_dict(self):
        return _plain({"type": "classifier", **asdict(self)})


@dataclass
class MaskSet:
    masks: np.ndarray

    def __post_init__(self):
        if self.masks.ndim != 3:
            raise ValueError("MaskSet expects an [n, F, T] array")


@dataclass
class ClassifierOutput:
    frame_probs: np.ndarray
    clip_probs: np.ndarray | None = None


def log_features(mag: torch.Tensor) -> torch.Tensor:
    return torch.log(mag + LOG_FLOOR)


def _seeded(seed, build):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return build()


class Separator(nn.Module):
    """BLSTM over frames mapping log-magnitude ``[B, F, T]`` to masks ``[B, n, F, T]``."""

    def __init__(self, spec: SeparatorSpec):
        super().__init__()
        self.spec = spec
        self.norm = nn.BatchNorm1d(spec.n_bins) if spec.input_normalization == "batchnorm" else None
        self.rnn = nn.LSTM(spec.n_bins, spec.hidden_per_direction, spec.recurrent_layers,
                           batch_first=True, bidirectional=spec.bidirectional)
        width = spec.hidden_per_direction * (2 if spec.bidirectional else 1)
        self.dense = nn.Linear(width, spec.n_classes * spec.n_bins)

    def forward(self, log_mag):
        if log_mag.ndim != 3 or log_mag.shape[1] != self.spec.n_bins:
            raise ValueError(f"separator expects [B, {self.spec.n_bins}, T], got {tuple(log_mag.shape)}")
        x = self.norm(log_mag) if self.norm is not None else log_mag
        h, _ = self.rnn(x.transpose(1, 2))
        b, t = h.shape[:2]
        masks = torch.sigmoid(self.dense(h)).view(b, t, self.spec.n_classes, self.spec.n_bins)
        return masks.permute(0, 2, 3, 1)


class Classifier(nn.Module):
    """Frame-level multi-label classifier producing ``[B, n, T']`` probabilities."""

    def __init__(self, spec: ClassifierSpec):
        super().__init__()
        self.spec = spec
        if spec.input_kind == "mel_magnitude":
            fb = mel_filterbank(spec.n_mels, StftConfig(**spec.stft))
            if fb.weights.shape[1] != spec.n_bins:
                raise ValueError("mel filterbank does not match the classifier's bin count")
            self.register_buffer("mel", torch.as_tensor(fb.weights, dtype=torch.float32), persistent=False)
        else:
            self.mel = None
        if spec.kind == "rnn":
            self.conv = None
            self.rnn = nn.LSTM(spec.feature_bins, spec.rnn_hidden, spec.rnn_layers,
                               batch_first=True, bidirectional=True)
            self.dense = nn.Linear(2 * spec.rnn_hidden, spec.n_classes)
        else:
            layers, in_ch, freq = [], 1, spec.feature_bins
            for ch, k, fp, tp in zip(spec.conv_channels, spec.conv_kernels, spec.freq_pools, spec.time_pools):
                layers += [nn.Conv2d(in_ch, ch, k, padding=k // 2), nn.BatchNorm2d(ch), nn.ReLU(),
                           nn.MaxPool2d((fp, tp), ceil_mode=True)]
                in_ch, freq = ch, math.ceil(freq / fp)
            self.conv = nn.Sequential(*layers)
            self.rnn = nn.LSTM(in_ch * freq, spec.crnn_hidden, 1, batch_first=True, bidirectional=True)
            self.dense = nn.Linear(2 * spec.crnn_hidden, spec.n_classes)

    def features(self, mag):
        """Map linear magnitudes ``[..., F, T]`` to this classifier's input representation."""
        if self.spec.input_kind == "mel_magnitude":
            return torch.einsum("mf,...ft->...mt", self.mel.to(mag.dtype), mag)
        if self.spec.input_kind == "log_magnitude":
            return log_features(mag)
        return mag

    def forward(self, feats):
        if feats.ndim != 3 or feats.shape[1] != self.spec.feature_bins:
            raise ValueError(f"classifier expects [B, {self.spec.feature_bins}, T], got {tuple(feats.shape)}")
        if self.conv is None:
            h, _ = self.rnn(feats.transpose(1, 2))
        else:
            c = self.conv(feats.unsqueeze(1))
            b, ch, f, t = c.shape
            h, _ = self.rnn(c.permute(0, 3, 1, 2).reshape(b, t, ch * f))
        return torch.sigmoid(self.dense(h)).transpose(1, 2)

    def probs(self, mag):
        """Frame probabilities for linear-magnitude inputs of shape ``[..., F, T]``."""
        lead = mag.shape[:-2]
        out = self(self.features(mag.reshape(-1, *mag.shape[-2:])))
        return out.reshape(*lead, *out.shape[1:])


def build_separator(spec: SeparatorSpec, seed: int = 0) -> Separator:
    return _seeded(seed, lambda: Separator(spec))


def build_classifier(spec: ClassifierSpec, seed: int = 0) -> Classifier:
    return _seeded(seed, lambda: Classifier(spec))


def build_network(spec, seed: int = 0):
    if isinstance(spec, SeparatorSpec):
        return build_separator(spec, seed)
    return build_classifier(spec, seed)


def spec_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("type")
    if kind == "separator":
        return SeparatorSpec(**d)
    if kind == "classifier":
        return ClassifierSpec(**d)
    raise ValueError(f"unknown network type {kind!r}")


def _load_params(module: nn.Module, params):
    if params is None:
        return module
    state = {k: torch.as_tensor(np.asarray(v)) for k, v in params.items()}
    expected = module.state_dict()
    missing = set(expected) - set(state)
    bad = [k for k in expected if k in state and tuple(state[k].shape) != tuple(expected[k].shape)]
    if missing or bad:
        raise ValueError(f"parameters do not match the network spec (missing={sorted(missing)}, shape mismatch={bad})")
    module.load_state_dict(state)
    return module


def separator_forward(features: Spectrogram, spec: SeparatorSpec, params=None, seed: int = 0) -> MaskSet:
    if features.kind != "log_magnitude":
        raise ValueError("separator_forward expects log-magnitude features")
    net = _load_params(build_separator(spec, seed), params).eval()
    with torch.no_grad():
        x = torch.as_tensor(np.asarray(features.values), dtype=torch.float32)[None]
        return MaskSet(net(x)[0].numpy())


def apply_masks(mix_mag, masks) -> list:
    """Estimated magnitudes ``M_i * X`` for every mask."""
    x = mix_mag.values if isinstance(mix_mag, Spectrogram) else np.asarray(mix_mag)
    m = masks.masks if isinstance(masks, MaskSet) else np.asarray(masks)
    if m.shape[1:] != x.shape:
        raise ValueError(f"mask shape {m.shape[1:]} does not match mixture shape {x.shape}")
    if isinstance(mix_mag, Spectrogram):
        return [Spectrogram(mi * x, mix_mag.config, "magnitude", mix_mag.n_samples) for mi in m]
    return [mi * x for mi in m]


_KIND_FOR_INPUT = {"linear_magnitude": "magnitude", "mel_magnitude": "mel_magnitude", "log_magnitude": "log_magnitude"}


def classifier_forward(features: Spectrogram, spec: ClassifierSpec, params=None, seed: int = 0,
                       pool: str | None = None) -> ClassifierOutput:
    if features.kind != _KIND_FOR_INPUT[spec.input_kind]:
        raise ValueError(f"classifier expects {_KIND_FOR_INPUT[spec.input_kind]} features, got {features.kind}")
    net = _load_params(build_classifier(spec, seed), params).eval()
    with torch.no_grad():
        x = torch.as_tensor(np.asarray(features.values), dtype=torch.float32)[None]
        frame = net(x)[0].numpy()
    return ClassifierOutput(frame, clip_pool(frame, pool) if pool else None)


def clip_pool(frame_probs, mode: str = "max"):
    """Pool frame probabilities over the last (time) axis."""
    if frame_probs.shape[-1] < 1:
        raise ValueError("cannot pool an empty time axis")
    is_torch = isinstance(frame_probs, torch.Tensor)
    if mode == "max":
        return frame_probs.amax(dim=-1) if is_torch else np.max(frame_probs, axis=-1)
    if mode == "average":
        return frame_probs.mean(dim=-1) if is_torch else np.mean(frame_probs, axis=-1)
    raise ValueError(f"unknown pooling mode {mode!r}")


def downsample_labels(frame_labels, factor: int):
    """Block-wise max over groups of ``factor`` frames along the last axis; the last block may be short."""
    if factor < 1:
        raise ValueError("downsampling factor must be >= 1")
    if factor == 1:
        return frame_labels
    if isinstance(frame_labels, torch.Tensor):
        t = frame_labels.shape[-1]
        pad = -t % factor
        padded = nn.functional.pad(frame_labels.float(), (0, pad))
        return padded.reshape(*padded.shape[:-1], -1, factor).amax(-1).to(frame_labels.dtype)
    labels = np.asarray(frame_labels)
    t = labels.shape[-1]
    starts = np.arange(0, t, factor)
    return np.maximum.reduceat(labels, starts, axis=-1)
