"""Weakly supervised time-frequency mask separation with a sound-event classifier as critic."""
from .dsp import AudioClip, Spectrogram, StftConfig, istft, mel_filterbank, read_wav, stft, write_wav
from .loudness import measure_loudness, normalize_loudness
from .scenes import (ClassPriors, EventPool, LabelSet, Manifest, SceneSpec, build_dataset, compute_class_priors,
                     derive_labels, sample_event_count, sample_scene, toy_pool)
from .networks import (ClassifierSpec, MaskSet, SeparatorSpec, apply_masks, build_classifier, build_separator,
                       classifier_forward, clip_pool, separator_forward)
from .objectives import LossConfig, compute_loss_weights, total_loss
from .training import TrainConfig, TrainRun, checkpoint_load, checkpoint_save, train_classifier, train_separator
from .evaluation import EvalReport, evaluate_classifier, evaluate_separator, f_measure, si_sdr
from .config import ConfigError, ExperimentConfig
from .estimators import MagnitudeSTFT, SoundEventClassifier, WeakLabelSeparator

__version__ = "0.1.0"

__all__ = [
    "AudioClip", "Spectrogram", "StftConfig", "istft", "mel_filterbank", "read_wav", "stft", "write_wav",
    "measure_loudness", "normalize_loudness",
    "ClassPriors", "EventPool", "LabelSet", "Manifest", "SceneSpec", "build_dataset", "compute_class_priors",
    "derive_labels", "sample_event_count", "sample_scene", "toy_pool",
    "ClassifierSpec", "MaskSet", "SeparatorSpec", "apply_masks", "build_classifier", "build_separator",
    "classifier_forward", "clip_pool", "separator_forward",
    "LossConfig", "compute_loss_weights", "total_loss",
    "TrainConfig", "TrainRun", "checkpoint_load", "checkpoint_save", "train_classifier", "train_separator",
    "EvalReport", "evaluate_classifier", "evaluate_separator", "f_measure", "si_sdr",
    "ConfigError", "ExperimentConfig",
    "MagnitudeSTFT", "SoundEventClassifier", "WeakLabelSeparator",
]
