"""scikit-learn style wrappers around the STFT front end, the classifier and the separator.

All estimators work on in-memory arrays: waveforms ``[N, L]`` for
:class:`MagnitudeSTFT`, magnitudes ``[N, F, T]`` for the others.
"""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .dsp import AudioClip, StftConfig, stft
from .networks import ClassifierSpec, SeparatorSpec, log_features
from .objectives import LossConfig
from .training import ClipData, TrainConfig, fit_classifier, fit_separator
from .validation import check_labels, check_magnitudes, check_references, check_waveforms


def _split(n, fraction, seed):
    order = np.random.default_rng(seed).permutation(n)
    n_valid = max(1, int(round(n * fraction))) if n > 1 else 0
    return order[n_valid:], order[:n_valid] if n_valid else order


def _clip_data(X, y, idx, refs=None):
    return ClipData(X[idx], y[idx], y[idx].max(axis=2), None if refs is None else refs[idx])


class MagnitudeSTFT(TransformerMixin, BaseEstimator):
    """Waveforms ``[N, L]`` to magnitude spectrograms ``[N, F, T]``."""

    def __init__(self, window_ms: float = 32.0, hop_ms: float = 8.0, sample_rate: int = 16000):
        self.window_ms = window_ms
        self.hop_ms = hop_ms
        self.sample_rate = sample_rate

    def fit(self, X, y=None):
        check_waveforms(X)
        self.config_ = StftConfig(self.window_ms, self.hop_ms, self.sample_rate)
        return self

    def transform(self, X):
        check_is_fitted(self, "config_")
        X = check_waveforms(X)
        return np.stack([np.abs(stft(AudioClip(x, self.sample_rate), self.config_).values) for x in X]
                        ).astype(np.float32)


class SoundEventClassifier(ClassifierMixin, BaseEstimator):
    """Frame-level multi-label classifier trained on mixtures with weak labels.

    ``fit(X, y)`` takes magnitudes ``[N, F, T]`` and frame labels ``[N, n, T]``
    (or clip labels ``[N, n]`` when ``label_mode="clip"``).
    """

    def __init__(self, kind="crnn2d", input_kind="linear_magnitude", n_mels=40, conv_channels=(16, 32, 64),
                 freq_pools=(4, 4, 4), time_pools=(1, 2, 2), crnn_hidden=100, rnn_hidden=100,
                 label_mode="frame", use_class_weights=True, clip_pooling="max", lr=1e-4, batch_size=10,
                 max_epochs=50, patience=5, validation_fraction=0.1, threshold=0.5, window_ms=32.0, hop_ms=8.0,
                 random_state=0):
        self.kind = kind
        self.input_kind = input_kind
        self.n_mels = n_mels
        self.conv_channels = conv_channels
        self.freq_pools = freq_pools
        self.time_pools = time_pools
        self.crnn_hidden = crnn_hidden
        self.rnn_hidden = rnn_hidden
        self.label_mode = label_mode
        self.use_class_weights = use_class_weights
        self.clip_pooling = clip_pooling
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.threshold = threshold
        self.window_ms = window_ms
        self.hop_ms = hop_ms
        self.random_state = random_state

    def _spec(self, n_classes, n_bins):
        stft_cfg = StftConfig(self.window_ms, self.hop_ms)
        return ClassifierSpec(n_classes=n_classes, kind=self.kind, n_bins=n_bins, input_kind=self.input_kind,
                              n_mels=self.n_mels, rnn_hidden=self.rnn_hidden,
                              conv_channels=tuple(self.conv_channels),
                              conv_kernels=(3,) * len(self.conv_channels), freq_pools=tuple(self.freq_pools),
                              time_pools=tuple(self.time_pools), crnn_hidden=self.crnn_hidden,
                              stft=stft_cfg.to_dict())

    def fit(self, X, y):
        X = check_magnitudes(X)
        y = check_labels(y, X.shape[0], X.shape[2])
        spec = self._spec(y.shape[1], X.shape[1])
        loss = LossConfig(self.label_mode, use_class_weights=self.use_class_weights, clip_pooling=self.clip_pooling)
        train_cfg = TrainConfig(lr=self.lr, batch_size=self.batch_size, max_epochs=self.max_epochs,
                                patience=min(self.patience, self.max_epochs), seed=self.random_state)
        tr, va = _split(len(X), self.validation_fraction, self.random_state)
        self.network_, self.run_ = fit_classifier(_clip_data(X, y, tr), _clip_data(X, y, va), spec, train_cfg, loss)
        self.network_.eval()
        self.n_classes_ = y.shape[1]
        self.classes_ = np.arange(self.n_classes_)
        return self

    def predict_proba(self, X):
        """Frame probabilities ``[N, n, T']``."""
        check_is_fitted(self, "network_")
        X = check_magnitudes(X, self.network_.spec.n_bins)
        with torch.no_grad():
            return self.network_.probs(torch.from_numpy(X)).numpy()

    def predict(self, X):
        return (self.predict_proba(X) >= self.threshold).astype(np.int8)


class WeakLabelSeparator(TransformerMixin, BaseEstimator):
    """Mask-inference separator trained from weak labels through a classifier critic.

    ``fit(X, y)`` takes mixture magnitudes ``[N, F, T]`` and, by label mode,
    frame labels ``[N, n, T]``, clip labels ``[N, n]`` or (``strong``)
    reference magnitudes ``[N, n, F, T]``. ``classifier`` is a fitted
    :class:`SoundEventClassifier`, required by the fine-tune and fixed strategies.
    ``transform`` returns estimated source magnitudes ``[N, n, F, T]``.
    """

    def __init__(self, classifier=None, label_mode="frame", strategy="fixed_classifier", alpha=100.0,
                 use_class_weights=True, mixture_loss_variant="constrained", clip_pooling="max",
                 recurrent_layers=3, hidden_per_direction=600, input_normalization="none", lr=1e-4, batch_size=10,
                 max_epochs=50, patience=5, validation_fraction=0.1, random_state=0):
        self.classifier = classifier
        self.label_mode = label_mode
        self.strategy = strategy
        self.alpha = alpha
        self.use_class_weights = use_class_weights
        self.mixture_loss_variant = mixture_loss_variant
        self.clip_pooling = clip_pooling
        self.recurrent_layers = recurrent_layers
        self.hidden_per_direction = hidden_per_direction
        self.input_normalization = input_normalization
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def fit(self, X, y):
        X = check_magnitudes(X)
        refs = None
        if self.label_mode == "strong":
            refs = check_references(y, X)
            labels = (refs.sum(axis=2) > 0).astype(np.float32)
        else:
            labels = check_labels(y, X.shape[0], X.shape[2])
        n_classes = labels.shape[1]
        spec = SeparatorSpec(n_classes, X.shape[1], self.recurrent_layers, self.hidden_per_direction,
                             input_normalization=self.input_normalization)
        loss = LossConfig(self.label_mode, self.alpha, self.use_class_weights, self.mixture_loss_variant,
                          self.clip_pooling)
        strategy = "none" if self.label_mode == "strong" else self.strategy
        train_cfg = TrainConfig(lr=self.lr, batch_size=self.batch_size, max_epochs=self.max_epochs,
                                patience=min(self.patience, self.max_epochs), strategy=strategy,
                                seed=self.random_state)
        clf_net, clf_spec = None, None
        if self.classifier is not None and self.label_mode != "strong":
            check_is_fitted(self.classifier, "network_")
            clf_net, clf_spec = self.classifier.network_, self.classifier.network_.spec
        elif strategy == "joint":
            clf_spec = SoundEventClassifier()._spec(n_classes, X.shape[1])
        tr, va = _split(len(X), self.validation_fraction, self.random_state)
        self.model_, self.run_ = fit_separator(
            _clip_data(X, labels, tr, refs), _clip_data(X, labels, va, refs), spec, train_cfg, loss,
            None if strategy == "joint" else clf_net, clf_spec)
        self.model_.eval()
        return self

    def predict_masks(self, X):
        """Masks ``[N, n, F, T]`` in [0, 1]."""
        check_is_fitted(self, "model_")
        X = check_magnitudes(X, self.model_.separator.spec.n_bins)
        with torch.no_grad():
            return self.model_.separator(log_features(torch.from_numpy(X))).numpy()

    def transform(self, X):
        X = check_magnitudes(X)
        return self.predict_masks(X) * X[:, None]
