"""Strong-label and weak-label training objectives.

Tensors are batch-first: mixture magnitudes ``[B, F, T]``, source estimates
``[B, n, F, T]``, frame labels and weights ``[B, n, T]``, clip labels
``[B, n]``. Classifier outputs on estimates are indexed
``[B, source, class, T]``. Unbatched inputs are accepted and treated as a
batch of one. Every loss is the plain sum over its terms divided by the batch
size, never by ``F`` or ``T``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

PROB_EPS = 1e-7
LABEL_MODES = ("strong", "frame", "clip")


@dataclass(frozen=True)
class LossConfig:
    label_mode: str = "frame"
    alpha: float = 100.0
    use_class_weights: bool = True
    mixture_loss_variant: str = "constrained"
    clip_pooling: str = "max"

    def __post_init__(self):
        if self.label_mode not in LABEL_MODES:
            raise ValueError(f"unknown label mode {self.label_mode!r}")
        if not (np.isfinite(self.alpha) and self.alpha >= 0):
            raise ValueError("alpha must be finite and >= 0")
        if self.mixture_loss_variant not in ("vanilla", "constrained"):
            raise ValueError(f"unknown mixture loss variant {self.mixture_loss_variant!r}")
        if self.clip_pooling not in ("max", "average"):
            raise ValueError(f"unknown clip pooling {self.clip_pooling!r}")
        if self.label_mode == "clip" and self.use_class_weights:
            raise ValueError("class weights are only defined for strong and frame labels")


def _t(x, like=None):
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if isinstance(like, torch.Tensor) else torch.float64
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def bce(label, prob):
    """Binary cross-entropy with the probability clamped to ``[1e-7, 1 - 1e-7]``."""
    prob = _t(prob)
    label = _t(label, prob)
    p = prob.clamp(PROB_EPS, 1.0 - PROB_EPS)
    return -label * torch.log(p) - (1.0 - label) * torch.log1p(-p)


def compute_loss_weights(gamma, frame_labels):
    """Per-class, per-frame weights: ``1/gamma`` where active, ``1/(1-gamma)`` elsewhere."""
    gamma = _t(getattr(gamma, "gamma", gamma))
    labels = _t(frame_labels, gamma)
    if torch.any((gamma <= 0) | (gamma >= 1)):
        raise ValueError(f"degenerate prior: every class prior must lie in (0, 1), got {gamma.tolist()}")
    g = gamma.reshape(-1, 1)
    return torch.where(labels > 0, 1.0 / g, 1.0 / (1.0 - g))


def _batch(x, rank):
    return (x.unsqueeze(0), 1) if x.ndim == rank - 1 else (x, x.shape[0])


def loss_mi(est, ref, weights=None):
    est, ref = _t(est), _t(ref)
    if est.shape != ref.shape:
        raise ValueError(f"estimate shape {tuple(est.shape)} != reference shape {tuple(ref.shape)}")
    est, b = _batch(est, 4)
    err = (est - ref.reshape(est.shape)).abs()
    if weights is not None:
        w = _t(weights, est).reshape(est.shape[0], est.shape[1], 1, est.shape[3])
        err = err * w
    return err.sum() / b


def loss_mix(mix, est, frame_labels=None, clip_labels=None, variant="constrained", label_mode="frame"):
    mix, est = _t(mix), _t(est)
    mix, b = _batch(mix, 3)
    est = est.reshape(b, -1, *mix.shape[1:])
    if variant == "vanilla":
        return (mix - est.sum(dim=1)).abs().sum() / b
    if label_mode == "frame":
        if frame_labels is None:
            raise ValueError("the frame-level mixture loss needs frame labels")
        active = _t(frame_labels, est).reshape(b, est.shape[1], 1, -1)
        # frames where no source is active are left out entirely
        keep = (active.sum(dim=1) > 0).to(est.dtype)
    elif label_mode == "clip":
        if clip_labels is None:
            raise ValueError("the clip-level mixture loss needs clip labels")
        active = _t(clip_labels, est).reshape(b, est.shape[1], 1, 1)
        keep = torch.ones(1, dtype=est.dtype)
    else:
        raise ValueError(f"constrained mixture loss needs frame or clip labels, not {label_mode!r}")
    residual = (mix - (active * est).sum(dim=1)).abs()
    leakage = ((1.0 - active) * est.abs()).sum(dim=1)
    return ((residual + leakage) * keep).sum() / b


def _estimate_targets(labels):
    """Targets ``[B, source, class, ...]``: the source's own label on the diagonal, zero elsewhere."""
    n = labels.shape[1]
    eye = torch.eye(n, dtype=labels.dtype).reshape(1, n, n, *([1] * (labels.ndim - 2)))
    return eye * labels.unsqueeze(1)


def loss_class_frame(probs_mix, probs_est, frame_labels, weights=None):
    probs_mix = _t(probs_mix)
    probs_mix, b = _batch(probs_mix, 3)
    probs_est = _t(probs_est, probs_mix).reshape(b, probs_mix.shape[1], *probs_mix.shape[1:])
    labels = _t(frame_labels, probs_mix).reshape(probs_mix.shape)
    if probs_est.shape[-1] != labels.shape[-1]:
        raise ValueError(f"probabilities have {probs_est.shape[-1]} frames, labels have {labels.shape[-1]}")
    w = torch.ones_like(labels) if weights is None else _t(weights, probs_mix).reshape(labels.shape)
    mix_term = (w * bce(labels, probs_mix)).sum()
    est_term = (w.unsqueeze(1) * bce(_estimate_targets(labels), probs_est)).sum()
    return (mix_term + est_term) / b


def loss_class_mixture_frame(probs_mix, frame_labels, weights=None):
    """Classification loss on the mixture alone, used for classifier pre-training."""
    probs_mix = _t(probs_mix)
    probs_mix, b = _batch(probs_mix, 3)
    labels = _t(frame_labels, probs_mix).reshape(probs_mix.shape)
    w = 1.0 if weights is None else _t(weights, probs_mix).reshape(labels.shape)
    return (w * bce(labels, probs_mix)).sum() / b


def loss_class_clip(clip_probs_mix, clip_probs_est, clip_labels):
    p_mix = _t(clip_probs_mix)
    p_mix, b = _batch(p_mix, 2)
    p_est = _t(clip_probs_est, p_mix).reshape(b, p_mix.shape[1], p_mix.shape[1])
    labels = _t(clip_labels, p_mix).reshape(p_mix.shape)
    return (bce(labels, p_mix).sum() + bce(_estimate_targets(labels), p_est).sum()) / b


def loss_class_mixture_clip(clip_probs_mix, clip_labels):
    p_mix = _t(clip_probs_mix)
    p_mix, b = _batch(p_mix, 2)
    return bce(_t(clip_labels, p_mix).reshape(p_mix.shape), p_mix).sum() / b


REQUIRED_COMPONENTS = {"strong": {"mi"}, "frame": {"class", "mix"}, "clip": {"class", "mix"}}


def total_loss(components: dict, config: LossConfig):
    """Combine component losses: ``mi`` for strong labels, ``class + alpha * mix`` otherwise."""
    required = REQUIRED_COMPONENTS[config.label_mode]
    if set(components) != required:
        raise ValueError(f"{config.label_mode} mode needs components {sorted(required)}, got {sorted(components)}")
    if config.label_mode == "strong":
        return components["mi"]
    return components["class"] + config.alpha * components["mix"]
