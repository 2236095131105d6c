"""Classifier pre-training and separator training under strong or weak labels."""
from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from . import objectives as obj
from .checkpoint import load_checkpoint, save_checkpoint
from .dsp import StftConfig, read_wav, stft
from .networks import (Classifier, ClassifierSpec, Separator, SeparatorSpec, build_classifier, build_separator,
                       clip_pool, downsample_labels, log_features, spec_from_dict)
from .scenes import ClassPriors, Manifest, compute_class_priors

logger = logging.getLogger(__name__)

STRATEGIES = ("joint", "finetune_classifier", "fixed_classifier")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 10
    max_epochs: int = 50
    patience: int = 5
    strategy: str = "fixed_classifier"
    seed: int = 0
    grad_clip: float = 5.0

    def __post_init__(self):
        if self.strategy not in (*STRATEGIES, "none"):
            raise ValueError(f"unknown training strategy {self.strategy!r}")
        if not 1 <= self.patience <= self.max_epochs:
            raise ValueError("need 1 <= patience <= max_epochs")
        if self.batch_size < 1 or self.lr <= 0:
            raise ValueError("batch_size and lr must be positive")


@dataclass
class TrainRun:
    history: list = field(default_factory=list)
    initial_valid_loss: float | None = None
    best_epoch: int | None = None
    best_valid_loss: float = float("inf")
    stopped_epoch: int = 0
    wall_s: float = 0.0

    def to_dict(self):
        return {"history": self.history, "initial_valid_loss": self.initial_valid_loss,
                "best_epoch": self.best_epoch, "best_valid_loss": self.best_valid_loss,
                "stopped_epoch": self.stopped_epoch, "wall_s": self.wall_s}


class EarlyStopping:
    """Stop once ``patience`` consecutive epochs bring no strictly lower validation loss."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = float("inf")
        self.best_epoch = None
        self.epoch = 0
        self.stale = 0

    def update(self, value: float) -> bool:
        self.epoch += 1
        if value < self.best:
            self.best, self.best_epoch, self.stale = value, self.epoch, 0
            return False
        self.stale += 1
        return self.stale >= self.patience

    @property
    def improved(self) -> bool:
        return self.best_epoch == self.epoch


@dataclass
class ClipData:
    """Magnitude spectrograms and labels for a set of clips, held in memory."""

    mix_mag: np.ndarray
    frame_labels: np.ndarray
    clip_labels: np.ndarray
    ref_mag: np.ndarray | None = None

    def __post_init__(self):
        if self.frame_labels.shape[-1] != self.mix_mag.shape[-1]:
            raise ValueError("frame labels and spectrograms disagree on the number of frames")

    def __len__(self):
        return len(self.mix_mag)

    @property
    def n_classes(self):
        return self.frame_labels.shape[1]


_DATA_CACHE: dict = {}


def load_clip_data(manifest: Manifest, config: StftConfig = StftConfig(), with_refs: bool = False) -> ClipData:
    key = (id(manifest), str(manifest.root), len(manifest), config, with_refs)
    if key in _DATA_CACHE:
        return _DATA_CACHE[key]
    mixes, refs = [], []
    for rec in manifest:
        mixes.append(np.abs(stft(read_wav(manifest.path(rec["mixture_path"])), config).values).astype(np.float32))
        if with_refs:
            if not rec.get("reference_paths"):
                raise ValueError(f"clip {rec['clip_id']} has no reference sources")
            refs.append(np.stack([np.abs(stft(read_wav(manifest.path(p)), config).values)
                                  for p in rec["reference_paths"]]).astype(np.float32))
    frames = np.stack(manifest.frame_labels(config)).astype(np.float32)
    data = ClipData(np.stack(mixes), frames, frames.max(axis=2), np.stack(refs) if with_refs else None)
    _DATA_CACHE.clear()
    _DATA_CACHE[key] = data
    return data


def _batches(n, batch_size, rng=None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _tensor(a, idx):
    return torch.from_numpy(np.ascontiguousarray(a[idx]))


def _gamma(data: ClipData, priors):
    if priors is not None:
        return torch.as_tensor(getattr(priors, "gamma", priors), dtype=torch.float32)
    return torch.as_tensor(compute_class_priors(list(data.frame_labels)).gamma, dtype=torch.float32)


# --- classifier pre-training ------------------------------------------------

def classifier_mixture_loss(clf: Classifier, mix, frame_labels, loss_cfg: obj.LossConfig, gamma=None):
    probs = clf.probs(mix)
    if loss_cfg.label_mode == "frame":
        labels = downsample_labels(frame_labels, clf.spec.time_downsample_factor)
        w = obj.compute_loss_weights(gamma, labels) if loss_cfg.use_class_weights else None
        return obj.loss_class_mixture_frame(probs, labels, w)
    return obj.loss_class_mixture_clip(clip_pool(probs, loss_cfg.clip_pooling), frame_labels.amax(dim=-1))


def fit_classifier(data: ClipData, valid: ClipData, spec: ClassifierSpec, train_cfg: TrainConfig,
                   loss_cfg: obj.LossConfig, priors=None, log=None):
    """Pre-train a classifier on mixtures only. Returns ``(best classifier, TrainRun)``."""
    if loss_cfg.label_mode == "strong":
        raise ValueError("classifier pre-training uses weak labels only; strong label mode is not allowed")
    gamma = _gamma(data, priors) if loss_cfg.use_class_weights else None
    clf = build_classifier(spec, train_cfg.seed)

    def step_loss(model, idx, d):
        return classifier_mixture_loss(model, _tensor(d.mix_mag, idx), _tensor(d.frame_labels, idx), loss_cfg, gamma)

    return _optimize(clf, list(clf.parameters()), step_loss, data, valid, train_cfg, log,
                     lambda m, idx, d: {"loss_total": step_loss(m, idx, d)})


# --- separator training -----------------------------------------------------

class JointModel(torch.nn.Module):
    """Separator plus (optional) classifier acting as the training critic."""

    def __init__(self, separator: Separator, classifier: Classifier | None, frozen_classifier: bool):
        super().__init__()
        self.separator = separator
        self.classifier = classifier
        self.frozen_classifier = frozen_classifier

    def train(self, mode: bool = True):
        super().train(mode)
        if self.classifier is not None and self.frozen_classifier:
            self.classifier.eval()
        return self


def separator_losses(model: JointModel, mix, frame_labels, loss_cfg: obj.LossConfig, gamma=None, ref=None):
    """Component losses and total for one batch; returns a dict of scalar tensors."""
    masks = model.separator(log_features(mix))
    return estimate_losses(model, mix, masks * mix.unsqueeze(1), frame_labels, loss_cfg, gamma, ref)


def estimate_losses(model: JointModel, mix, est, frame_labels, loss_cfg: obj.LossConfig, gamma=None, ref=None):
    """Losses for given source estimates ``[B, n, F, T]`` (masks already applied)."""
    if loss_cfg.label_mode == "strong":
        w = obj.compute_loss_weights(gamma, frame_labels) if loss_cfg.use_class_weights else None
        comps = {"mi": obj.loss_mi(est, ref, w)}
        return {**comps, "loss_total": obj.total_loss(comps, loss_cfg)}
    clf = model.classifier
    b, n = est.shape[:2]
    if model.frozen_classifier:
        # the mixture term is constant when the classifier is frozen
        with torch.no_grad():
            p_mix = clf.probs(mix)
        p_est = clf.probs(est)
    else:
        p_all = clf.probs(torch.cat([mix.unsqueeze(1), est], dim=1))
        p_mix, p_est = p_all[:, 0], p_all[:, 1:]
    clip_labels = frame_labels.amax(dim=-1)
    if loss_cfg.label_mode == "frame":
        labels = downsample_labels(frame_labels, clf.spec.time_downsample_factor)
        w = obj.compute_loss_weights(gamma, labels) if loss_cfg.use_class_weights else None
        cls = obj.loss_class_frame(p_mix, p_est, labels, w)
    else:
        cls = obj.loss_class_clip(clip_pool(p_mix, loss_cfg.clip_pooling), clip_pool(p_est, loss_cfg.clip_pooling),
                                  clip_labels)
    mix_loss = obj.loss_mix(mix, est, frame_labels, clip_labels, loss_cfg.mixture_loss_variant, loss_cfg.label_mode)
    comps = {"class": cls, "mix": mix_loss}
    return {"loss_class": cls, "loss_mix": mix_loss, "loss_total": obj.total_loss(comps, loss_cfg)}


def fit_separator(data: ClipData, valid: ClipData, spec: SeparatorSpec, train_cfg: TrainConfig,
                  loss_cfg: obj.LossConfig, classifier: Classifier | None = None,
                  classifier_spec: ClassifierSpec | None = None, priors=None, log=None):
    """Train a separator; returns ``(JointModel with best parameters, TrainRun)``.

    ``classifier`` is the pre-trained critic for the fine-tune and fixed
    strategies; the joint strategy builds a fresh one from ``classifier_spec``.
    """
    if loss_cfg.label_mode == "strong":
        if classifier is not None:
            raise ValueError("strong-label training does not use a classifier")
        clf, frozen = None, False
    elif train_cfg.strategy == "joint":
        if classifier_spec is None:
            raise ValueError("joint training needs a classifier spec")
        clf, frozen = build_classifier(classifier_spec, train_cfg.seed + 1), False
    elif train_cfg.strategy == "none":
        raise ValueError("weak-label training needs a classifier strategy")
    else:
        if classifier is None:
            raise ValueError(f"classifier checkpoint required for strategy {train_cfg.strategy!r}")
        clf = copy.deepcopy(classifier)
        frozen = train_cfg.strategy == "fixed_classifier"
    if loss_cfg.label_mode == "strong" and data.ref_mag is None:
        raise ValueError("strong-label training needs reference magnitudes")
    model = JointModel(build_separator(spec, train_cfg.seed), clf, frozen)
    if frozen:
        for p in clf.parameters():
            p.requires_grad_(False)
    params = [p for p in model.parameters() if p.requires_grad]
    gamma = _gamma(data, priors) if loss_cfg.use_class_weights else None

    def losses(m, idx, d):
        ref = _tensor(d.ref_mag, idx) if loss_cfg.label_mode == "strong" else None
        return separator_losses(m, _tensor(d.mix_mag, idx), _tensor(d.frame_labels, idx), loss_cfg, gamma, ref)

    return _optimize(model, params, lambda m, idx, d: losses(m, idx, d)["loss_total"], data, valid,
                     train_cfg, log, losses)


# --- shared loop ------------------------------------------------------------

def _validation_loss(model, loss_fn, data, batch_size):
    model.eval()
    total = 0.0
    with torch.no_grad():
        for idx in _batches(len(data), batch_size):
            total += float(loss_fn(model, idx, data)) * len(idx)
    return total / len(data)


def _optimize(model, params, loss_fn, data, valid, cfg: TrainConfig, log, components_fn):
    start = time.perf_counter()
    opt = torch.optim.Adam(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    run = TrainRun()
    run.initial_valid_loss = _validation_loss(model, loss_fn, valid, cfg.batch_size)
    _emit(log, {"epoch": 0, "step": 0, "valid_loss": run.initial_valid_loss})
    stopper = EarlyStopping(cfg.patience)
    best_state = copy.deepcopy(model.state_dict())
    step = 0
    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        rng = np.random.default_rng([cfg.seed, epoch])
        epoch_loss = 0.0
        for idx in _batches(len(data), cfg.batch_size, rng):
            t0 = time.perf_counter()
            comps = components_fn(model, idx, data)
            loss = comps["loss_total"]
            opt.zero_grad()
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()
            step += 1
            epoch_loss += float(loss.detach()) * len(idx)
            record = {"epoch": epoch, "step": step, "lr": cfg.lr, "wall_ms": 1000 * (time.perf_counter() - t0)}
            record.update({k: float(v.detach()) for k, v in comps.items()})
            record.setdefault("loss_class", None)
            record.setdefault("loss_mix", None)
            _emit(log, record)
        valid_loss = _validation_loss(model, loss_fn, valid, cfg.batch_size)
        stop = stopper.update(valid_loss)
        run.history.append({"epoch": epoch, "train_loss": epoch_loss / len(data), "valid_loss": valid_loss})
        logger.info("epoch %d train %.4f valid %.4f", epoch, epoch_loss / len(data), valid_loss)
        _emit(log, {"epoch": epoch, "step": step, "train_loss": epoch_loss / len(data), "valid_loss": valid_loss})
        if stopper.improved:
            best_state = copy.deepcopy(model.state_dict())
        run.stopped_epoch = epoch
        if stop:
            break
    model.load_state_dict(best_state)
    model.eval()
    run.best_epoch, run.best_valid_loss = stopper.best_epoch, stopper.best
    run.wall_s = time.perf_counter() - start
    return model, run


def _emit(log, record):
    if log is None:
        return
    if callable(log):
        log(record)
    else:
        log.write(json.dumps(record, sort_keys=True) + "\n")
        log.flush()


# --- manifest-level entry points ---------------------------------------------

def train_classifier(manifest: Manifest, valid_manifest: Manifest, spec: ClassifierSpec, train_cfg: TrainConfig,
                     loss_cfg: obj.LossConfig, stft_config: StftConfig = StftConfig(), log=None):
    if loss_cfg.label_mode == "strong":
        raise ValueError("classifier pre-training uses weak labels only; strong label mode is not allowed")
    train = load_clip_data(manifest, stft_config)
    priors = compute_class_priors(list(train.frame_labels))
    valid = load_clip_data(valid_manifest, stft_config)
    return fit_classifier(train, valid, spec, train_cfg, loss_cfg, priors, log)


def train_separator(manifest: Manifest, valid_manifest: Manifest, spec: SeparatorSpec, train_cfg: TrainConfig,
                    loss_cfg: obj.LossConfig, classifier=None, classifier_spec=None,
                    stft_config: StftConfig = StftConfig(), log=None):
    strong = loss_cfg.label_mode == "strong"
    train = load_clip_data(manifest, stft_config, with_refs=strong)
    priors = compute_class_priors(list(train.frame_labels))
    valid = load_clip_data(valid_manifest, stft_config, with_refs=strong)
    return fit_separator(train, valid, spec, train_cfg, loss_cfg, classifier, classifier_spec, priors, log)


def state_params(module: torch.nn.Module) -> dict:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def checkpoint_save(module, path, run_state: dict | None = None) -> None:
    save_checkpoint(path, state_params(module), module.spec.to_dict(), run_state)


def checkpoint_load(path, expected_spec=None):
    """Rebuild a network from a checkpoint; ``expected_spec`` guards against mismatches."""
    expected = expected_spec.to_dict() if hasattr(expected_spec, "to_dict") else expected_spec
    params, spec_dict, run_state = load_checkpoint(path, expected)
    spec = spec_from_dict(spec_dict)
    net = build_separator(spec) if isinstance(spec, SeparatorSpec) else build_classifier(spec)
    net.load_state_dict({k: torch.from_numpy(v) for k, v in params.items()})
    net.eval()
    return net, run_state
