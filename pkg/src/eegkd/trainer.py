"""Mini-batch training of the student with Adam.

Modes:

``supervised_kd``    soft KD term + cross-entropy (weighted sum)
``unsupervised_kd``  soft KD term only; hard labels are never read
``hard_only``        cross-entropy only; posteriors are never read
``l2_kd``            squared-error term in place of KL + cross-entropy

Randomness is keyed on ``(seed, epoch[, batch])`` instead of a running
generator, so training resumed from a checkpoint at an epoch boundary
follows exactly the same trajectory as an uninterrupted run.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import losses
from .checkpoint import read_tensors, stack_from_tensors, write_tensors
from .dataio import Corpus, EegSample
from .errors import DataError, DomainError, FormatError, ModeViolation, NumericError, ShapeError
from .numerics import DTYPE
from .recurrent import LstmStack, StackConfig, forward_batch, stack_backward
from .teacher import PosteriorTable

log = logging.getLogger(__name__)

MODES = ("supervised_kd", "unsupervised_kd", "hard_only", "l2_kd")
_KD_MODES = ("supervised_kd", "unsupervised_kd", "l2_kd")
_LABEL_MODES = ("supervised_kd", "hard_only", "l2_kd")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "supervised_kd"
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 32
    epochs: int = 30
    temperature: float = 5.0
    seed: int = 0
    weight_interpretation: str = losses.HALF_T_SQUARED

    def __post_init__(self):
        if self.mode not in MODES:
            raise DomainError(f"unknown training mode {self.mode!r}; choose from {MODES}")
        if self.batch_size < 1:
            raise DomainError("batch_size must be at least 1")
        if not self.temperature > 0:
            raise DomainError("temperature must be positive")
        if self.epochs < 0:
            raise DomainError("epochs must be non-negative")
        if self.weight_interpretation not in losses.WEIGHT_INTERPRETATIONS:
            raise DomainError(f"unknown weight interpretation {self.weight_interpretation!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> AdamState:
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, cfg: TrainConfig):
    """One bias-corrected Adam update, in place. Returns ``(params, state)``."""
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {k} has shape {g.shape}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {k}; update refused")
    state.step += 1
    bc1 = 1.0 - cfg.beta1 ** state.step
    bc2 = 1.0 - cfg.beta2 ** state.step
    for k, p in params.items():
        g = grads[k]
        m = state.m[k]
        v = state.v[k]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        p -= cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.epsilon)
    return params, state


class DataAccess:
    """Gatekeeper for labels and posteriors during training.

    Counts every read and refuses reads the mode forbids.
    """

    def __init__(self, mode: str, posteriors: PosteriorTable | None):
        self.mode = mode
        self.posteriors = posteriors
        self.label_reads = 0
        self.posterior_reads = 0

    def label(self, sample: EegSample) -> int:
        if self.mode not in _LABEL_MODES:
            raise ModeViolation(f"mode {self.mode} may not read hard labels")
        self.label_reads += 1
        return sample.class_id

    def posterior(self, image_id: int) -> np.ndarray:
        if self.mode not in _KD_MODES:
            raise ModeViolation(f"mode {self.mode} may not read teacher posteriors")
        if self.posteriors is None or image_id not in self.posteriors:
            raise DataError(f"no teacher posterior for image_id {image_id}")
        self.posterior_reads += 1
        return self.posteriors[image_id]


def sample_loss(mode: str, access: DataAccess, sample: EegSample, logits, cfg: TrainConfig) -> losses.LossReport:
    T = cfg.temperature
    if mode == "hard_only":
        return losses.cross_entropy(access.label(sample), logits)
    target = losses.TeacherTarget(access.posterior(sample.image_id))
    if mode == "unsupervised_kd":
        return losses.distillation_loss(target, logits, T)
    target.hard_label = access.label(sample)
    if mode == "supervised_kd":
        return losses.combined_loss(target, logits, T, cfg.weight_interpretation)
    return losses.l2_combined_loss(target, logits, T, cfg.weight_interpretation)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    test_accuracy: float | None
    seconds: float


@dataclass
class TrainLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    label_reads: int = 0
    posterior_reads: int = 0

    @property
    def losses(self) -> list[float]:
        return [e.train_loss for e in self.epochs]

    def fingerprint(self) -> tuple:
        """Everything except wall-clock time."""
        return tuple((e.epoch, e.train_loss, e.test_accuracy) for e in self.epochs)

    def to_dict(self) -> dict:
        return {"epochs": [asdict(e) for e in self.epochs],
                "label_reads": self.label_reads, "posterior_reads": self.posterior_reads}


def _check_inputs(corpus: Corpus, posteriors, stack: LstmStack, cfg: TrainConfig):
    if not len(corpus):
        raise DomainError("cannot train on an empty corpus")
    sc = stack.config
    if cfg.mode in _KD_MODES:
        if posteriors is None:
            raise DataError(f"mode {cfg.mode} needs teacher posteriors")
        for s in corpus.samples:
            if s.image_id not in posteriors:
                raise DataError(f"no teacher posterior for image_id {s.image_id}")
        if posteriors.num_classes != sc.num_classes:
            raise ShapeError(f"posteriors cover {posteriors.num_classes} classes, stack predicts {sc.num_classes}")
    for s in corpus.samples:
        if s.signal.shape[1] != sc.input_channels:
            raise ShapeError(f"image {s.image_id}: {s.signal.shape[1]} channels, stack expects {sc.input_channels}")


def fit(
    corpus: Corpus,
    posteriors: PosteriorTable | None,
    stack: LstmStack,
    cfg: TrainConfig,
    *,
    test: Corpus | None = None,
    adam: AdamState | None = None,
    start_epoch: int = 0,
    on_epoch=None,
) -> tuple[LstmStack, TrainLog]:
    """Train ``stack`` in place for epochs ``start_epoch .. cfg.epochs - 1``.

    Pass the ``AdamState`` from a checkpoint (and its epoch count as
    ``start_epoch``) to resume. ``on_epoch(epoch, stack, adam, record)`` is
    called after each epoch.
    """
    _check_inputs(corpus, posteriors, stack, cfg)
    if adam is None:
        adam = AdamState.zeros_like(stack.params)
    access = DataAccess(cfg.mode, posteriors)
    signals = corpus.signals()
    n = len(corpus)
    trainlog = TrainLog()
    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.perf_counter()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        total = 0.0
        for b, lo in enumerate(range(0, n, cfg.batch_size)):
            idx = order[lo:lo + cfg.batch_size]
            logits, _, trace = forward_batch(signals[idx], stack, True, seed=[cfg.seed, epoch, b])
            reports = [sample_loss(cfg.mode, access, corpus.samples[i], logits[k], cfg) for k, i in enumerate(idx)]
            value = losses.batch_reduce(reports).value
            if not np.isfinite(value):
                raise NumericError(f"loss became non-finite at epoch {epoch}, batch {b}")
            grad_logits = np.stack([r.grad_logits for r in reports]) / len(idx)
            grads = stack_backward(trace, grad_logits, stack)
            adam_step(stack.params, grads, adam, cfg)
            total += value * len(idx)
        acc = evaluate(test, stack) if test is not None and len(test) else None
        rec = EpochRecord(epoch, total / n, acc, time.perf_counter() - t0)
        trainlog.epochs.append(rec)
        log.info("epoch %d loss %.6f test_acc %s", epoch, rec.train_loss, acc)
        if on_epoch is not None:
            on_epoch(epoch, stack, adam, rec)
    trainlog.label_reads = access.label_reads
    trainlog.posterior_reads = access.posterior_reads
    return stack, trainlog


def predict_logits(corpus: Corpus, stack: LstmStack, chunk: int = 256) -> np.ndarray:
    signals = corpus.signals()
    out = [forward_batch(signals[i:i + chunk], stack, False)[0] for i in range(0, len(signals), chunk)]
    return np.concatenate(out, axis=0)


def evaluate(corpus: Corpus, stack: LstmStack) -> float:
    """Fraction of samples whose argmax logit is the true class."""
    if corpus is None or not len(corpus):
        raise DomainError("cannot evaluate on an empty corpus")
    pred = predict_logits(corpus, stack).argmax(axis=1)
    return float(np.mean(pred == corpus.labels()))


@dataclass
class Checkpoint:
    stack: LstmStack
    adam: AdamState | None
    meta: dict

    @property
    def epoch(self) -> int:
        return int(self.meta.get("epoch", 0))


def save_checkpoint(stack: LstmStack, state: AdamState | None, path, *, train_config: TrainConfig | None = None,
                    epoch: int = 0, extra: dict | None = None) -> None:
    tensors = dict(stack.params)
    if state is not None:
        for k in stack.params:
            tensors[f"adam.m.{k}"] = state.m[k]
            tensors[f"adam.v.{k}"] = state.v[k]
    meta = {
        "stack": stack.config.to_dict(),
        "adam_step": None if state is None else state.step,
        "epoch": epoch,
        "train_config": None if train_config is None else train_config.to_dict(),
        "train_config_digest": None if train_config is None else train_config.digest(),
    }
    if extra:
        meta.update(extra)
    write_tensors(path, tensors, meta)


def load_checkpoint(path) -> Checkpoint:
    tensors, meta = read_tensors(path)
    if "stack" not in meta:
        raise FormatError(f"{path}: metadata has no stack configuration")
    stack = stack_from_tensors(tensors, StackConfig.from_dict(meta["stack"]))
    adam = None
    if meta.get("adam_step") is not None:
        m, v = {}, {}
        for k, p in stack.params.items():
            try:
                m[k] = tensors[f"adam.m.{k}"].reshape(p.shape).astype(DTYPE)
                v[k] = tensors[f"adam.v.{k}"].reshape(p.shape).astype(DTYPE)
            except KeyError as e:
                raise FormatError(f"{path}: missing optimizer tensor {e}") from None
        adam = AdamState(m, v, int(meta["adam_step"]))
    return Checkpoint(stack, adam, meta)
