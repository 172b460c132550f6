"""Unseen-category pipeline: student features, kNN / linear SVM, excerpt voting."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from .dataio import Corpus, apply_split, grouped_split, window_excerpts
from .errors import DomainError, ShapeError
from .numerics import DTYPE, softmax_with_temperature
from .recurrent import LstmStack, StackConfig, forward_batch, init_stack
from .teacher import PosteriorTable
from .trainer import TrainConfig, fit

SUMMED_PROBABILITY = "summed_probability"
LOWEST_CLASS_ID = "lowest_class_id"


@dataclass
class FeatureSet:
    vectors: np.ndarray        # (N, dim)
    labels: np.ndarray         # (N,)
    image_ids: np.ndarray
    subject_ids: np.ndarray
    parents: np.ndarray        # index of the source sample in the corpus

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.vectors.shape[0]

    def take(self, mask) -> FeatureSet:
        return FeatureSet(self.vectors[mask], self.labels[mask], self.image_ids[mask],
                          self.subject_ids[mask], self.parents[mask])


def _features_one(signal, stack: LstmStack) -> np.ndarray:
    # one sequence per pass: results never depend on what else is in a batch
    return forward_batch(signal[None], stack, False)[1][0]


def extract_features(corpus: Corpus, stack: LstmStack, window: tuple[int, int] | None = None) -> FeatureSet:
    """Final-layer features per sample, or per excerpt when ``window=(width, stride)``."""
    rows, labels, images, subjects, parents = [], [], [], [], []
    for n, s in enumerate(corpus.samples):
        if s.signal.shape[1] != stack.config.input_channels:
            raise ShapeError(f"image {s.image_id}: {s.signal.shape[1]} channels, stack expects {stack.config.input_channels}")
        pieces = [s.signal] if window is None else window_excerpts(s.signal, *window)
        for piece in pieces:
            rows.append(_features_one(piece, stack))
            labels.append(s.class_id)
            images.append(s.image_id)
            subjects.append(s.subject_id)
            parents.append(n)
    dim = stack.config.feature_dim
    vectors = np.array(rows, dtype=DTYPE).reshape(len(rows), dim)
    return FeatureSet(vectors, np.array(labels, dtype=int), np.array(images, dtype=int),
                      np.array(subjects, dtype=int), np.array(parents, dtype=int))


def write_features(fs: FeatureSet, path) -> None:
    """One line per vector: image_id, subject_id, class_id, then the values (tab-separated)."""
    with open(path, "w", encoding="utf-8") as fh:
        for v, y, img, subj in zip(fs.vectors, fs.labels, fs.image_ids, fs.subject_ids):
            fh.write("\t".join([str(img), str(subj), str(y)] + [repr(float(x)) for x in v]) + "\n")


def read_features(path) -> FeatureSet:
    rows, labels, images, subjects = [], [], [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            images.append(int(parts[0]))
            subjects.append(int(parts[1]))
            labels.append(int(parts[2]))
            rows.append([float(x) for x in parts[3:]])
    n = len(rows)
    return FeatureSet(np.array(rows, dtype=DTYPE).reshape(n, -1), np.array(labels, dtype=int),
                      np.array(images, dtype=int), np.array(subjects, dtype=int), np.arange(n))


# -- classifiers -------------------------------------------------------------

def knn_classify(train: FeatureSet, query, k: int) -> tuple[int, dict[int, int]]:
    """Euclidean k-nearest-neighbour vote.

    Equidistant neighbours are taken in training-set order. A tied vote goes
    to the class with the smallest mean neighbour distance, then the lowest id.
    """
    if k < 1 or k > len(train):
        raise DomainError(f"k={k} must be in 1..{len(train)}")
    q = np.asarray(query, dtype=DTYPE)
    if q.shape != (train.dim,):
        raise ShapeError(f"query has shape {q.shape}, features have dim {train.dim}")
    d2 = ((train.vectors - q) ** 2).sum(axis=1)
    nearest = np.argsort(d2, kind="stable")[:k]
    counts = Counter(int(train.labels[i]) for i in nearest)
    best = max(counts.values())
    tied = [c for c, n in counts.items() if n == best]
    if len(tied) > 1:
        dist = np.sqrt(d2[nearest])
        lab = train.labels[nearest]
        tied.sort(key=lambda c: (float(dist[lab == c].mean()), c))
    return tied[0], dict(sorted(counts.items()))


@dataclass
class KnnModel:
    train: FeatureSet
    k: int
    num_classes: int

    def predict(self, x) -> tuple[int, np.ndarray]:
        cls, counts = knn_classify(self.train, x, self.k)
        scores = np.zeros(self.num_classes)
        for c, n in counts.items():
            scores[c] = n / self.k
        return cls, scores


@dataclass
class LinearSVM:
    """One-vs-rest linear model over standardized features."""
    classes: np.ndarray
    W: np.ndarray        # (K, dim)
    b: np.ndarray        # (K,)
    mean: np.ndarray
    scale: np.ndarray

    def scores(self, x) -> np.ndarray:
        z = (np.asarray(x, dtype=DTYPE) - self.mean) / self.scale
        return z @ self.W.T + self.b

    def predict(self, x) -> tuple[int, np.ndarray]:
        s = self.scores(x)
        # class-id-indexed probability-like scores for vote tie-breaking
        p = np.zeros(int(self.classes.max()) + 1)
        p[self.classes] = softmax_with_temperature(s)
        return int(self.classes[int(np.argmax(s))]), p


def linear_svm_train(train: FeatureSet, reg: float = 1e-3, epochs: int = 20, seed: int = 0,
                     lr0: float = 0.1) -> LinearSVM:
    """Hinge loss + (reg/2)||w||^2 per class, stochastic subgradient descent.

    Step size follows lr0 / (1 + lr0 * reg * t); biases are not regularized.
    """
    if not reg > 0:
        raise DomainError("reg must be positive")
    classes = np.unique(train.labels)
    if len(classes) < 2:
        raise DomainError("SVM training needs at least two classes")
    X = train.vectors
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale < 1e-12] = 1.0
    Z = (X - mean) / scale
    Y = np.where(train.labels[:, None] == classes[None, :], 1.0, -1.0)   # (N, K)
    K, dim = len(classes), X.shape[1]
    W = np.zeros((K, dim))
    b = np.zeros(K)
    rng = np.random.default_rng(seed)
    t = 0
    for _ in range(epochs):
        for i in rng.permutation(len(Z)):
            eta = lr0 / (1.0 + lr0 * reg * t)
            t += 1
            y = Y[i]
            active = y * (W @ Z[i] + b) < 1.0
            W *= 1.0 - eta * reg
            if active.any():
                W[active] += eta * y[active, None] * Z[i]
                b[active] += eta * y[active]
    return LinearSVM(classes, W, b, mean, scale)


def majority_vote(excerpt_predictions, policy: str = SUMMED_PROBABILITY) -> int:
    """Most frequent class among excerpt predictions.

    ``excerpt_predictions`` holds ``(class, scores)`` pairs with ``scores``
    indexed by class id. Ties go to the highest summed score
    (``summed_probability``) and then to the lowest class id.
    """
    preds = list(excerpt_predictions)
    if not preds:
        raise DomainError("majority vote over no predictions")
    if policy not in (SUMMED_PROBABILITY, LOWEST_CLASS_ID):
        raise DomainError(f"unknown tie-break policy {policy!r}")
    counts = Counter(int(c) for c, _ in preds)
    best = max(counts.values())
    tied = sorted(c for c, n in counts.items() if n == best)
    if len(tied) == 1 or policy == LOWEST_CLASS_ID:
        return tied[0]
    mass = {c: sum(float(s[c]) if c < len(s) else 0.0 for _, s in preds) for c in tied}
    return max(tied, key=lambda c: (mass[c], -c))


# -- unseen-category protocol ------------------------------------------------

def train_feature_extractor(seen: Corpus, posteriors: PosteriorTable, stack_cfg: StackConfig,
                            train_cfg: TrainConfig) -> LstmStack:
    """Unsupervised distillation on the seen classes."""
    if train_cfg.mode != "unsupervised_kd":
        train_cfg = TrainConfig(**{**train_cfg.to_dict(), "mode": "unsupervised_kd"})
    stack = init_stack(stack_cfg, train_cfg.seed)
    fit(seen, posteriors, stack, train_cfg)
    return stack


def classify_unseen(stack: LstmStack, unseen: Corpus, window: tuple[int, int], classifier: str = "svm", *,
                    labeled_ratio: float = 0.5, seed: int = 0, k: int = 5, reg: float = 1e-3,
                    svm_epochs: int = 20, policy: str = SUMMED_PROBABILITY) -> float:
    """Fit ``classifier`` on excerpt features of a labeled part of ``unseen``
    and score per-signal majority votes on the rest."""
    if len({s.class_id for s in unseen.samples}) < 2:
        return 1.0
    plan = grouped_split(unseen, labeled_ratio, seed)
    labeled, held = apply_split(unseen, plan)
    train_fs = extract_features(labeled, stack, window)
    if classifier == "knn":
        model = KnnModel(train_fs, min(k, len(train_fs)), unseen.num_classes)
    elif classifier == "svm":
        model = linear_svm_train(train_fs, reg, svm_epochs, seed)
    else:
        raise DomainError(f"unknown classifier {classifier!r}; use 'knn' or 'svm'")
    test_fs = extract_features(held, stack, window)
    correct = 0
    for n, s in enumerate(held.samples):
        rows = test_fs.vectors[test_fs.parents == n]
        votes = [model.predict(v) for v in rows]
        correct += majority_vote(votes, policy) == s.class_id
    return correct / len(held)


def unseen_category_eval(seen: Corpus, unseen: Corpus, posteriors: PosteriorTable, stack_cfg: StackConfig,
                         train_cfg: TrainConfig, window: tuple[int, int], classifier: str = "svm",
                         **kwargs) -> float:
    """Distil on seen classes, then classify unseen ones from excerpt features."""
    if len({s.class_id for s in unseen.samples}) < 2:
        return 1.0
    stack = train_feature_extractor(seen, posteriors, stack_cfg, train_cfg)
    return classify_unseen(stack, unseen, window, classifier, seed=train_cfg.seed, **kwargs)
