"""Signal corpora: container format, grouped splits, excerpts, synthetic data.

Container layout (little-endian)::

    b"EEGC"  u16 version=1  u32 n_samples
    per sample: u32 timesteps, u32 channels, u32 class_id, u32 subject_id,
                u32 image_id, then timesteps*channels f32 (row-major)

Signals are stored as float32 on disk and held as float64 in memory.
"""

from __future__ import annotations

import struct
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError, FormatError, SplitError, ValidationError
from .numerics import DTYPE

MAGIC = b"EEGC"
VERSION = 1
_HEADER = struct.Struct("<4sHI")
_SAMPLE_HEADER = struct.Struct("<5I")


@dataclass
class EegSample:
    signal: np.ndarray
    class_id: int
    subject_id: int
    image_id: int

    @property
    def timesteps(self) -> int:
        return self.signal.shape[0]

    @property
    def channels(self) -> int:
        return self.signal.shape[1]


@dataclass
class Corpus:
    samples: list[EegSample]
    num_classes: int
    num_subjects: int = field(default=0)

    def __post_init__(self):
        if not self.num_subjects:
            self.num_subjects = len({s.subject_id for s in self.samples})
        seen = set()
        for s in self.samples:
            if s.signal.ndim != 2 or s.signal.shape[0] < 1 or s.signal.shape[1] < 1:
                raise ValidationError(f"image {s.image_id}: signal must be a non-empty 2-D matrix")
            if not 0 <= s.class_id < self.num_classes:
                raise ValidationError(f"image {s.image_id}: class {s.class_id} >= num_classes {self.num_classes}")
            key = (s.image_id, s.subject_id)
            if key in seen:
                raise ValidationError(f"duplicate (image_id, subject_id) {key}")
            seen.add(key)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def image_classes(self) -> dict[int, int]:
        return {s.image_id: s.class_id for s in self.samples}

    def signals(self) -> np.ndarray:
        """Stack all signals into (N, T, C); requires a common shape."""
        return np.stack([s.signal for s in self.samples])

    def labels(self) -> np.ndarray:
        return np.array([s.class_id for s in self.samples], dtype=int)

    def subset(self, keep) -> Corpus:
        return Corpus([s for s in self.samples if keep(s)], self.num_classes, self.num_subjects)


def corpora_equal(a: Corpus, b: Corpus) -> bool:
    """Bit-exact comparison of two corpora."""
    if (a.num_classes, len(a)) != (b.num_classes, len(b)):
        return False
    for x, y in zip(a.samples, b.samples):
        if (x.class_id, x.subject_id, x.image_id) != (y.class_id, y.subject_id, y.image_id):
            return False
        if x.signal.shape != y.signal.shape or x.signal.tobytes() != y.signal.tobytes():
            return False
    return True


# -- container ---------------------------------------------------------------

def container_size(shapes) -> int:
    """Byte size of a container holding signals of the given (T, C) shapes."""
    return _HEADER.size + sum(_SAMPLE_HEADER.size + 4 * t * c for t, c in shapes)


def write_corpus(corpus: Corpus, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(corpus)))
        for s in corpus.samples:
            t, c = s.signal.shape
            fh.write(_SAMPLE_HEADER.pack(t, c, s.class_id, s.subject_id, s.image_id))
            fh.write(np.ascontiguousarray(s.signal, dtype="<f4").tobytes())


def read_corpus(path, num_classes: int | None = None) -> Corpus:
    """Read a container. ``num_classes`` defaults to max(class_id) + 1."""
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(buf)} bytes)")
    magic, version, n = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported container version {version}")
    off = _HEADER.size
    samples = []
    for k in range(n):
        if off + _SAMPLE_HEADER.size > len(buf):
            raise FormatError(f"{path}: truncated sample header {k} at byte offset {off}")
        t, c, cls, subj, img = _SAMPLE_HEADER.unpack_from(buf, off)
        off += _SAMPLE_HEADER.size
        nbytes = 4 * t * c
        if off + nbytes > len(buf):
            raise FormatError(f"{path}: truncated payload of sample {k} at byte offset {off}")
        sig = np.frombuffer(buf, dtype="<f4", count=t * c, offset=off).reshape(t, c).astype(DTYPE)
        off += nbytes
        samples.append(EegSample(sig, cls, subj, img))
    if off != len(buf):
        raise FormatError(f"{path}: {len(buf) - off} trailing bytes after byte offset {off}")
    if num_classes is None:
        num_classes = max((s.class_id for s in samples), default=-1) + 1
    return Corpus(samples, num_classes)


# -- splits ------------------------------------------------------------------

@dataclass
class SplitPlan:
    train_image_ids: frozenset
    test_image_ids: frozenset
    ratio: float


def grouped_split(corpus: Corpus, ratio: float, seed: int) -> SplitPlan:
    """Image-level split, stratified by class.

    Every subject's recording of an image lands on the same side. Each class
    sends round(ratio * n_images) of its images to train, clamped so both
    sides get at least one.
    """
    if not 0.0 < ratio < 1.0:
        raise DomainError(f"split ratio must be in (0, 1), got {ratio}")
    by_class = defaultdict(set)
    owner = {}
    for s in corpus.samples:
        if owner.setdefault(s.image_id, s.class_id) != s.class_id:
            raise SplitError(f"image {s.image_id} carries more than one class")
        by_class[s.class_id].add(s.image_id)
    rng = np.random.default_rng(seed)
    train, test = set(), set()
    for cls in sorted(by_class):
        ids = np.array(sorted(by_class[cls]))
        if len(ids) < 2:
            raise SplitError(f"class {cls} has {len(ids)} image(s); need at least 2 to split")
        ids = ids[rng.permutation(len(ids))]
        n_train = min(max(int(round(ratio * len(ids))), 1), len(ids) - 1)
        train.update(int(i) for i in ids[:n_train])
        test.update(int(i) for i in ids[n_train:])
    return SplitPlan(frozenset(train), frozenset(test), ratio)


def apply_split(corpus: Corpus, plan: SplitPlan) -> tuple[Corpus, Corpus]:
    return (
        corpus.subset(lambda s: s.image_id in plan.train_image_ids),
        corpus.subset(lambda s: s.image_id in plan.test_image_ids),
    )


@dataclass
class HoldoutSplit:
    seen: Corpus
    unseen: Corpus
    seen_classes: list[int]     # new id -> original id
    unseen_classes: list[int]

    def __iter__(self):
        return iter((self.seen, self.unseen))


def holdout_classes(corpus: Corpus, held_out) -> HoldoutSplit:
    """Partition by class; both parts get contiguous class ids starting at 0."""
    held = set(int(c) for c in held_out)
    if not held:
        raise DomainError("held-out class set must be non-empty")
    present = sorted({s.class_id for s in corpus.samples} | set(range(corpus.num_classes)))
    if not held < set(present):
        raise DomainError("held-out classes must be a strict subset of the corpus classes")
    seen_classes = [c for c in present if c not in held]
    unseen_classes = sorted(held)
    seen_map = {c: i for i, c in enumerate(seen_classes)}
    unseen_map = {c: i for i, c in enumerate(unseen_classes)}
    seen, unseen = [], []
    for s in corpus.samples:
        if s.class_id in held:
            unseen.append(EegSample(s.signal, unseen_map[s.class_id], s.subject_id, s.image_id))
        else:
            seen.append(EegSample(s.signal, seen_map[s.class_id], s.subject_id, s.image_id))
    return HoldoutSplit(
        Corpus(seen, len(seen_classes), corpus.num_subjects),
        Corpus(unseen, len(unseen_classes), corpus.num_subjects),
        seen_classes,
        unseen_classes,
    )


# -- excerpts ----------------------------------------------------------------

def window_starts(length: int, width: int, stride: int) -> list[int]:
    if width < 1 or stride < 1:
        raise DomainError("window width and stride must be at least 1")
    if width > length:
        raise DomainError(f"window width {width} exceeds signal length {length}")
    starts = list(range(0, length - width + 1, stride))
    if starts[-1] + width != length:
        starts.append(length - width)
    return starts


def window_excerpts(signal, width: int, stride: int) -> list[np.ndarray]:
    """Overlapping windows; a final end-aligned window covers any tail."""
    signal = np.asarray(signal)
    return [signal[s:s + width] for s in window_starts(signal.shape[0], width, stride)]


# -- synthetic generator -----------------------------------------------------

def generate_synthetic_corpus(
    num_classes: int,
    images_per_class: int,
    subjects: int,
    timesteps: int,
    channels: int,
    noise_sigma: float,
    seed: int,
    components: int = 3,
    jitter: float = 0.3,
) -> Corpus:
    """Class-specific sums of sinusoids with random channel mixing.

    Each image perturbs the class phases, each subject scales by its own gain
    and adds white noise of scale ``noise_sigma``.
    """
    for name, v in (("num_classes", num_classes), ("images_per_class", images_per_class),
                    ("subjects", subjects), ("timesteps", timesteps), ("channels", channels)):
        if v < 1:
            raise DomainError(f"{name} must be at least 1, got {v}")
    if noise_sigma < 0:
        raise DomainError("noise_sigma must be non-negative")
    rng = np.random.default_rng(seed)
    mixing = rng.standard_normal((num_classes, components, channels)) / np.sqrt(components)
    freqs = rng.uniform(1.0, 8.0, size=(num_classes, components))     # cycles per sequence
    phases = rng.uniform(0.0, 2 * np.pi, size=(num_classes, components))
    gains = rng.uniform(0.8, 1.2, size=subjects)
    t = np.arange(timesteps, dtype=DTYPE) / timesteps
    samples = []
    for cls in range(num_classes):
        for j in range(images_per_class):
            image_id = cls * images_per_class + j
            shift = rng.normal(0.0, jitter)
            waves = np.sin(2 * np.pi * freqs[cls][None, :] * t[:, None] + phases[cls][None, :] + shift)
            clean = waves @ mixing[cls]                                   # (T, C)
            for subj in range(subjects):
                sig = gains[subj] * clean
                if noise_sigma > 0:
                    sig = sig + rng.normal(0.0, noise_sigma, size=sig.shape)
                # float32-representable so the container round trip is exact
                samples.append(EegSample(sig.astype(np.float32).astype(DTYPE), cls, subj, image_id))
    return Corpus(samples, num_classes, subjects)
