"""Teacher posteriors: manifest ingestion and a synthetic stand-in teacher.

Manifest format (UTF-8): one record per line, ``image_id<TAB>p_0 p_1 ...``.
Lines starting with ``#`` are comments; a ``# teacher: <name>`` comment names
the model that produced the table.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError, ParseError, ValidationError
from .numerics import DTYPE

SUM_TOL = 1e-6


@dataclass
class PosteriorTable:
    posteriors: dict[int, np.ndarray]
    teacher_name: str = "unknown"
    num_classes: int = field(init=False)

    def __post_init__(self):
        lengths = {len(v) for v in self.posteriors.values()}
        if len(lengths) > 1:
            raise ValidationError(f"posterior vectors have differing lengths {sorted(lengths)}")
        self.num_classes = lengths.pop() if lengths else 0
        for image_id, p in self.posteriors.items():
            _validate(p, f"image {image_id}")

    def __getitem__(self, image_id: int) -> np.ndarray:
        return self.posteriors[image_id]

    def __contains__(self, image_id) -> bool:
        return image_id in self.posteriors

    def __len__(self) -> int:
        return len(self.posteriors)

    def restrict(self, classes) -> PosteriorTable:
        """Keep only ``classes`` (in that order) and renormalize each row."""
        idx = np.asarray(list(classes), dtype=int)
        out = {}
        for k, p in self.posteriors.items():
            q = p[idx]
            s = q.sum()
            if s <= 0:
                # teacher put no mass on any kept class
                q = np.full(len(idx), 1.0 / len(idx))
            else:
                q = q / s
            out[k] = q
        return PosteriorTable(out, self.teacher_name)


def _validate(p, where):
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValidationError(f"{where}: posterior has negative or non-finite entries")
    s = float(np.sum(p))
    if abs(s - 1.0) > SUM_TOL:
        raise ValidationError(f"{where}: posterior sums to {s:.9g}, not 1")


def load_posteriors(path) -> PosteriorTable:
    table = {}
    name = "unknown"
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if body.startswith("teacher:"):
                    name = body.split(":", 1)[1].strip()
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(f"{path}:{lineno}: expected '<image_id>\\t<probabilities>'")
            try:
                image_id = int(parts[0])
                p = np.array([float(t) for t in parts[1].split()], dtype=DTYPE)
            except ValueError as e:
                raise ParseError(f"{path}:{lineno}: {e}") from None
            if image_id < 0:
                raise ParseError(f"{path}:{lineno}: image_id must be unsigned")
            if image_id in table:
                raise ParseError(f"{path}:{lineno}: duplicate image_id {image_id}")
            try:
                _validate(p, f"row {lineno} (image {image_id})")
            except ValidationError as e:
                raise ValidationError(f"{path}: {e}") from None
            table[image_id] = p
    try:
        return PosteriorTable(table, name)
    except ValidationError as e:
        raise ValidationError(f"{path}: {e}") from None


def write_posteriors(table: PosteriorTable, path) -> None:
    path = Path(path)
    lines = [f"# teacher: {table.teacher_name}"]
    for image_id in sorted(table.posteriors):
        # repr gives the shortest string that round-trips exactly
        lines.append(f"{image_id}\t" + " ".join(repr(float(v)) for v in table.posteriors[image_id]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class SyntheticTeacherConfig:
    num_classes: int
    fidelity: float = 0.85
    confusion_temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 1:
            raise DomainError("num_classes must be positive")
        if not 0.0 < self.fidelity <= 1.0:
            raise DomainError(f"fidelity must be in (0, 1], got {self.fidelity}")
        if not self.confusion_temperature > 0:
            raise DomainError("confusion_temperature must be positive")


def class_similarity(num_classes: int, seed: int) -> np.ndarray:
    """Seed-deterministic symmetric similarity matrix between classes."""
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((num_classes, num_classes))
    return (a + a.T) / 2.0


def synthetic_posterior(true_class: int, cfg: SyntheticTeacherConfig, similarity: np.ndarray | None = None) -> np.ndarray:
    """``fidelity`` mass on the true class, the rest spread over the other
    classes by softmax(similarity / confusion_temperature)."""
    K = cfg.num_classes
    if not 0 <= true_class < K:
        raise DomainError(f"class {true_class} out of range for {K} classes")
    p = np.zeros(K, dtype=DTYPE)
    p[true_class] = cfg.fidelity
    if K == 1:
        p[0] = 1.0
        return p
    if cfg.fidelity < 1.0:
        s = class_similarity(K, cfg.seed) if similarity is None else similarity
        others = np.arange(K) != true_class
        z = s[true_class, others] / cfg.confusion_temperature
        e = np.exp(z - z.max())
        p[others] = (1.0 - cfg.fidelity) * e / e.sum()
    return p


def synthetic_table(image_classes: dict[int, int], cfg: SyntheticTeacherConfig, name: str = "synthetic") -> PosteriorTable:
    """Posterior table for every ``image_id -> class`` pair."""
    s = class_similarity(cfg.num_classes, cfg.seed)
    return PosteriorTable({i: synthetic_posterior(c, cfg, s) for i, c in sorted(image_classes.items())}, name)
