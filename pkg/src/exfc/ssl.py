"""Pseudo-labeling of unlabeled features against a per-task reference buffer."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.typing import NDArray

from .errors import DegenerateVectorError, EmptyInputError
from .linalg import as_batch, cosine_sim
from .prototypes import ClassKey, PrototypeStore, observe_batch


@dataclass(frozen=True)
class SslConfig:
    threshold: float = 0.9
    capacity_per_class: int = 5
    enabled: bool = True

    def __post_init__(self):
        if not 0.0 < self.threshold <= 1.0:
            raise ValueError(f"threshold must lie in (0, 1], got {self.threshold}")
        if self.capacity_per_class < 1:
            raise ValueError("capacity_per_class must be positive")


class ReferenceBuffer:
    """Task-scoped store of a few labeled reference features per class.

    Sampling is driven by a seeded generator so refills are reproducible.
    """

    def __init__(self, capacity_per_class: int = 5, task_id: int = 0, seed=0):
        if capacity_per_class < 1:
            raise ValueError("capacity_per_class must be positive")
        self.capacity_per_class = capacity_per_class
        self.task_id = task_id
        self._rng = np.random.default_rng(seed)
        self.keys: list[ClassKey] = []
        self._refs: list[NDArray] = []

    def __len__(self):
        return len(self.keys)

    def count(self, key) -> int:
        key = ClassKey(*key)
        return sum(1 for k in self.keys if k == key)

    @property
    def references(self) -> NDArray:
        if not self._refs:
            return np.empty((0, 0))
        return np.stack(self._refs)

    def entries(self) -> list[tuple[ClassKey, NDArray]]:
        return list(zip(self.keys, self._refs))


def stock(buffer: ReferenceBuffer, key, batch) -> ReferenceBuffer:
    """Add randomly chosen samples of ``batch`` until ``key`` is at capacity."""
    key = ClassKey(*key)
    room = buffer.capacity_per_class - buffer.count(key)
    if room <= 0:
        return buffer
    try:
        x = as_batch(batch)
    except EmptyInputError:
        return buffer
    take = min(room, x.shape[0])
    for i in buffer._rng.choice(x.shape[0], size=take, replace=False):
        buffer.keys.append(key)
        buffer._refs.append(x[i].copy())
    return buffer


def end_task(buffer: ReferenceBuffer) -> ReferenceBuffer:
    buffer.keys.clear()
    buffer._refs.clear()
    return buffer


def _similarities(buffer: ReferenceBuffer, x: NDArray) -> NDArray:
    """Cosine similarity of each row of ``x`` against every reference."""
    refs = buffer.references
    rn = np.linalg.norm(refs, axis=1)
    xn = np.linalg.norm(x, axis=1)
    if np.any(xn == 0):
        raise DegenerateVectorError("unlabeled sample with zero norm")
    # zero-norm references can never be the best match
    with np.errstate(divide="ignore", invalid="ignore"):
        sims = (x @ refs.T) / np.outer(xn, rn)
    sims[:, rn == 0] = -np.inf
    return np.clip(sims, -1.0, 1.0)


def pseudo_label(buffer: ReferenceBuffer, x, cfg: SslConfig) -> tuple[ClassKey, float] | None:
    """Label of the most similar reference, or ``None`` below threshold.

    Ties go to the earliest reference in the buffer.
    """
    v = np.asarray(x, dtype=np.float64)
    if not np.any(v):
        raise DegenerateVectorError("unlabeled sample with zero norm")
    if len(buffer) == 0:
        return None
    sims = [cosine_sim(ref, v) if np.any(ref) else -np.inf for ref in buffer._refs]
    best = int(np.argmax(sims))
    if sims[best] >= cfg.threshold:
        return buffer.keys[best], float(sims[best])
    return None


@dataclass
class SslStats:
    matched: int = 0
    discarded: int = 0
    similarity_sum: float = 0.0
    per_class: Counter = field(default_factory=Counter)
    correct: int = 0
    scored: int = 0

    @property
    def mean_similarity(self) -> float:
        return self.similarity_sum / self.matched if self.matched else 0.0

    @property
    def precision(self) -> float:
        """Fraction of scored matches whose pseudo-label equals the truth."""
        return self.correct / self.scored if self.scored else math.nan

    def add(self, other: "SslStats") -> "SslStats":
        self.matched += other.matched
        self.discarded += other.discarded
        self.similarity_sum += other.similarity_sum
        self.per_class.update(other.per_class)
        self.correct += other.correct
        self.scored += other.scored
        return self

    def to_dict(self) -> dict:
        return {
            "matched": self.matched,
            "discarded": self.discarded,
            "mean_similarity": self.mean_similarity,
            "per_class": {f"{k[0]}:{k[1]}": v for k, v in sorted(self.per_class.items())},
            "correct": self.correct,
            "scored": self.scored,
        }


def match_block(buffer: ReferenceBuffer, x: NDArray, threshold: float):
    """Vectorized :func:`pseudo_label` over the rows of ``x``.

    Returns ``(best_index, best_similarity, matched_mask)``.
    """
    sims = _similarities(buffer, x)
    best = np.argmax(sims, axis=1)  # first maximum = earliest reference
    top = sims[np.arange(len(x)), best]
    return best, top, top >= threshold


def apply_unlabeled_batch(
    store: PrototypeStore,
    buffer: ReferenceBuffer,
    batch,
    cfg: SslConfig,
    task_id: int = 0,
    truth: Sequence[int] | None = None,
) -> tuple[PrototypeStore, SslStats]:
    """Pseudo-label a batch and fold the matches into their prototypes.

    ``truth`` is optional ground truth used only to score precision.
    Unmatched samples are dropped.
    """
    stats = SslStats()
    if not cfg.enabled:
        return store, stats
    try:
        x = as_batch(batch)
    except EmptyInputError:
        return store, stats
    if len(buffer) == 0:
        stats.discarded = x.shape[0]
        return store, stats
    best, top, ok = match_block(buffer, x, cfg.threshold)
    stats.discarded = int((~ok).sum())
    groups: dict[ClassKey, list[int]] = {}
    for i in np.flatnonzero(ok):
        groups.setdefault(buffer.keys[best[i]], []).append(int(i))
    for key in sorted(groups):
        rows = groups[key]
        observe_batch(store, key, x[rows], task_id)
        stats.per_class[key] += len(rows)
        if truth is not None:
            stats.scored += len(rows)
            stats.correct += sum(1 for i in rows if truth[i] == key.class_id)
    stats.matched = int(ok.sum())
    stats.similarity_sum = float(top[ok].sum())
    return store, stats


@dataclass(frozen=True)
class ThresholdTrial:
    threshold: float
    accuracy: float
    precision: float
    matched: int
    discarded: int


@dataclass(frozen=True)
class ThresholdSearch:
    best: float
    trials: tuple[ThresholdTrial, ...]


def grid_search_threshold(
    evaluate: Callable[[float], ThresholdTrial], candidates: Iterable[float]
) -> ThresholdSearch:
    """Evaluate every candidate threshold and keep the most accurate one.

    Accuracy ties go to the higher (more conservative) threshold.
    """
    cands = sorted(set(float(c) for c in candidates))
    if not cands:
        raise EmptyInputError("no candidate thresholds")
    trials = tuple(evaluate(c) for c in cands)
    best = max(trials, key=lambda t: (t.accuracy, t.threshold))
    return ThresholdSearch(best.threshold, trials)
