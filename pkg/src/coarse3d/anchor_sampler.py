"""Entropy-driven anchor selection among pseudo-labelled pixels."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .pointcloud_io import UNLABELLED

STRATEGIES = ("entropy", "softmax_prob", "all")


@dataclass
class ClassTable:
    """Sampling distribution over the pixels predicted as one class."""

    cls: int
    pixels: np.ndarray  # (n, 2) row, col
    prob: np.ndarray  # (n,) sums to 1


@dataclass
class AnchorSet:
    pixels: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    classes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    epoch: int = 0

    def __len__(self):
        return self.pixels.shape[0]


def shannon_entropy(probs: np.ndarray, atol: float = 1e-5) -> np.ndarray:
    """Natural-log entropy over the last axis, with 0 ln 0 = 0."""
    probs = np.asarray(probs, dtype=np.float64)
    if (probs < 0).any():
        raise ValueError("probabilities must be nonnegative")
    if probs.size and np.abs(probs.sum(axis=-1) - 1.0).max() > atol:
        raise ValueError("probabilities must sum to 1 along the class axis")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(probs > 0, probs * np.log(probs), 0.0)
    return np.maximum(-terms.sum(axis=-1), 0.0)


def sampling_probabilities(
    entropy: np.ndarray,
    pred_labels: np.ndarray,
    valid: np.ndarray,
    n_classes: int | None = None,
    score: np.ndarray | None = None,
) -> dict[int, ClassTable]:
    """Per predicted class, ``exp(-H^2)`` normalised over that class's valid pixels.

    ``score`` replaces ``exp(-H^2)`` with an arbitrary nonnegative weight map
    (used by the softmax-probability baseline). Classes with no pixel get an
    empty table.
    """
    entropy = np.asarray(entropy, dtype=np.float64)
    pred_labels = np.asarray(pred_labels)
    valid = np.asarray(valid, dtype=bool)
    if not (entropy.shape == pred_labels.shape == valid.shape):
        raise ValueError("entropy, labels and validity masks must share a shape")
    weight = np.exp(-(entropy**2)) if score is None else np.asarray(score, dtype=np.float64)
    keep = valid & (pred_labels != UNLABELLED)
    if n_classes is None:
        n_classes = int(pred_labels[keep].max()) + 1 if keep.any() else 0
    tables = {}
    for c in range(n_classes):
        sel = keep & (pred_labels == c)
        pix = np.argwhere(sel)
        w = weight[sel]
        total = w.sum()
        prob = w / total if total > 0 else np.full(w.size, 1.0 / max(w.size, 1))
        tables[c] = ClassTable(cls=c, pixels=pix.astype(np.int64), prob=prob)
    return tables


def anchor_budget(epoch: int, warmup: int, total_epochs: int, pseudo_count: int) -> int:
    """Number of anchors: 0 in warm-up, 1 at its end, linear to half the pseudo-labels.

    The endpoint ``floor(pseudo_count / 2)`` is reached at ``total_epochs - 1``.
    """
    if warmup >= total_epochs:
        raise ValueError("warm-up must end before training does")
    if pseudo_count < 0:
        raise ValueError("pseudo_count must be >= 0")
    if epoch < warmup or pseudo_count == 0:
        return 0
    end = max(1, pseudo_count // 2)
    span = total_epochs - 1 - warmup
    t = 1.0 if span <= 0 else min(1.0, (epoch - warmup) / span)
    return int(min(pseudo_count, np.floor(1 + (end - 1) * t + 1e-9)))


def _hamilton(total: int, weights: np.ndarray) -> np.ndarray:
    """Largest-remainder apportionment of ``total`` seats; ties go to larger weight, then lower index."""
    if total <= 0 or weights.sum() <= 0:
        return np.zeros(weights.size, dtype=np.int64)
    exact = total * weights / weights.sum()
    seats = np.floor(exact).astype(np.int64)
    rem = exact - seats
    left = total - int(seats.sum())
    if left > 0:
        order = np.lexsort((np.arange(weights.size), -weights, -rem))
        seats[order[:left]] += 1
    return seats


def class_quotas(counts: np.ndarray, budget: int) -> np.ndarray:
    """Split ``budget`` across classes proportionally to ``counts``.

    Every present class gets at least one anchor once the budget covers all of
    them; no class gets more than it has pixels, and the surplus goes to the
    remaining classes by largest remainder.
    """
    counts = np.asarray(counts, dtype=np.int64)
    budget = int(min(budget, counts.sum()))
    present = counts > 0
    quotas = _hamilton(budget, counts.astype(np.float64))
    if budget >= present.sum():
        for c in np.flatnonzero(present & (quotas == 0)):
            donor = np.lexsort((np.arange(counts.size), -counts, -quotas))[0]
            quotas[donor] -= 1
            quotas[c] = 1
    while (quotas > counts).any():
        surplus = int((quotas - counts)[quotas > counts].sum())
        quotas = np.minimum(quotas, counts)
        room = (quotas < counts).astype(np.float64) * counts
        quotas += _hamilton(surplus, room)
    return quotas


def sample_anchors(tables: dict[int, ClassTable], budget: int, seed: int, epoch: int = 0) -> AnchorSet:
    """Weighted sampling without replacement inside each class table."""
    if budget < 0:
        raise ValueError("budget must be >= 0")
    classes = sorted(tables)
    if budget == 0 or not classes:
        return AnchorSet(epoch=epoch)
    counts = np.array([tables[c].pixels.shape[0] for c in classes], dtype=np.int64)
    quotas = class_quotas(counts, budget)
    rng = np.random.default_rng(seed)
    pix, cls = [], []
    for c, q in zip(classes, quotas):
        if q == 0:
            continue
        t = tables[c]
        if q >= t.pixels.shape[0]:
            idx = np.arange(t.pixels.shape[0])
        else:
            idx = rng.choice(t.pixels.shape[0], size=int(q), replace=False, p=t.prob)
        pix.append(t.pixels[idx])
        cls.append(np.full(idx.size, c, dtype=np.int64))
    if not pix:
        return AnchorSet(epoch=epoch)
    return AnchorSet(pixels=np.concatenate(pix), classes=np.concatenate(cls), epoch=epoch)
