"""Sparse labels from dense ground truth, voxel densification, class weights."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pointcloud_io import UNLABELLED, PointCloud

# provenance flags
NONE = 0
ORIGINAL = 1
PROPAGATED = 2


@dataclass
class LabelMask:
    labels: np.ndarray  # (N,) int64, UNLABELLED where provenance is NONE
    provenance: np.ndarray  # (N,) uint8

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.provenance = np.asarray(self.provenance, dtype=np.uint8)
        if self.labels.shape != self.provenance.shape:
            raise ValueError("labels and provenance must have the same length")
        if not np.array_equal(self.provenance == NONE, self.labels == UNLABELLED):
            raise ValueError("provenance NONE must coincide with UNLABELLED labels")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def n_labelled(self) -> int:
        return int(np.count_nonzero(self.provenance != NONE))

    def copy(self) -> "LabelMask":
        return LabelMask(self.labels.copy(), self.provenance.copy())


@dataclass
class ClassStats:
    counts: np.ndarray  # (K,) int64
    freq: np.ndarray  # (K,) float64


def subsample_labels(dense: np.ndarray, ratio: float, seed: int) -> LabelMask:
    """Keep ``max(1, round(ratio * N))`` uniformly chosen labels, drop the rest."""
    dense = np.asarray(dense, dtype=np.int64)
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must lie in (0, 1], got {ratio}")
    if (dense < 0).any():
        raise ValueError("dense ground truth must label every point")
    n = dense.shape[0]
    labels = np.full(n, UNLABELLED, dtype=np.int64)
    prov = np.full(n, NONE, dtype=np.uint8)
    if n == 0:
        return LabelMask(labels, prov)
    n_keep = min(n, max(1, int(round(ratio * n))))
    keep = np.random.default_rng(seed).choice(n, size=n_keep, replace=False)
    labels[keep] = dense[keep]
    prov[keep] = ORIGINAL
    return LabelMask(labels, prov)


def voxel_ids(coords: np.ndarray, voxel_size: float) -> np.ndarray:
    """Dense voxel index per point; the grid is anchored at the origin with floor binning."""
    cells = np.floor(np.asarray(coords) / voxel_size).astype(np.int64)
    if cells.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    _, inverse = np.unique(cells, axis=0, return_inverse=True)
    return inverse.reshape(-1)


def propagate_voxel_labels(
    cloud: PointCloud, mask: LabelMask, voxel_size: float = 0.06, seed: int = 0
) -> LabelMask:
    """Copy ORIGINAL labels to every point sharing their voxel.

    A voxel holding several distinct ORIGINAL classes draws one of them
    uniformly (seeded, in voxel order) for its non-original points. ORIGINAL
    points always keep their own label.
    """
    if voxel_size <= 0:
        raise ValueError(f"voxel_size must be positive, got {voxel_size}")
    if len(mask) != len(cloud):
        raise ValueError("mask and cloud differ in length")
    out = mask.copy()
    orig = np.flatnonzero(mask.provenance == ORIGINAL)
    if orig.size == 0:
        return out
    vox = voxel_ids(cloud.coords, voxel_size)
    pairs = np.unique(np.stack([vox[orig], mask.labels[orig]], axis=1), axis=0)
    # pairs are sorted by voxel then class; group into runs per voxel
    starts = np.flatnonzero(np.r_[True, pairs[1:, 0] != pairs[:-1, 0]])
    n_distinct = np.diff(np.r_[starts, pairs.shape[0]])
    pick = np.zeros(starts.size, dtype=np.int64)
    conflict = n_distinct > 1
    if conflict.any():
        rng = np.random.default_rng(seed)
        pick[conflict] = rng.integers(0, n_distinct[conflict])
    chosen = np.full(int(vox.max()) + 1, UNLABELLED, dtype=np.int64)
    chosen[pairs[starts, 0]] = pairs[starts + pick, 1]
    target = chosen[vox]
    fill = (target != UNLABELLED) & (mask.provenance != ORIGINAL)
    out.labels[fill] = target[fill]
    out.provenance[fill] = PROPAGATED
    return out


def class_frequencies(mask: LabelMask, n_classes: int) -> ClassStats:
    """Class histogram over ORIGINAL labels only."""
    orig = mask.labels[mask.provenance == ORIGINAL]
    if orig.size == 0:
        raise ValueError("no ORIGINAL labels to compute class frequencies from")
    if orig.max() >= n_classes:
        raise ValueError(f"label {int(orig.max())} outside [0, {n_classes})")
    counts = np.bincount(orig, minlength=n_classes).astype(np.int64)
    return ClassStats(counts=counts, freq=counts / counts.sum())


def merge_stats(stats: list[ClassStats]) -> ClassStats:
    counts = np.sum([s.counts for s in stats], axis=0).astype(np.int64)
    total = counts.sum()
    return ClassStats(counts=counts, freq=counts / total if total else counts.astype(float))


def focal_weights(stats: ClassStats, eps: float = 1e-6) -> np.ndarray:
    """``ln(1 + 1 / max(freq_k, eps))`` per class."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    return np.log1p(1.0 / np.maximum(stats.freq, eps))
