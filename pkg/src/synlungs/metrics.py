"""Overlap and ranking metrics for dataset QC."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .volume import VoxelVolume


@dataclass(frozen=True)
class OverlapReport:
    dice: float
    intersection_voxels: int
    a_voxels: int
    b_voxels: int


def dice(a: VoxelVolume | np.ndarray, b: VoxelVolume | np.ndarray) -> OverlapReport:
    """Dice overlap of two binary masks; two empty masks score 1.0."""
    if isinstance(a, VoxelVolume) and isinstance(b, VoxelVolume):
        if not a.same_grid(b):
            raise ValueError("masks are on different grids")
    a = np.asarray(a.values if isinstance(a, VoxelVolume) else a) != 0
    b = np.asarray(b.values if isinstance(b, VoxelVolume) else b) != 0
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    inter = int(np.count_nonzero(a & b))
    na, nb = int(np.count_nonzero(a)), int(np.count_nonzero(b))
    score = 1.0 if na + nb == 0 else 2.0 * inter / (na + nb)
    return OverlapReport(score, inter, na, nb)


def auc(scores, truth=None) -> float:
    """Mann-Whitney AUC with ties given half credit.

    Accepts either ``auc(scores, truth)`` or ``auc([(score, truth), ...])``.
    """
    if truth is None:
        pairs = np.asarray(list(scores), dtype=float)
        if pairs.size == 0:
            raise ValueError("no scores given")
        scores, truth = pairs[:, 0], pairs[:, 1]
    scores = np.asarray(scores, dtype=float)
    truth = np.asarray(truth).astype(bool)
    n_pos = int(truth.sum())
    n_neg = truth.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative examples")
    ranks = rankdata(scores)  # average ranks give ties half credit
    u = ranks[truth].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))
