"""Vectorized corner-error metric for batches of normalized homographies."""
from __future__ import annotations

import numpy as np

from ..geometry import denormalize_matrix, patch_corners


def _map(h, pts):
    hom = np.concatenate([pts, np.ones((len(pts), 1))], axis=1)
    q = hom @ np.swapaxes(h, -1, -2)
    return q[..., :2] / q[..., 2:3]


def corner_errors(h_est_norm, h_gt_norm, side: int) -> np.ndarray:
    """Per-sample mean distance (pixels) between the four mapped patch corners."""
    h_est_norm = np.asarray(h_est_norm, dtype=np.float64)
    h_gt_norm = np.asarray(h_gt_norm, dtype=np.float64)
    if len(h_est_norm) == 0:
        return np.zeros(0)
    c = patch_corners(side, side)
    a = _map(denormalize_matrix(h_est_norm, side, side), c)
    b = _map(denormalize_matrix(h_gt_norm, side, side), c)
    return np.linalg.norm(a - b, axis=-1).mean(axis=-1)
