"""End-to-end cascade: stages chained through a differentiable homography merge.

Stage 0 sees ``(patch_a, patch_b)`` and predicts ``H_0``. Stage ``i`` sees
``(warp(patch_a, H_{i-1}), patch_b)``, predicts the residual ``R_i`` and emits
the merged ``H_i = canon(R_i @ H_{i-1})``. Each stage's merged homography and
warped patch feed the losses.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DegenerateHomography
from ..geometry import EPS, free_to_matrix
from ..model import backward, forward, stack_pair
from ..warp import l1_photometric, warp_patch, warp_patch_backward


def merge_homographies(residual: np.ndarray, previous: np.ndarray) -> np.ndarray:
    """Canonical product ``residual @ previous`` for (..., 3, 3) stacks."""
    p = residual @ previous
    d = p[..., 2:3, 2:3]
    if np.any(np.abs(d) <= EPS):
        raise DegenerateHomography("merged homography has m33 ~ 0")
    return p / d


def merge_backward(grad_merged: np.ndarray, residual: np.ndarray, previous: np.ndarray):
    """Gradients of :func:`merge_homographies` w.r.t. ``residual`` and ``previous``.

    The merged (2, 2) entry is identically 1, so its incoming gradient is ignored.
    """
    p = residual @ previous
    d = p[..., 2:3, 2:3]
    c = p / d
    g = grad_merged.copy()
    g[..., 2, 2] = 0.0
    dp = g / d
    dp[..., 2, 2] = -np.sum(g * c, axis=(-2, -1)) / d[..., 0, 0]
    return dp @ np.swapaxes(previous, -1, -2), np.swapaxes(residual, -1, -2) @ dp


@dataclass
class SequenceOutput:
    merged: list          # per stage (N, 3, 3), float64
    residuals: list       # per stage (N, 3, 3); residuals[0] is merged[0]
    warped: list          # per stage (N, S, S), patch_a warped by merged[i]
    inputs: list = field(default_factory=list)
    caches: list = field(default_factory=list)


def sequence_forward(stages, patch_a, patch_b, train: bool = False, rng=None) -> SequenceOutput:
    """Run ``k = len(stages)`` regressors as a cascade on a batch ``(N, S, S)``."""
    patch_a = np.asarray(patch_a, dtype=np.float64)
    patch_b = np.asarray(patch_b, dtype=np.float64)
    if patch_a.ndim == 2:
        patch_a, patch_b = patch_a[None], patch_b[None]
    out = SequenceOutput([], [], [])
    current = patch_a
    prev = None
    for params in stages:
        x = stack_pair(current, patch_b).astype(params.dtype)
        pred, cache = forward(params, x, train=train, rng=rng)
        r = free_to_matrix(pred.astype(np.float64))
        h = r if prev is None else merge_homographies(r, prev)
        current = warp_patch(patch_a, h)
        out.inputs.append(x)
        out.caches.append(cache)
        out.residuals.append(r)
        out.merged.append(h)
        out.warped.append(current)
        prev = h
    return out


@dataclass
class LossBreakdown:
    total: float
    l2: float
    l1: float


def sequence_losses(out: SequenceOutput, patch_a_t, target, has_target, w2: float, w1: float):
    """Batch loss (mean over samples, summed over stages) and its gradients.

    Returns ``(LossBreakdown, grad_merged, grad_warped)`` where the gradient
    lists follow the stage order.
    """
    n = len(patch_a_t)
    mask = np.asarray(has_target, dtype=np.float64)
    tgt = np.where(mask[:, None] > 0, np.nan_to_num(target), 0.0)
    total_l2 = total_l1 = 0.0
    g_merged, g_warped = [], []
    for h, w in zip(out.merged, out.warped):
        free = h.reshape(n, 9)[:, :8]
        diff = (free - tgt) * mask[:, None]
        l2 = (diff ** 2).sum(axis=1) / 8.0
        gm = np.zeros_like(h)
        gm.reshape(n, 9)[:, :8] = w2 * 2.0 * diff / 8.0 / n
        l1, gl1 = l1_photometric(w, patch_a_t)
        total_l2 += float(l2.sum()) / n
        total_l1 += float(l1.sum()) / n
        g_merged.append(gm)
        g_warped.append(w1 * gl1 / n)
    return LossBreakdown(w2 * total_l2 + w1 * total_l1, total_l2, total_l1), g_merged, g_warped


def sequence_backward(stages, out: SequenceOutput, patch_a, grad_merged, grad_warped):
    """Backpropagate through warps, merges and every regressor; fills ``params.grads``."""
    patch_a = np.asarray(patch_a, dtype=np.float64)
    if patch_a.ndim == 2:
        patch_a = patch_a[None]
    k = len(stages)
    dh = [g.copy() for g in grad_merged]
    dw = [g.copy() for g in grad_warped]
    for i in range(k - 1, -1, -1):
        _, dh_warp = warp_patch_backward(patch_a, out.merged[i], dw[i])
        dh[i] += dh_warp
        if i == 0:
            dr = dh[0]
        else:
            dr, dprev = merge_backward(dh[i], out.residuals[i], out.merged[i - 1])
            dh[i - 1] += dprev
        dout = dr.reshape(len(dr), 9)[:, :8]
        dx = backward(stages[i], out.caches[i], dout, need_input_grad=i > 0)
        if i > 0:
            dw[i - 1] += dx[:, 0].astype(np.float64)
