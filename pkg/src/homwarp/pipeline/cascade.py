"""Hierarchical cascade: per-stage prediction, image re-warping and re-cropping.

Each stage compares the current patch_a (cut from image_a warped by
everything estimated so far) with patch_b and predicts the remaining
homography between them. Stage estimates are chained by left
multiplication, ``H = H_{n-1} @ ... @ H_1 @ H_0``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import geometry as geo
from ..data import Dataset, hbar_from_offsets
from ..geometry import Frame, Homography3, canonical_matrix, free_to_matrix
from ..imageio import quantize, to_u8
from ..model import RegressorParams, load_checkpoint, predict
from ..warp import warp_image, warp_patch
from .metrics import corner_errors


# -- stage predictors -------------------------------------------------------------
#
# A stage is any callable ``stage(patch_a, patch_b, residual_gt) -> (N, 8)``
# taking batches of patches; ``residual_gt`` is the true remaining homography
# (free elements) when known and is only consulted by oracle stages.

class NetworkStage:
    def __init__(self, params: RegressorParams):
        self.params = params

    def __call__(self, patch_a, patch_b, residual_gt=None):
        return predict(self.params, patch_a, patch_b)


class OracleStage:
    """Returns the ground-truth remaining homography."""

    def __call__(self, patch_a, patch_b, residual_gt=None):
        if residual_gt is None:
            raise ValueError("oracle stage needs ground truth")
        return np.asarray(residual_gt, dtype=np.float64)


class FixedStage:
    """Always predicts the same homography (given as 8 free elements)."""

    def __init__(self, free):
        self.free = np.asarray(free, dtype=np.float64)

    def __call__(self, patch_a, patch_b, residual_gt=None):
        n = len(patch_a) if np.asarray(patch_a).ndim == 3 else None
        return self.free.copy() if n is None else np.tile(self.free, (n, 1))


def IdentityStage() -> FixedStage:
    return FixedStage(geo.IDENTITY_FREE)


def load_stage(source) -> object:
    """``"oracle"``, ``"identity"`` or a checkpoint path."""
    if source == "oracle":
        return OracleStage()
    if source == "identity":
        return IdentityStage()
    return NetworkStage(load_checkpoint(source))


def load_stages(ckpt) -> list:
    """Stages from a directory of ``stage_<i>.stnh`` files, a single file, or a pseudo name."""
    if ckpt in ("oracle", "identity"):
        return [load_stage(ckpt)]
    p = Path(ckpt)
    if p.is_dir():
        files = sorted(p.glob("stage_*.stnh"), key=lambda f: int(f.stem.split("_")[1]))
        if not files:
            from ..errors import CheckpointError
            raise CheckpointError(f"no stage_*.stnh checkpoints in {ckpt}")
        return [load_stage(f) for f in files]
    return [load_stage(p)]


# -- chains ---------------------------------------------------------------------

@dataclass
class StageChain:
    """Per-stage normalized homographies in application order, with their product."""

    stages: list = field(default_factory=list)

    def append(self, h: Homography3):
        self.stages.append(h)

    @property
    def total(self) -> Homography3:
        return geo.fold(self.stages)

    def __len__(self):
        return len(self.stages)


def _image_frame(h_norm: np.ndarray, side: int, rect) -> np.ndarray:
    """Normalized patch-frame homography to the full-image pixel frame."""
    x0, y0 = rect
    hp = geo.denormalize_matrix(h_norm, side, side)
    t = np.array([[1.0, 0, x0], [0, 1.0, y0], [0, 0, 1.0]])
    t_inv = np.array([[1.0, 0, -x0], [0, 1.0, -y0], [0, 0, 1.0]])
    return t @ hp @ t_inv


def _crop(img, rect, side):
    x0, y0 = rect
    return img[y0:y0 + side, x0:x0 + side]


def stage_estimate(stage, current, patch_b, residual_gt=None) -> np.ndarray:
    """One stage's residual estimate as a 3x3 matrix (the model part of a stage)."""
    rg = None if residual_gt is None else np.asarray(residual_gt)[None]
    return free_to_matrix(np.asarray(stage(current[None], patch_b[None], rg),
                                     dtype=np.float64)[0])


def stage_advance(image_a, total, r, rect, side):
    """Everything else in a stage: update the running total, re-warp image_a, re-crop."""
    total = canonical_matrix(r @ total)
    return total, _crop(warp_image(image_a, _image_frame(total, side, rect)), rect, side)


@dataclass
class InferResult:
    chain: StageChain
    patches: list          # patch_a seen by each stage, then the final aligned patch
    corner_error: float | None = None


def hierarchical_infer(stages, image_a, patch_b, rect, hbar_gt=None) -> InferResult:
    """Run the cascade on one sample.

    ``image_a`` is the full source image, ``rect`` the patch's top-left corner
    and ``hbar_gt`` (optional) the true normalized homography's free elements,
    used for oracle stages and the corner error.
    """
    if not stages:
        raise ValueError("need at least one stage")
    side = patch_b.shape[-1]
    image_a = np.asarray(image_a, dtype=np.float64)
    gt = None if hbar_gt is None else free_to_matrix(np.asarray(hbar_gt, dtype=np.float64))
    total = np.eye(3)
    current = _crop(image_a, rect, side)
    chain = StageChain()
    patches = [current]
    for stage in stages:
        residual_gt = None
        if gt is not None:
            residual_gt = canonical_matrix(gt @ np.linalg.inv(total)).ravel()[:8]
        r = stage_estimate(stage, current, patch_b, residual_gt)
        total, current = stage_advance(image_a, total, r, rect, side)
        chain.append(Homography3(r, Frame.NORMALIZED))
        patches.append(current)
    err = None
    if gt is not None:
        err = float(corner_errors(total[None], gt[None], side)[0])
    return InferResult(chain, patches, err)


def sequence_infer(stages, patch_a, patch_b, hbar_gt=None) -> list:
    """Patch-only cascade (no source image): returns merged (N, 3, 3) per stage."""
    patch_a = np.asarray(patch_a, dtype=np.float64)
    patch_b = np.asarray(patch_b, dtype=np.float64)
    gt = None if hbar_gt is None else free_to_matrix(np.asarray(hbar_gt, dtype=np.float64))
    total = np.broadcast_to(np.eye(3), (len(patch_a), 3, 3))
    current = patch_a
    merged = []
    for stage in stages:
        residual_gt = None
        if gt is not None:
            residual_gt = canonical_matrix(gt @ np.linalg.inv(total)).reshape(-1, 9)[:, :8]
        r = free_to_matrix(np.asarray(stage(current, patch_b, residual_gt), dtype=np.float64))
        total = canonical_matrix(r @ total)
        merged.append(total)
        current = warp_patch(patch_a, total)
    return merged


def hierarchical_prepare_stage_data(stage, ds: Dataset, images) -> Dataset:
    """Training data for the next stage, built offline from the current stage's predictions.

    ``ds.hbar`` holds the homography still to be estimated for the current
    stage's pairs; the original ground truth is recovered from ``ds.offsets``.
    For every record: predict, update the running estimate, warp image_a by
    it, re-crop at the record's rectangle and recompute the remaining target.
    """
    side = ds.side
    a, b, _ = ds.float_patches(None, np.float64)
    pred = free_to_matrix(np.asarray(stage(a, b, ds.hbar), dtype=np.float64))
    gt = free_to_matrix(np.stack([hbar_from_offsets(o, side) for o in ds.offsets]))
    remaining = free_to_matrix(ds.hbar)
    done = canonical_matrix(np.linalg.inv(remaining) @ gt)
    new_total = canonical_matrix(pred @ done)
    new_remaining = canonical_matrix(gt @ np.linalg.inv(new_total))
    out = Dataset(ds.patch_a.copy(), ds.patch_b.copy(), ds.patch_a_t.copy(),
                  new_remaining.reshape(-1, 9)[:, :8].copy(), ds.offsets.copy(), ds.rect.copy(),
                  ds.image_index.copy(), dict(ds.meta))
    for i in range(len(ds)):
        img = quantize(images[int(ds.image_index[i])])
        rect = tuple(int(v) for v in ds.rect[i])
        pa = quantize(_crop(warp_image(img, _image_frame(new_total[i], side, rect)), rect, side))
        out.patch_a[i] = to_u8(pa)
        out.patch_a_t[i] = to_u8(warp_patch(pa, new_remaining[i]))
    return out
