"""Training loops: single regressor, end-to-end sequence, step-by-step hierarchy."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..data import Dataset
from ..errors import (
    DegenerateHomography,
    DivergedTraining,
    EmptyCorpus,
    NonFiniteActivation,
    PointAtInfinity,
    SingularMatrix,
)
from ..geometry import free_to_matrix
from ..model import RegressorConfig, init_params, zero_grads
from .cascade import NetworkStage, hierarchical_prepare_stage_data
from .metrics import corner_errors
from .schedule import TrainConfig, lr_at, sgd_momentum_step
from .sequence import sequence_backward, sequence_forward, sequence_losses

log = logging.getLogger(__name__)

CURVE_COLUMNS = ("step", "lr", "loss", "l2", "l1", "batch_corner_error_px")


@dataclass
class TrainResult:
    stages: list
    curve: list = field(default_factory=list)

    @property
    def initial_loss(self) -> float:
        return self.curve[0][2]

    @property
    def final_loss(self) -> float:
        return self.curve[-1][2]

    def curve_csv(self) -> str:
        rows = [",".join(CURVE_COLUMNS)]
        rows += [",".join(repr(v) for v in r) for r in self.curve]
        return "\n".join(rows) + "\n"


def _seeds(seed: int, k: int):
    ss = np.random.SeedSequence(seed)
    shuffle, dropout, init = ss.spawn(3)
    init_seeds = [int(s.generate_state(1)[0]) for s in init.spawn(k)]
    return np.random.default_rng(shuffle), np.random.default_rng(dropout), init_seeds


def _target_mask(ds: Dataset, cfg: TrainConfig, rng_seed: int) -> np.ndarray:
    mask = ds.has_target()
    if cfg.withhold_fraction > 0:
        rng = np.random.default_rng(np.random.SeedSequence([rng_seed, 0x5E31]))
        drop = rng.permutation(len(ds))[: int(round(cfg.withhold_fraction * len(ds)))]
        mask = mask.copy()
        mask[drop] = False
    return mask


def train_sequence(ds: Dataset, cfg: TrainConfig, model_cfg: RegressorConfig, k: int = 1,
                   init=None, log_every: int = 0) -> TrainResult:
    """Train ``k`` chained regressors end to end with momentum SGD.

    Every stage's merged homography gets an L2 loss against the ground truth
    and every stage's warped patch an L1 loss against patch_a_t; the batch
    loss is their sum. Sequential and bit-reproducible for a fixed seed.
    ``init`` optionally supplies starting parameters per stage.
    """
    if len(ds) == 0:
        raise EmptyCorpus("empty training set")
    if k < 1:
        raise ValueError("need at least one stage")
    if ds.side != model_cfg.side:
        raise ValueError(f"dataset patches are {ds.side} px, model expects {model_cfg.side}")
    dtype = np.dtype(cfg.dtype).type
    shuffle_rng, dropout_rng, init_seeds = _seeds(cfg.seed, k)
    if init is None:
        stages = [init_params(model_cfg, s, dtype) for s in init_seeds]
    else:
        stages = [p.astype(dtype) for p in init]
    has_target = _target_mask(ds, cfg, cfg.seed)

    n = len(ds)
    bs = min(cfg.batch_size, n)
    order = shuffle_rng.permutation(n)
    pos = 0
    result = TrainResult(stages)
    for step in range(1, cfg.steps + 1):
        if pos + bs > n:
            order = shuffle_rng.permutation(n)
            pos = 0
        idx = np.sort(order[pos:pos + bs])
        pos += bs
        a, b, at = ds.float_patches(idx, np.float64)
        try:
            out = sequence_forward(stages, a, b, train=True, rng=dropout_rng)
        except (NonFiniteActivation, DegenerateHomography, PointAtInfinity, SingularMatrix,
                np.linalg.LinAlgError) as exc:
            raise DivergedTraining(f"step {step}: {exc}") from exc
        losses, gm, gw = sequence_losses(out, at, ds.hbar[idx], has_target[idx], cfg.w2, cfg.w1)
        if not np.isfinite(losses.total):
            raise DivergedTraining(f"non-finite loss at step {step}")
        for p in stages:
            zero_grads(p)
        sequence_backward(stages, out, a, gm, gw)
        lr = lr_at(step, cfg)
        for p in stages:
            sgd_momentum_step(p.values, p.grads, p.velocity, lr, cfg.momentum)
            p.bump()
        sup = has_target[idx]
        err = float(np.mean(corner_errors(out.merged[-1][sup], free_to_matrix(ds.hbar[idx][sup]),
                                          ds.side))) if sup.any() else float("nan")
        result.curve.append((step, lr, losses.total, losses.l2, losses.l1, err))
        if log_every and step % log_every == 0:
            log.info("step %d lr %.5f loss %.5f err %.3f px", step, lr, losses.total, err)
    return result


def train_single(ds: Dataset, cfg: TrainConfig, model_cfg: RegressorConfig, init=None,
                 log_every: int = 0) -> TrainResult:
    """One regressor trained on L2 + L1 supervision (the one-stage cascade)."""
    return train_sequence(ds, cfg, model_cfg, k=1, init=init, log_every=log_every)


@dataclass
class HierarchicalResult:
    stages: list
    results: list
    datasets: list   # training set seen by each stage


def train_hierarchical(ds: Dataset, images, cfg: TrainConfig, model_cfg: RegressorConfig,
                       k: int = 3, log_every: int = 0) -> HierarchicalResult:
    """Step-by-step training: stage ``i`` trains on data prepared offline from stage ``i-1``.

    Stage ``i`` uses seed ``cfg.seed + i`` so stage 0 matches :func:`train_single`.
    """
    stages, results, datasets = [], [], [ds]
    current = ds
    for i in range(k):
        run = TrainConfig(**{**cfg.as_dict(), "seed": cfg.seed + i})
        res = train_single(current, run, model_cfg, log_every=log_every)
        stages.append(res.stages[0])
        results.append(res)
        if i + 1 < k:
            current = hierarchical_prepare_stage_data(NetworkStage(res.stages[0]), current, images)
            datasets.append(current)
    return HierarchicalResult(stages, results, datasets)
