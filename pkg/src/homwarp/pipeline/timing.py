"""Latency model for the hierarchical cascade: ``d_e = (l_m + l_w) * n``."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .cascade import _crop, hierarchical_infer, stage_advance, stage_estimate

# Published GPU latencies (ms) for 1, 2 and 3 stages; labelled metadata, never measured here.
REFERENCE_GPU_MS = {1: 4.87, 2: 11.46, 3: 17.85}


@dataclass
class TimingReport:
    l_m: float          # median model latency per stage, seconds
    l_w: float          # median per-stage overhead outside the model (compose, warp, crop), seconds
    n: int
    d_e_measured: float  # median end-to-end latency, seconds
    reps: int

    @property
    def d_e_model(self) -> float:
        return (self.l_m + self.l_w) * self.n

    @property
    def relative_gap(self) -> float:
        return abs(self.d_e_model - self.d_e_measured) / self.d_e_measured

    def text(self) -> str:
        ref = REFERENCE_GPU_MS.get(self.n)
        lines = [
            f"stages n            : {self.n}",
            f"repetitions         : {self.reps}",
            f"l_m (model, median) : {self.l_m * 1e3:.3f} ms",
            f"l_w (warp, median)  : {self.l_w * 1e3:.3f} ms",
            f"d_e modeled         : {self.d_e_model * 1e3:.3f} ms",
            f"d_e measured        : {self.d_e_measured * 1e3:.3f} ms",
            f"model/measured gap  : {100 * self.relative_gap:.1f} %",
        ]
        if ref is not None:
            lines.append(f"published GPU figure (reference only, not a measurement): {ref} ms")
        return "\n".join(lines) + "\n"

    def csv(self) -> str:
        ref = REFERENCE_GPU_MS.get(self.n, "")
        return ("n,reps,l_m_s,l_w_s,d_e_model_s,d_e_measured_s,reference_gpu_ms\n"
                f"{self.n},{self.reps},{self.l_m!r},{self.l_w!r},{self.d_e_model!r},"
                f"{self.d_e_measured!r},{ref}\n")


def _interleaved_medians(fns, reps: int) -> list:
    """Median wall time of each callable, timed round-robin so drift hits all of them alike."""
    for fn in fns:
        fn()
    samples = [[] for _ in fns]
    for _ in range(reps):
        for fn, acc in zip(fns, samples):
            t0 = time.perf_counter()
            fn()
            acc.append(time.perf_counter() - t0)
    return [float(np.median(acc)) for acc in samples]


def bench_timing(stage, image_a, patch_b, rect, n: int = 1, reps: int = 100) -> TimingReport:
    """Time one stage's model and warp separately, then the full ``n``-stage cascade.

    The same stage predictor is reused at every level of the cascade.
    """
    if reps < 10:
        raise ValueError("need at least 10 repetitions")
    side = patch_b.shape[-1]
    image_a = np.asarray(image_a, dtype=np.float64)
    patch_a = _crop(image_a, rect, side)
    r = stage_estimate(stage, patch_a, patch_b)

    stages = [stage] * n
    l_m, l_w, d_e = _interleaved_medians([
        lambda: stage_estimate(stage, patch_a, patch_b),
        lambda: stage_advance(image_a, np.eye(3), r, rect, side),
        lambda: hierarchical_infer(stages, image_a, patch_b, rect),
    ], reps)
    return TimingReport(l_m, l_w, n, d_e, reps)
