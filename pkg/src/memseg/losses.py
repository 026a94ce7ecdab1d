"""The three loss terms and their weighted sum.

All classification heads emit softmax probabilities, so the cross entropies
here consume probability maps directly (clamped before the log).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .aggregation import WeightMap
from .memory import IGNORE_LABEL
from .numerics import Tensor


@dataclass
class LossWeights:
    alpha: float = 0.4
    beta: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.alpha) and np.isfinite(self.beta)):
            raise ValueError("loss weights must be finite")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be nonnegative")


def loss_weight_map(w: WeightMap, gt: np.ndarray, stride: int = 1) -> Tensor:
    """Cross entropy of the per-pixel class weights against ground truth.

    The weight map lives at feature resolution; it is upsampled by the
    backbone stride to meet the full-resolution labels.
    """
    probs = w.probs if stride == 1 else nm.upsample(w.probs, stride, mode="bilinear")
    if probs.shape[1:] != gt.shape:
        raise nm.DimensionError(
            f"upsampled weights {probs.shape[1:]} vs labels {gt.shape}"
        )
    return nm.cross_entropy_map(probs, gt, ignore_label=IGNORE_LABEL)


def loss_memory_rows(o_mem: Tensor) -> Tensor:
    """Each memory row must be classified as its own class: mean CE over rows."""
    k = o_mem.shape[0]
    if o_mem.shape != (k, k) or k < 2:
        raise nm.DimensionError(f"memory predictions must be K×K with K>=2, got {o_mem.shape}")
    return nm.cross_entropy_rows(o_mem, np.arange(k))


def loss_output_map(o: Tensor, gt: np.ndarray) -> Tensor:
    """Full-resolution per-pixel cross entropy of the final prediction."""
    if o.shape[1:] != gt.shape:
        raise nm.DimensionError(f"output {o.shape[1:]} vs labels {gt.shape}")
    return nm.cross_entropy_map(o, gt, ignore_label=IGNORE_LABEL)


def total_loss(lw: Tensor, lm: Tensor | None, lo: Tensor, weights: LossWeights) -> Tensor:
    """alpha·lw + beta·lm + lo; lm omitted when consistency learning is off."""
    out = nm.add(nm.scale(lw, weights.alpha), lo)
    if lm is not None and weights.beta != 0:
        out = nm.add(out, nm.scale(lm, weights.beta))
    return out
