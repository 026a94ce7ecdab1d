"""Feature memory: per-class dataset-level representations.

The memory is a K×C matrix holding one composite vector per class. It is
never touched by gradient descent; it changes only through the moving-average
update, driven by class composites distilled from each iteration's features.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

IGNORE_LABEL = 255


@dataclass
class MomentumSchedule:
    """Polynomially annealed mixing coefficient for the memory update.

    m(t) = (1 - t/T)^p * (m0 - m0/100) + m0/100, strictly decreasing from
    m0 at t=0 to m0/100 at t=T.
    """

    m0: float = 0.9
    p: float = 0.9
    total_iters: int = 1

    def __post_init__(self):
        if not 0.0 < self.m0 < 1.0:
            raise ValueError(f"m0 must be in (0,1), got {self.m0}")
        if self.p <= 0:
            raise ValueError(f"p must be positive, got {self.p}")
        if self.total_iters < 1:
            raise ValueError(f"total_iters must be >= 1, got {self.total_iters}")


def momentum_at(schedule: MomentumSchedule, t: int) -> float:
    if not 0 <= t <= schedule.total_iters:
        raise ValueError(f"iteration {t} outside [0, {schedule.total_iters}]")
    floor = schedule.m0 / 100.0
    return (1.0 - t / schedule.total_iters) ** schedule.p * (schedule.m0 - floor) + floor


@dataclass
class FeatureMemory:
    """K×C store of dataset-level class representations."""

    values: np.ndarray
    update_count: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise ValueError(f"memory must be K×C, got shape {self.values.shape}")

    @property
    def num_classes(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def snapshot(self) -> np.ndarray:
        return self.values.copy()


def class_update_vector(reps: np.ndarray, memory_row: np.ndarray) -> np.ndarray:
    """Composite of one class's pixel representations, dissimilar pixels first.

    Weighs each representation by (1 - cosine similarity to the memory row),
    normalized over the class. If every representation is cosine-identical to
    the memory row, falls back to the unweighted mean.
    """
    reps = np.atleast_2d(reps)
    row_norm = np.linalg.norm(memory_row)
    if row_norm == 0:
        raise ValueError("memory row has zero norm")
    rep_norms = np.linalg.norm(reps, axis=1)
    sims = np.zeros(len(reps), dtype=reps.dtype)
    nz = rep_norms > 0
    sims[nz] = (reps[nz] @ memory_row) / (rep_norms[nz] * row_norm)
    dissim = 1.0 - sims
    total = dissim.sum()
    if total <= 1e-12 * len(reps):  # all pixels cosine-identical to the row
        return reps.mean(axis=0)
    return (dissim / total) @ reps


def transform_composites(
    feats: np.ndarray,
    labels: np.ndarray,
    memory: FeatureMemory,
    use_cosine: bool = True,
) -> np.ndarray:
    """Distill (H·W)×C features into a K×C composite matrix.

    Starts from a copy of the memory; each class present in ``labels`` gets
    its row replaced by the cosine-weighted composite of that class's pixels
    (plain mean when ``use_cosine`` is off). Absent classes keep their rows;
    ignore-labeled pixels are skipped.
    """
    if feats.shape[0] != labels.shape[0]:
        raise ValueError(
            f"feature rows {feats.shape[0]} vs label count {labels.shape[0]}"
        )
    out = memory.snapshot()
    for k in np.unique(labels):
        if k == IGNORE_LABEL:
            continue
        class_feats = feats[labels == k]
        if use_cosine:
            out[k] = class_update_vector(class_feats, memory.values[k])
        else:
            out[k] = class_feats.mean(axis=0)
    return out


def update_memory(memory: FeatureMemory, composites: np.ndarray, m_t: float) -> None:
    """Moving-average update in place: values <- (1-m)·values + m·composites."""
    if not 0.0 < m_t < 1.0:
        raise ValueError(f"momentum must be in (0,1), got {m_t}")
    if composites.shape != memory.values.shape:
        raise ValueError(
            f"composite shape {composites.shape} vs memory {memory.values.shape}"
        )
    memory.values = (1.0 - m_t) * memory.values + m_t * composites
    memory.update_count += 1


def init_memory(
    samples,
    feature_fn,
    num_classes: int,
    mode: str = "random-pixel",
    seed: int = 0,
) -> FeatureMemory:
    """Build the initial memory from untrained features of a sample stream.

    random-pixel: one uniformly chosen pixel representation per class.
    clustering: cosine-weighted centroid of all collected pixels of the class,
    anchored at their plain mean.
    Classes never observed get a seeded unit-variance random row plus a warning.
    """
    if mode not in ("random-pixel", "clustering"):
        raise ValueError(f"unknown init mode {mode!r}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6D656D]))
    per_class: list[list[np.ndarray]] = [[] for _ in range(num_classes)]
    dim = None
    for sample in samples:
        feats, labels = feature_fn(sample)  # (H·W)×C rows plus flat labels
        dim = feats.shape[1]
        for k in range(num_classes):
            mask = labels == k
            if mask.any():
                per_class[k].append(feats[mask])
    if dim is None:
        raise ValueError("empty sample stream")
    rows = np.empty((num_classes, dim), dtype=np.float64)
    for k in range(num_classes):
        if not per_class[k]:
            warnings.warn(f"class {k} absent from init stream; using random row")
            rows[k] = rng.standard_normal(dim)
            continue
        pool = np.concatenate(per_class[k], axis=0)
        if mode == "random-pixel":
            rows[k] = pool[rng.integers(len(pool))]
        else:
            anchor = pool.mean(axis=0)
            if np.linalg.norm(anchor) == 0:
                rows[k] = anchor
            else:
                rows[k] = class_update_vector(pool, anchor)
    return FeatureMemory(values=rows)


def dump_memory_csv(memory: FeatureMemory, values_path, similarity_path) -> None:
    """CSV dumps: one row per class, plus the K×K pairwise cosine matrix."""
    with open(values_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class"] + [f"c{i}" for i in range(memory.dim)])
        for k, row in enumerate(memory.values):
            writer.writerow([k] + [repr(float(v)) for v in row])
    norms = np.linalg.norm(memory.values, axis=1)
    norms = np.where(norms == 0, 1.0, norms)
    cos = (memory.values @ memory.values.T) / np.outer(norms, norms)
    with open(similarity_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class"] + [str(k) for k in range(memory.num_classes)])
        for k, row in enumerate(cos):
            writer.writerow([k] + [repr(float(v)) for v in row])
