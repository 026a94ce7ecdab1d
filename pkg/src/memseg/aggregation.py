"""Dataset-level context aggregation and feature fusion.

Per pixel: predict class probabilities, mix memory rows by them (coarse
context), refine the mixture with scaled dot-product attention against the
pixel features, then fuse the context back into the feature map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import Parameter, Tensor

FUSION_MODES = ("add", "weighted_add", "concat")


def _init_linear(rng: np.random.Generator, fan_out: int, fan_in: int, dtype):
    scale = math.sqrt(2.0 / fan_in)
    w = Parameter((rng.standard_normal((fan_out, fan_in)) * scale).astype(dtype))
    b = Parameter(np.zeros(fan_out, dtype=dtype))
    return w, b


class Head:
    """Two 1×1 affine layers with a rectifier between, softmax over classes."""

    def __init__(self, in_dim: int, num_classes: int, hidden: int | None = None,
                 rng: np.random.Generator | None = None, dtype=np.float64):
        rng = rng or np.random.default_rng(0)
        hidden = hidden or in_dim
        self.in_dim = in_dim
        self.num_classes = num_classes
        self.w1, self.b1 = _init_linear(rng, hidden, in_dim, dtype)
        self.w2, self.b2 = _init_linear(rng, num_classes, hidden, dtype)

    def parameters(self) -> list[Parameter]:
        return [self.w1, self.b1, self.w2, self.b2]

    def apply_map(self, x: Tensor) -> Tensor:
        """C×h×w -> K×h×w probability map."""
        h = nm.relu(nm.affine_1x1(x, self.w1, self.b1))
        return nm.softmax(nm.affine_1x1(h, self.w2, self.b2), axis=0)

    def apply_rows(self, x: Tensor) -> Tensor:
        """N×C rows -> N×K probability rows (shared weights with apply_map)."""
        h = nm.relu(nm.linear_rows(x, self.w1, self.b1))
        return nm.softmax(nm.linear_rows(h, self.w2, self.b2), axis=1)


class AttentionParams:
    """Projections for the context-refinement attention; C must be even."""

    def __init__(self, dim: int, rng: np.random.Generator | None = None, dtype=np.float64):
        if dim % 2 != 0:
            raise ValueError(f"representation dimension must be even, got {dim}")
        rng = rng or np.random.default_rng(0)
        self.dim = dim
        half = dim // 2
        self.wq, self.bq = _init_linear(rng, half, dim, dtype)
        self.wk, self.bk = _init_linear(rng, half, dim, dtype)
        self.wv, self.bv = _init_linear(rng, half, dim, dtype)
        self.wo, self.bo = _init_linear(rng, dim, half, dtype)

    def parameters(self) -> list[Parameter]:
        return [self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo]


@dataclass
class WeightMap:
    """K×h×w per-position class probabilities."""

    probs: Tensor

    def __post_init__(self):
        sums = self.probs.data.sum(axis=0)
        if not np.allclose(sums, 1.0, atol=1e-6) or (self.probs.data < 0).any():
            raise ValueError("weight map positions must be probability vectors")


def predict_weights(r: Tensor, head: Head) -> WeightMap:
    """Per-pixel class probabilities from the feature map."""
    if r.shape[0] != head.in_dim:
        raise nm.DimensionError(
            f"feature channels {r.shape[0]} vs head input width {head.in_dim}"
        )
    return WeightMap(probs=head.apply_map(r))


def coarse_aggregate(w: WeightMap, memory_values: Tensor) -> Tensor:
    """(h·w)×C coarse context: probability-weighted mixture of memory rows."""
    k, h, wd = w.probs.shape
    if memory_values.shape[0] != k:
        raise nm.DimensionError(
            f"weight classes {k} vs memory rows {memory_values.shape[0]}"
        )
    flat = nm.transpose2d(nm.reshape(w.probs, (k, h * wd)))  # (h·w)×K
    return nm.matmul(flat, memory_values)


def refine_context(r: Tensor, coarse: Tensor, params: AttentionParams) -> Tensor:
    """Attend pixel queries over the coarse context rows; output C×h×w."""
    out, _ = refine_context_with_attention(r, coarse, params)
    return out


def refine_context_with_attention(
    r: Tensor, coarse: Tensor, params: AttentionParams
) -> tuple[Tensor, Tensor]:
    """refine_context plus the (h·w)×(h·w) attention probabilities."""
    c, h, w = r.shape
    if c != params.dim or coarse.shape[1] != c:
        raise nm.DimensionError(
            f"feature dim {c} vs attention dim {params.dim} / coarse {coarse.shape}"
        )
    r_flat = nm.transpose2d(nm.reshape(r, (c, h * w)))  # (h·w)×C
    q = nm.linear_rows(r_flat, params.wq, params.bq)
    k = nm.linear_rows(coarse, params.wk, params.bk)
    v = nm.linear_rows(coarse, params.wv, params.bv)
    logits = nm.scale(nm.matmul(q, nm.transpose2d(k)), 1.0 / math.sqrt(c / 2))
    attn = nm.softmax(logits, axis=1)
    refined = nm.linear_rows(nm.matmul(attn, v), params.wo, params.bo)  # (h·w)×C
    return nm.reshape(nm.transpose2d(refined), (c, h, w)), attn


class FusionWeights:
    """1×1 affine map predicting per-channel mixing weights for weighted_add."""

    def __init__(self, dim: int, n_inputs: int, rng: np.random.Generator | None = None,
                 dtype=np.float64):
        rng = rng or np.random.default_rng(0)
        self.n_inputs = n_inputs
        self.w, self.b = _init_linear(rng, n_inputs * dim, n_inputs * dim, dtype)

    def parameters(self) -> list[Parameter]:
        return [self.w, self.b]


def fuse(
    r: Tensor,
    c_bi: Tensor,
    c_wi: Tensor | None = None,
    mode: str = "concat",
    weights: FusionWeights | None = None,
) -> Tensor:
    """Combine features with beyond-image (and optional within-image) context.

    add: elementwise sum. weighted_add: sum scaled per channel by weights a
    1×1 affine map predicts from the concatenated inputs. concat: channel
    concatenation (2C or 3C output channels).
    """
    parts = [r, c_bi] + ([c_wi] if c_wi is not None else [])
    for p in parts[1:]:
        if p.shape != r.shape:
            raise nm.DimensionError(f"fuse: shapes {r.shape} vs {p.shape}")
    if mode == "add":
        out = nm.add(r, c_bi)
        return nm.add(out, c_wi) if c_wi is not None else out
    if mode == "concat":
        return nm.concat_channels(parts)
    if mode == "weighted_add":
        if weights is None or weights.n_inputs != len(parts):
            raise ValueError("weighted_add requires matching FusionWeights")
        stacked = nm.concat_channels(parts)
        gates = nm.affine_1x1(stacked, weights.w, weights.b)
        mixed = nm.mul(stacked, gates)
        c = r.shape[0]
        # slice the gated stack back into per-input maps and sum them
        total = None
        for i in range(len(parts)):
            piece = _slice_channels(mixed, i * c, (i + 1) * c)
            total = piece if total is None else nm.add(total, piece)
        return total
    raise ValueError(f"unknown fusion mode {mode!r}")


def _slice_channels(x: Tensor, lo: int, hi: int) -> Tensor:
    out = Tensor(x.data[lo:hi].copy(), (x,))

    def bwd(g):
        full = np.zeros_like(x.data)
        full[lo:hi] = g
        x._accumulate(full)

    out._backward = bwd
    return out


def fused_channels(dim: int, mode: str, with_within: bool) -> int:
    """Channel width of the fused representation for a fusion mode."""
    n = 3 if with_within else 2
    if mode == "concat":
        return n * dim
    if mode in ("add", "weighted_add"):
        return dim
    raise ValueError(f"unknown fusion mode {mode!r}")
