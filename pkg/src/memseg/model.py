"""Full segmentation model: backbone, context paths, fusion, classification.

The forward pass wires backbone features through the memory-based context
aggregation (plus an optional within-image slot), fuses, classifies, and
upsamples back to input resolution. A baseline variant skips the memory path
entirely so the two can be compared under shared seeds.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import numerics as nm
from .aggregation import (
    AttentionParams,
    FusionWeights,
    Head,
    WeightMap,
    coarse_aggregate,
    fused_channels,
    predict_weights,
    refine_context_with_attention,
)
from .memory import FeatureMemory
from .numerics import Parameter, Tensor

STRIDE_CHOICES = (1, 2, 8)


@dataclass
class ModelConfig:
    in_channels: int = 3
    num_classes: int = 5
    dim: int = 16                       # representation width C, must be even
    backbone_widths: tuple = (16,)      # hidden conv widths before the C-wide output block
    stride: int = 1
    fusion_mode: str = "concat"
    within_image: str = "off"           # off | global-pool
    use_memory: bool = True
    head_hidden: int | None = None
    precision: int = 64                 # 32 or 64
    seed: int = 0

    def __post_init__(self):
        if self.stride not in STRIDE_CHOICES:
            raise ValueError(f"stride must be one of {STRIDE_CHOICES}, got {self.stride}")
        if self.dim % 2 != 0:
            raise ValueError(f"dim must be even, got {self.dim}")
        if self.within_image not in ("off", "global-pool"):
            raise ValueError(f"unknown within_image mode {self.within_image!r}")
        if self.precision not in (32, 64):
            raise ValueError(f"precision must be 32 or 64, got {self.precision}")

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64


def _block_strides(total: int, n_blocks: int) -> list[int]:
    strides = [1] * n_blocks
    remaining = total
    i = 0
    while remaining > 1:
        if i >= n_blocks:
            raise ValueError(f"stride {total} needs more than {n_blocks} conv blocks")
        strides[i] = 2
        remaining //= 2
        i += 1
    return strides


class Backbone:
    """Stack of 3×3 conv + rectifier blocks; overall stride split into 2× steps."""

    def __init__(self, in_channels: int, widths, out_dim: int, stride: int,
                 rng: np.random.Generator, dtype):
        channels = [in_channels, *widths, out_dim]
        n_blocks = len(channels) - 1
        self.stride = stride
        self.block_strides = _block_strides(stride, n_blocks)
        self.weights: list[Parameter] = []
        self.biases: list[Parameter] = []
        for cin, cout in zip(channels[:-1], channels[1:]):
            scale = math.sqrt(2.0 / (cin * 9))
            self.weights.append(
                Parameter((rng.standard_normal((cout, cin, 3, 3)) * scale).astype(dtype))
            )
            self.biases.append(Parameter(np.zeros(cout, dtype=dtype)))

    def parameters(self) -> list[Parameter]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def forward(self, image: Tensor) -> Tensor:
        h, w = image.shape[1], image.shape[2]
        if h % self.stride or w % self.stride:
            raise ValueError(f"input {h}×{w} not divisible by stride {self.stride}")
        x = image
        for wgt, bias, s in zip(self.weights, self.biases, self.block_strides):
            x = nm.relu(nm.conv3x3(x, wgt, bias, stride=s))
        return x


class SegModel:
    """Backbone + optional within-image context + memory context + classifier."""

    def __init__(self, cfg: ModelConfig, memory: FeatureMemory | None = None):
        self.cfg = cfg
        dtype = cfg.dtype
        root = np.random.SeedSequence([cfg.seed, 0x6D6F64])
        keys = root.spawn(6)
        self.backbone = Backbone(
            cfg.in_channels, cfg.backbone_widths, cfg.dim, cfg.stride,
            np.random.default_rng(keys[0]), dtype,
        )
        with_wi = cfg.within_image != "off"
        n_inputs = 1 + (1 if cfg.use_memory else 0) + (1 if with_wi else 0)
        self.head2_in = fused_channels_for(cfg.dim, cfg.fusion_mode, n_inputs)
        self.head2 = Head(self.head2_in, cfg.num_classes, cfg.head_hidden,
                          np.random.default_rng(keys[1]), dtype)
        self.head1 = None
        self.attn = None
        self.fusion_weights = None
        if cfg.use_memory:
            self.head1 = Head(cfg.dim, cfg.num_classes, cfg.head_hidden,
                              np.random.default_rng(keys[2]), dtype)
            self.attn = AttentionParams(cfg.dim, np.random.default_rng(keys[3]), dtype)
        if cfg.fusion_mode == "weighted_add" and n_inputs > 1:
            self.fusion_weights = FusionWeights(cfg.dim, n_inputs,
                                                np.random.default_rng(keys[4]), dtype)
        self.wi_w = self.wi_b = None
        if with_wi:
            rng = np.random.default_rng(keys[5])
            scale = math.sqrt(2.0 / cfg.dim)
            self.wi_w = Parameter((rng.standard_normal((cfg.dim, cfg.dim)) * scale).astype(dtype))
            self.wi_b = Parameter(np.zeros(cfg.dim, dtype=dtype))
        self.memory = memory

    # -- parameter bookkeeping ------------------------------------------------

    def named_parameters(self) -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for i, (w, b) in enumerate(zip(self.backbone.weights, self.backbone.biases)):
            out[f"backbone.{i}.w"] = w
            out[f"backbone.{i}.b"] = b
        for name, p in zip(("w1", "b1", "w2", "b2"), self.head2.parameters()):
            out[f"head2.{name}"] = p
        if self.head1 is not None:
            for name, p in zip(("w1", "b1", "w2", "b2"), self.head1.parameters()):
                out[f"head1.{name}"] = p
        if self.attn is not None:
            names = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")
            for name, p in zip(names, self.attn.parameters()):
                out[f"attn.{name}"] = p
        if self.fusion_weights is not None:
            out["fusion.w"], out["fusion.b"] = self.fusion_weights.parameters()
        if self.wi_w is not None:
            out["within.w"], out["within.b"] = self.wi_w, self.wi_b
        return out

    def parameters(self) -> list[Parameter]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    # -- forward passes -------------------------------------------------------

    def within_image_context(self, r: Tensor) -> Tensor:
        """Global average vector broadcast back, through a 1×1 affine map."""
        if self.wi_w is None:
            raise RuntimeError("within-image context is disabled for this model")
        pooled = nm.spatial_mean(r)
        grid = nm.broadcast_map(pooled, r.shape[1], r.shape[2])
        return nm.affine_1x1(grid, self.wi_w, self.wi_b)

    def _fuse_maps(self, parts: list[Tensor]) -> Tensor:
        mode = self.cfg.fusion_mode
        if len(parts) == 1:
            return parts[0]
        if mode == "add":
            out = parts[0]
            for p in parts[1:]:
                out = nm.add(out, p)
            return out
        if mode == "concat":
            return nm.concat_channels(parts)
        if mode == "weighted_add":
            stacked = nm.concat_channels(parts)
            gates = nm.affine_1x1(stacked, self.fusion_weights.w, self.fusion_weights.b)
            mixed = nm.mul(stacked, gates)
            c = parts[0].shape[0]
            total = None
            for i in range(len(parts)):
                piece = _slice_channels(mixed, i * c, (i + 1) * c)
                total = piece if total is None else nm.add(total, piece)
            return total
        raise ValueError(f"unknown fusion mode {mode!r}")

    def forward_full(self, image: Tensor, with_memory_predictions: bool = False) -> dict:
        """End-to-end forward; returns the weight map, output map, and extras."""
        if self.memory is None or self.head1 is None:
            raise RuntimeError("forward_full requires the memory path; use forward_baseline")
        r = self.backbone.forward(image)
        w = predict_weights(r, self.head1)
        mem_const = Parameter(self.memory.values.astype(self.cfg.dtype), trainable=False)
        coarse = coarse_aggregate(w, mem_const)
        c_bi, attn_probs = refine_context_with_attention(r, coarse, self.attn)
        parts = [r, c_bi]
        if self.wi_w is not None:
            parts.append(self.within_image_context(r))
        r_aug = self._fuse_maps(parts)
        o = self.head2.apply_map(r_aug)
        if self.cfg.stride > 1:
            o = nm.upsample(o, self.cfg.stride, mode="bilinear")
        o_mem = None
        if with_memory_predictions:
            o_mem = self.predict_memory_rows(mem_const)
        return {
            "r": r,
            "w": w,
            "coarse": coarse,
            "c_bi": c_bi,
            "attn_probs": attn_probs,
            "o": o,
            "o_mem": o_mem,
            "memory_param": mem_const,
        }

    def predict_memory_rows(self, mem_const: Parameter | None = None) -> Tensor:
        """Classify each memory row with the shared output head (no grad to memory)."""
        if mem_const is None:
            mem_const = Parameter(self.memory.values.astype(self.cfg.dtype), trainable=False)
        # a memory row is its own context, so it occupies every fusion slot
        slots = 1 + (1 if self.cfg.use_memory else 0) + (1 if self.wi_w is not None else 0)
        fused = self._fuse_rows([mem_const] * slots)
        return self.head2.apply_rows(fused)

    def _fuse_rows(self, parts: list[Tensor]) -> Tensor:
        mode = self.cfg.fusion_mode
        if len(parts) == 1:
            return parts[0]
        if mode == "add":
            out = parts[0]
            for p in parts[1:]:
                out = nm.add(out, p)
            return out
        if mode == "concat":
            return _concat_cols(parts)
        if mode == "weighted_add":
            stacked = _concat_cols(parts)
            gates = nm.linear_rows(stacked, self.fusion_weights.w, self.fusion_weights.b)
            mixed = nm.mul(stacked, gates)
            c = parts[0].shape[1]
            total = None
            for i in range(len(parts)):
                piece = _slice_cols(mixed, i * c, (i + 1) * c)
                total = piece if total is None else nm.add(total, piece)
            return total
        raise ValueError(f"unknown fusion mode {mode!r}")

    def forward_baseline(self, image: Tensor) -> dict:
        """Memory-free forward: backbone, optional within-image context, classify."""
        r = self.backbone.forward(image)
        parts = [r]
        if self.wi_w is not None:
            parts.append(self.within_image_context(r))
        r_aug = self._fuse_maps(parts)
        o = self.head2.apply_map(r_aug)
        if self.cfg.stride > 1:
            o = nm.upsample(o, self.cfg.stride, mode="bilinear")
        return {"r": r, "o": o}

    def forward(self, image: Tensor, with_memory_predictions: bool = False) -> dict:
        if self.cfg.use_memory:
            return self.forward_full(image, with_memory_predictions)
        return self.forward_baseline(image)


def fused_channels_for(dim: int, mode: str, n_inputs: int) -> int:
    if n_inputs == 1:
        return dim
    if mode == "concat":
        return n_inputs * dim
    return fused_channels(dim, mode, with_within=(n_inputs == 3))


def _slice_channels(x: Tensor, lo: int, hi: int) -> Tensor:
    out = Tensor(x.data[lo:hi].copy(), (x,))

    def bwd(g):
        full = np.zeros_like(x.data)
        full[lo:hi] = g
        x._accumulate(full)

    out._backward = bwd
    return out


def _slice_cols(x: Tensor, lo: int, hi: int) -> Tensor:
    out = Tensor(x.data[:, lo:hi].copy(), (x,))

    def bwd(g):
        full = np.zeros_like(x.data)
        full[:, lo:hi] = g
        x._accumulate(full)

    out._backward = bwd
    return out


def _concat_cols(parts: list[Tensor]) -> Tensor:
    out = Tensor(np.concatenate([p.data for p in parts], axis=1), tuple(parts))
    splits = np.cumsum([p.shape[1] for p in parts])[:-1]

    def bwd(g):
        for p, piece in zip(parts, np.split(g, splits, axis=1)):
            p._accumulate(piece)

    out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# checkpointing


def config_hash(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(path: str, model: SegModel, extra: dict | None = None) -> None:
    """All parameters plus memory as concatenated MCT1 tensors; JSON sidecar
    maps tensor names to byte offsets and carries run metadata."""
    manifest: dict[str, int] = {}
    with open(path, "wb") as fh:
        for name, p in model.named_parameters().items():
            manifest[name] = fh.tell()
            nm.write_tensor(fh, p.data)
        if model.memory is not None:
            manifest["memory.values"] = fh.tell()
            nm.write_tensor(fh, model.memory.values.astype(np.float64))
    meta = {
        "manifest": manifest,
        "model_config": asdict(model.cfg),
        "memory_update_count": model.memory.update_count if model.memory else 0,
        "config_hash": config_hash(asdict(model.cfg)),
        "extra": extra or {},
    }
    with open(path + ".json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def load_checkpoint(path: str) -> tuple[SegModel, dict]:
    with open(path + ".json") as fh:
        meta = json.load(fh)
    cfg_dict = dict(meta["model_config"])
    cfg_dict["backbone_widths"] = tuple(cfg_dict["backbone_widths"])
    cfg = ModelConfig(**cfg_dict)
    model = SegModel(cfg)
    with open(path, "rb") as fh:
        for name, p in model.named_parameters().items():
            fh.seek(meta["manifest"][name])
            p.data = nm.read_tensor(fh).astype(cfg.dtype)
            p.zero_grad()
        if "memory.values" in meta["manifest"]:
            fh.seek(meta["manifest"]["memory.values"])
            model.memory = FeatureMemory(
                values=nm.read_tensor(fh),
                update_count=meta["memory_update_count"],
            )
    return model, meta.get("extra", {})
