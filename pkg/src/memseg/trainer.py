"""Training loop: forward, multi-task loss, SGD, schedules, memory updates.

One control thread owns parameters and memory. Per iteration the order is
fixed: forward, loss, backward, SGD step, then the moving-average memory
update from that iteration's detached features.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, asdict, field

import numpy as np

from . import numerics as nm
from .losses import LossWeights, loss_memory_rows, loss_output_map, loss_weight_map, total_loss
from .memory import (
    IGNORE_LABEL,
    FeatureMemory,
    MomentumSchedule,
    init_memory,
    momentum_at,
    transform_composites,
    update_memory,
)
from .model import ModelConfig, SegModel, load_checkpoint, save_checkpoint
from .numerics import Tensor

CSV_HEADER = ["iter", "lr", "m_t", "loss_W", "loss_M", "loss_O", "total"]


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 8
    base_lr: float = 0.05
    poly_power: float = 0.9
    weight_decay: float = 1e-4
    alpha: float = 0.4
    beta: float = 1.0
    m0: float = 0.9
    momentum_power: float = 0.9
    fusion_mode: str = "concat"
    use_cosine: bool = True
    use_poly_schedule: bool = True
    clustering_init: bool = False
    use_rcl: bool = True
    use_within_image: bool = False
    seed: int = 0
    num_classes: int = 5
    dim: int = 16
    backbone_widths: tuple = ()
    stride: int = 1
    precision: int = 32
    head_hidden: int = 0        # 0 = same as dim
    checkpoint_every: int = 0   # 0 = final only
    val_fraction: float = 0.2

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")

    def model_config(self, in_channels: int, use_memory: bool = True) -> ModelConfig:
        return ModelConfig(
            in_channels=in_channels,
            num_classes=self.num_classes,
            dim=self.dim,
            backbone_widths=tuple(self.backbone_widths),
            stride=self.stride,
            fusion_mode=self.fusion_mode,
            within_image="global-pool" if self.use_within_image else "off",
            use_memory=use_memory,
            head_hidden=self.head_hidden or None,
            precision=self.precision,
            seed=self.seed,
        )


def poly_lr(base_lr: float, it: int, total: int, power: float = 0.9) -> float:
    if not 0 <= it <= total:
        raise ValueError(f"iteration {it} outside [0, {total}]")
    return base_lr * (1.0 - it / total) ** power


def downsample_labels(gt: np.ndarray, stride: int) -> np.ndarray:
    """Nearest-neighbor subsampling of the label map to feature resolution."""
    return gt if stride == 1 else gt[::stride, ::stride]


def sgd_step(model: SegModel, lr: float, weight_decay: float) -> None:
    for p in model.parameters():
        if p.trainable:
            p.data = p.data - lr * (p.grad + weight_decay * p.data)


def train_step(model: SegModel, batch, cfg: TrainConfig, t: int,
               schedule: MomentumSchedule, lr: float) -> dict:
    """One iteration: forward, loss, backward, SGD, then memory update."""
    model.zero_grad()
    dtype = model.cfg.dtype
    lw_terms: list[Tensor] = []
    lo_terms: list[Tensor] = []
    feats_rows = []
    label_rows = []
    memory_params = []
    for sample in batch:
        out = model.forward_full(Tensor(sample.image.astype(dtype)))
        memory_params.append(out["memory_param"])
        gt_small = downsample_labels(sample.gt, cfg.stride)
        lw_terms.append(loss_weight_map(out["w"], sample.gt, stride=cfg.stride))
        lo_terms.append(loss_output_map(out["o"], sample.gt))
        c = out["r"].shape[0]
        feats_rows.append(out["r"].data.reshape(c, -1).T.astype(np.float64))
        label_rows.append(gt_small.reshape(-1))
    lw = _mean(lw_terms)
    lo = _mean(lo_terms)
    lm = loss_memory_rows(model.predict_memory_rows()) if cfg.use_rcl else None
    weights = LossWeights(alpha=cfg.alpha, beta=cfg.beta if cfg.use_rcl else 0.0)
    total = total_loss(lw, lm, lo, weights)
    if not np.isfinite(total.data):
        raise FloatingPointError(
            f"non-finite loss at iteration {t}: "
            f"lw={lw.item()}, lm={lm.item() if lm else 0.0}, lo={lo.item()}"
        )
    total.backward()
    memory_grad_max = max(float(np.abs(p.grad).max()) for p in memory_params)
    sgd_step(model, lr, cfg.weight_decay)
    m_t = momentum_at(schedule, t) if cfg.use_poly_schedule else cfg.m0
    composites = transform_composites(
        np.concatenate(feats_rows, axis=0),
        np.concatenate(label_rows, axis=0),
        model.memory,
        use_cosine=cfg.use_cosine,
    )
    update_memory(model.memory, composites, m_t)
    return {
        "lr": lr,
        "m_t": m_t,
        "loss_W": lw.item(),
        "loss_M": lm.item() if lm is not None else 0.0,
        "loss_O": lo.item(),
        "total": total.item(),
        "memory_grad_max": memory_grad_max,
    }


def _mean(terms: list[Tensor]) -> Tensor:
    out = terms[0]
    for term in terms[1:]:
        out = nm.add(out, term)
    return nm.scale(out, 1.0 / len(terms))


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x657063, epoch]))
    return rng.permutation(n)


def build_model(cfg: TrainConfig, train_samples, use_memory: bool = True) -> SegModel:
    """Model plus (for the memory variant) an initialized feature memory."""
    in_channels = train_samples[0].image.shape[0]
    model = SegModel(cfg.model_config(in_channels, use_memory=use_memory))
    if use_memory:
        def feature_fn(sample):
            r = model.backbone.forward(Tensor(sample.image.astype(model.cfg.dtype)))
            c = r.shape[0]
            feats = r.data.reshape(c, -1).T.astype(np.float64)
            labels = downsample_labels(sample.gt, cfg.stride).reshape(-1)
            return feats, labels

        scan = train_samples[: min(len(train_samples), 64)]
        model.memory = init_memory(
            scan, feature_fn, cfg.num_classes,
            mode="clustering" if cfg.clustering_init else "random-pixel",
            seed=cfg.seed,
        )
    return model


def train(cfg: TrainConfig, train_samples, out_dir: str,
          resume_from: str | None = None, use_memory: bool = True,
          log_name: str = "metrics.csv", stop_after: int | None = None) -> SegModel:
    """Run the full schedule; writes per-iteration metrics CSV and checkpoints."""
    os.makedirs(out_dir, exist_ok=True)
    n = len(train_samples)
    if n == 0:
        raise ValueError("empty training set")
    iters_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    total_iters = max(1, iters_per_epoch * cfg.epochs)
    schedule = MomentumSchedule(m0=cfg.m0, p=cfg.momentum_power, total_iters=total_iters)
    start_iter = 0
    if resume_from is not None:
        model, extra = load_checkpoint(resume_from)
        start_iter = int(extra["iteration"])
    else:
        model = build_model(cfg, train_samples, use_memory=use_memory)
    ckpt_path = os.path.join(out_dir, "checkpoint.mct")
    csv_path = os.path.join(out_dir, log_name)
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        if cfg.epochs == 0:
            save_checkpoint(ckpt_path, model, extra={"iteration": 0})
            return model
        t = 0
        for epoch in range(cfg.epochs):
            order = _epoch_order(cfg.seed, epoch, n)
            for b in range(iters_per_epoch):
                if t < start_iter:
                    t += 1
                    continue
                idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
                batch = [train_samples[i] for i in idx]
                lr = poly_lr(cfg.base_lr, t, total_iters, cfg.poly_power)
                if use_memory:
                    metrics = train_step(model, batch, cfg, t, schedule, lr)
                else:
                    metrics = baseline_step(model, batch, cfg, lr)
                writer.writerow(
                    [t] + [repr(float(metrics[k])) for k in CSV_HEADER[1:]]
                )
                t += 1
                if cfg.checkpoint_every and t % cfg.checkpoint_every == 0:
                    save_checkpoint(ckpt_path, model, extra={"iteration": t})
                if stop_after is not None and t >= stop_after:
                    save_checkpoint(ckpt_path, model, extra={"iteration": t})
                    return model
    save_checkpoint(ckpt_path, model, extra={"iteration": total_iters})
    return model


def baseline_step(model: SegModel, batch, cfg: TrainConfig, lr: float) -> dict:
    """Memory-free comparison variant: output loss only."""
    model.zero_grad()
    dtype = model.cfg.dtype
    lo_terms = [
        loss_output_map(model.forward_baseline(Tensor(s.image.astype(dtype)))["o"], s.gt)
        for s in batch
    ]
    lo = _mean(lo_terms)
    lo.backward()
    sgd_step(model, lr, cfg.weight_decay)
    val = lo.item()
    return {"lr": lr, "m_t": 0.0, "loss_W": 0.0, "loss_M": 0.0, "loss_O": val, "total": val}


# ---------------------------------------------------------------------------
# gradient checking of the full objective


def full_loss_gradcheck(seed: int = 3, eps: float = 1e-5) -> float:
    """Max relative error of analytic vs finite-difference gradients of the
    complete training objective on a tiny 2-class instance, at 64-bit."""
    from .synthdata import SynthTaskSpec, generate_sample

    spec = SynthTaskSpec(num_classes=2, image_size=(4, 4), in_channels=2,
                         noise_sigma=0.3)
    sample = generate_sample(spec, seed=seed)
    cfg = TrainConfig(num_classes=2, dim=4, backbone_widths=(4,), precision=64,
                      seed=seed, fusion_mode="concat")
    model = build_model(cfg, [sample])
    weights = LossWeights(alpha=cfg.alpha, beta=cfg.beta)

    def objective() -> Tensor:
        out = model.forward_full(Tensor(sample.image), with_memory_predictions=True)
        lw = loss_weight_map(out["w"], sample.gt, stride=1)
        lo = loss_output_map(out["o"], sample.gt)
        lm = loss_memory_rows(out["o_mem"])
        return total_loss(lw, lm, lo, weights)

    return nm.grad_check(objective, model.parameters(), eps=eps)


# ---------------------------------------------------------------------------
# evaluation


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    valid = gt != IGNORE_LABEL
    idx = num_classes * gt[valid].astype(np.int64) + pred[valid].astype(np.int64)
    return np.bincount(idx, minlength=num_classes**2).reshape(num_classes, num_classes)


def iou_from_confusion(conf: np.ndarray) -> tuple[float, np.ndarray]:
    tp = np.diag(conf).astype(np.float64)
    union = conf.sum(axis=0) + conf.sum(axis=1) - np.diag(conf)
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
    miou = float(np.nanmean(iou)) if np.isfinite(iou).any() else float("nan")
    return miou, iou


def predict_labels(model: SegModel, sample) -> np.ndarray:
    out = model.forward(Tensor(sample.image.astype(model.cfg.dtype)))
    return out["o"].data.argmax(axis=0)


def evaluate(model: SegModel, samples) -> dict:
    """Pixelwise argmax vs ground truth; ignore pixels excluded."""
    if not samples:
        raise ValueError("empty evaluation set")
    k = model.cfg.num_classes
    conf = np.zeros((k, k), dtype=np.int64)
    for s in samples:
        conf += confusion_matrix(predict_labels(model, s), s.gt, k)
    miou, iou = iou_from_confusion(conf)
    return {"miou": miou, "per_class_iou": iou, "confusion": conf}


# ---------------------------------------------------------------------------
# config files (flat key = value, unknown keys rejected)

_BOOL_KEYS = {"use_cosine", "use_poly_schedule", "clustering_init", "use_rcl",
              "use_within_image"}
_INT_KEYS = {"epochs", "batch_size", "seed", "num_classes", "dim", "stride",
             "precision", "head_hidden", "checkpoint_every"}
_FLOAT_KEYS = {"base_lr", "poly_power", "weight_decay", "alpha", "beta", "m0",
               "momentum_power", "val_fraction"}
_STR_KEYS = {"fusion_mode"}
_TUPLE_KEYS = {"backbone_widths"}
ALL_CONFIG_KEYS = _BOOL_KEYS | _INT_KEYS | _FLOAT_KEYS | _STR_KEYS | _TUPLE_KEYS


def _parse_bool(value: str) -> bool:
    low = value.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def read_train_config(path) -> TrainConfig:
    kwargs = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in ALL_CONFIG_KEYS:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            if key in _BOOL_KEYS:
                kwargs[key] = _parse_bool(value)
            elif key in _INT_KEYS:
                kwargs[key] = int(value)
            elif key in _FLOAT_KEYS:
                kwargs[key] = float(value)
            elif key in _TUPLE_KEYS:
                kwargs[key] = tuple(int(v) for v in value.split(",") if v.strip())
            else:
                kwargs[key] = value
    return TrainConfig(**kwargs)


def write_train_config(cfg: TrainConfig, path) -> None:
    with open(path, "w") as fh:
        for key, value in asdict(cfg).items():
            if key in _TUPLE_KEYS:
                value = ",".join(str(v) for v in value)
            fh.write(f"{key} = {value}\n")
