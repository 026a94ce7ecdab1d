"""Acceptance suite: ten end-to-end checks of the memory-augmented segmenter.

Each check prints a single ``acceptance N <name>: PASS`` line (run pytest with
``-s`` to see them as they complete). The comparative checks train real models
on the default synthetic task and take several minutes combined.
"""

import csv
import math
import time

import numpy as np
import pytest

from memseg.aggregation import (
    AttentionParams,
    WeightMap,
    coarse_aggregate,
    refine_context,
)
from memseg.losses import loss_memory_rows, loss_output_map, loss_weight_map
from memseg.memory import (
    MomentumSchedule,
    class_update_vector,
    momentum_at,
    transform_composites,
    update_memory,
)
from memseg.memory import FeatureMemory
from memseg.numerics import Tensor
from memseg.synthdata import SynthTaskSpec, generate_dataset
from memseg.trainer import (
    TrainConfig,
    _epoch_order,
    build_model,
    downsample_labels,
    evaluate,
    full_loss_gradcheck,
    poly_lr,
    predict_labels,
    train,
    train_step,
)


def report(num, name, ok, detail=""):
    verdict = "PASS" if ok else "FAIL"
    print(f"acceptance {num} {name}: {verdict}" + (f" ({detail})" if detail else ""))
    assert ok, f"acceptance {num} {name}: FAIL ({detail})"


def softmax(x, axis):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


@pytest.fixture(scope="module")
def default_task():
    spec = SynthTaskSpec()
    data = generate_dataset(spec, 250, seed=0)
    return spec, data[:200], data[200:]


@pytest.fixture(scope="module")
def comparison(default_task, tmp_path_factory):
    """Baseline vs memory-augmented training over three shared seeds."""
    _, train_set, val_set = default_task
    start = time.time()
    miou = {"baseline": [], "memory": []}
    seed1 = {}
    for seed in (1, 2, 3):
        cfg = TrainConfig(seed=seed)
        base_dir = tmp_path_factory.mktemp(f"base{seed}")
        base = train(cfg, train_set, str(base_dir), use_memory=False)
        miou["baseline"].append(evaluate(base, val_set)["miou"])
        mem_dir = tmp_path_factory.mktemp(f"mem{seed}")
        mem = train(cfg, train_set, str(mem_dir))
        miou["memory"].append(evaluate(mem, val_set)["miou"])
        if seed == 1:
            with open(mem_dir / "metrics.csv") as fh:
                seed1["rows"] = list(csv.DictReader(fh))
            seed1["model"] = mem
    return {"miou": miou, "seed1": seed1, "seconds": time.time() - start}


class TestSchedules:
    def test_01_schedule_exactness(self):
        sched = MomentumSchedule(m0=0.9, p=0.9, total_iters=137)
        ok = (
            abs(momentum_at(sched, 0) - 0.9) <= 1e-12
            and abs(momentum_at(sched, 137) - 0.009) <= 1e-12
            and abs(poly_lr(0.05, 0, 211) - 0.05) <= 1e-12
            and abs(poly_lr(0.05, 211, 211) - 0.0) <= 1e-12
        )
        report(1, "schedule exactness", ok)


class TestGradients:
    def test_02_full_loss_gradient_suite(self):
        err = full_loss_gradcheck()
        report(2, "gradient suite", err < 1e-3, f"max rel err {err:.2e}")


class TestOracleEquivalence:
    """Every aggregation/memory/loss primitive against independent scalar loops."""

    def test_03_oracles(self):
        rng = np.random.default_rng(7)
        worst = 0.0
        for _ in range(20):
            k = int(rng.integers(2, 6))
            c = 2 * int(rng.integers(1, 5))
            h, w = int(rng.integers(2, 5)), int(rng.integers(2, 5))

            # probability-weighted mixture of memory rows
            probs = softmax(rng.standard_normal((k, h, w)), axis=0)
            mem = rng.standard_normal((k, c))
            got = coarse_aggregate(WeightMap(Tensor(probs)), Tensor(mem)).data
            want = np.empty((h * w, c))
            for i in range(h):
                for j in range(w):
                    for ch in range(c):
                        want[i * w + j, ch] = sum(
                            probs[q, i, j] * mem[q, ch] for q in range(k)
                        )
            worst = max(worst, np.abs(got - want).max())

            # attention refinement of the coarse context
            params = AttentionParams(c, rng=np.random.default_rng(rng.integers(1 << 30)))
            r = rng.standard_normal((c, h, w))
            coarse = rng.standard_normal((h * w, c))
            got = refine_context(Tensor(r), Tensor(coarse), params).data
            r_flat = r.reshape(c, h * w).T
            n = h * w
            q = np.array([params.wq.data @ r_flat[i] + params.bq.data for i in range(n)])
            kk = np.array([params.wk.data @ coarse[i] + params.bk.data for i in range(n)])
            v = np.array([params.wv.data @ coarse[i] + params.bv.data for i in range(n)])
            want = np.empty((c, h, w))
            for i in range(n):
                logits = np.array([q[i] @ kk[j] for j in range(n)]) / math.sqrt(c / 2)
                attn = np.exp(logits - logits.max())
                attn = attn / attn.sum()
                mixed = sum(attn[j] * v[j] for j in range(n))
                want[:, i // w, i % w] = params.wo.data @ mixed + params.bo.data
            worst = max(worst, np.abs(got - want).max())

            # dissimilarity-weighted class composite
            reps = rng.standard_normal((int(rng.integers(1, 8)), c))
            row = rng.standard_normal(c)
            got = class_update_vector(reps, row)
            sims = np.array([
                rep @ row / (np.linalg.norm(rep) * np.linalg.norm(row)) for rep in reps
            ])
            weights = (1 - sims) / (1 - sims).sum()
            want = sum(wt * rep for wt, rep in zip(weights, reps))
            worst = max(worst, np.abs(got - want).max())

            # per-class composites over a labeled feature sheet
            feats = rng.standard_normal((h * w, c))
            labels = rng.integers(0, k, h * w)
            labels[rng.integers(h * w)] = 255
            memory = FeatureMemory(values=rng.standard_normal((k, c)))
            got = transform_composites(feats, labels, memory)
            want = memory.values.copy()
            for cls in range(k):
                mask = labels == cls
                if mask.any():
                    want[cls] = class_update_vector(feats[mask], memory.values[cls])
            worst = max(worst, np.abs(got - want).max())

            # the three cross entropies
            gt = rng.integers(0, k, (h, w))
            gt[0, 0] = 255
            wm = softmax(rng.standard_normal((k, h, w)), axis=0)
            got = loss_weight_map(WeightMap(Tensor(wm)), gt).data
            picked = [
                -np.log(wm[gt[i, j], i, j])
                for i in range(h) for j in range(w) if gt[i, j] != 255
            ]
            worst = max(worst, abs(float(got) - np.mean(picked)))

            om = softmax(rng.standard_normal((k, k)), axis=1)
            got = loss_memory_rows(Tensor(om)).data
            want = np.mean([-np.log(om[i, i]) for i in range(k)])
            worst = max(worst, abs(float(got) - want))

            o = softmax(rng.standard_normal((k, h, w)), axis=0)
            got = loss_output_map(Tensor(o), gt).data
            picked = [
                -np.log(o[gt[i, j], i, j])
                for i in range(h) for j in range(w) if gt[i, j] != 255
            ]
            worst = max(worst, abs(float(got) - np.mean(picked)))

        # evaluation against a hand-rolled IoU loop, driven by a real model
        spec = SynthTaskSpec(num_classes=3, image_size=(8, 8), in_channels=2,
                             noise_sigma=0.4)
        cfg = TrainConfig(num_classes=3, dim=4, backbone_widths=(4,), precision=64)
        samples = generate_dataset(spec, 20, seed=1)
        model = build_model(cfg, samples)
        for sample in samples:
            got = evaluate(model, [sample])["miou"]
            pred = predict_labels(model, sample)
            ious = []
            for cls in range(3):
                inter = union = 0
                for i in range(8):
                    for j in range(8):
                        if sample.gt[i, j] == 255:
                            continue
                        p, g = pred[i, j] == cls, sample.gt[i, j] == cls
                        inter += p and g
                        union += p or g
                if union:
                    ious.append(inter / union)
            worst = max(worst, abs(got - np.mean(ious)))

        report(3, "oracle equivalence", worst < 1e-9, f"max abs dev {worst:.2e}")


class TestStopGradient:
    def test_04_memory_gradient_free_and_update_exact(self):
        spec = SynthTaskSpec(num_classes=3, image_size=(8, 8), in_channels=2,
                             noise_sigma=0.4)
        data = generate_dataset(spec, 8, seed=2)
        cfg = TrainConfig(num_classes=3, dim=4, backbone_widths=(4,), precision=64)
        model = build_model(cfg, data)
        schedule = MomentumSchedule(total_iters=10)
        pre_params = [p.data.copy() for p in model.parameters()]
        pre_memory = model.memory.snapshot()
        metrics = train_step(model, data[:4], cfg, 2, schedule, lr=0.01)

        replay = build_model(cfg, data)
        for p, value in zip(replay.parameters(), pre_params):
            p.data = value
        replay.memory = FeatureMemory(values=pre_memory.copy())
        feats, labels = [], []
        for sample in data[:4]:
            r = replay.forward_full(Tensor(sample.image))["r"]
            feats.append(r.data.reshape(r.shape[0], -1).T.astype(np.float64))
            labels.append(downsample_labels(sample.gt, cfg.stride).reshape(-1))
        composites = transform_composites(
            np.concatenate(feats), np.concatenate(labels), replay.memory
        )
        update_memory(replay.memory, composites, metrics["m_t"])
        ok = metrics["memory_grad_max"] == 0.0 and np.array_equal(
            replay.memory.values, model.memory.values
        )
        report(4, "stop-gradient", ok)


class TestNormalization:
    def test_05_probability_sums_across_random_forwards(self):
        rng = np.random.default_rng(11)
        cfg = TrainConfig(num_classes=3, dim=4, backbone_widths=(4,), precision=64)
        spec = SynthTaskSpec(num_classes=3, image_size=(8, 8), in_channels=2)
        model = build_model(cfg, generate_dataset(spec, 4, seed=3))
        worst = 0.0
        for _ in range(100):
            image = Tensor(rng.standard_normal((2, 8, 8)))
            out = model.forward_full(image)
            worst = max(worst, np.abs(out["w"].probs.data.sum(axis=0) - 1).max())
            worst = max(worst, np.abs(out["attn_probs"].data.sum(axis=1) - 1).max())
            worst = max(worst, np.abs(out["o"].data.sum(axis=0) - 1).max())
        report(5, "normalization invariants", worst <= 1e-6, f"max dev {worst:.2e}")


class TestMemoryConvergence:
    def test_06_drift_bounded_and_decreasing(self):
        spec = SynthTaskSpec(num_classes=3, image_size=(8, 8), in_channels=2,
                             noise_sigma=0.4)
        data = generate_dataset(spec, 40, seed=4)
        cfg = TrainConfig(epochs=10, batch_size=4, base_lr=0.05, num_classes=3,
                          dim=4, backbone_widths=(4,), precision=64, seed=0)
        model = build_model(cfg, data)
        iters_per_epoch = len(data) // cfg.batch_size
        total = cfg.epochs * iters_per_epoch
        schedule = MomentumSchedule(m0=cfg.m0, p=cfg.momentum_power, total_iters=total)

        def batch_feat_max(batch):
            return max(
                float(np.abs(model.backbone.forward(Tensor(s.image)).data).max())
                for s in batch
            )

        # composites and memory rows are convex mixes of observed features, so
        # running max feature magnitude bounds both terms of the update delta
        feat_bound = batch_feat_max(data)
        drifts, t = [], 0
        for epoch in range(cfg.epochs):
            order = _epoch_order(cfg.seed, epoch, len(data))
            for b in range(iters_per_epoch):
                batch = [data[i] for i in order[b * 4 : (b + 1) * 4]]
                feat_bound = max(feat_bound, batch_feat_max(batch))
                prev = model.memory.snapshot()
                metrics = train_step(model, batch, cfg, t, schedule,
                                     lr=poly_lr(cfg.base_lr, t, total))
                drift = float(np.abs(model.memory.values - prev).max())
                assert drift <= metrics["m_t"] * 2 * feat_bound + 1e-9
                drifts.append(drift)
                t += 1
        decile = len(drifts) // 10
        first, last = np.mean(drifts[:decile]), np.mean(drifts[-decile:])
        report(6, "memory convergence", last < first,
               f"first-decile {first:.4f}, final-decile {last:.4f}")


class TestComparativeRuns:
    def test_07_end_to_end_uplift(self, comparison):
        base = np.mean(comparison["miou"]["baseline"])
        mem = np.mean(comparison["miou"]["memory"])
        uplift = 100 * (mem - base)
        ok = uplift >= 2.0 and comparison["seconds"] < 600
        report(7, "end-to-end uplift", ok,
               f"+{uplift:.2f} mIoU pts in {comparison['seconds']:.0f}s")

    def test_08_consistency_learning_effect(self, comparison):
        model = comparison["seed1"]["model"]
        rows = comparison["seed1"]["rows"]
        o_mem = model.predict_memory_rows().data
        classified = np.array_equal(o_mem.argmax(axis=1), np.arange(len(o_mem)))
        descended = float(rows[-1]["loss_M"]) < float(rows[0]["loss_M"])
        report(8, "consistency-learning effect", classified and descended,
               f"loss_M {rows[0]['loss_M'][:6]} -> {rows[-1]['loss_M'][:6]}")

    def test_09_fusion_ablation(self, comparison, default_task, tmp_path_factory):
        _, train_set, val_set = default_task
        baseline = comparison["miou"]["baseline"][0]
        scores = {"concat": comparison["miou"]["memory"][0]}
        for mode in ("add", "weighted_add"):
            cfg = TrainConfig(seed=1, fusion_mode=mode)
            model = train(cfg, train_set, str(tmp_path_factory.mktemp(mode)))
            scores[mode] = evaluate(model, val_set)["miou"]
        ordering = sorted(scores, key=scores.get, reverse=True)
        detail = "baseline {:.4f}; ".format(baseline) + ", ".join(
            f"{m} {scores[m]:.4f}" for m in ordering
        )
        report(9, "fusion ablation", all(s >= baseline for s in scores.values()), detail)


class TestReproducibility:
    def test_10_bit_exact_logs_and_resume(self, tmp_path):
        spec = SynthTaskSpec(num_classes=3, image_size=(8, 8), in_channels=2,
                             noise_sigma=0.4)
        data = generate_dataset(spec, 12, seed=5)
        cfg = TrainConfig(epochs=2, batch_size=4, num_classes=3, dim=4,
                          backbone_widths=(4,), precision=64, seed=0)
        train(cfg, data, str(tmp_path / "a"))
        train(cfg, data, str(tmp_path / "b"))
        identical = (tmp_path / "a" / "metrics.csv").read_bytes() == (
            tmp_path / "b" / "metrics.csv"
        ).read_bytes()

        train(cfg, data, str(tmp_path / "part"), stop_after=3)
        train(cfg, data, str(tmp_path / "resumed"),
              resume_from=str(tmp_path / "part" / "checkpoint.mct"))
        with open(tmp_path / "a" / "metrics.csv") as fh:
            full_rows = {row["iter"]: row for row in csv.DictReader(fh)}
        with open(tmp_path / "resumed" / "metrics.csv") as fh:
            resumed = list(csv.DictReader(fh))
        resume_ok = bool(resumed) and all(
            row == full_rows[row["iter"]] for row in resumed
        )
        report(10, "reproducibility", identical and resume_ok)
