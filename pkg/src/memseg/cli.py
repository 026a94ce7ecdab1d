"""Command-line entry point.

Subcommands: gen-data, train, eval, compare, inspect-memory, bench, gradcheck.
Exit codes: 0 success, 1 validation error, 2 runtime failure. Every run that
produces outputs writes a manifest sufficient to reproduce it.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict

import numpy as np

from . import numerics as nm
from .aggregation import coarse_aggregate, predict_weights, refine_context_with_attention
from .memory import dump_memory_csv
from .model import load_checkpoint
from .numerics import Parameter, Tensor
from .synthdata import (
    SynthTaskSpec,
    generate_dataset,
    read_dataset,
    read_task_spec,
    write_dataset,
)
from .trainer import (
    TrainConfig,
    build_model,
    evaluate,
    full_loss_gradcheck,
    read_train_config,
    train,
)


def _file_hash(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()[:16]


def write_manifest(out_dir: str, command: str, args: dict, inputs: list[str],
                   outputs: list[str], seconds: float) -> None:
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "command": command,
        "args": args,
        "input_hashes": {p: _file_hash(p) for p in inputs if os.path.exists(p)},
        "outputs": outputs,
        "seconds": seconds,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def _split(samples, val_fraction: float):
    n_val = max(1, int(round(len(samples) * val_fraction)))
    if n_val >= len(samples):
        raise ValueError("validation split would consume the whole dataset")
    return samples[:-n_val], samples[-n_val:]


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    spec = read_task_spec(args.spec) if args.spec else SynthTaskSpec()
    start = time.perf_counter()
    samples = generate_dataset(spec, args.count, args.seed)
    write_dataset(samples, args.out)
    write_manifest(
        os.path.dirname(os.path.abspath(args.out)) or ".", "gen-data",
        {"spec": args.spec, "count": args.count, "seed": args.seed, "out": args.out},
        [args.spec] if args.spec else [], [args.out], time.perf_counter() - start,
    )
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = read_train_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    samples = read_dataset(args.data)
    train_set, val_set = _split(samples, cfg.val_fraction)
    start = time.perf_counter()
    model = train(cfg, train_set, args.out, resume_from=args.resume)
    result = evaluate(model, val_set)
    elapsed = time.perf_counter() - start
    with open(os.path.join(args.out, "eval.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        writer.writerow(["mIoU", repr(result["miou"])])
        for k, v in enumerate(result["per_class_iou"]):
            writer.writerow([f"IoU_{k}", repr(float(v))])
    write_manifest(
        args.out, "train",
        {"config": args.config, "data": args.data, "seed": cfg.seed,
         "train_config": asdict(cfg)},
        [p for p in (args.config, args.data) if p],
        [os.path.join(args.out, n) for n in ("checkpoint.mct", "metrics.csv", "eval.csv")],
        elapsed,
    )
    print(f"final validation mIoU: {result['miou']:.4f} ({elapsed:.1f}s)")
    return 0


def cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    samples = read_dataset(args.data)
    result = evaluate(model, samples)
    print(f"mIoU: {result['miou']:.4f}")
    for k, v in enumerate(result["per_class_iou"]):
        print(f"  IoU class {k}: {v:.4f}")
    if args.dump_intermediates:
        _dump_intermediates(model, samples[0], args.dump_intermediates)
    return 0


def _dump_intermediates(model, sample, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    out = model.forward(Tensor(sample.image.astype(model.cfg.dtype)))
    names = {"o": out["o"].data}
    if "w" in out:
        names["weight_map"] = out["w"].probs.data
        names["attention"] = out["attn_probs"].data
    for name, arr in names.items():
        with open(os.path.join(out_dir, f"{name}.mct"), "wb") as fh:
            nm.write_tensor(fh, np.asarray(arr, dtype=np.float64))


def cmd_compare(args) -> int:
    cfg = read_train_config(args.config) if args.config else TrainConfig()
    samples = read_dataset(args.data)
    train_set, val_set = _split(samples, cfg.val_fraction)
    os.makedirs(args.out, exist_ok=True)
    rows = []
    start = time.perf_counter()
    for variant, use_memory in (("baseline", False), ("memory", True)):
        t0 = time.perf_counter()
        model = train(cfg, train_set, os.path.join(args.out, variant),
                      use_memory=use_memory)
        result = evaluate(model, val_set)
        rows.append([variant, repr(result["miou"]), model.num_parameters(),
                     f"{time.perf_counter() - t0:.2f}"])
    table = os.path.join(args.out, "compare.csv")
    with open(table, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "mIoU", "params", "seconds"])
        writer.writerows(rows)
    write_manifest(
        args.out, "compare",
        {"config": args.config, "data": args.data, "seed": cfg.seed},
        [p for p in (args.config, args.data) if p], [table],
        time.perf_counter() - start,
    )
    for row in rows:
        print(",".join(str(v) for v in row))
    return 0


def cmd_inspect_memory(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    if model.memory is None:
        print("checkpoint has no feature memory", file=sys.stderr)
        return 1
    os.makedirs(args.out, exist_ok=True)
    values = os.path.join(args.out, "memory_values.csv")
    sims = os.path.join(args.out, "memory_cosine.csv")
    dump_memory_csv(model.memory, values, sims)
    print(f"wrote {values} and {sims}")
    return 0


def cmd_bench(args) -> int:
    """Wall time and parameter counts: memory-context path vs within-image slot."""
    cfg = read_train_config(args.config) if args.config else TrainConfig()
    cfg.use_within_image = True
    spec = SynthTaskSpec(num_classes=cfg.num_classes, in_channels=3)
    samples = generate_dataset(spec, 4, cfg.seed)
    model = build_model(cfg, samples)
    image = Tensor(samples[0].image.astype(model.cfg.dtype))
    r = model.backbone.forward(image)
    mem_const = Parameter(model.memory.values.astype(model.cfg.dtype), trainable=False)
    repeats = args.repeats

    def time_path(fn):
        fn()  # warm up
        t0 = time.perf_counter()
        for _ in range(repeats):
            fn()
        return (time.perf_counter() - t0) / repeats

    def memory_path():
        w = predict_weights(r, model.head1)
        coarse = coarse_aggregate(w, mem_const)
        refine_context_with_attention(r, coarse, model.attn)

    mem_params = sum(p.data.size for p in model.head1.parameters() + model.attn.parameters())
    wi_params = model.wi_w.data.size + model.wi_b.data.size
    rows = [
        ["memory_context", mem_params, repr(time_path(memory_path))],
        ["within_image", wi_params, repr(time_path(lambda: model.within_image_context(r)))],
    ]
    print("path,params,seconds_per_forward")
    for row in rows:
        print(",".join(str(v) for v in row))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "bench.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["path", "params", "seconds_per_forward"])
            writer.writerows(rows)
    return 0


def cmd_gradcheck(args) -> int:
    err = full_loss_gradcheck(seed=args.seed)
    print(f"max relative gradient error: {err:.3e}")
    if err >= 1e-3:
        print("FAIL: exceeds 1e-3 tolerance", file=sys.stderr)
        return 2
    print("PASS")
    return 0


# ---------------------------------------------------------------------------
# argument parsing and dispatch


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="memseg",
        description="Memory-augmented semantic segmentation at desk scale",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--spec", help="task spec file (key = value lines)")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train the memory-augmented model")
    p.add_argument("--config", help="train config file (key = value lines)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--dump-intermediates", metavar="DIR",
                   help="dump weight/attention maps for the first sample")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("compare", help="baseline vs memory-augmented, shared seeds")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("inspect-memory", help="dump memory rows and cosine matrix")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_inspect_memory)

    p = sub.add_parser("bench", help="time the context paths (report only)")
    p.add_argument("--config")
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full objective")
    p.add_argument("--seed", type=int, default=3)
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - runtime failures map to exit 2
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
