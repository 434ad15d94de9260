"""Command-line entry point: ``selfroll {train,generate,eval-drift,bench-cache,grad-check}``."""

from __future__ import annotations

import argparse
import csv
import gc
import json
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import checkpoint as ckpt_io
from .config import RunConfig
from .gradcheck import format_report, run_grad_check
from .inference import CacheStrategy, generate
from .train import generator_from_checkpoint, run_training, sampling_setup
from .transformer import CausalTransformer
from .world import drift_report, median_bandwidth, sample_ground_truth, slope_null_band


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_ckpt(path) -> ckpt_io.Checkpoint:
    if path is None:
        raise ValueError("--checkpoint is required")
    return ckpt_io.load(path)


# --------------------------------------------------------------------------


def cmd_train(args) -> int:
    config = RunConfig.load(args.config) if args.config else None
    resume = ckpt_io.load(args.checkpoint) if args.checkpoint else None
    if config is None:
        if resume is None:
            raise ValueError("train needs --config, --checkpoint, or both")
        config = resume.config
    if args.seed is not None:
        config.seed = args.seed
    out = _out_dir(args)
    config.save(out / "config.txt")

    def log(it, m):
        if args.verbose and (it % 100 == 0):
            print(f"iter {it} {m.phase} gen={m.generator_loss} critic={m.critic_loss}", file=sys.stderr)

    tr = run_training(config, out, resume, log)
    print(f"trained to iteration {tr.iteration}; checkpoint at {out / 'checkpoint.ckpt'}")
    return 0


def _write_sequence(path: Path, frames: np.ndarray) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame_index"] + [f"dim_{k}" for k in range(frames.shape[1])])
        for i, row in enumerate(frames, 1):
            w.writerow([i] + [repr(float(v)) for v in row])
    tmp.replace(path)


def cmd_generate(args) -> int:
    ck = _load_ckpt(args.checkpoint)
    cfg = ck.config
    model = generator_from_checkpoint(ck, use_ema=not args.raw_weights)
    schedule, sampler = sampling_setup(cfg)
    inf = cfg.inference
    strategy = CacheStrategy(args.strategy or inf.strategy, args.window or inf.window,
                             args.stride or inf.stride)
    M = args.frames or cfg.train.n_frames
    seed = cfg.seed if args.seed is None else args.seed
    frames, trace = generate(model, schedule, M, strategy, _rng(seed), args.condition, 1, sampler=sampler)
    out = _out_dir(args)
    _write_sequence(out / "sequence.csv", frames[0])
    trace.to_csv(out / "trace.csv")
    print(f"{M} frames via {strategy.kind}; first-frame latency {trace.first_frame_latency_ms:.2f} ms, "
          f"total {trace.cumulative_ms[-1]:.2f} ms")
    return 0


def cmd_eval_drift(args) -> int:
    if args.n_samples < 100:
        raise ValueError(f"--n-samples must be >= 100, got {args.n_samples}")
    ck = _load_ckpt(args.checkpoint)
    cfg = ck.config
    M = args.frames or cfg.train.n_frames
    seed = cfg.seed if args.seed is None else args.seed
    rng = _rng(seed)
    conditions = (range(cfg.world.n_conditions) if args.conditions is None
                  else [int(c) for c in args.conditions.split(",")])
    model = None if args.oracle else generator_from_checkpoint(ck)
    schedule, sampler = sampling_setup(cfg)
    window = max(cfg.inference.window, 1)
    out = _out_dir(args)
    summary = {}
    for c in conditions:
        if not 0 <= c < cfg.world.n_conditions:
            raise ValueError(f"condition {c} outside [0, {cfg.world.n_conditions})")
        if model is None:
            samples = sample_ground_truth(cfg.world, M, c, rng, args.n_samples)
        else:
            samples, _ = generate(model, schedule, M, CacheStrategy("rolling", window), rng, c,
                                  args.n_samples, warmup=False, sampler=sampler)
        truth = sample_ground_truth(cfg.world, M, c, rng, args.n_samples)
        h = median_bandwidth(truth.reshape(-1, truth.shape[2]))
        report = drift_report(samples, truth, h)
        ref_a = sample_ground_truth(cfg.world, M, c, rng, args.n_samples)
        ref_b = sample_ground_truth(cfg.world, M, c, rng, args.n_samples)
        band = slope_null_band(ref_a, ref_b, h, rng, n_boot=args.null_boot)
        report.meta.update({"condition": c, "null_band_99": band, "oracle": bool(args.oracle),
                            "n_samples": args.n_samples})
        report.to_csv(out / f"drift_c{c}.csv")
        report.to_json(out / f"drift_c{c}.json")
        summary[c] = report.summary()
        print(f"condition {c}: slope {report.slope:.3e} (null band {band:.3e}), "
              f"frame-{M} mmd2 {report.distances[-1]:.4f}")
    (out / "drift_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_bench_cache(args) -> int:
    if args.checkpoint:
        ck = ckpt_io.load(args.checkpoint)
        cfg = ck.config
        model = generator_from_checkpoint(ck)
    else:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        model = CausalTransformer(cfg.model, _rng(cfg.seed), shift=cfg.schedule.shift)
    schedule, sampler = sampling_setup(cfg)
    seed = cfg.seed if args.seed is None else args.seed
    L = args.window or cfg.inference.window
    ms = [int(m) for m in args.m_list.split(",")]
    strides = [int(s) for s in args.strides.split(",")] if args.strides else [cfg.inference.stride]
    runs = [("rolling", None), ("no-cache", None)] + [("recompute-window", s) for s in strides]
    out = _out_dir(args)
    path = out / "complexity.csv"
    tmp = path.with_suffix(".csv.tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["strategy", "stride", "M", "frame_index", "attn_flops", "wall_ms"])
        for kind, stride in runs:
            strategy = CacheStrategy(kind, L, stride)
            for M in ms:
                walls, flops = [], None
                for _ in range(args.repeats):
                    # like timeit: no collector pauses inside the timed region
                    gc.collect()
                    gc.disable()
                    try:
                        _, trace = generate(model, schedule, M, strategy, _rng(seed), 0, args.batch,
                                            sampler=sampler)
                    finally:
                        gc.enable()
                    walls.append(trace.wall_ms)
                    flops = trace.attn_flops
                # best of the repeats per frame: the least noisy estimate of intrinsic cost
                wall = np.min(np.array(walls), axis=0)
                for i in range(M):
                    w.writerow([kind, "" if stride is None else stride, M, i + 1, flops[i], f"{wall[i]:.6f}"])
                tail = wall[L:] if M > L else wall
                print(f"{kind:<17} stride={stride} M={M}: flops/frame last={flops[-1]} "
                      f"wall max/min after L={tail.max() / tail.min():.3f}")
    tmp.replace(path)
    return 0


def cmd_grad_check(args) -> int:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    seed = cfg.seed if args.seed is None else args.seed
    results = run_grad_check(cfg, seed=seed, per_tensor=args.per_tensor)
    report = format_report(results)
    print(report)
    if args.out_dir:
        (_out_dir(args) / "grad_check.txt").write_text(report + "\n")
    return 0 if all(r.ok for r in results) else 1


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="selfroll", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="run config (key = value lines)")
        sp.add_argument("--checkpoint", help="checkpoint file")
        sp.add_argument("--seed", type=int, help="override the seed")
        sp.add_argument("--out-dir", required=out_required, help="directory for outputs")

    sp = sub.add_parser("train", help="train a model; resumes when --checkpoint is given")
    common(sp)
    sp.add_argument("--verbose", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("generate", help="generate one sequence and its timing trace")
    common(sp)
    sp.add_argument("--frames", type=int, help="number of frames M")
    sp.add_argument("--strategy", choices=["rolling", "recompute-window", "no-cache"])
    sp.add_argument("--window", type=int, help="cache window L in frames")
    sp.add_argument("--stride", type=int, help="recompute-window shift in frames")
    sp.add_argument("--condition", type=int, default=0)
    sp.add_argument("--raw-weights", action="store_true", help="use raw generator weights, not EMA")
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("eval-drift", help="per-frame MMD^2 against fresh ground truth")
    common(sp)
    sp.add_argument("--n-samples", type=int, default=200)
    sp.add_argument("--conditions", help="comma-separated condition labels (default: all)")
    sp.add_argument("--frames", type=int)
    sp.add_argument("--oracle", action="store_true", help="replace the generator by the true sampler")
    sp.add_argument("--null-boot", type=int, default=100)
    sp.set_defaults(func=cmd_eval_drift)

    sp = sub.add_parser("bench-cache", help="FLOP and wall-time comparison of cache strategies")
    common(sp)
    sp.add_argument("--m-list", default="16,32,64")
    sp.add_argument("--window", type=int)
    sp.add_argument("--strides")
    sp.add_argument("--batch", type=int, default=1, help="sequences generated in parallel")
    sp.add_argument("--repeats", type=int, default=15, help="timed runs per setting; best per frame is kept")
    sp.set_defaults(func=cmd_bench_cache)

    sp = sub.add_parser("grad-check", help="finite-difference audit of every loss path")
    common(sp, out_required=False)
    sp.add_argument("--per-tensor", type=int, default=3)
    sp.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    threads = int(os.environ.get("SELFROLL_THREADS", "1"))
    try:
        with threadpool_limits(limits=max(threads, 1)):
            return args.func(args)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"selfroll {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
