"""Command-line front door wiring the library into reproducible experiments.

Every command is deterministic under --seed. Exit codes: 0 on success, 2 for
usage problems (bad flags or paths), 1 for anything else, always with a
single machine-parsable ``error: ...`` line on stderr. The MORPHFIT_LOG
environment variable (quiet | info | debug) controls progress logging.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time

import numpy as np

from . import losses, metrics, storage
from .lookahead import export_trace
from .morphable import ParamVec, synthetic_basis
from .regressor import (
    SgdConfig,
    TrainConfig,
    predict_landmarks,
    prepare_pool,
    train_supervised,
)
from .synthesis import synthesize_clip

log = logging.getLogger("morphfit")

_NORMALIZER_FLAGS = {
    "bbox": metrics.NORMALIZER_BBOX,
    "interocular": metrics.NORMALIZER_INTEROCULAR,
}


def _setup_logging():
    level = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}.get(
        os.environ.get("MORPHFIT_LOG", "info"), logging.INFO
    )
    logging.basicConfig(stream=sys.stderr, level=level, format="%(message)s")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="morphfit",
        description="Desk-scale morphable-model parameter regression toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-basis", help="emit a synthetic basis container")
    p.add_argument("--n-vertices", type=int, default=500)
    p.add_argument("--d-id", type=int, default=40)
    p.add_argument("--d-exp", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gen-data", help="emit a dataset manifest with Z-score stats")
    p.add_argument("--basis", required=True)
    p.add_argument("--count", type=int, default=2000)
    p.add_argument("--frame-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gen-clips", help="synthesize short clips from dataset stills")
    p.add_argument("--basis", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train the regressor")
    p.add_argument("--basis", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--loss", required=True, choices=(
        "vdc", "fwpdc", "vdc_from_fwpdc", "vanilla_joint", "meta_joint", "meta_joint_lrr",
    ))
    p.add_argument("--iterations", type=int, default=2000)
    p.add_argument("--eval-every", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=0.0005)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--beta", type=float, default=0.5)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--meta-batch-size", type=int, default=None,
                   help="look-ahead batch size (defaults to --batch-size)")
    p.add_argument("--vdc-gain", type=float, default=1.0,
                   help="vertex-loss training step gain on top of the 1/(3N) scale")
    p.add_argument("--svs", action="store_true", help="expand stills into short clips")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--out-curve", required=True)
    p.add_argument("--out-trace", default=None)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset or clips")
    p.add_argument("--basis", required=True)
    p.add_argument("--checkpoint", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--data")
    group.add_argument("--clips")
    p.add_argument("--normalizer", choices=sorted(_NORMALIZER_FLAGS), default="bbox")
    p.add_argument("--out-report", required=True)

    p = sub.add_parser("bench-fwpdc", help="time the brute-force vs fast weighted loss")
    p.add_argument("--n-vertices", type=int, default=10000)
    p.add_argument("--d-id", type=int, default=40)
    p.add_argument("--d-exp", type=int, default=10)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)

    sub.add_parser("selfcheck", help="run built-in oracle/gradient/round-trip checks")
    return parser


def _load_basis(path):
    return storage.load_basis(path)


def cmd_gen_basis(args) -> int:
    basis = synthetic_basis(args.n_vertices, args.d_id, args.d_exp, seed=args.seed)
    storage.save_basis(args.out, basis)
    log.info("wrote basis (N=%d, D=%d+%d) to %s", basis.n_vertices, basis.d_id, basis.d_exp, args.out)
    return 0


def cmd_gen_data(args) -> int:
    basis = _load_basis(args.basis)
    manifest = storage.generate_dataset(
        basis,
        args.count,
        prior=storage.ParamPrior(frame_size=args.frame_size),
        seed=args.seed,
    )
    storage.save_manifest(args.out, manifest)
    log.info("wrote dataset (%d samples) to %s", manifest.count, args.out)
    return 0


def cmd_gen_clips(args) -> int:
    basis = _load_basis(args.basis)
    manifest = storage.load_manifest(args.data)
    rng = np.random.default_rng(args.seed)
    count = min(args.count, manifest.count)
    stills = rng.choice(manifest.count, size=count, replace=False)
    clips = [
        synthesize_clip(
            basis,
            manifest.params[i],
            manifest.ranges,
            rng,
            width=manifest.frame_size,
            height=manifest.frame_size,
            source_id=str(i),
        )
        for i in stills
    ]
    storage.save_clips(args.out, clips)
    log.info("wrote %d clips to %s", len(clips), args.out)
    return 0


def cmd_train(args) -> int:
    basis = _load_basis(args.basis)
    manifest = storage.load_manifest(args.data)
    pool = prepare_pool(basis, manifest.params, manifest.stats, manifest.frame_size)
    cfg = TrainConfig(
        sgd=SgdConfig(
            learning_rate=args.lr,
            momentum=args.momentum,
            weight_decay=args.weight_decay,
            batch_size=args.batch_size,
        ),
        iterations=args.iterations,
        eval_every=args.eval_every,
        hidden_dim=args.hidden,
        joint=losses.JointConfig(beta=args.beta),
        meta_k=args.k,
        meta_batch_size=args.meta_batch_size,
        svs_ranges=manifest.ranges if args.svs else None,
        vdc_step_gain=args.vdc_gain,
    )
    start = time.perf_counter()
    result = train_supervised(pool, args.loss, cfg, seed=args.seed)
    log.info("trained %s for %d iterations in %.1fs", args.loss, args.iterations,
             time.perf_counter() - start)
    storage.save_checkpoint(args.out_checkpoint, result.weights, pool.stats)
    storage.save_curve(args.out_curve, result.error_curve)
    if result.selector_trace is not None:
        trace_path = args.out_trace or args.out_checkpoint + ".trace"
        storage.save_text(trace_path, export_trace(result.selector_trace))
        log.info("wrote selector trace to %s", trace_path)
    final = result.error_curve[-1, 1] if len(result.error_curve) else float("nan")
    print(f"final_vertex_error: {final:.17g}")
    return 0


def cmd_eval(args) -> int:
    basis = _load_basis(args.basis)
    weights, stats = storage.load_checkpoint(args.checkpoint)
    kind = _NORMALIZER_FLAGS[args.normalizer]

    per_sample = []
    stab = None
    if args.data:
        manifest = storage.load_manifest(args.data)
        pool = prepare_pool(basis, manifest.params, manifest.stats, manifest.frame_size)
        for sample in pool.samples:
            pred = predict_landmarks(basis, weights, stats, sample.image)
            per_sample.append(metrics.nme_sparse(pred, sample.lmk_gt, kind))
    else:
        clips = storage.load_clips(args.clips)
        stab_values = []
        for clip in clips:
            preds, gts = [], []
            for frame in clip.frames:
                pred = predict_landmarks(basis, weights, stats, frame.image.reshape(-1))
                preds.append(pred)
                gts.append(frame.landmarks)
                per_sample.append(metrics.nme_sparse(pred, frame.landmarks, kind))
            if len(clip.frames) >= 2:
                stab_values.append(metrics.stability(np.stack(preds), np.stack(gts)))
        if stab_values:
            stab = float(np.mean(stab_values))

    per = np.array(per_sample)
    report = metrics.EvalReport(
        nme_mean=float(per.mean()) if per.size else 0.0,
        per_sample_nme=per,
        normalizer_kind=kind,
        stability=stab,
    )
    storage.save_report(args.out_report, report)
    print(f"nme_mean: {report.nme_mean:.17g}")
    if stab is not None:
        print(f"stability: {stab:.17g}")
    return 0


def cmd_bench_fwpdc(args) -> int:
    basis = synthetic_basis(args.n_vertices, args.d_id, args.d_exp, seed=args.seed)
    rng = np.random.default_rng(args.seed + 1)
    pairs = [
        (
            storage.sample_params(basis, storage.ParamPrior(), rng),
            storage.sample_params(basis, storage.ParamPrior(), rng),
        )
        for _ in range(args.batch)
    ]
    params = np.stack([p.to_vector() for p, _ in pairs])
    params_gt = np.stack([g.to_vector() for _, g in pairs])

    naive_times, fast_times = [], []
    naive_vals = fast_vals = None
    for _ in range(args.repeats):
        t0 = time.perf_counter()
        naive_vals = np.array([losses.wpdc_naive(basis, p, g).value for p, g in pairs])
        t1 = time.perf_counter()
        fast_vals, _ = losses.fwpdc_batch(basis, params, params_gt)
        t2 = time.perf_counter()
        naive_times.append(t1 - t0)
        fast_times.append(t2 - t1)

    naive_ms = float(np.median(naive_times) * 1e3)
    fast_ms = float(np.median(fast_times) * 1e3)
    deviation = float(
        np.max(np.abs(fast_vals - naive_vals) / np.maximum(naive_vals, 1e-12))
    )
    print(f"n_vertices: {args.n_vertices}")
    print(f"dims: {args.d_id + args.d_exp}")
    print(f"batch: {args.batch}")
    print(f"repeats: {args.repeats}")
    print(f"naive_ms: {naive_ms:.3f}")
    print(f"fast_ms: {fast_ms:.3f}")
    print(f"speedup: {naive_ms / fast_ms:.2f}")
    print(f"max_rel_deviation: {deviation:.3e}")
    return 0


def cmd_selfcheck(_args) -> int:
    from .selfcheck import run_all

    failures = 0
    for name, ok, detail in run_all():
        if ok:
            print(f"PASS {name}")
        else:
            failures += 1
            print(f"FAIL {name}: {detail}")
    print(f"selfcheck: {'ok' if not failures else f'{failures} failure(s)'}")
    return 1 if failures else 0


_COMMANDS = {
    "gen-basis": cmd_gen_basis,
    "gen-data": cmd_gen_data,
    "gen-clips": cmd_gen_clips,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench-fwpdc": cmd_bench_fwpdc,
    "selfcheck": cmd_selfcheck,
}


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except FileNotFoundError as exc:
        print(f"error: path: {exc}", file=sys.stderr)
        return 2
    except (storage.ParseError, ValueError) as exc:
        print(f"error: input: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - unexpected failure guard
        print(f"error: internal: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
