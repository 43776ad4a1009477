"""Command-line entry point: infer, eval, train, synth, clean-map."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from lidarmos.errors import MosError
from lidarmos.evaluation import (BenchmarkConfig, BenchmarkReport, accumulate, ConfusionCounts,
                                 iter_frames)
from lidarmos.heuristic import HeuristicParams
from lidarmos.pipeline import (KnnParams, MosPipeline, learned_segmenter, residual_rg_segmenter,
                               residual_segmenter)
from lidarmos.projection import ProjectionConfig
from lidarmos.scanio import (list_sequences, load_sequence, read_semantic_labels,
                             sequence_dir, write_prediction_labels)

log = logging.getLogger("lidarmos")

DATASET_ENV = "LIDARMOS_DATASET"
METHODS = ("residual", "residual-rg", "learned")


class CliError(Exception):
    pass


def _dataset_root(args) -> Path:
    root = args.dataset or os.environ.get(DATASET_ENV)
    if not root:
        raise CliError(f"no dataset root: pass --dataset or set {DATASET_ENV}")
    root = Path(root)
    if not (root / "sequences").is_dir():
        raise CliError(f"dataset root {root} has no sequences/ directory")
    return root


def _sequences(args, root):
    ids = args.sequences or list_sequences(root)
    if not ids:
        raise CliError(f"no sequences found under {root / 'sequences'}")
    for sid in ids:
        if not (sequence_dir(root, sid) / "velodyne").is_dir():
            raise CliError(f"sequence {sid}: missing {sequence_dir(root, sid) / 'velodyne'}")
    return ids


def _projection(args) -> ProjectionConfig:
    return ProjectionConfig.from_degrees(args.height, args.width, args.fov_up, args.fov_down)


def _build_pipeline(args, cfg):
    if args.method == "learned":
        from lidarmos.learned import load_model

        if not args.model:
            raise CliError("--model is required for the learned method")
        if not Path(args.model).is_file():
            raise CliError(f"model file {args.model} not found")
        model = load_model(args.model)
        if model.spec.n_residual != args.n_residual:
            raise CliError(f"model was trained with N={model.spec.n_residual}, "
                           f"got -N {args.n_residual}")
        seg = learned_segmenter(model)
    else:
        params = HeuristicParams(threshold=args.threshold)
        seg = residual_segmenter(params) if args.method == "residual" else \
            residual_rg_segmenter(params)
    knn = KnnParams(enabled=not args.no_knn)
    return MosPipeline(seg, args.n_residual, cfg, knn)


def format_timing(summary) -> str:
    lines = [f"{'stage':<14}{'mean ms':>10}{'median ms':>11}{'p99 ms':>10}{'scans':>7}"]
    for name, s in summary.items():
        lines.append(f"{name:<14}{s['mean']:>10.2f}{s['median']:>11.2f}{s['p99']:>10.2f}"
                     f"{s['count']:>7}")
    return "\n".join(lines) + "\n"


def cmd_infer(args) -> int:
    root = _dataset_root(args)
    cfg = _projection(args)
    pipe = _build_pipeline(args, cfg)
    out = Path(args.out)
    for sid in _sequences(args, root):
        seq = load_sequence(root, sid)
        pdir = out / "sequences" / sid / "predictions"
        pdir.mkdir(parents=True, exist_ok=True)
        # history is backward-only, so frame t never sees scans after t
        for fr in iter_frames(seq, args.n_residual, args.noise, args.seed, with_labels=False):
            write_prediction_labels(pdir / f"{fr.frame:06d}.label", pipe(fr))
        log.info("sequence %s: %d scans", sid, len(seq))
    text = format_timing(pipe.timing_summary(warmup=args.warmup))
    sys.stdout.write(text)
    if args.timing_out:
        Path(args.timing_out).write_text(text)
    return 0


def cmd_eval(args) -> int:
    root = _dataset_root(args)
    pred_root = Path(args.predictions)
    config = BenchmarkConfig(n_residual=args.n_residual, noise_units=args.noise, seed=args.seed,
                             method_id=args.method_id)
    report = BenchmarkReport(config)
    failures = []
    for sid in _sequences(args, root):
        seq = load_sequence(root, sid)
        if not seq.has_labels:
            report.skipped.append(sid)
            failures.append(f"sequence {sid}: no ground truth")
            continue
        pdir = pred_root / "sequences" / sid / "predictions"
        files = sorted(pdir.glob("*.label")) if pdir.is_dir() else []
        if len(files) != len(seq):
            failures.append(f"sequence {sid}: {len(files)} prediction files in {pdir}, "
                            f"expected {len(seq)}")
            continue
        counts = ConfusionCounts()
        try:
            for i, f in enumerate(files):
                scan = seq.load_scan(i)
                counts = accumulate(counts, read_semantic_labels(f, len(scan)), scan.labels)
        except MosError as e:
            failures.append(f"sequence {sid}: {e}")
            continue
        report.per_sequence[sid] = counts
        report.scan_counts[sid] = len(seq)
    for msg in failures:
        print(f"error: {msg}", file=sys.stderr)
    text = report.to_text() if report.per_sequence else "no sequences scored\n"
    sys.stdout.write(text)
    if args.report:
        prefix = Path(args.report)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        prefix.with_suffix(".txt").write_text(text)
        prefix.with_suffix(".kv").write_text(report.to_kv())
    return 1 if failures or not report.per_sequence else 0


def cmd_train(args) -> int:
    from lidarmos.learned import ModelSpec, TrainConfig, make_dataset, save_model, train

    root = _dataset_root(args)
    cfg = _projection(args)
    train_ids = args.sequences or [s for s in list_sequences(root) if s not in args.val]
    if not train_ids:
        raise CliError("no training sequences")
    load = lambda ids: [load_sequence(root, s) for s in ids]  # noqa: E731
    train_seqs, val_seqs = load(train_ids), load(args.val)
    for seq in train_seqs + val_seqs:
        if not seq.has_labels:
            raise CliError(f"sequence {seq.seq_id} has no labels")
    data, norm = make_dataset(train_seqs, args.n_residual, cfg, noise_units=args.noise,
                              seed=args.seed)
    val, _ = make_dataset(val_seqs, args.n_residual, cfg, norm, args.noise, args.seed)
    spec = ModelSpec(args.window, args.n_residual, tuple(args.hidden), args.seed)
    tcfg = TrainConfig(args.lr, args.batch_size, args.epochs,
                       class_weights=tuple(args.class_weights) if args.class_weights else None,
                       sampling_rate=args.sampling_rate, seed=args.seed)
    params, tlog = train(spec, tcfg, data, val, norm)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_model(params, args.out)
    lines = [f"# samples={tlog.n_samples} class_weights={tlog.class_weights}"]
    for e, loss in enumerate(tlog.epoch_loss):
        v = f" val_iou={tlog.val_iou[e]:.6f}" if tlog.val_iou else ""
        lines.append(f"epoch={e} loss={loss:.8f}{v}")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.log:
        Path(args.log).write_text(text)
    return 0


def cmd_synth(args) -> int:
    from lidarmos.synth import make_benchmark

    try:
        seqs = make_benchmark(args.preset, args.seed, sensor=_projection(args))
    except KeyError as e:
        raise CliError(str(e.args[0])) from None
    for seq in seqs:
        seq.write(args.out)
        print(f"wrote sequence {seq.seq_id}: {len(seq)} scans")
    return 0


def cmd_clean_map(args) -> int:
    from lidarmos.mapping import build_map, export_ply

    root = _dataset_root(args)
    seq = load_sequence(root, args.sequence)
    if args.predictions:
        pdir = Path(args.predictions) / "sequences" / args.sequence / "predictions"
        files = sorted(pdir.glob("*.label")) if pdir.is_dir() else []
        if len(files) != len(seq):
            raise CliError(f"{len(files)} prediction files in {pdir}, expected {len(seq)}")
        preds = []
        for i, f in enumerate(files):
            n = len(seq.load_scan(i, with_labels=False))
            preds.append(read_semantic_labels(f, n))
    else:
        if not seq.has_labels:
            raise CliError(f"sequence {args.sequence} has no labels; pass --predictions")
        preds = [seq.load_scan(i).labels for i in range(len(seq))]
    m = build_map(seq, preds, voxel=args.voxel)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    export_ply(m, args.out, binary=args.binary)
    print(f"map: {len(m)} points, {m.removed} moving points removed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lidarmos", description="LiDAR moving object segmentation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seqs=True):
        sp.add_argument("--dataset", help=f"dataset root (default: ${DATASET_ENV})")
        if seqs:
            sp.add_argument("--sequences", nargs="+", help="sequence ids (default: all)")
        sp.add_argument("-N", "--n-residual", type=int, default=1)
        sp.add_argument("--noise", type=int, default=0, help="pose noise units")
        sp.add_argument("--seed", type=int, default=0)

    def projection(sp):
        d = ProjectionConfig()
        sp.add_argument("--height", type=int, default=d.h)
        sp.add_argument("--width", type=int, default=d.w)
        sp.add_argument("--fov-up", type=float, default=float(np.degrees(d.fov_up)))
        sp.add_argument("--fov-down", type=float, default=float(np.degrees(d.fov_down)))

    sp = sub.add_parser("infer", help="predict moving points for every scan")
    common(sp)
    projection(sp)
    sp.add_argument("--method", choices=METHODS, default="residual-rg")
    sp.add_argument("--model")
    sp.add_argument("--threshold", type=float, default=HeuristicParams().threshold)
    sp.add_argument("--no-knn", action="store_true")
    sp.add_argument("--warmup", type=int, default=10)
    sp.add_argument("--timing-out")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("eval", help="score predictions against ground truth")
    common(sp)
    sp.add_argument("--predictions", required=True)
    sp.add_argument("--method-id", default="unknown")
    sp.add_argument("--report", help="output prefix; writes .txt and .kv")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("train", help="train the learned per-pixel head")
    common(sp)
    projection(sp)
    sp.add_argument("--val", nargs="+", default=["08"])
    sp.add_argument("--window", type=int, default=5)
    sp.add_argument("--hidden", type=int, nargs="+", default=[64, 32])
    sp.add_argument("--lr", type=float, default=0.01)
    sp.add_argument("--batch-size", type=int, default=256)
    sp.add_argument("--epochs", type=int, default=30)
    sp.add_argument("--class-weights", type=float, nargs=2, metavar=("MOVING", "STATIC"))
    sp.add_argument("--sampling-rate", type=float, default=0.05)
    sp.add_argument("--log")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("synth", help="render a synthetic benchmark")
    projection(sp)
    sp.add_argument("--preset", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("clean-map", help="aggregate a sequence with moving points removed")
    sp.add_argument("--dataset")
    sp.add_argument("--sequence", required=True)
    sp.add_argument("--predictions", help="prediction root (default: ground truth labels)")
    sp.add_argument("--voxel", type=float)
    sp.add_argument("--binary", action="store_true")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_clean_map)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "n_residual", 0) < 0:
        print("error: -N must be >= 0", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (CliError, MosError, FileNotFoundError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
