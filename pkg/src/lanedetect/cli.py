"""Command line entry points.

Subcommands: prepare (scan + split + pack shards), train, eval, sweep,
predict, gradcheck.  Every handler returns a process exit code; domain
and I/O failures print one `error:` line instead of a traceback.
"""

import argparse
import os
import sys

from .data import SplitSpec, scan_dataset, split_dataset
from .errors import DomainError, LaneDetectError
from .gradcheck import format_report, run_all
from .metrics import threshold_sweep, write_sweep_csv
from .model import build_model, check_params_match, load_checkpoint
from .shards import ShardReader, find_shards, pack_shards
from .train import TrainConfig, evaluate, predict, train


def _cmd_prepare(args) -> int:
    index = scan_dataset(args.root, args.list_file)
    tr, dev = split_dataset(index, SplitSpec(seed=args.seed))
    for name, part in (("train", tr), ("dev", dev)):
        out = os.path.join(args.out, name)
        if not part.entries:
            print(f"{name}: 0 samples, nothing packed")
            continue
        paths = pack_shards(part, out, shard_size=args.shard_size,
                            scale=args.scale,
                            allow_any_size=args.allow_any_size)
        print(f"{name}: {len(part.entries)} samples in {len(paths)} shard(s) under {out}")
    return 0


def _cmd_train(args) -> int:
    lr_factor, lr_interval = 1.0, 1
    if args.lr_decay is not None:
        parts = args.lr_decay.split(",")
        if len(parts) != 2:
            raise DomainError(f"--lr-decay wants FACTOR,INTERVAL, got {args.lr_decay!r}")
        lr_factor, lr_interval = float(parts[0]), int(parts[1])
    config = TrainConfig(shards=args.shards, out_dir=args.out,
                         epochs=args.epochs, batch=args.batch, loss=args.loss,
                         lr=args.lr, lr_factor=lr_factor,
                         lr_interval=lr_interval, lr_floor=args.lr_floor,
                         seed=args.seed, ckpt_interval=args.ckpt_interval,
                         augment_intensity=args.augment,
                         target_loss=args.target_loss,
                         epoch_eval=args.epoch_eval)

    def show(r):
        print(f"epoch {r.epoch}: loss={r.loss:.6f} acc={r.binary_accuracy:.4f} "
              f"f1={r.f1:.4f} lr={r.lr:g} ({r.wall_ms:.0f} ms)")

    result = train(config, resume=args.resume, progress=show)
    print(f"final checkpoint: {result.checkpoint_path}")
    print(f"metrics log: {result.metrics_path}")
    return 0


def _cmd_eval(args) -> int:
    r = evaluate(args.ckpt, args.shards, threshold=args.threshold,
                 batch_size=args.batch, loss=args.loss)
    print(f"epoch={r.epoch} step={r.step} loss={r.loss!r} "
          f"binary_accuracy={r.binary_accuracy!r} f1={r.f1!r} "
          f"threshold={args.threshold}")
    return 0


def _parse_grid(text: str):
    parts = text.split(":")
    if len(parts) != 3:
        raise DomainError(f"grid must be start:stop:step, got {text!r}")
    try:
        start, stop, step = (float(t) for t in parts)
    except ValueError:
        raise DomainError(f"grid must be numeric start:stop:step, got {text!r}") from None
    if step <= 0:
        raise DomainError(f"grid step must be positive, got {step}")
    if not 0.0 < start <= stop < 1.0:
        raise DomainError(f"grid must stay inside (0,1), got {text!r}")
    values = []
    k = 0
    while True:
        # rounding keeps 0.05*k off the accumulated float error
        v = round(start + k * step, 10)
        if v > stop + 1e-12:
            break
        values.append(v)
        k += 1
    return values


def _cmd_sweep(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    paths = find_shards(args.shards)
    r = ShardReader(paths[0])
    graph, _ = build_model(ckpt.seed, input_hw=(r.h, r.w))
    check_params_match(graph, ckpt.params)
    result = threshold_sweep(graph, ckpt.params, paths,
                             thresholds=_parse_grid(args.grid),
                             batch_size=args.batch)
    write_sweep_csv(args.out, result)
    best = result.best_threshold()
    best_f1 = max(row[3] for row in result.rows)
    print(f"wrote {args.out}: best threshold {best} (f1={best_f1:.4f})")
    return 0


def _cmd_predict(args) -> int:
    predict(args.ckpt, args.image, out_prob=args.out_prob,
            out_mask=args.out_mask, out_overlay=args.out_overlay,
            threshold=args.threshold, scale=args.scale,
            allow_any_size=args.allow_any_size)
    wrote = [p for p in (args.out_prob, args.out_mask, args.out_overlay) if p]
    print("wrote " + ", ".join(wrote) if wrote else "no output paths given")
    return 0


def _cmd_gradcheck(args) -> int:
    report = run_all(seed=args.seed, eps=args.eps, cases=args.cases)
    print(format_report(report))
    return 0 if report.passed else 1


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="lanedetect",
        description="Lane segmentation: data packing, training, evaluation.")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("prepare", help="scan a dataset tree, split 90/10, pack shards")
    sp.add_argument("--root", required=True, help="dataset root directory")
    sp.add_argument("--list", dest="list_file", default=None,
                    help="optional file listing image paths relative to root")
    sp.add_argument("--out", required=True, help="output directory for shards")
    sp.add_argument("--scale", type=float, default=0.2)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--shard-size", type=int, default=1000)
    sp.add_argument("--allow-any-size", action="store_true",
                    help="accept images of any dimensions")
    sp.set_defaults(func=_cmd_prepare)

    tp = sub.add_parser("train", help="train on packed shards")
    tp.add_argument("--shards", required=True)
    tp.add_argument("--out", required=True, help="checkpoint + log directory")
    tp.add_argument("--epochs", type=int, default=600)
    tp.add_argument("--batch", type=int, default=128)
    tp.add_argument("--loss", choices=("dice", "bce", "mse"), default="dice")
    tp.add_argument("--lr", type=float, default=1e-4)
    tp.add_argument("--lr-decay", default=None, metavar="FACTOR,INTERVAL")
    tp.add_argument("--lr-floor", type=float, default=1e-4)
    tp.add_argument("--seed", type=int, default=0)
    tp.add_argument("--ckpt-interval", type=int, default=50)
    tp.add_argument("--resume", default=None, metavar="CKPT")
    tp.add_argument("--epoch-eval", action="store_true",
                    help="log a dropout-off full pass per epoch")
    tp.add_argument("--target-loss", type=float, default=None)
    tp.add_argument("--augment", type=float, default=0.0,
                    help="channel shift intensity, 0 disables")
    tp.set_defaults(func=_cmd_train)

    ep = sub.add_parser("eval", help="metrics for a checkpoint over shards")
    ep.add_argument("--ckpt", required=True)
    ep.add_argument("--shards", required=True)
    ep.add_argument("--threshold", type=float, default=0.5)
    ep.add_argument("--batch", type=int, default=128)
    ep.add_argument("--loss", choices=("dice", "bce", "mse"), default="dice")
    ep.set_defaults(func=_cmd_eval)

    wp = sub.add_parser("sweep", help="precision/recall/f1 across thresholds")
    wp.add_argument("--ckpt", required=True)
    wp.add_argument("--shards", required=True)
    wp.add_argument("--grid", default="0.05:0.95:0.05", metavar="START:STOP:STEP")
    wp.add_argument("--out", required=True, help="CSV output path")
    wp.add_argument("--batch", type=int, default=128)
    wp.set_defaults(func=_cmd_sweep)

    pp = sub.add_parser("predict", help="run one image, write maps")
    pp.add_argument("--ckpt", required=True)
    pp.add_argument("--image", required=True)
    pp.add_argument("--out-prob", default=None)
    pp.add_argument("--out-mask", default=None)
    pp.add_argument("--out-overlay", default=None)
    pp.add_argument("--threshold", type=float, default=0.5)
    pp.add_argument("--scale", type=float, default=0.2)
    pp.add_argument("--allow-any-size", action="store_true")
    pp.set_defaults(func=_cmd_predict)

    gp = sub.add_parser("gradcheck", help="finite-difference verification suites")
    gp.add_argument("--seed", type=int, default=0)
    gp.add_argument("--eps", type=float, default=1e-5)
    gp.add_argument("--cases", type=int, default=20)
    gp.set_defaults(func=_cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (LaneDetectError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
