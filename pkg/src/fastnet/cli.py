"""Command-line entry point: ``fastnet {train,eval,predict,inspect,bench,gradcheck}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.

Datasets are read from the standard CIFAR binary archives extracted
locally (``cifar-10-binary.tar.gz`` / ``cifar-100-binary.tar.gz`` from
https://www.cs.toronto.edu/~kriz/cifar.html); nothing is downloaded.
"""

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

log = logging.getLogger("fastnet")


class UsageError(Exception):
    pass


def _positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _int_list(text):
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _arch_flags(p):
    p.add_argument("--plain-first-conv", action="store_true", help="first layer is a plain conv (no BN+ReLU on the image)")


def _spec(args, num_classes):
    from .network import fastnet_spec

    return fastnet_spec(num_classes, first_cell_plain_conv=getattr(args, "plain_first_conv", False))


def _determinism(args):
    if getattr(args, "fast", False):
        return contextlib.nullcontext()
    return threadpool_limits(limits=1)


def _load(args, num_classes):
    from .model_io import load_model

    path = Path(args.model)
    if not path.is_file():
        raise UsageError(f"model file not found: {path}")
    return load_model(path, _spec(args, num_classes))


# --- commands ------------------------------------------------------------


def cmd_train(args):
    from .data import NUM_CLASSES, compute_channel_stats, load_cifar
    from .model_io import save_checkpoint, save_model
    from .network import build_model
    from .training import AdamState, TrainConfig, fit

    if args.epochs < 1:
        raise UsageError("--epochs must be at least 1")
    if not Path(args.data_dir).is_dir():
        raise UsageError(f"data directory not found: {args.data_dir}")
    for out in filter(None, (args.out, args.metrics, args.checkpoint)):
        parent = Path(out).resolve().parent
        if not parent.is_dir() or not os.access(parent, os.W_OK):
            raise UsageError(f"cannot write {out}")
    try:
        config = TrainConfig(
            lr0=args.lr,
            milestones=tuple(args.milestones),
            decay_factor=args.decay,
            epochs=args.epochs,
            batch_size=args.batch_size,
            seed=args.seed,
            augment=not args.no_augment,
        )
    except ValueError as e:
        raise UsageError(str(e))
    try:
        train = load_cifar(args.data_dir, args.dataset, "train", args.limit)
        test = load_cifar(args.data_dir, args.dataset, "test", args.test_limit or args.limit)
    except FileNotFoundError as e:
        raise UsageError(str(e))

    stats = compute_channel_stats(train.pixels)
    train, test = train.with_stats(stats), test.with_stats(stats)
    model = build_model(_spec(args, NUM_CLASSES[args.dataset]), seed=args.seed)
    model.input_mean[:] = stats.mean
    model.input_std[:] = stats.std
    log.info("training on %d images, testing on %d", len(train), len(test))

    sink = open(args.metrics, "w") if args.metrics else sys.stdout

    def emit(m):
        sink.write(json.dumps(m.to_json()) + "\n")
        sink.flush()

    adam = AdamState.zeros_like(model.named_parameters())
    try:
        with _determinism(args):
            fit(model, train, test, config, on_epoch=emit, adam_state=adam)
    finally:
        if sink is not sys.stdout:
            sink.close()
    save_model(model, args.out)
    if args.checkpoint:
        save_checkpoint(model, adam, args.checkpoint)
    log.info("wrote %s", args.out)
    return 0


def cmd_eval(args):
    from .data import NUM_CLASSES, ChannelStats, load_cifar
    from .training import evaluate

    model = _load(args, NUM_CLASSES[args.dataset])
    try:
        test = load_cifar(args.data_dir, args.dataset, args.split, args.limit)
    except FileNotFoundError as e:
        raise UsageError(str(e))
    test = test.with_stats(ChannelStats(tuple(model.input_mean), tuple(model.input_std)))
    with _determinism(args):
        acc = evaluate(model, test.images(), test.labels)
    print(f"{acc:.4f}")
    return 0


def cmd_predict(args):
    from .data import PIXELS, RECORD_SIZE, ChannelStats, normalize
    from .network import predict_logits
    from .training import softmax

    model = _load(args, args.classes)
    path = Path(args.image)
    if not path.is_file():
        raise UsageError(f"image file not found: {path}")
    raw = path.read_bytes()
    if len(raw) == PIXELS:
        pixels = raw
    elif len(raw) in RECORD_SIZE.values():
        pixels = raw[len(raw) - PIXELS :]
    else:
        raise UsageError(f"image must be {PIXELS} raw bytes or one CIFAR record, got {len(raw)} bytes")
    img = np.frombuffer(pixels, np.uint8).reshape(1, 3, 32, 32)
    x = normalize(img, ChannelStats(tuple(model.input_mean), tuple(model.input_std)))
    probs = softmax(predict_logits(model, x).astype(np.float64))[0]
    top = np.argsort(-probs, kind="stable")[: args.top]
    print("class,probability")
    for k in top:
        print(f"{k},{probs[k]:.6f}")
    return 0


def cmd_inspect(args):
    from .network import inspect_report

    rows = inspect_report(_spec(args, args.classes))
    cols = ["layer", "type", "out_shape", "params", "macs"]
    if args.format == "csv":
        print(",".join(cols))
        for r in rows:
            print(",".join(str(r[c]) for c in cols))
    else:
        widths = {c: max(len(c), *(len(f"{r[c]:,}" if c in ("params", "macs") else str(r[c])) for r in rows)) for c in cols}
        print("  ".join(c.ljust(widths[c]) for c in cols))
        for r in rows:
            cells = [
                (f"{r[c]:,}".rjust(widths[c]) if c in ("params", "macs") else str(r[c]).ljust(widths[c])) for c in cols
            ]
            print("  ".join(cells))
        total = rows[-1]["params"]
        print(f"\n{total:,} parameters ({total / 1e6:.1f} M)")
    return 0


def cmd_bench(args):
    from .bench import CSV_HEADER, run_bench
    from .network import build_model

    if args.seconds <= 0:
        raise UsageError("--seconds must be positive")
    batches = args.batch or [1, 32]
    threads = args.threads or sorted({1, os.cpu_count() or 1})
    if any(b < 1 for b in batches) or any(t < 1 for t in threads):
        raise UsageError("--batch and --threads values must be positive")
    model = _load(args, args.classes) if args.model else build_model(_spec(args, args.classes), seed=args.seed)
    print(CSV_HEADER)
    for b in batches:
        for t in threads:
            print(run_bench(model, b, t, args.seconds, warmup=args.warmup, seed=args.seed).csv(), flush=True)
    return 0


def cmd_gradcheck(args):
    from .gradcheck import TOLERANCE, run_suite

    worst = run_suite(coords=args.coords)
    print("layer,max_rel_error")
    for name, err in worst.items():
        print(f"{name},{err:.3e}")
    failed = [n for n, e in worst.items() if not e < TOLERANCE]
    if failed:
        log.error("gradient check failed for: %s", ", ".join(failed))
        return 1
    return 0


# --- parser --------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="fastnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    det = argparse.ArgumentParser(add_help=False)
    g = det.add_mutually_exclusive_group()
    g.add_argument("--deterministic", dest="fast", action="store_false", help="fixed reduction order (default)")
    g.add_argument("--fast", dest="fast", action="store_true", help="allow multi-threaded BLAS")
    det.set_defaults(fast=False)

    p = sub.add_parser("train", parents=[det], help="train FastNet on CIFAR")
    p.add_argument("--dataset", choices=["c10", "c100"], required=True)
    p.add_argument("--data-dir", required=True, help="directory holding the extracted binary archive")
    p.add_argument("--out", required=True, help="where to write the model file")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--limit", type=_positive_int, help="read at most N records per split")
    p.add_argument("--test-limit", type=_positive_int, help="read at most N test records (overrides --limit)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--milestones", type=_int_list, default=[80, 120, 160, 180])
    p.add_argument("--decay", type=float, default=0.1, help="factor applied at each milestone")
    p.add_argument("--batch-size", type=_positive_int, default=128)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--metrics", help="JSON-lines metrics file (default: stdout)")
    p.add_argument("--checkpoint", help="also write model + Adam moments here")
    _arch_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[det], help="accuracy of a model file on a CIFAR split")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", choices=["c10", "c100"], required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--limit", type=_positive_int)
    _arch_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="top-5 classes for one image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True, help="3072 raw bytes (RGB planes) or one CIFAR record")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--top", type=_positive_int, default=5)
    _arch_flags(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("inspect", help="per-layer parameter and MAC table")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--format", choices=["csv", "text"], default="text")
    _arch_flags(p)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("bench", help="CPU inference throughput")
    p.add_argument("--model", help="model file (default: freshly initialized weights)")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--batch", type=_int_list, help="batch sizes, default 1,32")
    p.add_argument("--threads", type=_int_list, help="worker counts, default 1,<cpu count>")
    p.add_argument("--seconds", type=float, default=3.0, help="measurement window per configuration")
    p.add_argument("--warmup", type=int, default=3, choices=range(3, 101), metavar="N", help="warmup batches (>= 3)")
    p.add_argument("--seed", type=int, default=0)
    _arch_flags(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward kernel")
    p.add_argument("--coords", type=_positive_int, default=200, help="sampled coordinates per tensor (min 200)")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    if getattr(args, "coords", 200) < 200:
        parser.error("--coords must be at least 200")
    from .model_io import ModelFileError
    from .tensor_core import NonFiniteError

    try:
        return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"fastnet: error: {e}", file=sys.stderr)
        return 2
    except (ModelFileError, NonFiniteError, RuntimeError) as e:
        log.error("%s", e)
        return 1


def run():
    sys.exit(main())
