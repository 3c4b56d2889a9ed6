"""``haformer`` command line: describe, forward, check, bench, overfit.

Exit codes: 0 success, 1 validation failure, 2 property failure.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
import time
from contextlib import nullcontext
from dataclasses import replace

import numpy as np

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def parse_res(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"resolution must look like HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError(f"resolution must be positive, got {text!r}")
    return h, w


def positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {text}")
    return v


def build_parser():
    from .network import VARIANTS

    p = Parser(prog="haformer", description="hierarchy-aware hybrid segmentation network toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    d = sub.add_parser("describe", help="print the parameter/FLOP ledger")
    d.add_argument("--config", required=True)
    d.add_argument("--res", type=parse_res)
    d.add_argument("--format", choices=("table", "csv"), default="table")
    d.add_argument("--variant", choices=list(VARIANTS))
    d.add_argument("--plot", metavar="PNG", help="also write a per-variant cost chart")

    f = sub.add_parser("forward", help="label one PPM image")
    f.add_argument("--config", required=True)
    g = f.add_mutually_exclusive_group(required=True)
    g.add_argument("--weights")
    g.add_argument("--random-init", type=int, metavar="SEED")
    f.add_argument("--image", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--plot", metavar="PNG", help="also write a colour preview of the labels")

    c = sub.add_parser("check", help="run the invariant/oracle/gradient suite")
    c.add_argument("--filter", default="")
    c.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)

    b = sub.add_parser("bench", help="time forward passes")
    b.add_argument("--config", required=True)
    b.add_argument("--res", type=parse_res)
    b.add_argument("--iters", type=positive_int, default=10)
    b.add_argument("--plot", metavar="PNG")

    o = sub.add_parser("overfit", help="fit the synthetic quadrant task")
    o.add_argument("--config", required=True)
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--steps", type=positive_int, default=200)
    o.add_argument("--lr", type=float, default=0.05)
    o.add_argument("--size", type=positive_int, default=64, help="square task extent")
    o.add_argument("--plot", metavar="PNG")
    return p


def _config(path):
    from .network import load_config

    if not os.path.isfile(path):
        raise UsageError(f"config file not found: {path}")
    return load_config(path)


def _check_out_dir(path):
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise UsageError(f"output directory does not exist: {parent}")


def _base(cfg):
    """``cfg`` with every ablation knob reset to the default architecture."""
    from .network import VARIANTS, ModelConfig

    keys = {k for over in VARIANTS.values() for k in over}
    return replace(cfg, **{k: getattr(ModelConfig(), k) for k in keys})


def _reference(cfg):
    from .accounting import REFERENCE
    from .network import variant

    for name, ref in REFERENCE.items():
        if variant(name) == cfg:
            return ref
    return None


def cmd_describe(args, out):
    from .accounting import cost_report, emit_report
    from .network import VARIANTS, variant

    cfg = _config(args.config)
    if args.variant:
        cfg = variant(args.variant, cfg)
    res = args.res or (cfg.height, cfg.width)
    cfg = replace(cfg, height=res[0], width=res[1]).validate()
    ref = _reference(cfg) if res == (512, 1024) else None
    rep = cost_report(cfg, res, ref)
    out.write(emit_report(rep, args.format))
    if args.plot:
        from .plotting import plot_costs

        _check_out_dir(args.plot)
        reports = {name: cost_report(variant(name, _base(cfg)), res) for name in VARIANTS}
        plot_costs(reports, args.plot, f"cost ledger @ {res[0]}x{res[1]}")
    return EXIT_OK


def cmd_forward(args, out):
    from .imageio import read_ppm, write_pgm
    from .network import build, load_model

    cfg = _config(args.config)
    for path in (args.image,) + ((args.weights,) if args.weights else ()):
        if not os.path.isfile(path):
            raise UsageError(f"file not found: {path}")
    _check_out_dir(args.out)
    image = read_ppm(args.image)
    cfg = replace(cfg, height=image.shape[1], width=image.shape[2]).validate()
    model = load_model(args.weights, cfg) if args.weights else build(cfg, args.random_init)
    labels = np.argmax(model.forward(image), axis=0)
    write_pgm(args.out, labels)
    out.write(f"wrote {args.out}: {labels.shape[0]}x{labels.shape[1]} labels, {len(np.unique(labels))} distinct\n")
    if args.plot:
        from .plotting import plot_labels

        _check_out_dir(args.plot)
        plot_labels(labels, args.plot)
    return EXIT_OK


def cmd_check(args, out):
    from .checks import run_checks

    passed, failed = run_checks(args.filter, args.inject_fault, out=lambda s: out.write(s + "\n"))
    if passed + failed == 0:
        raise UsageError(f"no checks match filter {args.filter!r}")
    out.write(f"{passed} passed, {failed} failed\n")
    return EXIT_OK if failed == 0 else EXIT_FAILED


def cmd_bench(args, out):
    from .network import build

    cfg = _config(args.config)
    res = args.res or (cfg.height, cfg.width)
    cfg = replace(cfg, height=res[0], width=res[1]).validate()
    model = build(cfg, 0)
    image = np.random.default_rng(0).random((3,) + res).astype(np.float32)
    for _ in range(2):
        model.forward(image)
    times = []
    for _ in range(args.iters):
        t0 = time.perf_counter()
        model.forward(image)
        times.append(time.perf_counter() - t0)
    out.write(f"bench {res[0]}x{res[1]} iters={args.iters} warmup=2\n")
    out.write(f"# time: mean {1e3 * float(np.mean(times)):.2f} ms\n")
    out.write(f"# time: min {1e3 * float(np.min(times)):.2f} ms\n")
    if args.plot:
        from .plotting import plot_bench

        _check_out_dir(args.plot)
        plot_bench(times, args.plot)
    return EXIT_OK


def cmd_overfit(args, out):
    from .network import overfit, overfit_config

    cfg = overfit_config(_config(args.config), args.size).validate()
    if args.plot:
        _check_out_dir(args.plot)
    out.write("step,loss\n")
    t0 = time.perf_counter()
    with np.errstate(over="ignore", invalid="ignore"):
        losses = overfit(cfg, args.seed, args.steps, args.lr, callback=lambda i, l: out.write(f"{i},{l:.6f}\n"))
    out.write(f"# time: {time.perf_counter() - t0:.1f} s\n")
    if not all(math.isfinite(v) for v in losses):
        out.write("diverged: non-finite loss\n")
        return EXIT_FAILED
    final = losses[-1]
    out.write(f"{args.steps},{final:.6f}\n")
    if args.plot:
        from .plotting import plot_loss

        plot_loss(losses, args.plot)
    ratio = final / losses[0]
    ok = final <= 0.1 * losses[0]
    out.write(f"initial {losses[0]:.6f} final {final:.6f} ratio {ratio:.4f} {'PASS' if ok else 'FAIL'}\n")
    return EXIT_OK if ok else EXIT_FAILED


COMMANDS = {
    "describe": cmd_describe,
    "forward": cmd_forward,
    "check": cmd_check,
    "bench": cmd_bench,
    "overfit": cmd_overfit,
}


def thread_limit():
    raw = os.environ.get("HAFORMER_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"HAFORMER_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise UsageError(f"HAFORMER_THREADS must be >= 0, got {n}")
    if n == 0:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None, out=None):
    from .imageio import ImageFormatError
    from .network import ConfigError
    from .tensor_core import ShapeError

    out = out or sys.stdout
    try:
        args = build_parser().parse_args(argv)
        with thread_limit():
            return COMMANDS[args.command](args, out)
    except UsageError as exc:
        print(f"haformer: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ConfigError, ShapeError, ImageFormatError, ValueError, OSError) as exc:
        print(f"haformer: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return exc.code if isinstance(exc.code, int) else EXIT_OK


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
