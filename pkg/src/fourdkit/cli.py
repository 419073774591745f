"""``fourdkit`` command line.

Subcommands::

    simulate   CONFIG OUT              render a synthetic sequence to a bundle
    eval       PRED GT                 score predictions against ground truth
    convert    BUNDLE OUT --from --to  change motion parameterization
    loss       PRED GT                 evaluate the training objective
    gradcheck                          finite-difference check of loss gradients
    validate   BUNDLE                  structural checks on a bundle

Exit codes: 0 success, 1 a check failed (gradcheck, validate), 2 degenerate
scale alignment, 3 unreadable or inconsistent input.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import __version__
from .bundle import MANIFEST, read_bundle, validate_bundle, write_bundle
from .errors import AlignmentDegenerateError, DegenerateScaleError, FourDKitError
from .gradcheck import LOSSES, grad_check_suite
from .losses import DEFAULT_WEIGHTS, DYNAMIC_WEIGHT, total_loss
from .metrics import ALIGN_MODES, APD_THRESHOLDS, TAU_DELTA, EvalConfig, EvalReport, evaluate_sequence
from .motion import REPRESENTATIONS, convert_sequence
from .report import figure_stem, to_table, with_header, write_report
from .synth import SceneConfig, build_scene, export_bundle

log = logging.getLogger("fourdkit")

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_DEGENERATE = 2
EXIT_INPUT = 3
THREADS_ENV = "FOURDKIT_THREADS"


# ---------------------------------------------------------------------------
# argument helpers
# ---------------------------------------------------------------------------


def _float_list(text: str) -> tuple:
    try:
        vals = tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from e
    if not vals or min(vals) <= 0:
        raise argparse.ArgumentTypeError("thresholds must be positive")
    return vals


def _weights(text: str) -> dict:
    out = {}
    for item in text.split(","):
        if not item.strip():
            continue
        key, sep, val = item.partition("=")
        if not sep:
            raise argparse.ArgumentTypeError(f"expected term=value, got {item!r}")
        key = key.strip()
        if key not in DEFAULT_WEIGHTS:
            raise argparse.ArgumentTypeError(f"unknown loss term {key!r}; choose from {', '.join(DEFAULT_WEIGHTS)}")
        try:
            out[key] = float(val)
        except ValueError as e:
            raise argparse.ArgumentTypeError(f"bad weight for {key}: {val!r}") from e
    return out


def _nonneg(text: str) -> float:
    v = float(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be non-negative")
    return v


def resolve_threads(flag: int | None) -> int:
    """``--threads`` wins, then $FOURDKIT_THREADS, then the machine's core count."""
    if flag is not None:
        n = flag
    elif os.environ.get(THREADS_ENV, "").strip():
        try:
            n = int(os.environ[THREADS_ENV])
        except ValueError:
            raise SystemExit(f"{THREADS_ENV} must be an integer, got {os.environ[THREADS_ENV]!r}")
    else:
        n = os.cpu_count() or 1
    return max(1, n)


def find_sequences(path) -> dict:
    """Map sequence name -> bundle directory for a bundle or a directory of bundles."""
    path = Path(path)
    if (path / MANIFEST).is_file():
        return {path.name: path}
    if not path.is_dir():
        raise FileNotFoundError(f"{path} is neither a bundle nor a directory of bundles")
    found = {p.name: p for p in sorted(path.iterdir()) if (p / MANIFEST).is_file()}
    if not found:
        raise FileNotFoundError(f"no bundles under {path}")
    return found


def pair_sequences(pred_dir, gt_dir) -> list:
    pred = find_sequences(pred_dir)
    gt = find_sequences(gt_dir)
    if len(pred) == 1 and len(gt) == 1:
        (name, p), (_, g) = next(iter(pred.items())), next(iter(gt.items()))
        return [(name, p, g)]
    missing = sorted(set(gt) - set(pred))
    if missing:
        raise FileNotFoundError(f"no prediction for sequence(s): {', '.join(missing)}")
    return [(name, pred[name], gt[name]) for name in sorted(gt)]


def _emit(kind: str, doc: dict, args) -> None:
    print(to_table(kind, doc))
    if not getattr(args, "out", None):
        return
    paths = write_report(kind, doc, args.out)
    written = [paths["json"], paths["csv"]]
    if not getattr(args, "no_figures", False):
        from . import plotting

        draw = {"eval": plotting.plot_eval, "gradcheck": plotting.plot_gradcheck, "loss": plotting.plot_loss}.get(kind)
        if draw is not None:
            written += draw(doc, figure_stem(args.out))
    for p in written:
        log.info("wrote %s", p)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = SceneConfig.load(args.config)
    if args.seed is not None:
        cfg = SceneConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
    seq = export_bundle(build_scene(cfg), args.out)
    print(f"wrote {len(seq)} views ({seq.shape[0]}x{seq.shape[1]}, scale {seq.scale:.6g}) to {args.out}")
    return EXIT_OK


def _eval_one(item, config):
    name, p, g = item
    return evaluate_sequence(read_bundle(p), read_bundle(g), config, name=name)


def cmd_eval(args) -> int:
    config = EvalConfig(align=args.align, thresholds=args.thresholds, tau_delta=args.tau, mask_theta=args.mask_theta)
    pairs = pair_sequences(args.pred, args.gt)
    threads = min(resolve_threads(args.threads), len(pairs))
    try:
        if threads == 1:
            records = [_eval_one(item, config) for item in pairs]
        else:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                records = list(pool.map(lambda item: _eval_one(item, config), pairs))
    except AlignmentDegenerateError as e:
        print(f"error: degenerate alignment: {e}", file=sys.stderr)
        return EXIT_DEGENERATE
    doc = with_header("eval", EvalReport(records, config).to_dict(), timestamp=not args.no_timestamp)
    _emit("eval", doc, args)
    return EXIT_OK


def cmd_convert(args) -> int:
    seq = read_bundle(args.bundle)
    out = convert_sequence(seq, args.src, args.dst, occlusion_tol=args.occlusion_tol)
    write_bundle(out, args.out)
    print(f"converted {args.src} -> {args.dst} for {len(out)} views into {args.out}")
    return EXIT_OK


def cmd_loss(args) -> int:
    pairs = pair_sequences(args.pred, args.gt)
    if len(pairs) != 1:
        raise FourDKitError("loss takes exactly one prediction bundle and one ground-truth bundle")
    _, p, g = pairs[0]
    try:
        rep = total_loss(read_bundle(p), read_bundle(g), weights=args.weights, w_dyn=args.w_dyn, mask_theta=args.mask_theta)
    except DegenerateScaleError as e:
        print(f"error: degenerate scene scale: {e}", file=sys.stderr)
        return EXIT_DEGENERATE
    doc = with_header("loss", rep.to_dict(), timestamp=not args.no_timestamp)
    _emit("loss", doc, args)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    ids = None if args.loss == "all" else [args.loss]
    rep = grad_check_suite(ids, n_points=args.points, seed=args.seed, h=args.h, tol=args.tol, fd_precision=args.fd_precision)
    doc = with_header("gradcheck", rep.to_dict(), timestamp=not args.no_timestamp)
    _emit("gradcheck", doc, args)
    return EXIT_OK if rep.passed else EXIT_CHECK_FAILED


def cmd_validate(args) -> int:
    diags = validate_bundle(args.bundle)
    doc = with_header("validate", {"bundle": str(args.bundle), "diagnostics": [d.to_dict() for d in diags]}, timestamp=False)
    if diags:
        for d in diags:
            print(d)
    else:
        print(f"{args.bundle}: ok")
    if args.out:
        write_report("validate", doc, args.out)
    return EXIT_CHECK_FAILED if diags else EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _report_flags(p, figures=True):
    p.add_argument("--out", type=Path, help="write the JSON report here (CSV and figures go alongside)")
    p.add_argument("--no-timestamp", action="store_true", help="omit the generation time so reruns are byte-identical")
    if figures:
        p.add_argument("--no-figures", action="store_true", help="skip the PNG figures")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fourdkit", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="render a synthetic scene to a ground-truth bundle")
    p.add_argument("config", type=Path, help="JSON scene configuration")
    p.add_argument("out", type=Path)
    p.add_argument("--seed", type=int, help="override the config's seed")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("eval", help="score a prediction against ground truth")
    p.add_argument("pred", type=Path, help="prediction bundle or directory of bundles")
    p.add_argument("gt", type=Path, help="ground-truth bundle or directory of bundles")
    p.add_argument("--align", choices=ALIGN_MODES, default="median")
    p.add_argument("--thresholds", type=_float_list, default=APD_THRESHOLDS, help="APD thresholds in metres, comma separated")
    p.add_argument("--tau", type=float, default=TAU_DELTA, help="scene-flow inlier threshold in metres")
    p.add_argument("--mask-theta", type=_nonneg, default=1e-3, help="flow norm above which a pixel counts as dynamic")
    p.add_argument("--threads", type=int, help=f"worker threads (default ${THREADS_ENV}, else all cores)")
    _report_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("convert", help="re-express a bundle's motion in another parameterization")
    p.add_argument("bundle", type=Path)
    p.add_argument("out", type=Path)
    p.add_argument("--from", dest="src", choices=REPRESENTATIONS, required=True)
    p.add_argument("--to", dest="dst", choices=REPRESENTATIONS, required=True)
    p.add_argument("--occlusion-tol", type=_nonneg, default=1e-2, help="relative depth test for flow2d output")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("loss", help="evaluate the training objective on a prediction")
    p.add_argument("pred", type=Path)
    p.add_argument("gt", type=Path)
    p.add_argument("--weights", type=_weights, default=None, help="term=weight overrides, e.g. pointmap=1,scale=0.5")
    p.add_argument("--w-dyn", type=float, default=DYNAMIC_WEIGHT, help="scene-flow weight on dynamic pixels")
    p.add_argument("--mask-theta", type=_nonneg, default=1e-3)
    _report_flags(p)
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser("gradcheck", help="compare analytic and finite-difference loss gradients")
    p.add_argument("--loss", choices=["all", *LOSSES], default="all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--h", type=float, default=1e-6, help="central-difference step")
    p.add_argument("--points", type=int, default=100, help="random points per loss")
    p.add_argument(
        "--fd-precision",
        choices=["extended", "double"],
        default="extended",
        help="float type for the finite-difference reference (the analytic gradient is always double)",
    )
    _report_flags(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("validate", help="check a bundle's structure and invariants")
    p.add_argument("bundle", type=Path)
    p.add_argument("--out", type=Path, help="also write the diagnostics as JSON/CSV")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (FourDKitError, FileNotFoundError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
