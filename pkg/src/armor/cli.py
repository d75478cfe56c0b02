"""Command-line entry point: ``armor {prune,eval,baseline,overhead,plot-trace,selfcheck}``.

Exit codes: 0 success, 1 selfcheck failure, 2 bad flags, 3 degenerate or
mismatched data, 4 I/O or format errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import io as aio
from .driver import (BASELINES, EmptyCalibrationError, OptimizerConfig, baseline_prune,
                     compute_calib_stats, init, normalized_loss, optimize_normalized)
from .loss import proxy_loss
from .normalize import DegenerateWeightError, normalize, scale_wrappers
from .sparse import SelectionConfig
from .tensor import (LLAMA2_13B, LLAMA2_70B, LLAMA2_7B, ContractError, aggregate_overhead, apply,
                     overhead_ratio, reconstruct, weighted_frobenius_sq)

log = logging.getLogger("armor")

PRESETS = {"llama2-7b": LLAMA2_7B, "llama2-13b": LLAMA2_13B, "llama2-70b": LLAMA2_70B}
OPTIMIZERS = {"seq": "sequential-beta", "adam": "adam"}
HEURISTIC_FLAGS = ("uniform", "l1-greedy", "l2-random", "l1-random")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _load_inputs(args):
    w = aio.read_matrix(args.weights)
    if args.calib:
        d = aio.read_vector(args.calib)
    else:
        d = compute_calib_stats(aio.read_matrix(args.acts))
    if d.size != w.shape[1]:
        raise CliError(3, f"calibration length {d.size} does not match {w.shape[1]} input columns")
    return w, d


def effective_block(requested: int, shape: tuple[int, int]) -> int:
    """Largest multiple of 4 not above ``requested`` that divides both dimensions."""
    for b in range(min(requested, *shape) // 4 * 4, 0, -4):
        if shape[0] % b == 0 and shape[1] % b == 0:
            if b != requested:
                log.warning("block size %d does not fit %dx%d; using %d", requested, *shape, b)
            return b
    raise CliError(3, f"no block size divides {shape[0]}x{shape[1]} into groups of 4")


def _summary(**items):
    for k, v in items.items():
        print(f"{k}: {v:.17g}" if isinstance(v, float) else f"{k}: {v}")


def cmd_prune(args) -> int:
    w, d = _load_inputs(args)
    cfg = OptimizerConfig(
        block_size=effective_block(args.block_size, w.shape),
        n_iters=args.iters,
        continuous_mode=OPTIMIZERS[args.optimizer],
        adam_lr=args.lr,
        selection=SelectionConfig(args.heuristic, seed=args.seed),
        init_scoring=args.init,
    )
    norm = normalize(w)
    state, trace = optimize_normalized(norm.w_bar, d, cfg, workers=args.workers, w=w)
    aio.write_container(args.out, state, norm.r1, norm.r2)
    if args.trace:
        aio.write_trace(args.trace, trace)
    _summary(init_loss=trace.initial, final_loss=trace.final,
             overhead=overhead_ratio(*w.shape, cfg.block_size))
    return 0


def cmd_baseline(args) -> int:
    w, d = _load_inputs(args)
    block = effective_block(args.block_size, w.shape)
    if args.method == "nowag-p":
        # same path as ``prune --iters 0`` so the containers match byte for byte
        norm = normalize(w)
        state = init(norm.w_bar, d, OptimizerConfig(block_size=block, n_iters=0), w=w)
        aio.write_container(args.out, state, norm.r1, norm.r2)
        loss = proxy_loss(state, norm.w_bar, d)
    else:
        state, loss = baseline_prune(w, d, args.method, block)
        aio.write_container(args.out, state)
    _summary(method=args.method, loss=loss)
    return 0


def cmd_eval(args) -> int:
    w, d = _load_inputs(args)
    state, r1, r2 = aio.read_container(args.container)
    if state.shape != w.shape:
        raise CliError(3, f"container is {state.shape[0]}x{state.shape[1]}, weights are "
                          f"{w.shape[0]}x{w.shape[1]}")
    norm = normalize(w)
    if r1 is not None:
        loss = proxy_loss(state, norm.w_bar, d)
        raw_state = scale_wrappers(state, r1, r2)
    else:
        raw_state = state
        loss = normalized_loss(norm, reconstruct(state), d)
    raw = weighted_frobenius_sq(w - reconstruct(raw_state), d)
    _summary(normalized_loss=loss, raw_error=raw)
    if args.apply:
        x = aio.read_matrix(args.apply)
        if x.shape[1] != w.shape[1]:
            raise CliError(3, f"apply batch has width {x.shape[1]}, expected {w.shape[1]}")
        out = args.apply_out or str(Path(args.apply).with_suffix(".out.amf"))
        aio.write_amf(out, apply(raw_state, x))
    return 0


def cmd_overhead(args) -> int:
    if args.preset:
        shapes = PRESETS[args.preset]
    elif args.layers:
        try:
            shapes = [tuple(int(v) for v in pair) for pair in json.loads(args.layers)]
        except (ValueError, TypeError) as exc:
            raise CliError(2, f"--layers must be a JSON list of [d_out, d_in] pairs: {exc}")
    elif args.dout and args.din:
        shapes = [(args.dout, args.din)]
    else:
        raise CliError(2, "give --dout/--din, --layers or --preset")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for d_out, d_in in shapes:
            print(f"{d_out}x{d_in}: {overhead_ratio(d_out, d_in, args.dblock):.4f}")
    print(f"aggregate: {aggregate_overhead(shapes, args.dblock):.4f}")
    return 0


def trace_svg(trace, log_scale: bool = False, width: int = 640, height: int = 400) -> str:
    """Render a loss trace as an SVG polyline."""
    ys = np.array([e.loss for e in trace], dtype=np.float64)
    if log_scale:
        ys = np.log10(np.maximum(ys, np.finfo(float).tiny))
    pad = 40
    n = len(ys)
    lo, hi = (float(ys.min()), float(ys.max())) if n else (0.0, 1.0)
    span = hi - lo or 1.0
    pts = []
    for k, y in enumerate(ys):
        px = pad + (width - 2 * pad) * (k / max(n - 1, 1))
        py = height - pad - (height - 2 * pad) * ((y - lo) / span)
        pts.append(f"{px:.2f},{py:.2f}")
    label = "log10 loss" if log_scale else "loss"
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">\n'
        f'<rect width="{width}" height="{height}" fill="white"/>\n'
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>\n'
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>\n'
        f'<text x="{pad}" y="{pad - 10}" font-size="12">{label}: {hi:.6g} .. {lo:.6g}</text>\n'
        f'<polyline fill="none" stroke="steelblue" stroke-width="1.5" points="{" ".join(pts)}"/>\n'
        "</svg>\n"
    )


def cmd_plot_trace(args) -> int:
    trace = aio.read_trace(args.trace)
    Path(args.out).write_text(trace_svg(trace, args.log))
    return 0


def cmd_selfcheck(args) -> int:
    from . import selfcheck

    reports = selfcheck.run(seed=args.seed, quick=args.quick)
    for r in reports:
        print(r.line())
    if not args.skip_heuristics:
        print("selection heuristics (median final/initial loss, informational):")
        for h, v in selfcheck.heuristic_report().items():
            print(f"  {h}: {v:.6f}")
    return 0 if all(r.passed for r in reports) else 1


def _add_inputs(p):
    p.add_argument("--weights", required=True, help="weight matrix (AMF or .csv)")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--calib", help="calibration statistics vector (AMF or .csv)")
    src.add_argument("--acts", help="activation samples, n x d_in (AMF or .csv)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="armor", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prune", help="factorize a weight matrix")
    _add_inputs(p)
    p.add_argument("--block-size", type=int, default=128)
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--optimizer", choices=sorted(OPTIMIZERS), default="adam")
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--heuristic", choices=HEURISTIC_FLAGS, default="l1-random")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--init", choices=("data-weighted", "literal-eq3"), default="data-weighted")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--trace")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("eval", help="score a container against its source weights")
    _add_inputs(p)
    p.add_argument("--container", required=True)
    p.add_argument("--apply", help="batch of input rows to push through the factorization")
    p.add_argument("--apply-out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline", help="wrapper-free 2:4 pruning baselines")
    _add_inputs(p)
    p.add_argument("--method", choices=BASELINES, default="nowag-p")
    p.add_argument("--block-size", type=int, default=128)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("overhead", help="wrapper parameter overhead")
    p.add_argument("--dout", type=int)
    p.add_argument("--din", type=int)
    p.add_argument("--layers", help='JSON list, e.g. "[[4096, 4096], [11008, 4096]]"')
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--dblock", type=int, default=128)
    p.set_defaults(func=cmd_overhead)

    p = sub.add_parser("plot-trace", help="render a trace CSV as SVG")
    p.add_argument("--trace", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", action="store_true", help="log-scale loss axis")
    p.set_defaults(func=cmd_plot_trace)

    p = sub.add_parser("selfcheck", help="run the oracle battery")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quick", action="store_true")
    p.add_argument("--skip-heuristics", action="store_true")
    p.set_defaults(func=cmd_selfcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    logging.captureWarnings(True)
    try:
        return args.func(args)
    except CliError as exc:
        if exc.code == 2:
            parser.print_usage(sys.stderr)
        print(f"armor: error: {exc}", file=sys.stderr)
        return exc.code
    except DegenerateWeightError as exc:
        print(f"armor: error: {exc} (index {exc.index})", file=sys.stderr)
        return 3
    except (ContractError, EmptyCalibrationError) as exc:
        print(f"armor: error: {exc}", file=sys.stderr)
        return 3
    except (OSError, aio.FormatError) as exc:
        print(f"armor: error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
