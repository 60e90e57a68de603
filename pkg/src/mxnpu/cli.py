"""Command line entry point: ``mxnpu <verb> [flags]``.

Every verb writes ``<out>/<kind>.csv`` and ``<kind>.json`` (plus a PNG for
the figure-bearing kinds), prints one line per threshold check, and exits
with status 1 when any check fails.  Keys in a ``--config`` JSON file
override the matching flags.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from .dataflow import POLICIES, MatmulSpec
from .lower import LADDER_STEPS, LoweringOptions
from .perf import NPU_COUNTS
from .report import ExperimentSpec, ReportBundle, run_ablation, run_exec, run_lut_accuracy, run_plan, run_scaling

EXIT_OK, EXIT_FAIL = 0, 1

_SPEC_FLAGS = ("model", "seq_len", "npus", "dlas", "clock_ghz", "dram_gbps", "sram_kib", "steps", "balance",
               "seed", "jobs")
_TOGGLES = ("mxint8", "lut", "qkv_batch", "trans_fuse", "mask_fuse")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="JSON file whose keys override flags")
    p.add_argument("--out", type=Path, default=Path("reports"), help="output directory")
    p.add_argument("--no-figure", dest="figure", action="store_false", help="skip the PNG")
    p.add_argument("--seed", type=int, default=0)


def _experiment(p: argparse.ArgumentParser, seq_len: int = 2048):
    p.add_argument("--model", default="llama3.2-3b", help="preset name or model JSON file")
    p.add_argument("--seq-len", type=int, default=seq_len)
    p.add_argument("--dlas", type=int, default=4, help="MAC arrays per NPU")
    p.add_argument("--clock-ghz", type=float, default=1.0)
    p.add_argument("--dram-gbps", type=float, default=32.0)
    p.add_argument("--sram-kib", type=int, default=1024)
    p.add_argument("--jobs", type=int, default=1, help="worker processes for independent configs")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mxnpu", description="MXINT8 NPU simulator experiments")
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("run-ablation", help="cumulative optimization ladder on one NPU")
    _common(p)
    _experiment(p)
    p.add_argument("--steps", type=int, default=len(LADDER_STEPS), help="ladder length")
    p.add_argument("--timeline", action="store_true", help="also write per-instruction timelines")

    p = sub.add_parser("run-scaling", help="latency and utilization over NPU counts")
    _common(p)
    _experiment(p, seq_len=4096)
    p.add_argument("--npus", type=int, nargs="+", default=list(NPU_COUNTS), choices=NPU_COUNTS)
    p.add_argument("--no-balance", dest="balance", action="store_false",
                   help="split attention rows evenly instead of by causal work")

    p = sub.add_parser("lut-accuracy", help="MAPE and MSE of the four LUT functions")
    _common(p)
    p.add_argument("--step", type=float, default=1.0 / 1024)

    p = sub.add_parser("plan", help="tile plan for one matmul")
    _common(p)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--dtype-a", default="MXINT8")
    p.add_argument("--dtype-b", default="UINT4")
    p.add_argument("--dtype-c", default="MXINT8")
    p.add_argument("--causal", action="store_true")
    p.add_argument("--qoff", type=int, default=0)
    p.add_argument("--dlas", type=int, default=4)
    p.add_argument("--sram-kib", type=int, default=1024)
    p.add_argument("--bw", type=float, default=32.0, help="DRAM bytes per cycle")
    p.add_argument("--policy", choices=POLICIES, default="utilization")

    p = sub.add_parser("exec", help="functional layer run compared with the float64 shadow path")
    _common(p)
    _experiment(p, seq_len=64)
    p.add_argument("--tol", type=float, default=5e-2, help="max relative error allowed per output")
    for t in _TOGGLES:
        p.add_argument(f"--no-{t.replace('_', '-')}", dest=t, action="store_false")

    p = sub.add_parser("verify", help="property checks on small shapes")
    _common(p)
    return ap


def _apply_config(args: argparse.Namespace, parser: argparse.ArgumentParser):
    if not args.config:
        return
    data = json.loads(args.config.read_text())
    for key, value in data.items():
        dest = key.replace("-", "_")
        if dest in ("verb", "config") or not hasattr(args, dest):
            parser.error(f"config key {key!r} is not a {args.verb} option")
        if dest == "out":
            value = Path(value)
        setattr(args, dest, value)


def _spec(args) -> ExperimentSpec:
    return ExperimentSpec(**{k: getattr(args, k) for k in _SPEC_FLAGS if hasattr(args, k)})


def run(args) -> ReportBundle:
    if args.verb == "run-ablation":
        return run_ablation(_spec(args))
    if args.verb == "run-scaling":
        return run_scaling(_spec(args))
    if args.verb == "lut-accuracy":
        return run_lut_accuracy(args.step)
    if args.verb == "plan":
        spec = MatmulSpec(args.m, args.n, args.k, args.dtype_a, args.dtype_b, args.dtype_c, args.causal, args.qoff)
        return run_plan(spec, args.dlas, args.sram_kib * 1024, args.bw, args.policy)
    if args.verb == "exec":
        opts = LoweringOptions(**{t: getattr(args, t) for t in _TOGGLES})
        return run_exec(_spec(args), opts, args.tol)
    from .selfcheck import run_verify

    return run_verify(args.seed)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _apply_config(args, parser)
    t0 = time.perf_counter()
    try:
        bundle = run(args)
    except (ValueError, KeyError) as err:
        print(f"mxnpu: error: {err}", file=sys.stderr)
        return 2
    elapsed = time.perf_counter() - t0
    paths = bundle.write(args.out, figure=args.figure, timelines=getattr(args, "timeline", False))
    for c in bundle.checks:
        print(c.line())
    for p in paths:
        print(f"wrote {p}")
    n_fail = sum(not c.passed for c in bundle.checks)
    print(f"{bundle.kind}: {len(bundle.checks) - n_fail}/{len(bundle.checks)} checks passed in {elapsed:.1f} s")
    return EXIT_FAIL if n_fail else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
