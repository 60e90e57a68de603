"""Experiment orchestration and report bundles.

Each experiment returns a ``ReportBundle``: table rows for CSV, a JSON
document with the same rows plus details, and threshold checks.  Bundles
carry no timestamps or host data, so equal specs give equal bytes.
"""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

from .dataflow import MatmulSpec, estimate_transfer, select_plan, trace_bytes, trace_tiled_matmul
from .executor import Executor, tensor_to_real
from .lower import (
    LADDER_STEPS, LayerGraph, LoweringOptions, ModelShape, ladder, layer_inputs, load_shape,
    lower_layer, lower_layer_multi, random_weights,
)
from .lut import Func, measure_accuracy
from .perf import NPU_COUNTS, PHASES, SCHEMA_VERSION, SimConfig, check_sync_safety, simulate_multi, simulate_npu

# Target LUT MAPE per function; the within_10x column compares against it.
REFERENCE_MAPE = {"RECIP": 8.397e-07, "ISQR": 5.467e-06, "EXP": 2.023e-05, "SILU": 1.626e-06}

MAPE_LIMIT = 1e-4
MSE_LIMIT = 1e-3
MXINT8_SPEEDUP_MIN = 1.4
INT16_TRAFFIC_RATIO_MIN = 1.9
LADDER_TRAFFIC_CUT_MIN = 0.45
EFFICIENCY_MIN = 0.8
DRAM_SATURATED = 0.9


@dataclass(frozen=True)
class ExperimentSpec:
    model: str = "llama3.2-3b"
    seq_len: int = 2048
    npus: tuple = NPU_COUNTS
    dlas: int = 4
    clock_ghz: float = 1.0
    dram_gbps: float = 32.0
    sram_kib: int = 1024
    steps: int = len(LADDER_STEPS)
    balance: bool = True
    seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        object.__setattr__(self, "npus", tuple(sorted(set(int(n) for n in self.npus))))
        if self.seq_len < 1:
            raise ValueError("seq_len must be positive")
        if not 1 <= self.steps <= len(LADDER_STEPS):
            raise ValueError(f"steps must be in 1..{len(LADDER_STEPS)}")
        if not self.npus or any(n not in NPU_COUNTS for n in self.npus):
            raise ValueError(f"npus must be drawn from {NPU_COUNTS}")
        self.config()

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown experiment fields {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["npus"] = list(self.npus)
        d.pop("jobs")  # affects speed only
        return d

    def shape(self) -> ModelShape:
        return load_shape(self.model)

    def config(self, n_npus: int = 1, opts: LoweringOptions | None = None) -> SimConfig:
        c = SimConfig(n_npus=n_npus, dlas_per_npu=self.dlas, clock_hz=self.clock_ghz * 1e9,
                      dram_gbps=self.dram_gbps, sram_bytes=self.sram_kib * 1024)
        if opts is not None:
            c = c.with_(sfu_mode=opts.sfu_mode, act_dtype=opts.act_dtype)
        return c


@dataclass
class Check:
    name: str
    passed: bool
    value: float
    limit: float
    op: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.value:.6g} {self.op} {self.limit:.6g}"


def check(name: str, value: float, op: str, limit: float) -> Check:
    ok = {"<=": value <= limit, ">=": value >= limit, "<": value < limit, ">": value > limit,
          "==": value == limit}[op]
    return Check(name, bool(ok), float(value), float(limit), op)


@dataclass
class ReportBundle:
    kind: str
    spec: dict
    columns: tuple
    rows: list
    checks: list = field(default_factory=list)
    details: dict = field(default_factory=dict)
    timelines: dict = field(default_factory=dict, repr=False)  # label -> TimingReport, written on request

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "kind": self.kind, "spec": self.spec,
                "columns": list(self.columns), "rows": self.rows,
                "checks": [asdict(c) for c in self.checks], "passed": self.passed, "details": self.details}

    def to_json(self) -> str:
        return json.dumps(_plain(self.to_dict()), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("schema_version",) + tuple(self.columns))
        for r in self.rows:
            w.writerow((SCHEMA_VERSION,) + tuple(_cell(r[c]) for c in self.columns))
        return buf.getvalue()

    def write(self, out_dir, figure: bool = True, timelines: bool = False) -> list:
        from .plotting import render

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / f"{self.kind}.csv", out / f"{self.kind}.json"]
        paths[0].write_text(self.to_csv())
        paths[1].write_text(self.to_json())
        png = out / f"{self.kind}.png"
        if figure and render(self, png):
            paths.append(png)
        if timelines:
            for label, rep in self.timelines.items():
                path = out / f"{self.kind}.{_slug(label)}.timeline.csv"
                path.write_text(rep.to_csv())
                paths.append(path)
        return paths


def _slug(label: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in label.lower()).strip("_")


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _plain(v):
    """JSON-ready copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(v, dict):
        return {str(k): _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, np.generic):
        v = v.item()
    if isinstance(v, float) and not math.isfinite(v):
        return repr(v)
    return v


def load_schema() -> dict:
    return json.loads(resources.files("mxnpu").joinpath("schema.json").read_text())


def _map(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(*i) for i in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as pool:
        return list(pool.map(fn, *zip(*items)))


# ---------------------------------------------------------------------------
# ablation ladder
# ---------------------------------------------------------------------------

ABLATION_COLUMNS = ("step", "config", "mxint8", "lut", "qkv_batch", "trans_fuse", "mask_fuse", "cycles",
                    "latency_ms", "dram_bytes", "speedup", "traffic_ratio", "mac_utilization",
                    "dram_utilization", "linear_share", "nonlinear_share", "data_movement_share", "sfu_share")


def _ablation_point(spec: ExperimentSpec, opts: LoweringOptions):
    config = spec.config(1, opts)
    prog = lower_layer(LayerGraph(spec.shape(), spec.seq_len), opts, config)
    return simulate_npu(prog, config)


def run_ablation(spec: ExperimentSpec) -> ReportBundle:
    points = ladder(spec.steps)
    reports = _map(_ablation_point, [(spec, o) for _, o in points], spec.jobs)
    base = reports[0]
    rows = []
    for i, ((label, opts), rep) in enumerate(zip(points, reports)):
        row = {"step": i, "config": label, **{k: int(v) for k, v in asdict(opts).items()},
               "cycles": rep.total_cycles, "latency_ms": rep.total_cycles / (spec.clock_ghz * 1e6),
               "dram_bytes": rep.dram_bytes, "speedup": base.total_cycles / rep.total_cycles,
               "traffic_ratio": rep.dram_bytes / base.dram_bytes, "mac_utilization": rep.mac_utilization,
               "dram_utilization": rep.dram_utilization}
        for p in PHASES:
            row[p.replace("-", "_") + "_share"] = rep.share(p)
        row["sfu_share"] = rep.sfu_share
        rows.append(row)
    checks = []
    if len(rows) >= 2:
        worst = max(b["cycles"] / a["cycles"] for a, b in zip(rows, rows[1:]))
        checks.append(check("latency never increases along the ladder (max step ratio)", worst, "<=", 1.0))
        checks.append(check("+MXINT8 speedup", rows[1]["speedup"], ">=", MXINT8_SPEEDUP_MIN))
        checks.append(check("INT16 / MXINT8 activation traffic", rows[0]["dram_bytes"] / rows[1]["dram_bytes"],
                            ">=", INT16_TRAFFIC_RATIO_MIN))
    if len(rows) == len(LADDER_STEPS):
        checks.append(check("full ladder traffic reduction", 1 - rows[-1]["traffic_ratio"], ">=",
                            LADDER_TRAFFIC_CUT_MIN))
    details = {"reports": [{"config": r["config"], "breakdown": rep.breakdown, "phase_bytes": rep.phase_bytes,
                            "instructions": len(rep.rows)} for r, rep in zip(rows, reports)]}
    return ReportBundle("ablation", spec.to_dict(), ABLATION_COLUMNS, rows, checks, details,
                        {r["config"]: rep for r, rep in zip(rows, reports)})


# ---------------------------------------------------------------------------
# multi-NPU scaling
# ---------------------------------------------------------------------------

SCALING_COLUMNS = ("n_npus", "cycles", "latency_ms", "speedup", "efficiency", "mac_utilization",
                   "dram_utilization", "dram_bytes", "max_idle_at_sync", "bound")


def _scaling_point(spec: ExperimentSpec, n: int):
    opts = LoweringOptions()
    config = spec.config(n, opts)
    progs = lower_layer_multi(spec.shape(), spec.seq_len, opts, config, balance=spec.balance)
    return simulate_multi(progs, config)


def run_scaling(spec: ExperimentSpec) -> ReportBundle:
    """Latency and utilization per NPU count, all optimizations on.

    A count is memory-bound when DRAM is the busier resource
    (DRAM utilization above MAC utilization)."""
    counts = spec.npus
    reports = _map(_scaling_point, [(spec, n) for n in counts], spec.jobs)
    ref_cycles = reports[0].makespan * counts[0]
    rows = []
    for n, rep in zip(counts, reports):
        speedup = ref_cycles / rep.makespan
        rows.append({"n_npus": n, "cycles": rep.makespan, "latency_ms": rep.makespan / (spec.clock_ghz * 1e6),
                     "speedup": speedup, "efficiency": speedup / n, "mac_utilization": rep.mac_utilization,
                     "dram_utilization": rep.dram_utilization, "dram_bytes": rep.dram_bytes,
                     "max_idle_at_sync": max(r.idle_at_sync for r in rep.reports),
                     "bound": "memory" if rep.dram_utilization > rep.mac_utilization else "compute"})
    crossover = next((r["n_npus"] for r in rows if r["bound"] == "memory"), None)
    by_n = {r["n_npus"]: r for r in rows}
    checks = [check("sync log is safe (1 = every NPU waits for all peers)",
                    float(all(check_sync_safety(rep.events, n) for n, rep in zip(counts, reports))), "==", 1.0)]
    upto4 = [r["cycles"] for r in rows if r["n_npus"] <= 4]
    if len(upto4) >= 2:
        worst = max(b / a for a, b in zip(upto4, upto4[1:]))
        checks.append(check("latency falls through 4 NPUs (max step ratio)", worst, "<", 1.0))
    if 1 in by_n and 4 in by_n:
        checks.append(check("4-NPU parallel efficiency", by_n[4]["efficiency"], ">=", EFFICIENCY_MIN))
    if 8 in by_n:
        checks.append(check("8-NPU DRAM utilization", by_n[8]["dram_utilization"], ">", DRAM_SATURATED))
    if all(n in by_n for n in (2, 4, 8)):
        step24 = by_n[4]["speedup"] - by_n[2]["speedup"]
        step48 = by_n[8]["speedup"] - by_n[4]["speedup"]
        checks.append(check("marginal speedup 4->8 minus 2->4", step48 - step24, "<", 0.0))
    details = {"crossover_npus": crossover, "baseline_npus": counts[0],
               "per_npu": {str(n): [{"cycles": r.total_cycles, "idle_at_sync": r.idle_at_sync,
                                     "dram_bytes": r.dram_bytes} for r in rep.reports]
                           for n, rep in zip(counts, reports)}}
    return ReportBundle("scaling", spec.to_dict(), SCALING_COLUMNS, rows, checks, details)


# ---------------------------------------------------------------------------
# LUT accuracy
# ---------------------------------------------------------------------------

LUT_COLUMNS = ("func", "lo", "hi", "points", "mape", "mse", "max_rel", "reference_mape", "within_10x")


def run_lut_accuracy(step: float = 1.0 / 1024) -> ReportBundle:
    rows, checks = [], []
    for func in Func:
        a = measure_accuracy(func, step=step)
        ref = REFERENCE_MAPE[func.name]
        rows.append({"func": func.name, "lo": a.lo, "hi": a.hi, "points": a.points, "mape": a.mape,
                     "mse": a.mse, "max_rel": a.max_rel, "reference_mape": ref,
                     "within_10x": int(a.mape <= 10 * ref)})
        checks.append(check(f"{func.name} MAPE", a.mape, "<=", MAPE_LIMIT))
        checks.append(check(f"{func.name} MSE", a.mse, "<=", MSE_LIMIT))
    return ReportBundle("lut_accuracy", {"step": step}, LUT_COLUMNS, rows, checks)


# ---------------------------------------------------------------------------
# tile plan dump
# ---------------------------------------------------------------------------

PLAN_COLUMNS = ("m", "n", "k", "dtype_a", "dtype_b", "causal", "policy", "stationary", "tile_m", "tile_n",
                "split", "compute_cycles", "est_cycles", "utilization", "dram_bytes", "trace_bytes",
                "sram_bytes", "hides_dma")


def run_plan(spec: MatmulSpec, n_cores: int = 4, sram_bytes: int = 1 << 20, bw_bytes_per_cycle: float = 32.0,
             policy: str = "utilization") -> ReportBundle:
    plan = select_plan(spec, n_cores, sram_bytes, bw_bytes_per_cycle, policy=policy)
    traced = trace_bytes(trace_tiled_matmul(spec, plan))
    est = estimate_transfer(spec, plan)
    p = plan.to_dict()
    row = {"m": spec.m, "n": spec.n, "k": spec.k, "dtype_a": spec.dtype_a, "dtype_b": spec.dtype_b,
           "causal": int(spec.causal), "policy": policy, "stationary": p["stationary"], "tile_m": p["tile_m"],
           "tile_n": p["tile_n"], "split": "x".join(str(s) for s in p["split"]),
           "compute_cycles": p["compute_cycles"], "est_cycles": p["est_cycles"],
           "utilization": p["utilization"], "dram_bytes": est, "trace_bytes": traced,
           "sram_bytes": p["sram_bytes"], "hides_dma": int(p["hides_dma"])}
    checks = [check("estimated bytes minus traced bytes", est - traced, "==", 0)]
    return ReportBundle("plan", {"n_cores": n_cores, "sram_bytes": sram_bytes,
                                 "bw_bytes_per_cycle": bw_bytes_per_cycle}, PLAN_COLUMNS, [row], checks,
                        {"plan": p})


# ---------------------------------------------------------------------------
# functional run against the shadow path
# ---------------------------------------------------------------------------

EXEC_COLUMNS = ("tensor", "rows", "cols", "max_abs_err", "max_rel_err", "rms_rel_err")
EXEC_TOLERANCE = 5e-2


def run_exec(spec: ExperimentSpec, opts: LoweringOptions | None = None,
             tolerance: float = EXEC_TOLERANCE) -> ReportBundle:
    """Run one layer on the quantized datapath and on the float64 shadow path
    with the same inputs, and compare every program output."""
    opts = opts or LoweringOptions()
    shape = spec.shape()
    graph = LayerGraph(shape, spec.seq_len)
    rng = np.random.default_rng(spec.seed)
    weights = random_weights(shape, rng)
    x = rng.standard_normal((spec.seq_len, shape.hidden))
    prog = lower_layer(graph, opts, spec.config(1, opts))
    inputs = layer_inputs(graph, opts, weights, x)
    got = Executor().run(prog, inputs)
    ref = Executor(shadow=True).run(prog, inputs)
    rows = []
    for name in prog.outputs:
        a, b = tensor_to_real(got.read(name)), tensor_to_real(ref.read(name))
        scale = np.abs(b).max() or 1.0
        err = np.abs(a - b)
        rows.append({"tensor": name, "rows": int(b.shape[0]), "cols": int(b.shape[1]),
                     "max_abs_err": float(err.max()), "max_rel_err": float(err.max() / scale),
                     "rms_rel_err": float(np.sqrt(np.mean(err ** 2)) / scale)})
    checks = [check(f"{r['tensor']} max relative error vs shadow", r["max_rel_err"], "<=", tolerance)
              for r in rows]
    d = spec.to_dict()
    d["options"] = {k: int(v) for k, v in asdict(opts).items()}
    return ReportBundle("exec", d, EXEC_COLUMNS, rows, checks, {"instructions": len(prog.instructions)})
