"""Analytical cycle and DRAM-traffic model over ISA programs.

Instructions run back to back on one NPU.  Inside an instruction, DMA and
compute overlap through a double-buffered step pipeline: the read of step
``s`` may start once step ``s - 2`` has finished computing, and the
write-back of step ``s`` queues behind the read of step ``s + 1``.

Several NPUs run as a discrete-event loop that only interacts at SYNC
instructions.  DRAM bandwidth is split evenly and statically between NPUs.
"""
from __future__ import annotations

import csv
import heapq
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .dataflow import (
    MPA_DIM, PREFETCH_CYCLES, MatmulSpec, TilePlan, _bounds, ceil_div, row_bytes, select_plan,
    tile_cycles, trace_tiled_matmul,
)
from .executor import SKIP_TILE, SramOverflow
from .isa import Instruction, Program, ProgramError

SCHEMA_VERSION = "1.0"
PPA_LANES = 32
PHASES = ("linear", "nonlinear", "data-movement")
NPU_COUNTS = (1, 2, 4, 8)
DLA_COUNTS = (1, 2, 4)

# Cycles per element for a nonlinear op on the baseline special function
# unit.  Synthetic: frozen from calibrate_sfu_cost so that SFU instructions
# take 15.2 % of the baseline Llama-3.2-3B layer at 2048 tokens.
SFU_CYCLES_PER_ELEMENT = 0.4908

_PHASE_OF = {
    "TMATMUL": "linear",
    "MEAN_SQUARE": "nonlinear", "LUT": "nonlinear", "RESCALE": "nonlinear", "MEAN": "nonlinear",
    "MUL": "nonlinear", "ADD": "nonlinear",
    "LOAD": "data-movement", "STORE": "data-movement", "TRANSPOSE": "data-movement",
    "CONVERT": "data-movement", "CONCAT": "data-movement", "SYNC": "data-movement",
}


class DeadlockError(RuntimeError):
    """NPUs wait on Sync-IDs that no peer will ever record."""

    def __init__(self, message: str, state: dict):
        super().__init__(message)
        self.state = state


@dataclass(frozen=True)
class SimConfig:
    n_npus: int = 1
    dlas_per_npu: int = 4
    clock_hz: float = 1e9
    dram_gbps: float = 32.0
    sram_bytes: int = 1 << 20
    sfu_mode: bool = False
    act_dtype: str = "MXINT8"
    sfu_cycles_per_element: float = SFU_CYCLES_PER_ELEMENT

    def __post_init__(self):
        if self.n_npus not in NPU_COUNTS:
            raise ValueError(f"n_npus must be one of {NPU_COUNTS}")
        if self.dlas_per_npu not in DLA_COUNTS:
            raise ValueError(f"dlas_per_npu must be one of {DLA_COUNTS}")
        if min(self.clock_hz, self.dram_gbps, self.sram_bytes) <= 0 or self.sfu_cycles_per_element < 0:
            raise ValueError("configuration values must be positive")
        if self.act_dtype not in ("MXINT8", "INT16"):
            raise ValueError("activation dtype must be MXINT8 or INT16")

    @property
    def total_bw(self) -> float:
        """DRAM bytes per clock cycle for the whole chip."""
        return self.dram_gbps * 1e9 / self.clock_hz

    @property
    def bw_per_npu(self) -> float:
        return self.total_bw / self.n_npus

    @property
    def macs_per_cycle(self) -> int:
        return MPA_DIM * MPA_DIM * self.dlas_per_npu

    def with_(self, **kw) -> "SimConfig":
        return replace(self, **kw)


# ---------------------------------------------------------------------------
# primitive costs
# ---------------------------------------------------------------------------

def cost_command(rows: int, cols: int, k: int, dlas: int = 1, passes: int = 1) -> int:
    """One command: every 32x32 stationary block is prefetched, then ``rows``
    IN0 rows stream past it one per cycle.  Column blocks spread over DLAs."""
    if rows <= 0 or cols <= 0:
        return 0
    col_blocks = ceil_div(ceil_div(cols, MPA_DIM), dlas)
    return passes * ceil_div(k, MPA_DIM) * col_blocks * (rows + PREFETCH_CYCLES)


def ppa_cycles(elements: int, dlas: int) -> int:
    return ceil_div(int(elements), PPA_LANES * dlas)


def sfu_penalty(elements: int, cycles_per_element: float = SFU_CYCLES_PER_ELEMENT) -> int:
    """Baseline special function unit: a linear cost in elements."""
    return int(math.ceil(elements * cycles_per_element))


@dataclass
class Timeline:
    total: float
    compute: float
    dma: float

    @property
    def exposed_dma(self) -> float:
        return self.total - self.compute


def overlap(steps, bw: float) -> Timeline:
    """Double-buffered pipeline over (read bytes, compute cycles, write bytes) steps."""
    dma_free = 0.0
    comp_end = [0.0, 0.0]  # compute end of steps s-2, s-1
    pending_write = 0.0
    compute = dma = 0.0
    for read, cyc, write in steps:
        start = max(dma_free, comp_end[0])
        read_end = start + read / bw
        dma_free = read_end
        if pending_write:
            dma_free = max(dma_free, comp_end[1]) + pending_write / bw
        end = max(read_end, comp_end[1]) + cyc
        comp_end = [comp_end[1], end]
        pending_write = write
        compute += cyc
        dma += (read + write) / bw
    if pending_write:
        dma_free = max(dma_free, comp_end[1]) + pending_write / bw
    return Timeline(max(dma_free, comp_end[1]), compute, dma)


def split_steps(read: int, cycles: int, write: int, n: int) -> list:
    """Evenly divide a streaming op into ``n`` pipeline steps."""
    n = max(1, int(n))
    return [(read / n, cycles / n, write / n)] * n


# ---------------------------------------------------------------------------
# matmul timing
# ---------------------------------------------------------------------------

def active_fraction(spec: MatmulSpec, r0: int, r1: int, c0: int, c1: int) -> float:
    """Share of the tile's 32x32 output blocks a causal mask leaves visible."""
    if not spec.causal:
        return 1.0
    rb = np.arange(r0 - r0 % SKIP_TILE, r1, SKIP_TILE)
    cb = np.arange(c0 - c0 % SKIP_TILE, c1, SKIP_TILE)
    last_row = np.minimum(rb + SKIP_TILE, spec.m) - 1 + spec.qoff
    visible = cb[None, :] <= last_row[:, None]
    return float(visible.mean())


def matmul_steps(spec: MatmulSpec, plan: TilePlan) -> list:
    """Pipeline steps from the tile trace: reads gathered up to each compute."""
    a0, a1 = _bounds(spec.m, plan.tile_m)
    b0, b1 = _bounds(spec.n, plan.tile_n)
    steps = []
    read = 0
    for ev in trace_tiled_matmul(spec, plan):
        if ev.kind == "read":
            read += ev.nbytes
        elif ev.kind == "compute":
            i, j = ev.i, ev.j
            rows, cols = int(a1[i] - a0[i]), int(b1[j] - b0[j])
            cyc = tile_cycles(rows, cols, spec.k, plan.split, spec.passes)
            cyc *= active_fraction(spec, int(a0[i]), int(a1[i]), int(b0[j]), int(b1[j]))
            steps.append([read, cyc, 0])
            read = 0
        else:
            if not steps or read:
                steps.append([read, 0, 0])
                read = 0
            steps[-1][2] += ev.nbytes
    if read:
        steps.append([read, 0, 0])
    return [tuple(s) for s in steps]


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class InstrTiming:
    index: int
    opcode: str
    out: str
    phase: str
    cycles: float
    compute_cycles: float
    dma_cycles: float
    dram_bytes: int
    macs: int
    unit: str = "ppa"
    start: float = 0.0
    end: float = 0.0


CSV_COLUMNS = ("index", "opcode", "out", "phase", "unit", "start", "end", "cycles", "compute_cycles",
               "dma_cycles", "dram_bytes", "macs")


@dataclass
class TimingReport:
    name: str
    rows: list
    total_cycles: float
    mac_utilization: float
    dram_utilization: float
    idle_at_sync: float = 0.0
    npu: int = 0
    config: dict = field(default_factory=dict)

    @property
    def dram_bytes(self) -> int:
        return sum(r.dram_bytes for r in self.rows)

    @property
    def macs(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def breakdown(self) -> dict:
        out = dict.fromkeys(PHASES, 0.0)
        for r in self.rows:
            out[r.phase] += r.cycles
        return out

    @property
    def phase_bytes(self) -> dict:
        out = dict.fromkeys(PHASES, 0)
        for r in self.rows:
            out[r.phase] += r.dram_bytes
        return out

    def share(self, phase: str) -> float:
        busy = sum(self.breakdown.values())
        return self.breakdown[phase] / busy if busy else 0.0

    @property
    def sfu_share(self) -> float:
        """Fraction of busy time spent in instructions on the special function unit."""
        busy = sum(r.cycles for r in self.rows)
        return sum(r.cycles for r in self.rows if r.unit == "sfu") / busy if busy else 0.0

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "npu": self.npu,
            "config": self.config,
            "total_cycles": self.total_cycles,
            "dram_bytes": self.dram_bytes,
            "macs": self.macs,
            "mac_utilization": self.mac_utilization,
            "dram_utilization": self.dram_utilization,
            "idle_at_sync": self.idle_at_sync,
            "breakdown": self.breakdown,
            "sfu_share": self.sfu_share,
            "phase_bytes": self.phase_bytes,
            "instructions": [asdict(r) for r in self.rows],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("schema_version",) + CSV_COLUMNS)
        for r in self.rows:
            w.writerow((SCHEMA_VERSION,) + tuple(getattr(r, c) for c in CSV_COLUMNS))
        return buf.getvalue()


def _utilizations(macs: int, nbytes: int, cycles: float, config: SimConfig, n_npus: int = 1):
    if cycles <= 0:
        return 0.0, 0.0
    mac = macs / (config.macs_per_cycle * n_npus * cycles)
    dram = nbytes / (config.bw_per_npu * n_npus * cycles)
    return min(mac, 1.0), min(dram, 1.0)


# ---------------------------------------------------------------------------
# single NPU
# ---------------------------------------------------------------------------

def phase_of(ins: Instruction) -> str:
    return ins.meta.get("phase", _PHASE_OF[ins.opcode])


def _elements(program: Program, tids) -> int:
    return max((math.prod(program.tensors[t].shape) for t in tids if t in program.tensors), default=0)


def _default_bytes(program: Program, ins: Instruction):
    """DRAM traffic of a streaming op: DRAM-resident sources read, DRAM output written."""
    read = sum(row_bytes(d.dtype, d.shape[-1]) * math.prod(d.shape[:-1])
               for d in (program.tensors[t] for t in ins.reads()) if d.residence == "DRAM")
    desc = program.tensors[ins.out]
    write = row_bytes(desc.dtype, desc.shape[-1]) * math.prod(desc.shape[:-1]) if desc.residence == "DRAM" else 0
    return read, write


def matmul_spec_of(program: Program, ins: Instruction) -> MatmulSpec:
    a, b = (program.tensors[t] for t in ins.srcs)
    causal = ins.meta.get("skip") == "causal"
    k0, k1 = ins.meta.get("kslice", (0, a.shape[1]))
    return MatmulSpec(a.shape[0], b.shape[0], k1 - k0, a.dtype, b.dtype, ins.out_dtype,
                      causal, int(ins.meta.get("qoff", 0)) if causal else 0, ins.out)


def _plan_for(program: Program, ins: Instruction, config: SimConfig, cache: dict):
    pid = ins.meta.get("plan")
    if pid is not None:
        if pid not in cache:
            entry = program.plans[str(pid)]
            cache[pid] = (MatmulSpec.from_dict(entry["spec"]), TilePlan.from_dict(entry["plan"]))
        return cache[pid]
    spec = matmul_spec_of(program, ins)
    return spec, select_plan(spec, config.dlas_per_npu, config.sram_bytes, config.bw_per_npu)


def cost_instruction(program: Program, ins: Instruction, index: int, config: SimConfig,
                     cache: dict | None = None) -> InstrTiming:
    cache = {} if cache is None else cache
    bw = config.bw_per_npu
    phase = phase_of(ins)
    macs = 0
    op = ins.opcode
    if op == "SYNC":
        t = Timeline(0.0, 0.0, 0.0)
        nbytes = 0
    elif op == "TMATMUL" and ins.meta.get("group") is not None and ins.meta.get("plan") is None:
        # member of a fused group; the group's lead instruction carries the whole cost
        t = Timeline(0.0, 0.0, 0.0)
        nbytes = 0
    elif op == "TMATMUL":
        spec, plan = _plan_for(program, ins, config, cache)
        if plan.sram_bytes > config.sram_bytes:
            raise SramOverflow(f"instruction {index} ({op}) needs {plan.sram_bytes} bytes of SRAM, "
                               f"{config.sram_bytes} available")
        steps = matmul_steps(spec, plan)
        psum = int(ins.meta.get("psum_rd", 0))  # partial sums of an earlier reduction slice
        if psum:
            steps = [(r + psum / len(steps), c, w) for r, c, w in steps]
        t = overlap(steps, bw)
        nbytes = int(sum(s[0] + s[2] for s in steps))
        macs = spec.macs
    else:
        if "rd" in ins.meta or "wr" in ins.meta:
            read, write = int(ins.meta.get("rd", 0)), int(ins.meta.get("wr", 0))
        else:
            read, write = _default_bytes(program, ins)
        elements = _elements(program, ins.reads() + [ins.out])
        if op == "LUT" and (ins.unit == "sfu" or config.sfu_mode):
            cycles = sfu_penalty(elements, config.sfu_cycles_per_element)
        elif op == "CONCAT" and read == write == 0:
            cycles = 0  # heads written side by side: address aliasing only
        else:
            cycles = ppa_cycles(elements, config.dlas_per_npu)
        rows = program.tensors[ins.out].shape[0]
        n_steps = ceil_div(rows, int(ins.meta.get("tile", 64)))
        t = overlap(split_steps(read, cycles, write, n_steps), bw)
        nbytes = read + write
    unit = "sfu" if op == "LUT" and (ins.unit == "sfu" or config.sfu_mode) else ins.unit
    return InstrTiming(index, op, ins.out or "", phase, t.total, t.compute, t.dma, int(nbytes), macs, unit)


def cost_program(program: Program, config: SimConfig) -> list:
    cache = {}
    return [cost_instruction(program, ins, i, config, cache) for i, ins in enumerate(program.instructions)]


def simulate_npu(program: Program, config: SimConfig, plans: dict | None = None) -> TimingReport:
    if plans is not None:
        program = replace(program, plans=plans)
    rows = cost_program(program, config)
    now = 0.0
    for r in rows:
        r.start, r.end = now, now + r.cycles
        now = r.end
    return _report(program.name, rows, now, config, 0.0, 0)


def _report(name, rows, total, config, idle, npu) -> TimingReport:
    macs = sum(r.macs for r in rows)
    nbytes = sum(r.dram_bytes for r in rows)
    mac_u, dram_u = _utilizations(macs, nbytes, total, config)
    return TimingReport(name, rows, total, mac_u, dram_u, idle, npu, asdict(config))


# ---------------------------------------------------------------------------
# SFU calibration
# ---------------------------------------------------------------------------

def calibrate_sfu_cost(program: Program, config: SimConfig, target: float = 0.152,
                       lo: float = 0.0, hi: float = 1024.0, iters: int = 50) -> float:
    """Cycles per SFU element that make the SFU share of ``program`` equal ``target``.

    The share is monotone in the per-element cost, so bisection converges.
    """
    def share(c):
        return simulate_npu(program, config.with_(sfu_cycles_per_element=c)).sfu_share

    if not share(lo) <= target <= share(hi):
        raise ValueError(f"target share {target} not reachable in [{lo}, {hi}]")
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if share(mid) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# several NPUs
# ---------------------------------------------------------------------------

@dataclass
class SyncEvent:
    time: float
    npu: int
    kind: str  # "record" or "pass"
    sync_id: int


def run_schedule(items: list, n: int | None = None):
    """Event loop over per-NPU item lists of ("work", cycles) and ("sync", id).

    Returns (finish times, idle-at-sync per NPU, per-NPU item start times,
    event log).  Raises DeadlockError when NPUs wait forever.
    """
    n = len(items) if n is None else n
    for i, seq in enumerate(items):
        ids = [v for kind, v in seq if kind == "sync"]
        if any(b < a for a, b in zip(ids, ids[1:])):
            raise ProgramError(f"NPU {i}: Sync-IDs must not decrease")
    reg = [-1] * n
    pc = [0] * n
    idle = [0.0] * n
    starts = [[0.0] * len(seq) for seq in items]
    finish = [0.0] * n
    waiting = {}
    log = []
    heap = [(0.0, i) for i in range(n)]
    heapq.heapify(heap)

    def ready(sid):
        return all(r >= sid for r in reg)

    while heap:
        t, i = heapq.heappop(heap)
        while pc[i] < len(items[i]):
            kind, v = items[i][pc[i]]
            starts[i][pc[i]] = t
            if kind == "work":
                pc[i] += 1
                heapq.heappush(heap, (t + v, i))
                break
            reg[i] = v
            log.append(SyncEvent(t, i, "record", v))
            for j in sorted(waiting):
                sid, since = waiting[j]
                if ready(sid):
                    del waiting[j]
                    idle[j] += t - since
                    log.append(SyncEvent(t, j, "pass", sid))
                    pc[j] += 1
                    heapq.heappush(heap, (t, j))
            if ready(v):
                log.append(SyncEvent(t, i, "pass", v))
                pc[i] += 1
                continue
            waiting[i] = (v, t)
            break
        else:
            finish[i] = t
    if waiting:
        state = {"registers": list(reg), "pc": list(pc),
                 "waiting": {j: sid for j, (sid, _) in waiting.items()},
                 "finished": [pc[i] >= len(items[i]) for i in range(n)]}
        raise DeadlockError(f"deadlock: NPUs {sorted(waiting)} blocked; state {state}", state)
    return finish, idle, starts, log


def check_sync_safety(log: list, n: int) -> bool:
    """No NPU passes SYNC(id) before every peer has recorded an id >= it."""
    best = [-1] * n
    for ev in log:
        if ev.kind == "record":
            best[ev.npu] = max(best[ev.npu], ev.sync_id)
        elif any(b < ev.sync_id for b in best):
            return False
    return True


@dataclass
class MultiReport:
    reports: list
    makespan: float
    mac_utilization: float
    dram_utilization: float
    events: list

    @property
    def dram_bytes(self) -> int:
        return sum(r.dram_bytes for r in self.reports)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "makespan": self.makespan,
            "mac_utilization": self.mac_utilization,
            "dram_utilization": self.dram_utilization,
            "dram_bytes": self.dram_bytes,
            "idle_at_sync": [r.idle_at_sync for r in self.reports],
            "npus": [r.to_dict() for r in self.reports],
        }


def simulate_multi(programs: list, config: SimConfig) -> MultiReport:
    if len(programs) != config.n_npus:
        raise ValueError(f"{len(programs)} programs for {config.n_npus} NPUs")
    costed = [cost_program(p, config) for p in programs]
    items = [[("sync", p.instructions[r.index].meta["id"]) if r.opcode == "SYNC" else ("work", r.cycles)
              for r in rows] for p, rows in zip(programs, costed)]
    finish, idle, starts, log = run_schedule(items)
    reports = []
    for npu, (p, rows) in enumerate(zip(programs, costed)):
        for r, s in zip(rows, starts[npu]):
            r.start, r.end = s, s + r.cycles
        reports.append(_report(p.name, rows, finish[npu], config, idle[npu], npu))
    makespan = max(finish)
    macs = sum(r.macs for r in reports)
    nbytes = sum(r.dram_bytes for r in reports)
    mac_u, dram_u = _utilizations(macs, nbytes, makespan, config, config.n_npus)
    return MultiReport(reports, makespan, mac_u, dram_u, log)
