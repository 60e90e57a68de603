"""DRAM traffic model, tiled-matmul trace and the stationary/tile planner.

A matmul computes ``C = A @ B.T`` with ``A`` (IN0) of ``m`` rows and ``B``
(IN1) of ``n`` rows, both ``k`` wide.  Tiles always span the full
reduction dim, so a tile is a block of rows.  The stationary operand is
read once; the other one is re-read for every stationary tile.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

MPA_DIM = 32  # one MAC array: 32 lanes by 32 stationary vectors
PREFETCH_CYCLES = 32  # loading one 32x32 stationary sub-matrix into the array
COMMAND_ROWS = 64  # rows one command streams past a prefetched sub-matrix
TILE_GRAIN = 32


class InfeasiblePlan(ValueError):
    """No tiling fits the on-chip buffer."""


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def row_bytes(dtype: str, cols: int) -> int:
    """Bytes of one row; every supported format is additive over rows."""
    if dtype == "MXINT8":
        return cols + ceil_div(cols, 32)
    if dtype == "FI32":
        return 4 * cols
    if dtype == "INT16":
        return 2 * cols
    if dtype in ("INT8", "UINT8"):
        return cols
    if dtype in ("INT4", "UINT4"):
        return ceil_div(cols, 2)
    raise ValueError(f"unknown dtype {dtype}")


def tensor_bytes(dtype: str, rows: int, cols: int) -> int:
    return rows * row_bytes(dtype, cols)


@dataclass(frozen=True)
class MatmulSpec:
    m: int
    n: int
    k: int
    dtype_a: str = "MXINT8"
    dtype_b: str = "UINT4"
    dtype_c: str = "MXINT8"
    causal: bool = False
    qoff: int = 0  # global index of A's first row when the mask is causal
    name: str = ""

    def __post_init__(self):
        if min(self.m, self.n, self.k) <= 0:
            raise ValueError("matmul dims must be positive")

    @property
    def size_a(self) -> int:
        return tensor_bytes(self.dtype_a, self.m, self.k)

    @property
    def size_b(self) -> int:
        return tensor_bytes(self.dtype_b, self.n, self.k)

    @property
    def size_c(self) -> int:
        return tensor_bytes(self.dtype_c, self.m, self.n)

    @property
    def macs(self) -> int:
        return self.m * self.n * self.k

    @property
    def passes(self) -> int:
        return mac_passes(self.dtype_a, self.dtype_b)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MatmulSpec":
        return cls(**d)

    def with_dtype_a(self, dtype: str) -> "MatmulSpec":
        return MatmulSpec(self.m, self.n, self.k, dtype, self.dtype_b, self.dtype_c,
                          self.causal, self.qoff, self.name)


@dataclass(frozen=True)
class TilePlan:
    stationary: str  # "IN0" or "IN1"
    tile_m: int  # rows of A per tile
    tile_n: int  # rows of B per tile
    split: tuple  # (row parts, column parts) across DLA cores
    n_cores: int
    traffic: int = 0
    eq1_bytes: int = 0
    compute_cycles: int = 0
    utilization: float = 0.0
    sram_bytes: int = 0
    hides_dma: bool = True
    est_cycles: float = 0.0  # max(compute, traffic / bandwidth)

    @property
    def stationary_tile(self) -> int:
        return self.tile_m if self.stationary == "IN0" else self.tile_n

    @property
    def streaming_tile(self) -> int:
        return self.tile_n if self.stationary == "IN0" else self.tile_m

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split"] = list(self.split)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "TilePlan":
        d = dict(d)
        d["split"] = tuple(d["split"])
        return cls(**d)


# ---------------------------------------------------------------------------
# compute model shared with the performance model
# ---------------------------------------------------------------------------

def core_cycles(rows: int, cols: int, k: int) -> int:
    """One DLA core: each command of up to 64 rows prefetches every 32x32
    stationary block, then streams one row per cycle past it."""
    if rows <= 0 or cols <= 0:
        return 0
    per_block = rows + PREFETCH_CYCLES * ceil_div(rows, COMMAND_ROWS)
    return ceil_div(k, MPA_DIM) * ceil_div(cols, MPA_DIM) * per_block


def mac_passes(dtype_a: str, dtype_b: str) -> int:
    """8-bit multipliers take one pass per byte slice of each 16-bit operand."""
    return (2 if dtype_a == "INT16" else 1) * (2 if dtype_b == "INT16" else 1)


def tile_cycles(rows: int, cols: int, k: int, split, passes: int = 1) -> int:
    """Output tile on a grid of cores; the slowest core sets the pace.

    Rows split into ``split[0]`` near-equal parts, columns into ``split[1]``
    parts at 32-column granularity; core (0, 0) carries the largest share.
    """
    rs, cs = split
    if rows <= 0 or cols <= 0:
        return 0
    r = ceil_div(rows, rs)
    blocks = ceil_div(ceil_div(cols, MPA_DIM), cs)
    return passes * core_cycles(r, blocks * MPA_DIM, k)


def _tile_sizes(dim: int, tile: int):
    """(size, count) pairs of the full tiles and the ragged tail."""
    full, rag = divmod(dim, tile)
    out = [(tile, full)] if full else []
    if rag:
        out.append((rag, 1))
    return out


def plan_compute_cycles(spec: MatmulSpec, tile_m: int, tile_n: int, split) -> int:
    total = 0
    for r, cr in _tile_sizes(spec.m, tile_m):
        for c, cc in _tile_sizes(spec.n, tile_n):
            total += cr * cc * tile_cycles(r, c, spec.k, split, spec.passes)
    return total


def ideal_cycles(spec: MatmulSpec, n_cores: int) -> float:
    return spec.macs / (MPA_DIM * MPA_DIM * n_cores)


# ---------------------------------------------------------------------------
# traffic
# ---------------------------------------------------------------------------

def _bounds(dim: int, tile: int):
    starts = np.arange(0, dim, tile)
    ends = np.minimum(starts + tile, dim)
    return starts, ends


def masked_pairs(spec: MatmulSpec, tile_m: int, tile_n: int) -> np.ndarray:
    """Boolean (A tiles x B tiles): output block hidden entirely by the causal mask."""
    a0, a1 = _bounds(spec.m, tile_m)
    b0, _ = _bounds(spec.n, tile_n)
    if not spec.causal:
        return np.zeros((a0.size, b0.size), bool)
    last_query = a1 - 1 + spec.qoff
    return b0[None, :] > last_query[:, None]


def estimate_transfer(spec: MatmulSpec, plan: TilePlan, include_output: bool = True) -> int:
    """Stationary read once, streaming operand re-read per stationary tile, output written once.

    Streaming reads for output blocks that are fully masked are skipped.
    """
    ra = row_bytes(spec.dtype_a, spec.k)
    rb = row_bytes(spec.dtype_b, spec.k)
    a0, a1 = _bounds(spec.m, plan.tile_m)
    b0, b1 = _bounds(spec.n, plan.tile_n)
    hidden = masked_pairs(spec, plan.tile_m, plan.tile_n)
    if plan.stationary == "IN0":
        reads = a0.size * spec.size_b + spec.size_a
        reads -= int(((b1 - b0)[None, :] * hidden).sum()) * rb
    else:
        reads = b0.size * spec.size_a + spec.size_b
        reads -= int(((a1 - a0)[:, None] * hidden).sum()) * ra
    if not include_output:
        return reads
    # each output tile is written on its own, so MX block padding is per tile
    written = sum(cnt * spec.m * row_bytes(spec.dtype_c, c) for c, cnt in _tile_sizes(spec.n, plan.tile_n))
    return reads + written


def eq1_bytes(spec: MatmulSpec, stationary: str, stationary_tile: int) -> int:
    """Closed form without output and without masking."""
    if stationary == "IN0":
        return ceil_div(spec.m, stationary_tile) * spec.size_b + spec.size_a
    return ceil_div(spec.n, stationary_tile) * spec.size_a + spec.size_b


@dataclass(frozen=True)
class TraceEvent:
    kind: str  # "read", "compute" or "write"
    operand: str  # "A", "B" or "C"
    i: int
    j: int
    nbytes: int


def trace_tiled_matmul(spec: MatmulSpec, plan: TilePlan) -> list:
    """Nested tile loops: stationary tile outside, streaming tile inside."""
    a0, a1 = _bounds(spec.m, plan.tile_m)
    b0, b1 = _bounds(spec.n, plan.tile_n)
    hidden = masked_pairs(spec, plan.tile_m, plan.tile_n)
    ra = row_bytes(spec.dtype_a, spec.k)
    rb = row_bytes(spec.dtype_b, spec.k)
    out = []
    outer_is_a = plan.stationary == "IN0"
    n_outer, n_inner = (a0.size, b0.size) if outer_is_a else (b0.size, a0.size)
    for o in range(n_outer):
        if outer_is_a:
            out.append(TraceEvent("read", "A", o, -1, int(a1[o] - a0[o]) * ra))
        else:
            out.append(TraceEvent("read", "B", -1, o, int(b1[o] - b0[o]) * rb))
        for t in range(n_inner):
            i, j = (o, t) if outer_is_a else (t, o)
            if not hidden[i, j]:
                if outer_is_a:
                    out.append(TraceEvent("read", "B", i, j, int(b1[j] - b0[j]) * rb))
                else:
                    out.append(TraceEvent("read", "A", i, j, int(a1[i] - a0[i]) * ra))
                out.append(TraceEvent("compute", "C", i, j, 0))
            c_bytes = tensor_bytes(spec.dtype_c, int(a1[i] - a0[i]), int(b1[j] - b0[j]))
            out.append(TraceEvent("write", "C", i, j, c_bytes))
    return out


def trace_bytes(events) -> int:
    return sum(e.nbytes for e in events if e.kind in ("read", "write"))


# ---------------------------------------------------------------------------
# planner
# ---------------------------------------------------------------------------

def core_splits(n_cores: int) -> list:
    return [(r, n_cores // r) for r in range(1, n_cores + 1) if n_cores % r == 0]


def tile_candidates(dim: int, grain: int = TILE_GRAIN) -> list:
    c = list(range(grain, dim, grain))
    return c + [dim]


def sram_footprint(spec: MatmulSpec, stationary: str, tile_m: int, tile_n: int) -> int:
    """Stationary tile, double-buffered streaming tile and the output tile."""
    a = tensor_bytes(spec.dtype_a, tile_m, spec.k)
    b = tensor_bytes(spec.dtype_b, tile_n, spec.k)
    c = tensor_bytes(spec.dtype_c, tile_m, tile_n)
    return (a + 2 * b if stationary == "IN0" else b + 2 * a) + c


def hides_dma(spec: MatmulSpec, stationary: str, tile_m: int, tile_n: int, split,
              bw_bytes_per_cycle: float) -> bool:
    """Steady state: computing one output tile covers streaming the next operand tile and its write-back."""
    stream = (tensor_bytes(spec.dtype_b, tile_n, spec.k) if stationary == "IN0"
              else tensor_bytes(spec.dtype_a, tile_m, spec.k))
    load = stream + tensor_bytes(spec.dtype_c, tile_m, tile_n)
    return tile_cycles(tile_m, tile_n, spec.k, split, spec.passes) * bw_bytes_per_cycle >= load


def make_plan(spec: MatmulSpec, stationary: str, tile_m: int, tile_n: int, split, n_cores: int,
              bw_bytes_per_cycle: float = 32.0) -> TilePlan:
    cycles = plan_compute_cycles(spec, tile_m, tile_n, split)
    plan = TilePlan(stationary, tile_m, tile_n, tuple(split), n_cores)
    st_tile = tile_m if stationary == "IN0" else tile_n
    traffic = estimate_transfer(spec, plan)
    return TilePlan(
        stationary, tile_m, tile_n, tuple(split), n_cores,
        traffic=traffic,
        est_cycles=max(cycles, traffic / bw_bytes_per_cycle),
        eq1_bytes=eq1_bytes(spec, stationary, st_tile),
        compute_cycles=cycles,
        utilization=ideal_cycles(spec, n_cores) / cycles,
        sram_bytes=sram_footprint(spec, stationary, tile_m, tile_n),
        hides_dma=hides_dma(spec, stationary, tile_m, tile_n, split, bw_bytes_per_cycle),
    )


POLICIES = ("utilization", "latency")


def selection_key(plan: TilePlan, policy: str = "utilization"):
    """Order of preference between feasible plans.

    ``utilization``: fewest compute cycles, then least traffic.
    ``latency``: shortest max(compute, traffic / bandwidth), then least traffic.
    Remaining ties go to IN1, then the larger stationary and streaming tiles."""
    tail = (plan.stationary != "IN1", -plan.stationary_tile, -plan.streaming_tile, plan.split)
    if policy == "latency":
        return (plan.est_cycles, plan.traffic, plan.compute_cycles) + tail
    return (plan.compute_cycles, plan.traffic) + tail


def select_plan(spec: MatmulSpec, n_cores: int = 4, sram_bytes: int = 1 << 20,
                bw_bytes_per_cycle: float = 32.0, policy: str = "utilization") -> TilePlan:
    """Pick stationary operand, tile sizes and core split.

    Every 32-aligned tiling that fits the buffer competes under ``policy``
    (see ``selection_key``).  ``utilization`` keeps the MAC array busiest;
    ``latency`` also weighs the DRAM time, which matters once several NPUs
    share the bandwidth.
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    best = None
    for stationary in ("IN1", "IN0"):
        st_dim, sm_dim = (spec.m, spec.n) if stationary == "IN0" else (spec.n, spec.m)
        for split in core_splits(n_cores):
            for stream in tile_candidates(sm_dim):
                for st in _grow(st_dim):
                    tm, tn = (st, stream) if stationary == "IN0" else (stream, st)
                    if sram_footprint(spec, stationary, tm, tn) > sram_bytes:
                        break
                    plan = make_plan(spec, stationary, tm, tn, split, n_cores, bw_bytes_per_cycle)
                    if best is None or selection_key(plan, policy) < selection_key(best, policy):
                        best = plan
    if best is None:
        raise InfeasiblePlan(f"no tiling of {spec} fits {sram_bytes} bytes")
    return best


def _grow(dim: int):
    # candidate stationary sizes in growing order; footprint is monotone in them
    return tile_candidates(dim)
