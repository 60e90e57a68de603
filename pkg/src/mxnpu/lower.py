"""Decoder layers lowered to ISA programs.

One decoder layer (RMSNorm, QKV projection, causal attention, output
projection, FFN, residuals) becomes one program per NPU.  Each pass of the
optimization ladder is an independent toggle in ``LoweringOptions``.
Every TMATMUL gets a tile plan chosen for the target configuration; the
plans travel with the program.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np

from .dataflow import MPA_DIM, InfeasiblePlan, MatmulSpec, ceil_div, row_bytes, select_plan
from .executor import fi32_mask
from .isa import Program
from .lut import N_ERROR, N_VALUE
from .numerics import Fi32Tensor, IntTensor, quantize_int, quantize_mx, quantize_weights
from .perf import SimConfig, simulate_npu

EPS = 1e-6  # added to the mean square before the inverse square root
LUT_ENTRY_BYTES = 2
ROW_GRAIN = 32


# ---------------------------------------------------------------------------
# model shapes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelShape:
    name: str
    hidden: int
    n_heads: int
    n_kv_heads: int
    ffn: int
    ffn_kind: str = "gated_silu"  # or "relu"
    head_dim: int = 0
    source: str = ""

    def __post_init__(self):
        if self.head_dim == 0:
            object.__setattr__(self, "head_dim", self.hidden // self.n_heads)
        if self.n_heads % self.n_kv_heads:
            raise ValueError("query heads must be a multiple of key/value heads")
        if self.ffn_kind not in ("gated_silu", "relu"):
            raise ValueError(f"unknown FFN kind {self.ffn_kind}")

    @property
    def q_per_kv(self) -> int:
        return self.n_heads // self.n_kv_heads

    @property
    def q_width(self) -> int:
        return self.n_heads * self.head_dim

    @property
    def kv_width(self) -> int:
        return self.n_kv_heads * self.head_dim


def preset_names() -> list:
    return sorted(p.name[:-5] for p in resources.files("mxnpu").joinpath("presets").iterdir()
                  if p.name.endswith(".json"))


def load_shape(name_or_path: str) -> ModelShape:
    """A bundled preset by name, or a JSON file with the same fields."""
    path = Path(name_or_path)
    if path.suffix == ".json" and path.exists():
        data = json.loads(path.read_text())
    else:
        ref = resources.files("mxnpu").joinpath("presets", f"{name_or_path}.json")
        if not ref.is_file():
            raise KeyError(f"unknown model preset {name_or_path!r}; have {preset_names()}")
        data = json.loads(ref.read_text())
    return ModelShape(**data)


# ---------------------------------------------------------------------------
# options
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LoweringOptions:
    mxint8: bool = True
    lut: bool = True
    qkv_batch: bool = True
    trans_fuse: bool = True
    mask_fuse: bool = True

    @property
    def act_dtype(self) -> str:
        return "MXINT8" if self.mxint8 else "INT16"

    @property
    def sfu_mode(self) -> bool:
        return not self.lut

    @property
    def unit(self) -> str:
        return "ppa" if self.lut else "sfu"


LADDER_STEPS = (
    ("Baseline", None),
    ("+MXINT8", "mxint8"),
    ("+LUT", "lut"),
    ("+QKV.opt", "qkv_batch"),
    ("+Trans.opt", "trans_fuse"),
    ("+Mask.opt", "mask_fuse"),
)


def ladder(steps: int = len(LADDER_STEPS)) -> list:
    """Cumulative design points: everything off, then one toggle added per step."""
    opts = LoweringOptions(False, False, False, False, False)
    out = []
    for label, toggle in LADDER_STEPS[:steps]:
        if toggle:
            opts = replace(opts, **{toggle: True})
        out.append((label, opts))
    return out


@dataclass(frozen=True)
class LayerGraph:
    """One decoder layer over a sequence.

    ``rows`` picks this NPU's query rows in attention; ``lin_rows`` picks its rows
    in the row-wise parts (norms, projections, FFN) and defaults to ``rows``."""
    shape: ModelShape
    seq_len: int
    rows: tuple | None = None
    lin_rows: tuple | None = None

    @property
    def q0(self) -> int:
        return self.rows[0] if self.rows else 0

    @property
    def q1(self) -> int:
        return self.rows[1] if self.rows else self.seq_len

    @property
    def n_rows(self) -> int:
        return self.q1 - self.q0

    @property
    def lin(self) -> tuple:
        return self.lin_rows or (self.q0, self.q1)

    @property
    def n_lin(self) -> int:
        return self.lin[1] - self.lin[0]

    @property
    def regrouped(self) -> bool:
        """Attention rows differ from the row-wise rows: operands cross NPUs at the syncs."""
        return self.lin != (self.q0, self.q1)

    @property
    def n_keys(self) -> int:
        """Causal: the last local query sees keys up to its own position."""
        return self.q1

    @property
    def split(self) -> bool:
        full = (0, self.seq_len)
        return (self.q0, self.q1) != full or self.lin != full


def row_ranges(seq_len: int, n: int) -> list:
    """Near-equal contiguous row ranges, cut on 32-row boundaries where possible."""
    cuts = [0] + [min(seq_len, round(seq_len * i / n / ROW_GRAIN) * ROW_GRAIN) for i in range(1, n)] + [seq_len]
    return list(zip(cuts, cuts[1:]))


# ---------------------------------------------------------------------------
# RMSNorm buffer ledger
# ---------------------------------------------------------------------------

def rmsnorm_sram_ledger(rows: int, hidden: int, dtype: str = "MXINT8") -> dict:
    """On-chip bytes of one RMSNorm tile: input, prefetched next input, output,
    per-row squared sums and the LUT pair."""
    tile = rows * row_bytes(dtype, hidden)
    return {"IN0": tile, "IN1": tile, "OUT": tile, "SQSUM": 4 * rows,
            "LUT": (N_VALUE + N_ERROR) * LUT_ENTRY_BYTES}


def rmsnorm_tile_rows(hidden: int, dtype: str = "MXINT8", sram_bytes: int = 1 << 20) -> int:
    """Largest 32-row multiple whose ledger fits; smaller tiles if not even 32 rows fit."""
    best = 0
    rows = ROW_GRAIN
    while sum(rmsnorm_sram_ledger(rows, hidden, dtype).values()) <= sram_bytes:
        best = rows
        rows += ROW_GRAIN
    if best:
        return best
    rows = ROW_GRAIN - 1
    while rows > 0 and sum(rmsnorm_sram_ledger(rows, hidden, dtype).values()) > sram_bytes:
        rows -= 1
    if rows == 0:
        raise ValueError(f"no RMSNorm tile of {hidden} columns fits {sram_bytes} bytes")
    return rows


# ---------------------------------------------------------------------------
# lowering
# ---------------------------------------------------------------------------

PLAN_POLICY = "latency"  # NPUs sharing DRAM make traffic as costly as compute


@lru_cache(maxsize=4096)
def _select(spec: MatmulSpec, n_cores: int, sram: int, bw: float, policy: str = PLAN_POLICY):
    return select_plan(spec, n_cores, sram, bw, policy)


class LayerLowering:
    """Builds one NPU's program for a decoder layer."""

    def __init__(self, graph: LayerGraph, opts: LoweringOptions, config: SimConfig | None = None,
                 sync_base: int = 0):
        self.g = graph
        self.s = graph.shape
        self.opts = opts
        self.config = config or SimConfig()
        self.sync_base = sync_base
        self.act = opts.act_dtype
        name = f"{self.s.name}-s{graph.seq_len}-r{graph.q0}_{graph.q1}"
        self.p = Program(name=name)
        self._plan_ids = {}
        self.segment = ""

    # -- bookkeeping --------------------------------------------------------

    def tensor(self, tid, shape, dtype=None, residence="DRAM", is_input=False) -> str:
        self.p.add_tensor(tid, shape, dtype or self.act, residence)
        if is_input:
            self.p.inputs += (tid,)
        return tid

    def plan_id(self, spec: MatmulSpec) -> int:
        key = replace(spec, name="")  # same shape, same plan
        if key not in self._plan_ids:
            plan = _select(key, self.config.dlas_per_npu, self.config.sram_bytes, self.config.bw_per_npu)
            pid = len(self._plan_ids)
            self._plan_ids[key] = pid
            self.p.plans[str(pid)] = {"spec": spec.to_dict(), "plan": plan.to_dict()}
        return self._plan_ids[key]

    def spec_of(self, a: str, b: str, out_dtype: str, causal: bool = False, qoff: int = 0,
                name: str = "", k: int | None = None) -> MatmulSpec:
        ta, tb = self.p.tensors[a], self.p.tensors[b]
        return MatmulSpec(ta.shape[0], tb.shape[0], k or ta.shape[1], ta.dtype, tb.dtype, out_dtype,
                          causal, qoff, name)

    def matmul(self, out, a, b, out_dtype=None, *, group=None, group_spec=None, skip_qoff=None,
               phase=None, kslice=None, **kw):
        out_dtype = out_dtype or self.act
        ta, tb = self.p.tensors[a], self.p.tensors[b]
        self.tensor(out, (ta.shape[0], tb.shape[0]), out_dtype)
        meta = {}
        if skip_qoff is not None:
            meta.update(skip="causal", qoff=skip_qoff)
        if kslice is not None:
            meta["kslice"] = tuple(kslice)
            if kw.get("psum"):
                meta["psum_rd"] = self.nbytes(kw["psum"])
        if self.segment:
            meta["seg"] = self.segment
        if group is None:
            k = kslice[1] - kslice[0] if kslice else None
            spec = self.spec_of(a, b, out_dtype, skip_qoff is not None, skip_qoff or 0, out, k)
            meta["plan"] = self.plan_id(spec)
        else:
            meta["group"] = group
            if group_spec is not None:
                meta["plan"] = self.plan_id(group_spec)
        if phase:
            meta["phase"] = phase
        return self.p.emit("TMATMUL", out, a, b, out_dtype=out_dtype, meta=meta, **kw)

    def sync(self, k: int):
        if self.g.split or self.config.n_npus > 1:
            self.p.emit("SYNC", meta={"id": self.sync_base + k})

    def nbytes(self, tid: str) -> int:
        d = self.p.tensors[tid]
        return row_bytes(d.dtype, d.shape[-1]) * math.prod(d.shape[:-1])

    # -- segments -------------------------------------------------------------

    def rmsnorm(self, x: str, gain: str, tag: str) -> str:
        """Mean square, inverse square root through the LUT, rescale with the gain folded in."""
        rows = self.p.tensors[x].shape[0]
        tile = rmsnorm_tile_rows(self.s.hidden, self.act, self.config.sram_bytes)
        ms = self.tensor(f"{tag}.ms", (rows, 1), "FI32", "SRAM")
        inv = self.tensor(f"{tag}.inv", (rows, 1), "FI32", "SRAM")
        out = self.tensor(f"{tag}.out", self.p.tensors[x].shape)
        # the input tile stays resident from the mean square to the rescale
        self.p.emit("MEAN_SQUARE", ms, x, bias="eps", meta={"rd": self.nbytes(x), "wr": 0, "tile": tile})
        self.p.emit("LUT", inv, ms, flags={"INV", "SQR"}, unit=self.opts.unit, meta={"tile": tile})
        self.p.emit("RESCALE", out, x, inv, cwq=gain, out_dtype=self.act,
                    meta={"rd": 0, "wr": self.nbytes(out), "tile": tile})
        return out

    def qkv(self, xn: str):
        """Per-head projections; Q, K and V of one KV group share a fused plan when batching."""
        s, hd = self.s, self.s.head_dim
        q, k, v = {}, {}, {}
        for g in range(s.n_kv_heads):
            heads = range(g * s.q_per_kv, (g + 1) * s.q_per_kv)
            group = f"qkv{g}" if self.opts.qkv_batch else None
            group_spec = MatmulSpec(self.g.n_lin, (s.q_per_kv + 2) * hd, s.hidden, self.act, "UINT4",
                                    self.act, name=f"qkv{g}") if group else None
            first = True
            for h in heads:
                self.tensor(f"wq{h}", (hd, s.hidden), "UINT4", is_input=True)
                self.tensor(f"sq{h}", (hd,), "FI32", "SRAM", is_input=True)
                q[h] = self.matmul(f"q{h}", xn, f"wq{h}", cwq=f"sq{h}", group=group,
                                   group_spec=group_spec if first else None).out
                first = False
            for kind, store in (("k", k), ("v", v)):
                self.tensor(f"w{kind}{g}", (hd, s.hidden), "UINT4", is_input=True)
                self.tensor(f"s{kind}{g}", (hd,), "FI32", "SRAM", is_input=True)
            k[g] = self.matmul(f"k{g}", xn, f"wk{g}", cwq=f"sk{g}", group=group).out
            if self.opts.trans_fuse:
                # weights as IN0 give V transposed directly; its scale moves to the next CWQ
                v[g] = self.matmul(f"vt{g}", f"wv{g}", xn, group=group).out
            else:
                v[g] = self.matmul(f"v{g}", xn, f"wv{g}", cwq=f"sv{g}", group=group).out
        return q, k, v

    def transpose_v(self, v: str, g: int) -> str:
        """Unfused path: to INT16, transpose, back to the activation format."""
        shape = self.p.tensors[v].shape
        wide = self.tensor(f"v{g}.i16", shape, "INT16")
        self.p.emit("CONVERT", wide, v, out_dtype="INT16")
        flipped = self.tensor(f"v{g}.i16t", shape[::-1], "INT16")
        self.p.emit("TRANSPOSE", flipped, wide, out_dtype="INT16")
        vt = self.tensor(f"vt{g}", shape[::-1])
        self.p.emit("CONVERT", vt, flipped, out_dtype=self.act)
        return vt

    def gathered(self, tid: str, shape) -> str:
        """Keys/values written by every NPU; peers' rows arrive through DRAM."""
        if not self.g.split:
            return tid
        return self.tensor(f"{tid}.all", shape, is_input=True)

    def attention(self, q: dict, k: dict, v: dict) -> str:
        s, o = self.s, self.opts
        hd, nk, rows = s.head_dim, self.g.n_keys, self.g.n_rows
        self.tensor("qk_scale", (nk,), "FI32", "SRAM", is_input=True)
        if o.mask_fuse:
            self.tensor("mask", (rows, nk), "FI32", is_input=True)
        else:
            self.tensor("mask01", (rows, nk), "INT8", is_input=True)
        vts = {}
        for g in range(s.n_kv_heads):
            vt = v[g] if o.trans_fuse else self.transpose_v(v[g], g)
            vts[g] = self.gathered(vt, (hd, nk))
        keys = {g: self.gathered(k[g], (nk, hd)) for g in range(s.n_kv_heads)}
        heads = []
        self.segment = "attn"  # cost grows with rows times keys
        for h in range(s.n_heads):
            g = h // s.q_per_kv
            if o.mask_fuse:
                # masked positions start from the most negative FI32, so exp gives exactly 0
                flags = {"EXP"} if o.lut else set()
                dtype = self.act if o.lut else "FI32"
                e = self.matmul(f"e{h}", q[h], keys[g], dtype, psum="mask", cwq="qk_scale",
                                flags=flags, skip_qoff=self.g.q0).out
                if not o.lut:
                    e = self.lut(f"e{h}.x", e, {"EXP"})
            else:
                if o.lut:
                    raw = self.matmul(f"e{h}.raw", q[h], keys[g], "FI32", cwq="qk_scale", flags={"EXP"}).out
                else:
                    sc = self.matmul(f"sc{h}", q[h], keys[g], cwq="qk_scale").out
                    raw = self.lut(f"e{h}.raw", sc, {"EXP"})
                e = self.tensor(f"e{h}", (rows, nk))
                self.emit("MUL", e, raw, "mask01", out_dtype=self.act)
            total = self.tensor(f"l{h}", (rows, 1), "FI32", "SRAM")
            self.emit("MEAN", total, e)
            recip = self.tensor(f"r{h}", (rows, 1), "FI32", "SRAM")
            self.emit("LUT", recip, total, flags={"INV"}, unit=o.unit)
            # normalize after the value product: rows scale the same either way
            cwq = f"sv{g}" if o.trans_fuse else None
            raw = self.matmul(f"o{h}.raw", e, vts[g], "FI32", cwq=cwq).out
            heads.append(self.tensor(f"o{h}", (rows, hd)))
            self.emit("RESCALE", heads[-1], raw, recip, out_dtype=self.act)
        self.segment = ""
        out = self.tensor("attn", (rows, s.q_width))
        # heads land side by side in one buffer: no data is moved
        self.p.emit("CONCAT", out, *heads, out_dtype=self.act, meta={"rd": 0, "wr": 0})
        return out

    def emit(self, opcode, out, *srcs, **kw):
        if self.segment:
            kw["meta"] = {**kw.get("meta", {}), "seg": self.segment}
        return self.p.emit(opcode, out, *srcs, **kw)

    def lut(self, out: str, x: str, flags) -> str:
        self.tensor(out, self.p.tensors[x].shape)
        self.emit("LUT", out, x, flags=flags, unit=self.opts.unit, out_dtype=self.act)
        return out

    def k_chunks(self, m: int, n: int, k: int, dtype_a: str, dtype_b: str) -> int:
        """Reduction slices for a projection: fewer when the full-K tiling is efficient,
        more when SRAM forces small tiles.  Partial sums travel through PSUM in FI32."""
        best, best_cost = None, None
        chunks = 1
        while chunks == 1 or ceil_div(k, chunks) >= MPA_DIM:
            step = ceil_div(ceil_div(k, chunks), MPA_DIM) * MPA_DIM
            cost = 0.0
            try:
                for k0 in range(0, k, step):
                    last = k0 + step >= k
                    spec = MatmulSpec(m, n, min(step, k - k0), dtype_a, dtype_b, self.act if last else "FI32")
                    plan = _select(spec, self.config.dlas_per_npu, self.config.sram_bytes, self.config.bw_per_npu)
                    traffic = plan.traffic + (0 if k0 == 0 else 4 * m * n)
                    cost += max(plan.compute_cycles, traffic / self.config.bw_per_npu)
            except InfeasiblePlan:
                cost = None
            if cost is not None and (best_cost is None or cost < best_cost):
                best, best_cost = chunks, cost
            chunks *= 2
        if best is None:
            raise InfeasiblePlan(f"no reduction split of {m}x{n}x{k} fits")
        return best

    def linear(self, out: str, x: str, w: str, n: int, k: int, flags=frozenset()) -> str:
        self.tensor(w, (n, k), "UINT4", is_input=True)
        self.tensor(f"s.{w}", (n,), "FI32", "SRAM", is_input=True)
        m = self.p.tensors[x].shape[0]
        chunks = self.k_chunks(m, n, k, self.p.tensors[x].dtype, "UINT4")
        if chunks == 1:
            return self.matmul(out, x, w, cwq=f"s.{w}", flags=flags).out
        step = ceil_div(ceil_div(k, chunks), MPA_DIM) * MPA_DIM
        partial = None
        for c, k0 in enumerate(range(0, k, step)):
            k1 = min(k0 + step, k)
            if k1 == k:
                return self.matmul(out, x, w, cwq=f"s.{w}", flags=flags, psum=partial, kslice=(k0, k1)).out
            nxt = f"{out}.k{c}"
            self.matmul(nxt, x, w, "FI32", psum=partial, kslice=(k0, k1))
            partial = nxt

    def ffn(self, xn: str) -> str:
        s = self.s
        if s.ffn_kind == "relu":
            hmid = self.linear("fc1", xn, "w1", s.ffn, s.hidden, {"RELU"})
            return self.linear("fc2", hmid, "w2", s.hidden, s.ffn)
        if self.opts.lut:
            gate = self.linear("gate", xn, "wg", s.ffn, s.hidden, {"RLU"})
        else:
            gate = self.lut("gate", self.linear("gate.pre", xn, "wg", s.ffn, s.hidden), {"RLU"})
        up = self.linear("up", xn, "wu", s.ffn, s.hidden)
        hmid = self.tensor("hmid", (self.g.n_lin, s.ffn))
        self.p.emit("MUL", hmid, gate, up, out_dtype=self.act)
        return self.linear("down", hmid, "wd", s.hidden, s.ffn)

    def layer(self) -> Program:
        s, g = self.s, self.g
        rows = g.n_lin
        self.tensor("x", (rows, s.hidden), is_input=True)
        self.tensor("eps", (1, 1), "FI32", "SRAM", is_input=True)
        self.tensor("g1", (s.hidden,), "FI32", "SRAM", is_input=True)
        self.tensor("g2", (s.hidden,), "FI32", "SRAM", is_input=True)
        xn = self.rmsnorm("x", "g1", "n1")
        q, k, v = self.qkv(xn)
        self.sync(1)
        if g.regrouped:
            q = {h: self.tensor(f"q{h}.rows", (g.n_rows, s.head_dim), is_input=True) for h in q}
        attn = self.attention(q, k, v)
        self.sync(2)
        if g.regrouped:
            self.p.outputs += (attn,)
            attn = self.tensor("attn.rows", (rows, s.q_width), is_input=True)
        proj = self.linear("proj", attn, "wo", s.hidden, s.q_width)
        h1 = self.tensor("h1", (rows, s.hidden))
        self.p.emit("ADD", h1, "x", proj, out_dtype=self.act)
        xn2 = self.rmsnorm(h1, "g2", "n2")
        f = self.ffn(xn2)
        out = self.tensor("out", (rows, s.hidden))
        self.p.emit("ADD", out, h1, f, out_dtype=self.act)
        self.sync(3)
        self.p.outputs += ("out",)
        self.p.validate()
        return self.p


def lower_layer(graph: LayerGraph, opts: LoweringOptions, config: SimConfig | None = None) -> Program:
    return LayerLowering(graph, opts, config).layer()


def attention_cost(shape: ModelShape, seq_len: int, rows: tuple, opts: LoweringOptions,
                   config: SimConfig) -> float:
    """Simulated cycles of the attention instructions for one block of query rows."""
    prog = lower_layer(LayerGraph(shape, seq_len, rows), opts, config)
    rep = simulate_npu(prog, config)
    return sum(r.cycles for r in rep.rows if prog.instructions[r.index].meta.get("seg") == "attn")


def causal_work(q0: int, q1: int, per_row: float, per_pair: float) -> float:
    """Cost of query rows [q0, q1) when row i costs per_row + per_pair * (i + 1)."""
    pairs = (q1 * (q1 + 1) - q0 * (q0 + 1)) / 2
    return per_row * (q1 - q0) + per_pair * pairs


def fit_attention_cost(shape: ModelShape, seq_len: int, opts: LoweringOptions, config: SimConfig) -> tuple:
    """(per_row, per_pair) fitted through the two halves of the sequence."""
    half = round(seq_len / 2 / ROW_GRAIN) * ROW_GRAIN or seq_len // 2
    blocks = [(0, half), (half, seq_len)]
    costs = [attention_cost(shape, seq_len, b, opts, config) for b in blocks]
    basis = np.array([[q1 - q0, (q1 * (q1 + 1) - q0 * (q0 + 1)) / 2] for q0, q1 in blocks])
    per_row, per_pair = np.linalg.solve(basis, costs)
    return max(per_row, 0.0), max(per_pair, 0.0)


def balanced_row_ranges(seq_len: int, n: int, per_row: float, per_pair: float) -> list:
    """Contiguous 32-row-aligned ranges of near-equal ``causal_work``."""
    if n == 1:
        return [(0, seq_len)]
    total = causal_work(0, seq_len, per_row, per_pair)
    a, b = per_pair / 2, per_row + per_pair / 2
    cuts = [0]
    for i in range(1, n):
        target = total * i / n
        x = (-b + math.sqrt(b * b + 4 * a * target)) / (2 * a) if a > 0 else target / b
        lo, hi = cuts[-1] + ROW_GRAIN, (seq_len - (n - i) * ROW_GRAIN) // ROW_GRAIN * ROW_GRAIN
        if lo <= hi:
            x = min(hi, max(lo, round(x / ROW_GRAIN) * ROW_GRAIN))
        else:  # too few rows for 32-row blocks
            x = min(seq_len - (n - i), max(cuts[-1] + 1, round(x)))
        cuts.append(x)
    return list(zip(cuts, cuts[1:] + [seq_len]))


def lower_layer_multi(shape: ModelShape, seq_len: int, opts: LoweringOptions, config: SimConfig,
                      balance: bool = True) -> list:
    """One program per NPU.

    Row-wise work (norms, projections, FFN) is split evenly.  With ``balance``
    attention rows are split separately so that later rows, which attend to
    more keys, get smaller blocks; queries and attention outputs then cross
    NPUs through DRAM at the syncs that already separate the phases."""
    n = config.n_npus
    lin = row_ranges(seq_len, n)
    if balance and n > 1:
        att = balanced_row_ranges(seq_len, n, *fit_attention_cost(shape, seq_len, opts, config))
    else:
        att = lin
    return [lower_layer(LayerGraph(shape, seq_len, a, l), opts, config) for a, l in zip(att, lin)]


# ---------------------------------------------------------------------------
# functional inputs
# ---------------------------------------------------------------------------

def random_weights(shape: ModelShape, rng) -> dict:
    """Real-valued layer weights with unit-variance-preserving scales."""
    h, f = shape.hidden, shape.ffn

    def mat(n, k):
        return rng.standard_normal((n, k)) / np.sqrt(k)

    w = {"wq": mat(shape.q_width, h), "wk": mat(shape.kv_width, h), "wv": mat(shape.kv_width, h),
         "wo": mat(h, shape.q_width), "g1": 1 + 0.1 * rng.standard_normal(h),
         "g2": 1 + 0.1 * rng.standard_normal(h)}
    if shape.ffn_kind == "relu":
        w.update(w1=mat(f, h), w2=mat(h, f))
    else:
        w.update(wg=mat(f, h), wu=mat(f, h), wd=mat(h, f))
    return w


def quantized_weights(weights: dict) -> dict:
    """UINT4 per-row weights; ``dequantized`` gives the values the datapath realizes."""
    return {k: quantize_weights(v) for k, v in weights.items() if v.ndim == 2}


def dequantized(weights: dict) -> dict:
    out = dict(weights)
    for k, q in quantized_weights(weights).items():
        out[k] = q.to_real()
    return out


def activation(x: np.ndarray, dtype: str):
    return quantize_mx(x) if dtype == "MXINT8" else quantize_int(x, dtype)


def _weight_rows(q: IntTensor, r0: int, r1: int):
    w = IntTensor(q.elems[r0:r1], q.dtype, q.exp_code, q.scale[r0:r1],
                  np.asarray(q.zero_point)[r0:r1])
    return w, Fi32Tensor.from_real(q.scale[r0:r1])


def layer_inputs(graph: LayerGraph, opts: LoweringOptions, weights: dict, x: np.ndarray) -> dict:
    """Executor inputs for ``lower_layer(graph, opts)`` on a single NPU."""
    if graph.split:
        raise ValueError("functional inputs are built for whole-sequence programs")
    s, hd = graph.shape, graph.shape.head_dim
    qw = quantized_weights(weights)
    inputs = {
        "x": activation(x, opts.act_dtype),
        "eps": Fi32Tensor.from_real(np.array([[EPS]])),
        "g1": Fi32Tensor.from_real(np.asarray(weights["g1"])),
        "g2": Fi32Tensor.from_real(np.asarray(weights["g2"])),
        "qk_scale": Fi32Tensor.from_real(np.full(graph.n_keys, 1 / np.sqrt(hd))),
    }
    for h in range(s.n_heads):
        inputs[f"wq{h}"], inputs[f"sq{h}"] = _weight_rows(qw["wq"], h * hd, (h + 1) * hd)
    for g in range(s.n_kv_heads):
        inputs[f"wk{g}"], inputs[f"sk{g}"] = _weight_rows(qw["wk"], g * hd, (g + 1) * hd)
        inputs[f"wv{g}"], inputs[f"sv{g}"] = _weight_rows(qw["wv"], g * hd, (g + 1) * hd)
    for name in qw.keys() - {"wq", "wk", "wv"}:
        inputs[name], inputs[f"s.{name}"] = _weight_rows(qw[name], 0, qw[name].shape[0])
    visible = np.tril(np.ones((graph.n_rows, graph.n_keys), bool))
    if opts.mask_fuse:
        inputs["mask"] = fi32_mask(visible)
    else:
        inputs["mask01"] = IntTensor(visible.astype(np.int64), "INT8")
    return inputs
