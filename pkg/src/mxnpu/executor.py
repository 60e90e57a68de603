"""Functional executor for the ISA.

The quantized path reproduces the datapath bit for bit: MPA commands
produce 32-element integer dot products that are accumulated into FI32
with the aligned add, and the PPA applies bias, per-channel rescale, an
optional LUT and the output conversion in that order.

The shadow path runs the same program in binary64 with no intermediate
quantization and exact nonlinear functions.  It is the oracle the tests
and the ``exec`` command compare against.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .isa import Instruction, Program, ProgramError
from .lut import Func, LutEngine, reference, sfu_evaluate
from .numerics import (
    COL_AXIS, FI32_MAX, MX_BLOCK, VALUE_OFFSET, Fi32Tensor, IntTensor, MxTensor,
    fi32_from_real, fi32_to_mx, n_blocks, quantize_int, to_fi32,
)

ROWS_PER_COMMAND = 64  # accumulator registers per MAC array
COLS_PER_COMMAND = 128  # four arrays of 32 stationary vectors work as one command
SKIP_TILE = 32
SRAM_BYTES = 1 << 20

ACTIVATION_DTYPES = {"MXINT8", "INT16", "INT8"}
MPA_DTYPES = {"MXINT8", "INT16", "INT8", "INT4", "UINT4", "UINT8"}


class SramOverflow(RuntimeError):
    """An instruction asked for more on-chip buffer than the NPU has."""


@dataclass(frozen=True)
class Command:
    parent: int
    rows: tuple
    cols: tuple

    @property
    def n_rows(self) -> int:
        return self.rows[1] - self.rows[0]

    @property
    def n_cols(self) -> int:
        return self.cols[1] - self.cols[0]


def decompose(in0_shape, in1_shape, parent: int = 0) -> list:
    """Split a TMATMUL into commands of at most 64 IN0 rows by 128 OUT columns."""
    m, k0 = in0_shape
    n, k1 = in1_shape
    if k0 != k1:
        raise ProgramError(f"reduction dims differ: {k0} vs {k1}")
    cmds = []
    for r in range(0, m, ROWS_PER_COMMAND):
        for c in range(0, n, COLS_PER_COMMAND):
            cmds.append(Command(parent, (r, min(r + ROWS_PER_COMMAND, m)),
                                (c, min(c + COLS_PER_COMMAND, n))))
    return cmds


def command_count(m: int, n: int) -> int:
    return -(-m // ROWS_PER_COMMAND) * -(-n // COLS_PER_COMMAND)


def dtype_of(t) -> str:
    if isinstance(t, np.ndarray):
        return "F64"
    return t.dtype


def tensor_to_real(t) -> np.ndarray:
    """Binary64 value of any tensor; integer channel scales are left to CWQ."""
    if isinstance(t, IntTensor):
        return t.to_real(apply_scale=False)
    if isinstance(t, (Fi32Tensor, MxTensor)):
        return t.to_real()
    return np.asarray(t, dtype=np.float64)


def nbytes_of(t) -> int:
    if isinstance(t, np.ndarray):
        return 4 * t.size
    return t.nbytes


@dataclass
class ExecContext:
    tensors: dict = field(default_factory=dict)
    sram_cap: int = SRAM_BYTES
    sram_used: int = 0
    sram_peak: int = 0
    allocations: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)
    stats: Counter = field(default_factory=Counter)
    history: list = field(default_factory=list)

    def read(self, tid: str):
        if tid not in self.tensors:
            raise ProgramError(f"tensor {tid} has not been written")
        return self.tensors[tid]

    def write(self, tid: str, value):
        self.tensors[tid] = value

    def real(self, tid: str) -> np.ndarray:
        return tensor_to_real(self.read(tid))

    def alloc(self, key: str, nbytes: int, where: str = ""):
        if key in self.allocations:
            raise ProgramError(f"buffer {key} allocated twice")
        if self.sram_used + nbytes > self.sram_cap:
            raise SramOverflow(f"{where or key}: needs {nbytes} B with {self.sram_used} B "
                               f"in use of {self.sram_cap} B")
        self.allocations[key] = nbytes
        self.sram_used += nbytes
        self.sram_peak = max(self.sram_peak, self.sram_used)
        self.history.append(("alloc", key, nbytes, self.sram_used))

    def free(self, key: str):
        nbytes = self.allocations.pop(key)
        self.sram_used -= nbytes
        self.history.append(("free", key, nbytes, self.sram_used))


# ---------------------------------------------------------------------------
# helpers shared by the quantized ops
# ---------------------------------------------------------------------------

def _mpa_planes(t):
    """Integer blocks along the reduction axis and their lsb exponents."""
    if isinstance(t, MxTensor):
        if t.shared_axis != COL_AXIS:
            raise ProgramError("MX operand blocks must run along the reduction dim")
        return t.blocks()
    if isinstance(t, IntTensor):
        c = t.centered()
        lines, length = c.shape
        nb = n_blocks(length)
        pad = np.zeros((lines, nb * MX_BLOCK), np.int64)
        pad[:, :length] = c
        return pad.reshape(lines, nb, MX_BLOCK), np.full((lines, nb), t.lsb_exp(), np.int64)
    raise ProgramError(f"{dtype_of(t)} cannot feed the MAC array")


def check_pairing(a, b):
    da, db = dtype_of(a), dtype_of(b)
    if da not in MPA_DTYPES or db not in MPA_DTYPES:
        raise ProgramError(f"unsupported TMATMUL pairing {da} x {db}")
    if da not in ACTIVATION_DTYPES and db not in ACTIVATION_DTYPES:
        raise ProgramError(f"unsupported TMATMUL pairing {da} x {db}")


def slice_k(t, k0: int, k1: int):
    """Columns ``k0:k1`` of a TMATMUL operand; MX slices start on a block boundary."""
    if isinstance(t, MxTensor):
        if t.shared_axis != COL_AXIS or k0 % MX_BLOCK:
            raise ProgramError(f"MX reduction slice {k0}:{k1} is not block aligned")
        return MxTensor(t.elems[:, k0:k1], t.shared_exps[:, k0 // MX_BLOCK: n_blocks(k1)])
    if isinstance(t, IntTensor):
        return IntTensor(t.elems[:, k0:k1], t.dtype, t.exp_code, t.scale, t.zero_point)
    if isinstance(t, Fi32Tensor):
        return t[:, k0:k1]
    return np.asarray(t)[:, k0:k1]


def _cols(t: Fi32Tensor, c0: int, c1: int) -> Fi32Tensor:
    """Column slice of a broadcastable per-column operand."""
    if t.frac.ndim == 1:
        return Fi32Tensor(t.exp[c0:c1], t.frac[c0:c1])
    if t.shape[-1] == 1:
        return t
    return t[..., c0:c1]


def _block(t: Fi32Tensor, rows, cols) -> Fi32Tensor:
    r = slice(*rows) if t.shape[0] != 1 else slice(None)
    c = slice(*cols) if t.shape[1] != 1 else slice(None)
    return t[r, c]


def skip_mask(rows, cols, qoff: int, m_total: int, tile: int = SKIP_TILE) -> np.ndarray:
    """Element mask of output tiles that a causal mask hides completely.

    Tiles are aligned to the whole output, so a command sees the same
    tiles as the full instruction.  A tile is hidden when its first key
    column lies after its last query row; ``qoff`` is the global index of
    local row 0.
    """
    r = np.arange(*rows)
    c = np.arange(*cols)
    last_row = np.minimum((r // tile + 1) * tile, m_total) - 1 + qoff
    first_col = (c // tile) * tile
    return first_col[None, :] > last_row[:, None]


def causal_skipped_tiles(m: int, n: int, qoff: int = 0, tile: int = SKIP_TILE) -> int:
    """Number of fully masked output tiles of an ``m`` x ``n`` causal score block."""
    count = 0
    for r0 in range(0, m, tile):
        last = min(r0 + tile, m) - 1 + qoff
        for c0 in range(0, n, tile):
            count += c0 > last
    return count


# ---------------------------------------------------------------------------
# executor
# ---------------------------------------------------------------------------

class Executor:
    """Runs programs on the quantized datapath or in the binary64 shadow mode."""

    def __init__(self, engine: LutEngine | None = None, shadow: bool = False,
                 per_command: bool = False, sram_cap: int = SRAM_BYTES):
        self.engine = engine or LutEngine()
        self.shadow = shadow
        self.per_command = per_command
        self.sram_cap = sram_cap

    def run(self, program: Program, inputs: dict, ctx: ExecContext | None = None) -> ExecContext:
        ctx = ctx or ExecContext(sram_cap=self.sram_cap)
        for tid, value in inputs.items():
            value = tensor_to_real(value) if self.shadow else value
            ctx.write(tid, value)
            desc = program.tensors.get(tid)
            if desc is not None and desc.residence == "SRAM" and not self.shadow:
                ctx.alloc(tid, nbytes_of(value))
        for i, ins in enumerate(program.instructions):
            self.step(ctx, ins, i, program)
        return ctx

    def step(self, ctx: ExecContext, ins: Instruction, index: int = 0, program: Program | None = None):
        key = f"#{index}"
        working = int(ins.meta.get("sram", 0))
        if working and not self.shadow:
            ctx.alloc(key, working, f"instruction {index} ({ins.opcode})")
        if ins.opcode == "SYNC":
            ctx.stats["sync"] += 1
            out = None
        elif self.shadow:
            out = self._shadow(ctx, ins)
        else:
            out = self._quantized(ctx, ins, index)
        if working and not self.shadow:
            ctx.free(key)
        if out is not None:
            ctx.write(ins.out, out)
            if isinstance(out, Fi32Tensor) and out.saturated:
                ctx.flags.append((index, ins.opcode, "saturated"))
            desc = program.tensors.get(ins.out) if program else None
            if desc is not None and desc.residence == "SRAM" and not self.shadow:
                if ins.out in ctx.allocations:
                    ctx.free(ins.out)
                ctx.alloc(ins.out, nbytes_of(out), f"instruction {index} ({ins.opcode})")
        ctx.stats[ins.opcode] += 1

    # -- quantized datapath -------------------------------------------------

    def _quantized(self, ctx: ExecContext, ins: Instruction, index: int):
        op = ins.opcode
        src = [ctx.read(t) for t in ins.srcs]
        side = {k: to_fi32(ctx.read(getattr(ins, k))) if getattr(ins, k) else None
                for k in ("psum", "bias", "cwq")}
        if op == "TMATMUL":
            if "kslice" in ins.meta:
                src = [slice_k(t, *ins.meta["kslice"]) for t in src]
            return self.exec_tmatmul(src[0], src[1], ins, ctx, index, **side)
        if op == "MEAN_SQUARE":
            return self.exec_mean_square(src[0], side["bias"])
        if op == "MEAN":
            return self.exec_mean(src[0])
        if op == "LUT":
            x = to_fi32(src[0])
            return self.convert(self.apply_lut(x, ins.flags, ins.unit), ins.out_dtype)
        if op == "RESCALE":
            return self.exec_rescale(src[0], src[1], side["cwq"], ins.out_dtype)
        if op == "MUL":
            return self.convert(to_fi32(src[0]).mul(to_fi32(src[1])), ins.out_dtype)
        if op == "ADD":
            return self.convert(to_fi32(src[0]).add(to_fi32(src[1])), ins.out_dtype)
        if op == "TRANSPOSE":
            return src[0].T
        if op == "CONVERT":
            return self.convert(to_fi32(src[0]), ins.out_dtype)
        if op == "CONCAT":
            parts = [to_fi32(s) for s in src]
            cat = Fi32Tensor(np.concatenate([p.exp for p in parts], axis=1),
                             np.concatenate([p.frac for p in parts], axis=1))
            return self.convert(cat, ins.out_dtype)
        if op == "LOAD":
            ctx.alloc(ins.out, nbytes_of(src[0]), f"instruction {index} (LOAD)")
            return src[0]
        if op == "STORE":
            if ins.srcs[0] in ctx.allocations:
                ctx.free(ins.srcs[0])
            return src[0]
        raise ProgramError(f"no executor for {op}")

    def mpa(self, a, b, rows=None, cols=None, skip_qoff=None) -> Fi32Tensor:
        """Accumulate 32-element dot products block by block along the reduction dim."""
        check_pairing(a, b)
        pa, la = _mpa_planes(a)
        pb, lb = _mpa_planes(b)
        if a.shape[1] != b.shape[1]:
            raise ProgramError(f"TMATMUL shapes {a.shape} x {b.shape}ᵀ disagree")
        rows = rows or (0, a.shape[0])
        cols = cols or (0, b.shape[0])
        r, c = slice(*rows), slice(*cols)
        hide = None
        if skip_qoff is not None:
            hide = skip_mask(rows, cols, skip_qoff, a.shape[0])
        acc = Fi32Tensor.zeros((rows[1] - rows[0], cols[1] - cols[0]))
        for k in range(pa.shape[1]):
            p = pa[r, k, :] @ pb[c, k, :].T
            if hide is not None:
                p = np.where(hide, 0, p)
            e = la[r, k][:, None] + lb[c, k][None, :] + VALUE_OFFSET
            acc = acc.add(Fi32Tensor.from_int(p, e))
        return acc

    def ppa(self, acc: Fi32Tensor, flags=frozenset(), unit: str = "ppa", bias=None, cwq=None,
            cols=None) -> Fi32Tensor:
        """Bias, then per-channel rescale, then the fused LUT; conversion happens after."""
        cols = cols or (0, acc.shape[1])
        if bias is not None:
            acc = acc.add(_cols(bias, *cols))
        if cwq is not None:
            acc = acc.mul(_cols(cwq, *cols))
        if flags:
            acc = self.apply_lut(acc, flags, unit)
        return acc

    def exec_tmatmul(self, a, b, ins: Instruction, ctx: ExecContext | None = None, index: int = 0,
                     psum=None, bias=None, cwq=None):
        m, n = a.shape[0], b.shape[0]
        qoff = ins.meta.get("qoff", 0) if ins.meta.get("skip") == "causal" else None
        if qoff is not None and psum is None:
            raise ProgramError("causal tile skipping needs the mask in PSUM")
        if self.per_command:
            out = Fi32Tensor.zeros((m, n))
            for cmd in decompose(a.shape, b.shape, index):
                blk = self._command(a, b, ins, cmd.rows, cmd.cols, psum, bias, cwq, qoff)
                rs, cs = slice(*cmd.rows), slice(*cmd.cols)
                out.exp[rs, cs] = blk.exp
                out.frac[rs, cs] = blk.frac
                out.saturated = out.saturated or blk.saturated
        else:
            out = self._command(a, b, ins, (0, m), (0, n), psum, bias, cwq, qoff)
        if ctx is not None:
            ctx.stats["commands"] += command_count(m, n)
            ctx.stats["macs"] += m * n * a.shape[1]
            if qoff is not None:
                ctx.stats["skipped_tiles"] += causal_skipped_tiles(m, n, qoff)
        return self.convert(out, ins.out_dtype)

    def _command(self, a, b, ins, rows, cols, psum, bias, cwq, qoff):
        acc = self.mpa(a, b, rows, cols, qoff)
        if psum is not None:
            acc = acc.add(_block(psum, rows, cols))
        return self.ppa(acc, ins.flags, ins.unit, bias, cwq, cols)

    def apply_lut(self, x: Fi32Tensor, flags, unit: str = "ppa") -> Fi32Tensor:
        flags = set(flags)
        if "RELU" in flags:
            neg = x.frac < 0
            return Fi32Tensor(np.where(neg, 0, x.exp), np.where(neg, 0, x.frac), x.saturated)
        if {"INV", "SQR"} <= flags:
            func = Func.ISQR
        elif "INV" in flags:
            func = Func.RECIP
        elif "SQR" in flags:
            if unit == "sfu":
                return Fi32Tensor.from_real(np.sqrt(x.to_real()))
            return self.engine.sqrt(x)
        elif "EXP" in flags:
            func = Func.EXP
        elif "RLU" in flags:
            func = Func.SILU
        else:
            raise ProgramError(f"no LUT function for flags {sorted(flags)}")
        if unit == "sfu":
            return sfu_evaluate(func, x)
        return self.engine.evaluate(func, x)

    def exec_mean_square(self, x, bias=None) -> Fi32Tensor:
        """Per-row sum of squares times 1/n, plus an optional bias (epsilon)."""
        n = x.shape[1]
        if isinstance(x, MxTensor) and x.shared_axis == COL_AXIS:
            # squares of a block share one exponent, so block sums are exact
            blk, lsb = x.blocks()
            sq = Fi32Tensor.from_int(np.einsum("rbk,rbk->rb", blk, blk), 2 * lsb + VALUE_OFFSET)
        else:
            v = to_fi32(x)
            sq = v.mul(v)
        s = sq.tree_sum_rows().reshape(-1, 1)
        inv_n = Fi32Tensor.from_real(np.array([[1.0 / n]]))
        out = s.mul(inv_n)
        if bias is not None:
            out = out.add(bias.reshape(-1, 1) if bias.frac.size > 1 else bias.reshape(1, 1))
        return out

    def exec_mean(self, x) -> Fi32Tensor:
        """Per-row sum (the softmax denominator); no division despite the name."""
        return to_fi32(x).tree_sum_rows().reshape(-1, 1)

    def exec_rescale(self, x, scale, gain=None, out_dtype: str = "MXINT8"):
        v = to_fi32(x).mul(to_fi32(scale))
        if gain is not None:
            v = v.mul(gain.reshape(1, -1) if gain.frac.ndim == 1 else gain)
        return self.convert(v, out_dtype)

    def convert(self, v: Fi32Tensor, dtype: str):
        """Output stage: FI32 stays, MX aligns per 32-block, INT gets a power-of-two exponent."""
        if dtype == "FI32":
            return v
        if dtype == "MXINT8":
            return fi32_to_mx(v, COL_AXIS)
        return quantize_int(v.to_real(), dtype)

    # -- binary64 shadow -----------------------------------------------------

    def _shadow(self, ctx: ExecContext, ins: Instruction):
        op = ins.opcode
        src = [np.asarray(ctx.read(t), np.float64) for t in ins.srcs]
        side = {k: np.asarray(ctx.read(getattr(ins, k)), np.float64) if getattr(ins, k) else None
                for k in ("psum", "bias", "cwq")}
        if op == "TMATMUL":
            if "kslice" in ins.meta:
                src = [slice_k(t, *ins.meta["kslice"]) for t in src]
            y = src[0] @ src[1].T
            if side["psum"] is not None:
                y = y + side["psum"]
            return self._shadow_ppa(y, ins, side["bias"], side["cwq"])
        if op == "MEAN_SQUARE":
            y = np.mean(src[0] * src[0], axis=1, keepdims=True)
            if side["bias"] is not None:
                y = y + side["bias"].reshape(-1, 1)
            return y
        if op == "MEAN":
            return np.sum(src[0], axis=1, keepdims=True)
        if op == "LUT":
            return shadow_lut(src[0], ins.flags)
        if op == "RESCALE":
            y = src[0] * src[1]
            if side["cwq"] is not None:
                y = y * side["cwq"].reshape(1, -1)
            return y
        if op == "MUL":
            return src[0] * src[1]
        if op == "ADD":
            return src[0] + src[1]
        if op == "TRANSPOSE":
            return src[0].T.copy()
        if op == "CONCAT":
            return np.concatenate(src, axis=1)
        if op in ("CONVERT", "LOAD", "STORE"):
            return src[0]
        raise ProgramError(f"no shadow executor for {op}")

    def _shadow_ppa(self, y, ins, bias, cwq):
        if bias is not None:
            y = y + bias.reshape(1, -1) if bias.ndim == 1 else y + bias
        if cwq is not None:
            y = y * cwq.reshape(1, -1)
        if ins.flags:
            y = shadow_lut(y, ins.flags)
        return y


def shadow_lut(x: np.ndarray, flags) -> np.ndarray:
    flags = set(flags)
    with np.errstate(over="ignore", divide="ignore"):
        if "RELU" in flags:
            return np.maximum(x, 0.0)
        if {"INV", "SQR"} <= flags:
            return reference(Func.ISQR, x)
        if "INV" in flags:
            return reference(Func.RECIP, x)
        if "SQR" in flags:
            return np.sqrt(x)
        if "EXP" in flags:
            return reference(Func.EXP, x)
        if "RLU" in flags:
            return np.where(x < -700, 0.0, reference(Func.SILU, x))
    raise ProgramError(f"no LUT function for flags {sorted(flags)}")


def fi32_constant(value: float, shape=(1, 1)) -> Fi32Tensor:
    v = fi32_from_real(value)
    return Fi32Tensor(np.full(shape, v.exp), np.full(shape, v.frac))


def fi32_mask(visible: np.ndarray) -> Fi32Tensor:
    """PSUM mask: 0 where visible, the most negative FI32 where hidden."""
    exp = np.where(visible, 0, FI32_MAX.exp)
    frac = np.where(visible, 0, -FI32_MAX.frac)
    return Fi32Tensor(exp, frac)
