"""Dual-table LUT engine for reciprocal, inverse square root, exp and SiLU.

Each function owns a :class:`LutPair`: a 16-entry value table of unsigned
16-bit samples and a 256-entry error table holding the residual between the
function and the interpolated value table.  Both tables sample the closed
reduced domain ``[lo, hi]`` on uniform grids whose knots coincide
(255 = 15 * 17), so value + error interpolation reconstructs a 255-segment
piecewise-linear fit with the value table's quantization folded into the
residual.

Evaluation is integer end to end: a preprocessing step range-reduces the
FI32 input to a table coordinate and an exponent shift, interpolation runs
in fixed point with 24-bit weights, and the result is rounded once into a
normalized FI32.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .numerics import (
    EXP_BIAS, FI32_MAX, VALUE_OFFSET, Fi32Tensor,
)

N_VALUE = 16
N_ERROR = 256
WEIGHT_BITS = 24
SILU_K = 3
LOG2E_BITS = 28
_LOG2E_FIX = int(round(np.log2(np.e) * (1 << LOG2E_BITS)))
_EXP_FIX_BITS = 24  # fractional bits of the EXP argument and table coordinate


class LutRangeError(ValueError):
    """Input outside the domain a LUT function accepts."""


class Func(IntEnum):
    RECIP = 0
    ISQR = 1
    EXP = 2
    SILU = 3


def reference(func: Func, x):
    """Binary64 reference of each function (the SFU model and the accuracy oracle)."""
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(over="ignore", divide="ignore"):
        if func == Func.RECIP:
            return 1.0 / x
        if func == Func.ISQR:
            return 1.0 / np.sqrt(x)
        if func == Func.EXP:
            return np.exp(x)
        if func == Func.SILU:
            return x / (1.0 + np.exp(-x))
    raise ValueError(func)


# table domain: sampled function and the reduced interval, per function
def _table_function(func: Func, silu_k: int = SILU_K):
    if func == Func.RECIP:
        return (lambda m: 1.0 / m), 1.0, 2.0
    if func == Func.ISQR:
        return (lambda m: 1.0 / np.sqrt(m)), 0.5, 2.0
    if func == Func.EXP:
        # sampled on the binary fraction t in [0, 1]; e**r with r = t*ln2
        return (lambda t: np.exp2(t)), 0.0, 1.0
    if func == Func.SILU:
        lo = float(1 << silu_k)
        return (lambda x: x / (1.0 + np.exp(-x))), lo, 2 * lo
    raise ValueError(func)


# FI32 power-of-two relation between the two domain endpoints (R(lo) = R(hi) * ratio)
_ENDPOINT_RATIO = {Func.RECIP: 2, Func.ISQR: 2, Func.EXP: 0.5}

DECLARED_RANGE = {
    Func.RECIP: (1.0 / 1024, 4096.0),
    Func.ISQR: (1.0 / 1024, 4096.0),
    Func.EXP: (-8.0, 64.0),
    Func.SILU: (-8.0, 64.0),
}


@dataclass(frozen=True)
class LutPair:
    func: Func
    lo: float
    hi: float
    value_table: np.ndarray  # uint16 codes, value = code * 2**-value_shift
    value_shift: int
    error_table: np.ndarray  # int16 codes, value = code * 2**-error_shift
    error_shift: int

    @property
    def value_step(self) -> float:
        return (self.hi - self.lo) / (N_VALUE - 1)

    @property
    def error_step(self) -> float:
        return (self.hi - self.lo) / (N_ERROR - 1)

    def nbytes(self) -> int:
        return 2 * (N_VALUE + N_ERROR)

    def to_bytes(self) -> bytes:
        head = struct.pack("<4sBHHddbb", b"TLUT", int(self.func), N_VALUE, N_ERROR,
                           self.lo, self.hi, self.value_shift, self.error_shift)
        return (head + self.value_table.astype("<u2").tobytes()
                + self.error_table.astype("<i2").tobytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "LutPair":
        size = struct.calcsize("<4sBHHddbb")
        magic, fid, nv, ne, lo, hi, vs, es = struct.unpack("<4sBHHddbb", data[:size])
        if magic != b"TLUT":
            raise ValueError("not a LUT dump")
        vals = np.frombuffer(data[size:size + 2 * nv], "<u2").astype(np.int64)
        errs = np.frombuffer(data[size + 2 * nv:size + 2 * nv + 2 * ne], "<i2").astype(np.int64)
        return cls(Func(fid), lo, hi, vals, vs, errs, es)


@dataclass
class LutQuery:
    """Table indices, fixed-point weights and output shift for a batch of inputs.

    ``branch`` marks how each element is produced: 0 table lookup, 1 SiLU
    composed from the EXP and RECIP tables, 2 constant zero, 3 saturation.
    """

    index_v: np.ndarray
    weight_v: np.ndarray
    index_e: np.ndarray
    weight_e: np.ndarray
    shift: np.ndarray
    sign: np.ndarray
    branch: np.ndarray

    @property
    def frac_v(self) -> np.ndarray:
        return self.weight_v / float(1 << WEIGHT_BITS)

    @property
    def frac_e(self) -> np.ndarray:
        return self.weight_e / float(1 << WEIGHT_BITS)


def _positions(offset: np.ndarray, span: int, n: int):
    """Index and 24-bit weight of ``offset / span`` on an ``n``-entry grid."""
    num = offset * (n - 1)
    idx = num // span
    rem = num - idx * span
    w = (rem << WEIGHT_BITS) // span
    end = idx >= n - 1
    idx = np.where(end, n - 2, idx)
    w = np.where(end, 1 << WEIGHT_BITS, w)
    return idx, w


def _interp_fixed(table: np.ndarray, idx: np.ndarray, w: np.ndarray) -> np.ndarray:
    a = table[idx]
    b = table[idx + 1]
    return (a << WEIGHT_BITS) + (b - a) * w


def build_tables(func: Func, silu_k: int = SILU_K) -> LutPair:
    """Sample the value table, then store the residual of its interpolation."""
    func = Func(func)
    f, lo, hi = _table_function(func, silu_k)
    if func in (Func.RECIP, Func.ISQR) and lo <= 0 <= hi:
        raise LutRangeError("domain contains the pole at 0")
    xv = lo + (hi - lo) * np.arange(N_VALUE) / (N_VALUE - 1)
    fv = f(xv)
    top = int(np.frexp(np.max(np.abs(fv)))[1]) - 1
    vs = 15 - top
    vals = np.clip(np.rint(np.ldexp(fv, vs)), 0, 0xFFFF).astype(np.int64)

    # residual at the error-table knots, against the interpolation the hardware computes
    j = np.arange(N_ERROR)
    idx, w = _positions(j.astype(np.int64), N_ERROR - 1, N_VALUE)
    v_at = np.ldexp(_interp_fixed(vals, idx, w).astype(np.float64), -(vs + WEIGHT_BITS))
    xe = lo + (hi - lo) * j / (N_ERROR - 1)
    g = f(xe) - v_at
    gtop = int(np.frexp(max(np.max(np.abs(g)), 2.0 ** -60))[1]) - 1
    es = 14 - gtop
    errs = np.clip(np.rint(np.ldexp(g, es)), -32767, 32767).astype(np.int64)

    ratio = _ENDPOINT_RATIO.get(func)
    if ratio is not None:
        errs = _pin_endpoints(vals, vs, errs, es, ratio)
    return LutPair(func, lo, hi, vals, vs, errs, es)


def _pin_endpoints(vals, vs, errs, es, ratio):
    """Make the reconstructed endpoints differ by exactly the reduction's power of two.

    Range reduction maps neighbouring inputs across an octave boundary onto
    opposite ends of the table; pinning the ends keeps the evaluated
    function monotone across the seam.
    """
    d = es - vs
    errs = errs.copy()
    lo_units = (int(vals[0]) << d) + int(errs[0])
    if ratio == 2:
        if lo_units & 1:
            errs[0] -= 1 if errs[0] > 0 else -1
            lo_units = (int(vals[0]) << d) + int(errs[0])
        errs[-1] = lo_units // 2 - (int(vals[-1]) << d)
    else:  # hi = 2 * lo
        errs[-1] = 2 * lo_units - (int(vals[-1]) << d)
    if np.abs(errs).max() > 32767:
        raise ValueError("endpoint pinning overflowed the error table")
    return errs


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def _decompose(x: Fi32Tensor):
    mag = np.abs(x.frac)
    e = x.exp - EXP_BIAS
    sign = np.where(x.frac < 0, -1, 1)
    return mag, e, sign


def preprocess(func: Func, x: Fi32Tensor, silu_k: int = SILU_K, strict: bool = True) -> LutQuery:
    """Range-reduce FI32 inputs into table coordinates and output shifts.

    With ``strict`` set, inputs outside the function's domain raise
    :class:`LutRangeError`; otherwise they are routed to the saturation
    branch (RECIP/ISQR of zero or a negative, which the caller flags).
    """
    func = Func(func)
    mag, e, sign = _decompose(x)
    zero = x.frac == 0
    shape = x.shape
    branch = np.zeros(shape, np.int64)
    shift = np.zeros(shape, np.int64)

    if func == Func.RECIP:
        if strict and zero.any():
            raise LutRangeError("reciprocal of zero")
        offset, span = mag - (1 << 22), 1 << 22
        shift = -e
        branch = np.where(zero, 3, 0)
    elif func == Func.ISQR:
        bad = zero | (x.frac < 0)
        if strict and bad.any():
            raise LutRangeError("inverse square root needs a positive input")
        odd = (e & 1) == 1
        # coordinate on [0.5, 2] with 23 fractional bits
        arg = np.where(odd, mag, mag << 1)
        offset, span = arg - (1 << 22), 3 << 22
        shift = np.where(odd, -((e + 1) >> 1), -(e >> 1))
        branch = np.where(bad, 3, 0)
        sign = np.ones(shape, np.int64)
    elif func == Func.EXP:
        offset, span, shift, branch = _exp_reduce(x)
        sign = np.ones(shape, np.int64)
    elif func == Func.SILU:
        # the table covers one octave; elsewhere SiLU is composed from EXP and RECIP
        table = (x.frac > 0) & (e == silu_k)
        offset, span = mag - (1 << 22), 1 << 22
        branch = np.where(table, 0, np.where(zero, 2, 1))
    else:
        raise ValueError(func)

    offset = np.where(branch == 0, offset, 0)
    iv, wv = _positions(offset, span, N_VALUE)
    ie, we = _positions(offset, span, N_ERROR)
    return LutQuery(iv, wv, ie, we, shift, sign, branch)


def _exp_reduce(x: Fi32Tensor):
    """e**x = 2**k * 2**t with y = x*log2(e) = k + t, t in [0, 1)."""
    shape = x.shape
    big = (x.exp - EXP_BIAS) >= 7  # |x| >= 128: certain overflow / underflow
    # x in fixed point with 24 fractional bits
    sh = x.exp - VALUE_OFFSET + _EXP_FIX_BITS
    xf = np.where(big, 0, x.frac)
    left = np.clip(sh, 0, 62)
    right = np.clip(-sh, 0, 62)
    xfix = np.where(sh >= 0, xf << left, _round_shift(xf, right))
    y = xfix * _LOG2E_FIX  # |y| < 2**59
    yfix = _round_shift(y, np.full(shape, LOG2E_BITS))
    k = yfix >> _EXP_FIX_BITS
    t = yfix - (k << _EXP_FIX_BITS)
    branch = np.where(big, np.where(x.frac > 0, 3, 2), 0)
    return t, 1 << _EXP_FIX_BITS, k, branch


def _round_shift(v: np.ndarray, sh: np.ndarray) -> np.ndarray:
    sh = np.asarray(sh, np.int64)
    safe = np.maximum(sh, 1)
    half = np.left_shift(np.int64(1), safe - 1)
    out = (v + half) >> safe
    return np.where(sh > 0, out, v)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def lut_eval(pair: LutPair, q: LutQuery) -> Fi32Tensor:
    """(value interp + error interp) * 2**shift, rounded once to FI32."""
    d = pair.error_shift - pair.value_shift
    if not 0 <= d <= 22:
        raise ValueError("error table must be finer than the value table")
    v = _interp_fixed(pair.value_table, q.index_v, q.weight_v)
    g = _interp_fixed(pair.error_table, q.index_e, q.weight_e)
    s = (v << d) + g
    e = q.shift - pair.error_shift - WEIGHT_BITS + VALUE_OFFSET
    table = q.branch == 0
    out = Fi32Tensor.from_int(np.where(table, q.sign * s, 0), np.where(table, e, 0))
    sat = q.branch == 3
    if sat.any():
        out = Fi32Tensor(np.where(sat, FI32_MAX.exp, out.exp),
                         np.where(sat, q.sign * FI32_MAX.frac, out.frac), True)
    return out


def lut_eval_value_only(pair: LutPair, q: LutQuery) -> Fi32Tensor:
    """Value table alone (for measuring what the error table buys)."""
    v = _interp_fixed(pair.value_table, q.index_v, q.weight_v)
    e = q.shift - pair.value_shift - WEIGHT_BITS + VALUE_OFFSET
    table = q.branch == 0
    return Fi32Tensor.from_int(np.where(table, q.sign * v, 0), np.where(table, e, 0))


class LutEngine:
    """The four LUT pairs plus the composition rules between them."""

    def __init__(self, silu_k: int = SILU_K):
        self.silu_k = silu_k
        self.pairs = {f: build_tables(f, silu_k) for f in Func}

    def evaluate(self, func: Func, x: Fi32Tensor, strict: bool = False) -> Fi32Tensor:
        func = Func(func)
        q = preprocess(func, x, self.silu_k, strict=strict)
        out = lut_eval(self.pairs[func], q)
        if func == Func.SILU and (q.branch == 1).any():
            out = self._silu_direct(x, q, out)
        return out

    def _silu_direct(self, x: Fi32Tensor, q: LutQuery, out: Fi32Tensor) -> Fi32Tensor:
        # x / (1 + e**-x) through the EXP and RECIP tables
        one = Fi32Tensor.from_real(np.ones(x.shape))
        ex = self.evaluate(Func.EXP, x.neg())
        den = one.add(ex)
        inv = self.evaluate(Func.RECIP, den)
        inv.saturated = False
        direct = x.mul(inv)
        pick = q.branch == 1
        return Fi32Tensor(np.where(pick, direct.exp, out.exp),
                          np.where(pick, direct.frac, out.frac), out.saturated)

    def isqr(self, x):
        return self.evaluate(Func.ISQR, x)

    def recip(self, x):
        return self.evaluate(Func.RECIP, x)

    def exp(self, x):
        return self.evaluate(Func.EXP, x)

    def silu(self, x):
        return self.evaluate(Func.SILU, x)

    def sqrt(self, x: Fi32Tensor) -> Fi32Tensor:
        return x.mul(self.evaluate(Func.ISQR, x))

    def scalar(self, func: Func, value: float) -> float:
        t = Fi32Tensor.from_real(np.array([value]))
        return float(self.evaluate(func, t, strict=True).to_real()[0])


def sfu_evaluate(func: Func, x: Fi32Tensor) -> Fi32Tensor:
    """Baseline special-function unit: binary64 math rounded to FI32."""
    ref = reference(Func(func), x.to_real())
    sat = ~np.isfinite(ref) | (np.abs(ref) > float(FI32_MAX))
    ref = np.where(sat, np.sign(np.nan_to_num(ref, nan=1.0)) * float(FI32_MAX), ref)
    out = Fi32Tensor.from_real(ref)
    out.saturated = out.saturated or bool(sat.any())
    return out


# ---------------------------------------------------------------------------
# accuracy sweep
# ---------------------------------------------------------------------------

@dataclass
class Accuracy:
    func: Func
    lo: float
    hi: float
    points: int
    mape: float
    mse: float
    max_rel: float


def sweep_inputs(func: Func, step: float = 1.0 / 1024) -> np.ndarray:
    lo, hi = DECLARED_RANGE[Func(func)]
    n = int(round((hi - lo) / step))
    return lo + step * np.arange(n + 1)


def measure_accuracy(func: Func, engine: LutEngine | None = None, step: float = 1.0 / 1024) -> Accuracy:
    """MAPE and MSE of the LUT over the declared range on a uniform grid.

    Points where the reference is exactly zero are left out of the MAPE.
    """
    engine = engine or LutEngine()
    func = Func(func)
    x = sweep_inputs(func, step)
    got = engine.evaluate(func, Fi32Tensor.from_real(x), strict=True).to_real()
    ref = reference(func, x)
    err = got - ref
    nz = ref != 0
    rel = np.abs(err[nz]) / np.abs(ref[nz])
    lo, hi = DECLARED_RANGE[func]
    return Accuracy(func, lo, hi, x.size, float(rel.mean()), float(np.mean(err * err)), float(rel.max()))
