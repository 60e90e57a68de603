"""Element formats of the NPU datapath: FI32, MXINT8 and plain integers.

FI32 holds an 8-bit biased exponent and a 24-bit signed integer fraction::

    value = frac * 2**-22 * 2**(exp - 127)

A normalized FI32 has ``2**22 <= |frac| < 2**23``; zero is ``(exp=0, frac=0)``.
Every arithmetic result is formed exactly in wide integers and rounded once
(round-to-nearest-even) back to a normalized FI32.  Overflow saturates and
raises a sticky flag, underflow flushes to zero.

MXINT8 stores signed 8-bit elements with one 8-bit exponent code per block
of 32 elements along the shared axis.  The code is the exponent of the
block's largest magnitude, so an element ``q`` in a block with code ``c``
is worth ``q * 2**(c - 127 - 6)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

FRAC_BITS = 22
EXP_BIAS = 127
EXP_MAX = 255
FRAC_LIMIT = 1 << 23  # exclusive bound on |frac|
NORM_LOW = 1 << FRAC_BITS
# value = frac * 2**(exp - VALUE_OFFSET)
VALUE_OFFSET = EXP_BIAS + FRAC_BITS

MX_BLOCK = 32
MX_ELEM_MAX = 127
MX_FRAC_BITS = 6  # elements carry 7 significant bits below the shared exponent

# widest exponent gap at which the smaller addend can still change the sum
_ALIGN_CAP = 31


# --------------------------------------------------------------------------
# scalar FI32
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Fi32:
    exp: int = 0
    frac: int = 0
    saturated: bool = field(default=False, compare=False)

    def __post_init__(self):
        if not 0 <= self.exp <= EXP_MAX:
            raise ValueError(f"exponent code {self.exp} outside 0..255")
        if not -FRAC_LIMIT <= self.frac < FRAC_LIMIT:
            raise ValueError(f"fraction {self.frac} does not fit 24 bits")

    @property
    def is_normalized(self) -> bool:
        if self.frac == 0:
            return self.exp == 0
        return NORM_LOW <= abs(self.frac) < FRAC_LIMIT

    def to_fraction(self) -> Fraction:
        return Fraction(self.frac) * Fraction(2) ** (self.exp - VALUE_OFFSET)

    def __float__(self) -> float:
        return fi32_to_real(self)

    def __add__(self, other: "Fi32") -> "Fi32":
        return fi32_align_add(self, other)

    def __mul__(self, other: "Fi32") -> "Fi32":
        return fi32_mul(self, other)


FI32_ZERO = Fi32(0, 0)
FI32_MAX = Fi32(EXP_MAX, FRAC_LIMIT - 1)
FI32_MIN = Fi32(EXP_MAX, -(FRAC_LIMIT - 1))


def _rne_shift(s: int, sh: int) -> int:
    """Round-to-nearest-even of ``s / 2**sh`` for ``sh > 0``."""
    q = s >> sh
    r = s - (q << sh)
    half = 1 << (sh - 1)
    if r > half or (r == half and q & 1):
        q += 1
    return q


def fi32_normalize(s: int, e: int) -> Fi32:
    """Round the exact value ``s * 2**(e - 149)`` to a normalized FI32."""
    if s == 0:
        return FI32_ZERO
    sh = abs(s).bit_length() - 23
    if sh > 0:
        s = _rne_shift(s, sh)
        e += sh
        if abs(s) == FRAC_LIMIT:
            s >>= 1
            e += 1
    elif sh < 0:
        s <<= -sh
        e += sh
    if e > EXP_MAX:
        return Fi32(EXP_MAX, (FRAC_LIMIT - 1) * (1 if s > 0 else -1), True)
    if e < 0:
        return FI32_ZERO
    return Fi32(e, s)


def fi32_from_real(x: float) -> Fi32:
    if not np.isfinite(x):
        raise ValueError("FI32 cannot encode non-finite values")
    if x == 0:
        return FI32_ZERO
    m, e = np.frexp(float(x))
    # m * 2**23 is exact in binary64, so rint rounds exactly once
    return fi32_normalize(int(np.rint(m * (1 << 23))), int(e) + 126)


def fi32_to_real(v: Fi32) -> float:
    return float(np.ldexp(float(v.frac), v.exp - VALUE_OFFSET))


def fi32_align_add(a: Fi32, b: Fi32) -> Fi32:
    """Add two FI32 values on their common (larger) exponent."""
    if a.frac == 0:
        return fi32_normalize(b.frac, b.exp)
    if b.frac == 0:
        return fi32_normalize(a.frac, a.exp)
    if a.exp < b.exp:
        a, b = b, a
    d = a.exp - b.exp
    if d >= _ALIGN_CAP:
        return a
    out = fi32_normalize((a.frac << d) + b.frac, b.exp)
    if a.saturated or b.saturated:
        out = Fi32(out.exp, out.frac, True)
    return out


def fi32_mul(a: Fi32, b: Fi32) -> Fi32:
    if a.frac == 0 or b.frac == 0:
        return FI32_ZERO
    return fi32_normalize(a.frac * b.frac, a.exp + b.exp - VALUE_OFFSET)


def dot32(a_elems, a_lsb_exp: int, b_elems, b_lsb_exp: int) -> Fi32:
    """One MPA lane: integer dot product of two <=32-element blocks.

    ``*_lsb_exp`` is the power of two carried by one unit of the element:
    ``code - 133`` for an MX block, ``0`` for a plain integer operand.
    The adder tree is exact; the only rounding is the final FI32 encode,
    which is exact whenever the sum fits 23 magnitude bits (all 8-bit
    activation pairings).
    """
    a = [int(v) for v in a_elems]
    b = [int(v) for v in b_elems]
    if len(a) > MX_BLOCK or len(b) > MX_BLOCK:
        raise ValueError("dot32 operands hold at most 32 elements")
    n = max(len(a), len(b))
    a += [0] * (n - len(a))
    b += [0] * (n - len(b))
    total = sum(x * y for x, y in zip(a, b))
    return fi32_normalize(total, a_lsb_exp + b_lsb_exp + VALUE_OFFSET)


# --------------------------------------------------------------------------
# vectorized FI32
# --------------------------------------------------------------------------

def _bit_length(mag: np.ndarray) -> np.ndarray:
    """Exact bit length of non-negative int64 values."""
    _, n = np.frexp(mag.astype(np.float64))
    n = n.astype(np.int64)
    # float rounding can overshoot by one above 2**53
    over = (n > 0) & ((mag >> np.maximum(n - 1, 0)) == 0)
    return np.where(over, n - 1, n)


def _rne_shift_arr(s: np.ndarray, sh: np.ndarray) -> np.ndarray:
    sh = np.maximum(sh, 1)
    q = s >> sh
    r = s - (q << sh)
    half = np.left_shift(np.int64(1), sh - 1)
    up = (r > half) | ((r == half) & ((q & 1) == 1))
    return q + up.astype(np.int64)


def normalize_arrays(s: np.ndarray, e: np.ndarray):
    """Vectorized :func:`fi32_normalize`; returns ``(exp, frac, saturated)``.

    ``s`` must satisfy ``|s| < 2**62``.
    """
    s = np.asarray(s, dtype=np.int64)
    e = np.asarray(e, dtype=np.int64)
    s, e = np.broadcast_arrays(s, e)
    s = s.copy()
    e = e.copy()
    nz = s != 0
    sh = _bit_length(np.abs(s)) - 23
    right = nz & (sh > 0)
    if right.any():
        s = np.where(right, _rne_shift_arr(s, sh), s)
        e = np.where(right, e + sh, e)
        carry = right & (np.abs(s) == FRAC_LIMIT)
        s = np.where(carry, s >> 1, s)
        e = np.where(carry, e + 1, e)
    left = nz & (sh < 0)
    if left.any():
        s = np.where(left, s << np.where(left, -sh, 0), s)
        e = np.where(left, e + sh, e)
    sat = nz & (e > EXP_MAX)
    s = np.where(sat, np.sign(s) * (FRAC_LIMIT - 1), s)
    e = np.where(sat, EXP_MAX, e)
    under = nz & (e < 0)
    s = np.where(under | ~nz, 0, s)
    e = np.where(under | ~nz, 0, e)
    return e, s, bool(sat.any())


@dataclass
class Fi32Tensor:
    """Array of normalized FI32 values (exponent and fraction planes)."""

    exp: np.ndarray
    frac: np.ndarray
    saturated: bool = False

    def __post_init__(self):
        self.exp = np.asarray(self.exp, dtype=np.int64)
        self.frac = np.asarray(self.frac, dtype=np.int64)
        if self.exp.shape != self.frac.shape:
            raise ValueError("exponent and fraction planes differ in shape")

    dtype = "FI32"

    @classmethod
    def zeros(cls, shape) -> "Fi32Tensor":
        return cls(np.zeros(shape, np.int64), np.zeros(shape, np.int64))

    @classmethod
    def from_int(cls, s, e) -> "Fi32Tensor":
        exp, frac, sat = normalize_arrays(s, e)
        return cls(exp, frac, sat)

    @classmethod
    def from_real(cls, x) -> "Fi32Tensor":
        x = np.asarray(x, dtype=np.float64)
        if not np.all(np.isfinite(x)):
            raise ValueError("FI32 cannot encode non-finite values")
        m, e = np.frexp(x)
        s = np.rint(m * (1 << 23)).astype(np.int64)
        return cls.from_int(s, e.astype(np.int64) + 126)

    @classmethod
    def from_scalars(cls, values) -> "Fi32Tensor":
        values = list(values)
        return cls(np.array([v.exp for v in values], np.int64),
                   np.array([v.frac for v in values], np.int64))

    @property
    def shape(self):
        return self.frac.shape

    @property
    def nbytes(self) -> int:
        return 4 * int(self.frac.size)

    def to_real(self) -> np.ndarray:
        return np.ldexp(self.frac.astype(np.float64), (self.exp - VALUE_OFFSET).astype(np.int32))

    def scalar(self, *idx) -> Fi32:
        return Fi32(int(self.exp[idx]), int(self.frac[idx]))

    def __getitem__(self, idx) -> "Fi32Tensor":
        return Fi32Tensor(self.exp[idx], self.frac[idx], self.saturated)

    def reshape(self, *shape) -> "Fi32Tensor":
        return Fi32Tensor(self.exp.reshape(*shape), self.frac.reshape(*shape), self.saturated)

    @property
    def T(self) -> "Fi32Tensor":
        return Fi32Tensor(self.exp.T, self.frac.T, self.saturated)

    def copy(self) -> "Fi32Tensor":
        return Fi32Tensor(self.exp.copy(), self.frac.copy(), self.saturated)

    def add(self, other: "Fi32Tensor") -> "Fi32Tensor":
        ea, fa = np.broadcast_arrays(self.exp, self.frac)
        eb, fb = np.broadcast_arrays(other.exp, other.frac)
        ea, fa, eb, fb = np.broadcast_arrays(ea, fa, eb, fb)
        swap = ea < eb
        e_big = np.where(swap, eb, ea)
        f_big = np.where(swap, fb, fa)
        e_small = np.where(swap, ea, eb)
        f_small = np.where(swap, fa, fb)
        # zeros carry exponent 0, so the other operand always lands in e_big
        d = e_big - e_small
        far = (d >= _ALIGN_CAP) | (f_small == 0)
        dd = np.where(far, 0, d)
        s = np.where(far, f_big, (f_big << dd) + f_small)
        e = np.where(far, e_big, e_small)
        exp, frac, sat = normalize_arrays(s, e)
        return Fi32Tensor(exp, frac, sat or self.saturated or other.saturated)

    def mul(self, other: "Fi32Tensor") -> "Fi32Tensor":
        s = self.frac * other.frac
        e = self.exp + other.exp - VALUE_OFFSET
        zero = s == 0
        exp, frac, sat = normalize_arrays(np.where(zero, 0, s), np.where(zero, 0, e))
        return Fi32Tensor(exp, frac, sat or self.saturated or other.saturated)

    def neg(self) -> "Fi32Tensor":
        return Fi32Tensor(self.exp.copy(), -self.frac, self.saturated)

    def tree_sum_rows(self) -> "Fi32Tensor":
        """Pairwise aligned accumulation along the last axis (the PPA adder tree)."""
        acc = self
        while acc.shape[-1] > 1:
            if acc.shape[-1] % 2:
                pad = Fi32Tensor.zeros(acc.shape[:-1] + (1,))
                acc = Fi32Tensor(np.concatenate([acc.exp, pad.exp], axis=-1),
                                 np.concatenate([acc.frac, pad.frac], axis=-1), acc.saturated)
            acc = acc[..., 0::2].add(acc[..., 1::2])
        return acc[..., 0]

    def sum_rows(self) -> "Fi32Tensor":
        """Sequential aligned accumulation along the last axis."""
        acc = Fi32Tensor.zeros(self.shape[:-1])
        for k in range(self.shape[-1]):
            acc = acc.add(self[..., k])
        return acc


def fi32_min_tensor(shape) -> Fi32Tensor:
    return Fi32Tensor(np.full(shape, FI32_MIN.exp, np.int64), np.full(shape, FI32_MIN.frac, np.int64))


# --------------------------------------------------------------------------
# MXINT8
# --------------------------------------------------------------------------

ROW_AXIS = 0  # blocks run down columns
COL_AXIS = 1  # blocks run along rows


def n_blocks(length: int) -> int:
    return -(-length // MX_BLOCK)


@dataclass
class MxTensor:
    """2-D MXINT8 tensor; ``shared_axis`` is the axis the 32-blocks run along."""

    elems: np.ndarray
    shared_exps: np.ndarray
    shared_axis: int = COL_AXIS

    dtype = "MXINT8"

    def __post_init__(self):
        self.elems = np.asarray(self.elems, dtype=np.int64)
        self.shared_exps = np.asarray(self.shared_exps, dtype=np.int64)
        if self.elems.ndim != 2:
            raise ValueError("MxTensor is two-dimensional")
        rows, cols = self.elems.shape
        want = (rows, n_blocks(cols)) if self.shared_axis == COL_AXIS else (n_blocks(rows), cols)
        if self.shared_exps.shape != want:
            raise ValueError(f"shared exponent plane {self.shared_exps.shape}, expected {want}")

    @property
    def shape(self):
        return self.elems.shape

    @property
    def nbytes(self) -> int:
        return mx_nbytes(*self.shape, shared_axis=self.shared_axis)

    def lsb_exps(self) -> np.ndarray:
        """Per-element power of two of one element unit (broadcast shape)."""
        lsb = self.shared_exps - EXP_BIAS - MX_FRAC_BITS
        if self.shared_axis == COL_AXIS:
            return np.repeat(lsb, MX_BLOCK, axis=1)[:, : self.shape[1]]
        return np.repeat(lsb, MX_BLOCK, axis=0)[: self.shape[0], :]

    def to_real(self) -> np.ndarray:
        return dequantize_mx(self)

    def to_fi32(self) -> Fi32Tensor:
        return Fi32Tensor.from_int(self.elems, self.lsb_exps() + VALUE_OFFSET)

    def blocks(self):
        """Element and lsb-exponent planes padded to whole blocks along the shared axis.

        Returns ``(elems, lsb)`` with shapes ``(lines, nblk, 32)`` and ``(lines, nblk)``
        where lines run perpendicular to the shared axis.
        """
        e = self.elems if self.shared_axis == COL_AXIS else self.elems.T
        x = self.shared_exps if self.shared_axis == COL_AXIS else self.shared_exps.T
        lines, length = e.shape
        nb = n_blocks(length)
        pad = np.zeros((lines, nb * MX_BLOCK), np.int64)
        pad[:, :length] = e
        return pad.reshape(lines, nb, MX_BLOCK), x - EXP_BIAS - MX_FRAC_BITS

    @property
    def T(self) -> "MxTensor":
        # transposing keeps blocks attached to their elements
        return MxTensor(self.elems.T, self.shared_exps.T, 1 - self.shared_axis)

    def to_bytes(self) -> bytes:
        return (self.elems.astype("<i1").tobytes() + self.shared_exps.astype("<u1").tobytes())

    @classmethod
    def from_bytes(cls, data: bytes, rows: int, cols: int, shared_axis: int = COL_AXIS) -> "MxTensor":
        n = rows * cols
        elems = np.frombuffer(data[:n], dtype="<i1").reshape(rows, cols)
        xshape = (rows, n_blocks(cols)) if shared_axis == COL_AXIS else (n_blocks(rows), cols)
        exps = np.frombuffer(data[n:], dtype="<u1").reshape(xshape)
        return cls(elems.astype(np.int64), exps.astype(np.int64), shared_axis)


def mx_nbytes(rows: int, cols: int, shared_axis: int = COL_AXIS) -> int:
    """Storage bytes: one byte per element plus one exponent byte per block."""
    if shared_axis == COL_AXIS:
        return rows * cols + rows * n_blocks(cols)
    return rows * cols + cols * n_blocks(rows)


def _quantize_lines(x: np.ndarray):
    """Quantize each row of ``x`` in blocks of 32; returns (elems, codes)."""
    rows, length = x.shape
    nb = n_blocks(length)
    pad = np.zeros((rows, nb * MX_BLOCK))
    pad[:, :length] = x
    blk = pad.reshape(rows, nb, MX_BLOCK)
    amax = np.max(np.abs(blk), axis=2)
    _, e = np.frexp(amax)
    top = e.astype(np.int64) - 1  # floor(log2(amax)) for amax > 0
    code = top + EXP_BIAS
    zero = (amax == 0) | (code < 1)
    code = np.where(zero, 0, np.minimum(code, EXP_MAX))
    lsb = code - EXP_BIAS - MX_FRAC_BITS
    q = np.rint(np.ldexp(blk, -lsb[..., None].astype(np.int32)))
    q = np.clip(q, -MX_ELEM_MAX, MX_ELEM_MAX).astype(np.int64)
    q = np.where(zero[..., None], 0, q)
    return q.reshape(rows, nb * MX_BLOCK)[:, :length], code


def quantize_mx(src, shared_axis: int = COL_AXIS) -> MxTensor:
    """Round a real 2-D array to MXINT8 (round-to-nearest-even, clamp at +-127)."""
    x = np.asarray(src, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("quantize_mx expects a 2-D array")
    if not np.all(np.isfinite(x)):
        raise ValueError("quantize_mx input must be finite")
    if shared_axis == COL_AXIS:
        q, code = _quantize_lines(x)
        return MxTensor(q, code, COL_AXIS)
    q, code = _quantize_lines(x.T)
    return MxTensor(q.T, code.T, ROW_AXIS)


def dequantize_mx(t: MxTensor) -> np.ndarray:
    return np.ldexp(t.elems.astype(np.float64), t.lsb_exps().astype(np.int32))


def fi32_to_mx(v: Fi32Tensor, shared_axis: int = COL_AXIS) -> MxTensor:
    """PPA alignment stage: FI32 values to MXINT8 with a single rounding.

    FI32 values are exact in binary64, so quantizing their real values
    rounds exactly once.
    """
    return quantize_mx(v.to_real(), shared_axis)


# --------------------------------------------------------------------------
# integer tensors
# --------------------------------------------------------------------------

INT_DTYPES = {
    "UINT4": (4, False),
    "INT4": (4, True),
    "UINT8": (8, False),
    "INT8": (8, True),
    "INT16": (16, True),
}


def int_range(bits: int, signed: bool):
    if signed:
        return -(1 << (bits - 1)), (1 << (bits - 1)) - 1
    return 0, (1 << bits) - 1


@dataclass
class IntTensor:
    """Integer tensor with a tensor-wide power-of-two exponent.

    ``exp_code`` follows the FI32 bias: one element unit is worth
    ``2**(exp_code - 127)``.  ``scale`` is an optional per-channel (per-row)
    FI32 vector, kept for dequantization; the MPA never applies it, the PPA
    does through the CWQ stage.  ``zero_point`` is per-row or scalar.
    """

    elems: np.ndarray
    dtype: str = "INT16"
    exp_code: int = EXP_BIAS
    scale: np.ndarray | None = None
    zero_point: np.ndarray | int = 0

    def __post_init__(self):
        self.elems = np.asarray(self.elems, dtype=np.int64)
        if self.dtype not in INT_DTYPES:
            raise ValueError(f"unknown integer dtype {self.dtype}")
        lo, hi = int_range(*INT_DTYPES[self.dtype])
        if self.elems.size and (self.elems.min() < lo or self.elems.max() > hi):
            raise ValueError(f"elements exceed {self.dtype} range")
        if self.scale is not None:
            self.scale = np.asarray(self.scale, dtype=np.float64)
            if self.scale.shape != (self.elems.shape[0],):
                raise ValueError("scale vector length must equal the channel (row) count")

    @property
    def bits(self) -> int:
        return INT_DTYPES[self.dtype][0]

    @property
    def signed(self) -> bool:
        return INT_DTYPES[self.dtype][1]

    @property
    def shape(self):
        return self.elems.shape

    @property
    def nbytes(self) -> int:
        rows, cols = self.shape
        return rows * -(-cols * self.bits // 8)

    def centered(self) -> np.ndarray:
        zp = np.asarray(self.zero_point, dtype=np.int64)
        if zp.ndim == 1:
            zp = zp[:, None]
        return self.elems - zp

    def lsb_exp(self) -> int:
        return self.exp_code - EXP_BIAS

    def to_real(self, apply_scale: bool = True) -> np.ndarray:
        v = np.ldexp(self.centered().astype(np.float64), self.lsb_exp())
        if apply_scale and self.scale is not None:
            v = v * self.scale[:, None]
        return v

    def to_fi32(self) -> Fi32Tensor:
        return Fi32Tensor.from_int(self.centered(), np.full(self.shape, self.lsb_exp() + VALUE_OFFSET))

    @property
    def T(self) -> "IntTensor":
        if self.scale is not None or np.ndim(self.zero_point) == 1:
            raise ValueError("per-channel integer tensors are transposed at compile time")
        return IntTensor(self.elems.T, self.dtype, self.exp_code, None, self.zero_point)


def quantize_int(x, dtype: str = "INT16", zero_point: int = 0) -> IntTensor:
    """Symmetric dynamic quantization with a power-of-two tensor exponent."""
    x = np.asarray(x, dtype=np.float64)
    bits, signed = INT_DTYPES[dtype]
    lo, hi = int_range(bits, signed)
    lo = lo + 1 if signed else lo  # symmetric
    amax = float(np.max(np.abs(x))) if x.size else 0.0
    if amax == 0:
        return IntTensor(np.full(x.shape, zero_point, np.int64), dtype, EXP_BIAS, None, zero_point)
    top = int(np.frexp(amax)[1]) - 1
    span_bits = (bits - 1) if signed else bits
    lsb = top - (span_bits - 1)
    # keep the zero-point-shifted range inside the integer limits
    q = np.rint(np.ldexp(x, -lsb)) + zero_point
    q = np.clip(q, lo, hi).astype(np.int64)
    code = int(np.clip(lsb + EXP_BIAS, 0, EXP_MAX))
    return IntTensor(q, dtype, code, None, zero_point)


def to_fi32(t) -> Fi32Tensor:
    """Exact FI32 view of any tensor (integer scale vectors are not applied)."""
    if isinstance(t, Fi32Tensor):
        return t
    return t.to_fi32()


def quantize_weights(w, dtype: str = "UINT4") -> IntTensor:
    """Per-channel (per-row) asymmetric weight quantization.

    Each row gets its own real scale and integer zero point; the scale is
    kept on the tensor for the CWQ stage and the MAC array sees ``q - zp``.
    """
    w = np.asarray(w, dtype=np.float64)
    bits, signed = INT_DTYPES[dtype]
    lo, hi = int_range(bits, signed)
    wmin = np.minimum(w.min(axis=1), 0.0)
    wmax = np.maximum(w.max(axis=1), 0.0)
    scale = (wmax - wmin) / (hi - lo)
    scale = np.where(scale == 0, 1.0, scale)
    zp = np.clip(np.rint(lo - wmin / scale), lo, hi).astype(np.int64)
    q = np.clip(np.rint(w / scale[:, None]) + zp[:, None], lo, hi).astype(np.int64)
    return IntTensor(q, dtype, EXP_BIAS, scale, zp)
