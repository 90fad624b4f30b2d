"""Lane-vector semantics of hetIR value operations on numpy arrays.

Every device model evaluates arithmetic through this module, so a kernel
computes the same bits no matter how its threads are grouped. Integer
arithmetic wraps; division by zero is defined (quotient all-ones / -1,
remainder = dividend); float ops are IEEE round-to-nearest with a correctly
rounded FMA.
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np

from .ir import Imm, Instruction, Opcode, SemType

DTYPES = {
    SemType.U32: np.dtype(np.uint32),
    SemType.S32: np.dtype(np.int32),
    SemType.U64: np.dtype(np.uint64),
    SemType.F32: np.dtype(np.float32),
    SemType.F64: np.dtype(np.float64),
    SemType.PRED: np.dtype(np.bool_),
}
_F32_MAX = float(np.finfo(np.float32).max)
_F32_OVERFLOW = 2.0**128 - 2.0**103
_BITS_VIEW = {
    SemType.U32: np.uint32,
    SemType.S32: np.uint32,
    SemType.U64: np.uint64,
    SemType.F32: np.uint32,
    SemType.F64: np.uint64,
}


def zeros(t: SemType, n: int) -> np.ndarray:
    return np.zeros(n, dtype=DTYPES[t])


def splat(value, t: SemType, n: int) -> np.ndarray:
    if t is SemType.PRED:
        return np.full(n, bool(value))
    return np.full(n, value, dtype=DTYPES[t])


def to_bits(a: np.ndarray, t: SemType) -> np.ndarray:
    """Values as zero-extended 64-bit slot patterns."""
    if t is SemType.PRED:
        return a.astype(np.uint64)
    return a.view(_BITS_VIEW[t]).astype(np.uint64)


def from_bits(bits: np.ndarray, t: SemType) -> np.ndarray:
    bits = np.asarray(bits, dtype=np.uint64)
    if t is SemType.PRED:
        return bits != 0
    return bits.astype(_BITS_VIEW[t]).view(DTYPES[t])


# ---------------------------------------------------------------------------
# helpers


def _trunc_divmod(a: np.ndarray, b: np.ndarray, t: SemType):
    if t is SemType.S32:
        a64 = a.astype(np.int64)
        b64 = b.astype(np.int64)
        zero = b64 == 0
        safe = np.where(zero, 1, b64)
        q = np.abs(a64) // np.abs(safe)
        q = np.where((a64 < 0) != (safe < 0), -q, q)
        r = a64 - q * safe
        q = np.where(zero, -1, q)
        r = np.where(zero, a64, r)
        # INT_MIN / -1 wraps back to INT_MIN
        return q.astype(np.int64).astype(np.uint32).view(np.int32), r.astype(np.int32)
    zero = b == 0
    safe = np.where(zero, 1, b).astype(a.dtype)
    q = np.where(zero, np.iinfo(a.dtype).max, a // safe).astype(a.dtype)
    r = np.where(zero, a, a % safe).astype(a.dtype)
    return q, r


def _fmin(a, b):
    return np.where(np.isnan(a), b, np.where(np.isnan(b), a, np.where(b < a, b, a)))


def _fmax(a, b):
    return np.where(np.isnan(a), b, np.where(np.isnan(b), a, np.where(b > a, b, a)))


def _fma_f32(a, b, c):
    a64, b64, c64 = a.astype(np.float64), b.astype(np.float64), c.astype(np.float64)
    p = a64 * b64  # exact: 24x24-bit product fits a double
    s = p + c64
    bb = s - p
    err = (p - (s - bb)) + (c64 - bb)
    r = s.astype(np.float32)
    r64 = r.astype(np.float64)
    toward = np.where(s > r64, np.float32(np.inf), np.float32(-np.inf))
    r2 = np.nextafter(r, toward)
    r2_64 = r2.astype(np.float64)
    # double rounding only bites when s sits exactly between two floats
    mid = (s != r64) & ((s - r64) == (r2_64 - s)) & np.isfinite(s)
    pick = mid & (err != 0) & ((err > 0) == (r2_64 > r64))
    out = np.where(pick, r2, r).astype(np.float32)
    # a sum exactly on the overflow threshold rounds to inf unless the
    # discarded error pulls it back below
    edge = (np.abs(s) == _F32_OVERFLOW) & (err != 0) & ((err < 0) == (s > 0))
    return np.where(edge, np.copysign(_F32_MAX, s).astype(np.float32), out)


def _fma_f64(a, b, c):
    out = np.empty(len(a), dtype=np.float64)
    for i, (x, y, z) in enumerate(zip(a.tolist(), b.tolist(), c.tolist())):
        if math.isfinite(x) and math.isfinite(y) and math.isfinite(z):
            exact = Fraction(x) * Fraction(y) + Fraction(z)
            if exact == 0:
                neg = (math.copysign(1, x) * math.copysign(1, y) < 0) and math.copysign(1, z) < 0
                out[i] = -0.0 if neg else 0.0
                continue
            try:
                out[i] = float(exact)
            except OverflowError:
                out[i] = math.inf if exact > 0 else -math.inf
        else:
            out[i] = x * y + z
    return out


def _u64_to_f32(a: np.ndarray) -> np.ndarray:
    big = a >= np.uint64(1 << 53)
    sticky = (a & np.uint64(0x7FF)) != 0
    reduced = (a >> np.uint64(11)) | sticky.astype(np.uint64)
    hi = reduced.astype(np.float64) * 2048.0
    return np.where(big, hi, a.astype(np.float64)).astype(np.float32)


_INT_BOUNDS = {
    SemType.U32: (0.0, 4294967295.0),
    SemType.S32: (-2147483648.0, 2147483647.0),
    SemType.U64: (0.0, 18446744073709549568.0),  # largest double below 2**64
}


def convert(a: np.ndarray, src: SemType, dst: SemType) -> np.ndarray:
    if src is SemType.PRED:
        return a.astype(DTYPES[dst])
    if dst.is_float:
        if src is SemType.U64 and dst is SemType.F32:
            return _u64_to_f32(a)
        if src.is_int and dst is SemType.F32:
            return a.astype(np.float64).astype(np.float32)
        return a.astype(DTYPES[dst])
    if src.is_float:
        x = np.trunc(a.astype(np.float64))
        x = np.where(np.isnan(x), 0.0, x)
        lo, hi = _INT_BOUNDS[dst]
        over = x > hi
        x = np.clip(x, lo, hi)
        out = x.astype(np.int64 if dst is SemType.S32 else np.uint64).astype(DTYPES[dst])
        return np.where(over, np.array(np.iinfo(DTYPES[dst]).max, dtype=DTYPES[dst]), out)
    # integer to integer: two's complement wrap / sign extension
    if dst is SemType.S32:
        return a.astype(np.uint32).view(np.int32) if src is not SemType.S32 else a.copy()
    if src is SemType.S32 and dst is SemType.U64:
        return a.astype(np.int64).view(np.uint64)
    return a.astype(DTYPES[dst])


def _shift(a, b, t, left):
    bits = t.bits
    s = (b & np.uint32(bits - 1)).astype(np.uint64 if bits == 64 else np.uint32)
    if t is SemType.S32:
        if left:
            return np.left_shift(a.view(np.uint32), s.astype(np.uint32)).view(np.int32)
        return np.right_shift(a, s.astype(np.int32))
    return (np.left_shift if left else np.right_shift)(a, s.astype(a.dtype))


# ---------------------------------------------------------------------------


def operand(src, t: SemType, regs: dict, n: int) -> np.ndarray:
    if isinstance(src, Imm):
        return splat(src.value, t, n)
    return regs[src.id]


def evaluate(ins: Instruction, a: list) -> np.ndarray:
    """Result of a pure value instruction given its source arrays.

    Float arithmetic and conversions return the canonical quiet NaN
    (sign clear, payload zero) whenever the result is NaN; MOV keeps bits.
    """
    r = _evaluate(ins, a)
    if ins.opcode is not Opcode.MOV and r.dtype.kind == "f":
        nan = np.isnan(r)
        if nan.any():
            r = np.where(nan, r.dtype.type(np.nan), r)
    return r


def _evaluate(ins: Instruction, a: list) -> np.ndarray:
    op = ins.opcode
    t = ins.type
    with np.errstate(all="ignore"):
        if op is Opcode.ADD:
            return (a[0] + a[1]).astype(DTYPES[t], copy=False)
        if op is Opcode.SUB:
            return (a[0] - a[1]).astype(DTYPES[t], copy=False)
        if op is Opcode.MUL:
            return (a[0] * a[1]).astype(DTYPES[t], copy=False)
        if op is Opcode.DIV:
            if t.is_float:
                return (a[0] / a[1]).astype(DTYPES[t], copy=False)
            return _trunc_divmod(a[0], a[1], t)[0]
        if op is Opcode.REM:
            return _trunc_divmod(a[0], a[1], t)[1]
        if op is Opcode.FMA:
            if t is SemType.F32:
                return _fma_f32(*a)
            if t is SemType.F64:
                return _fma_f64(*a)
            return (a[0] * a[1] + a[2]).astype(DTYPES[t], copy=False)
        if op is Opcode.MIN:
            return _fmin(a[0], a[1]).astype(DTYPES[t]) if t.is_float else np.minimum(a[0], a[1])
        if op is Opcode.MAX:
            return _fmax(a[0], a[1]).astype(DTYPES[t]) if t.is_float else np.maximum(a[0], a[1])
        if op is Opcode.AND:
            return a[0] & a[1]
        if op is Opcode.OR:
            return a[0] | a[1]
        if op is Opcode.XOR:
            return a[0] ^ a[1]
        if op is Opcode.NOT:
            return ~a[0]
        if op is Opcode.SHL:
            return _shift(a[0], a[1], t, True)
        if op is Opcode.SHR:
            return _shift(a[0], a[1], t, False)
        if op is Opcode.SETP_EQ:
            return a[0] == a[1]
        if op is Opcode.SETP_NE:
            return a[0] != a[1]
        if op is Opcode.SETP_LT:
            return a[0] < a[1]
        if op is Opcode.SETP_LE:
            return a[0] <= a[1]
        if op is Opcode.SETP_GT:
            return a[0] > a[1]
        if op is Opcode.SETP_GE:
            return a[0] >= a[1]
        if op is Opcode.MOV:
            return a[0].copy()
        if op is Opcode.CVT:
            return convert(a[0], ins.src_type, t)
        if op is Opcode.SET_PREDICATE:
            return a[0] != 0
    raise ValueError(f"{op} is not a value operation")


VALUE_OPS = frozenset(
    {
        Opcode.ADD, Opcode.SUB, Opcode.MUL, Opcode.DIV, Opcode.REM, Opcode.FMA, Opcode.MIN, Opcode.MAX,
        Opcode.AND, Opcode.OR, Opcode.XOR, Opcode.NOT, Opcode.SHL, Opcode.SHR,
        Opcode.SETP_EQ, Opcode.SETP_NE, Opcode.SETP_LT, Opcode.SETP_LE, Opcode.SETP_GT, Opcode.SETP_GE,
        Opcode.MOV, Opcode.CVT, Opcode.SET_PREDICATE,
    }
)


def src_types(ins: Instruction) -> list:
    """Per-operand semantic types for a value instruction."""
    if ins.opcode is Opcode.CVT:
        return [ins.src_type]
    if ins.opcode is Opcode.SET_PREDICATE:
        return [ins.type]
    if ins.opcode in (Opcode.SHL, Opcode.SHR):
        return [ins.type, SemType.U32]
    return [ins.type] * len(ins.srcs)


def atomic_update(op: Opcode, t: SemType, old, operands: list):
    """New memory value of an atomic (``ATOM_CAS`` operands are compare, value)."""
    with np.errstate(all="ignore"):
        if op is Opcode.ATOM_ADD:
            return (old + operands[0]).astype(DTYPES[t], copy=False)
        return np.where(old == operands[0], operands[1], old).astype(DTYPES[t], copy=False)
