"""Sequential reference interpreter.

Runs the threads of each block one at a time, in local-id order, until every
live thread has reached the same rendezvous (barrier or collective); blocks
run one after another. Arithmetic is implemented on Python scalars,
independently of the vectorised device semantics, so the two can check each
other.

Global pointers are encoded as ``(buffer_index + 1) << 40 | byte_offset``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction

from .errors import DeadlockError, FaultError
from .ir import (
    Addr,
    Imm,
    Instruction,
    Kernel,
    LoopBlock,
    MemSpace,
    Opcode,
    PredBlock,
    Reg,
    Region,
    SemType,
    BARRIER_OPS,
    COLLECTIVE_OPS,
)

PTR_SHIFT = 40
_OFF_MASK = (1 << PTR_SHIFT) - 1
_MASK = {SemType.U32: 0xFFFFFFFF, SemType.U64: 0xFFFFFFFFFFFFFFFF}
_FMT = {SemType.U32: "<I", SemType.S32: "<i", SemType.U64: "<Q", SemType.F32: "<f", SemType.F64: "<d"}


def pointer(buffer_index: int, offset: int = 0) -> int:
    return (buffer_index + 1) << PTR_SHIFT | offset


# ---------------------------------------------------------------------------
# scalar arithmetic


def wrap(v: int, t: SemType) -> int:
    if t is SemType.S32:
        return ((v + (1 << 31)) & 0xFFFFFFFF) - (1 << 31)
    return v & _MASK[t]


def round_exact(x: Fraction, mant: int, emin: int, emax: int) -> float:
    """Round a rational to the nearest binary float with ``mant`` significand bits (ties to even)."""
    if x == 0:
        return 0.0
    sign = -1.0 if x < 0 else 1.0
    a = abs(x)
    e = a.numerator.bit_length() - a.denominator.bit_length()
    if Fraction(2) ** e > a:
        e -= 1
    e = max(e, emin)
    quantum = Fraction(2) ** (e - mant + 1)
    n = a / quantum
    m = n.numerator // n.denominator
    rem = n - m
    if rem > Fraction(1, 2) or (rem == Fraction(1, 2) and m % 2 == 1):
        m += 1
    value = m * quantum
    if value >= Fraction(2) ** (emax + 1):
        return sign * math.inf
    return sign * float(value)


def f32(x: float) -> float:
    """Round a double to the nearest float32 value."""
    if math.isnan(x) or math.isinf(x):
        return struct.unpack("<f", struct.pack("<f", x))[0]
    if abs(x) >= 2.0**128 - 2.0**103:
        return math.copysign(math.inf, x)
    return struct.unpack("<f", struct.pack("<f", x))[0]


def round_to(x: Fraction, t: SemType) -> float:
    if t is SemType.F32:
        return round_exact(x, 24, -126, 127)
    return round_exact(x, 53, -1022, 1023)


def _fdiv(a: float, b: float) -> float:
    if b == 0.0:
        if a == 0.0 or math.isnan(a):
            return math.nan
        neg = (math.copysign(1, a) < 0) != (math.copysign(1, b) < 0)
        return -math.inf if neg else math.inf
    return a / b


def _fma(a: float, b: float, c: float, t: SemType) -> float:
    if not (math.isfinite(a) and math.isfinite(b) and math.isfinite(c)):
        r = a * b + c
        return f32(r) if t is SemType.F32 else r
    exact = Fraction(a) * Fraction(b) + Fraction(c)
    if exact == 0:
        prod_neg = (math.copysign(1, a) < 0) != (math.copysign(1, b) < 0)
        return -0.0 if prod_neg and math.copysign(1, c) < 0 else 0.0
    r = round_to(exact, t)
    return r if r != 0 else math.copysign(0.0, exact)


def _int_divrem(a: int, b: int, t: SemType) -> tuple:
    if b == 0:
        return wrap(-1, t), a
    if t is SemType.S32:
        q = abs(a) // abs(b)
        if (a < 0) != (b < 0):
            q = -q
        return wrap(q, t), wrap(a - q * b, t)
    return a // b, a % b


def _cvt(v, src: SemType, dst: SemType):
    if src is SemType.PRED:
        v = 1 if v else 0
        return float(v) if dst.is_float else v
    if dst.is_float:
        if src.is_float:
            return f32(v) if dst is SemType.F32 else v
        return round_to(Fraction(v), dst)
    if src.is_float:
        if math.isnan(v):
            return 0
        lo, hi = {SemType.U32: (0, 0xFFFFFFFF), SemType.S32: (-(1 << 31), (1 << 31) - 1), SemType.U64: (0, (1 << 64) - 1)}[dst]
        if math.isinf(v):
            return hi if v > 0 else lo
        return max(lo, min(hi, math.trunc(v)))
    return wrap(v, dst)


def binary(op: Opcode, t: SemType, a, b):
    if op is Opcode.ADD:
        return wrap(a + b, t) if t.is_int else (f32(a + b) if t is SemType.F32 else a + b)
    if op is Opcode.SUB:
        return wrap(a - b, t) if t.is_int else (f32(a - b) if t is SemType.F32 else a - b)
    if op is Opcode.MUL:
        return wrap(a * b, t) if t.is_int else (f32(a * b) if t is SemType.F32 else a * b)
    if op is Opcode.DIV:
        if t.is_int:
            return _int_divrem(a, b, t)[0]
        r = _fdiv(a, b)
        return f32(r) if t is SemType.F32 else r
    if op is Opcode.REM:
        return _int_divrem(a, b, t)[1]
    if op in (Opcode.MIN, Opcode.MAX):
        if t.is_float:
            if math.isnan(a):
                return b
            if math.isnan(b):
                return a
        if op is Opcode.MIN:
            return b if b < a else a
        return b if b > a else a
    if op in (Opcode.AND, Opcode.OR, Opcode.XOR):
        if t is SemType.PRED:
            return {Opcode.AND: a and b, Opcode.OR: a or b, Opcode.XOR: a != b}[op]
        return {Opcode.AND: a & b, Opcode.OR: a | b, Opcode.XOR: a ^ b}[op]
    if op in (Opcode.SHL, Opcode.SHR):
        s = b & (t.bits - 1)
        return wrap(a << s, t) if op is Opcode.SHL else a >> s
    if op is Opcode.SETP_EQ:
        return a == b
    if op is Opcode.SETP_NE:
        return a != b
    if op is Opcode.SETP_LT:
        return a < b
    if op is Opcode.SETP_LE:
        return a <= b
    if op is Opcode.SETP_GT:
        return a > b
    if op is Opcode.SETP_GE:
        return a >= b
    raise ValueError(op)


def scalar_eval(ins: Instruction, vals: list):
    """Result of a value instruction on scalar operands."""
    r = _scalar_eval(ins, vals)
    if ins.opcode is not Opcode.MOV and isinstance(r, float) and r != r:
        return math.nan  # canonical quiet NaN
    return r


def _scalar_eval(ins: Instruction, vals: list):
    op, t = ins.opcode, ins.type
    if op is Opcode.MOV:
        return vals[0]
    if op is Opcode.NOT:
        return (not vals[0]) if t is SemType.PRED else wrap(~vals[0], t)
    if op is Opcode.CVT:
        return _cvt(vals[0], ins.src_type, t)
    if op is Opcode.SET_PREDICATE:
        return vals[0] != 0
    if op is Opcode.FMA:
        if t.is_float:
            return _fma(*vals, t)
        return wrap(vals[0] * vals[1] + vals[2], t)
    return binary(op, t, vals[0], vals[1])


def imm_value(v, t: SemType):
    if t is SemType.PRED:
        return bool(v)
    if t.is_float:
        return f32(float(v)) if t is SemType.F32 else float(v)
    return wrap(int(v), t)


# ---------------------------------------------------------------------------
# interpreter


class _Return(Exception):
    pass


@dataclass
class OracleResult:
    buffers: list
    instructions: int = 0
    barrier_visits: int = 0


@dataclass
class _Thread:
    lid: int
    tid: tuple
    regs: dict
    local: bytearray
    gen: object = None
    waiting: object = None  # (path, opcode, operand values)
    done: bool = False


@dataclass
class _Ctx:
    kernel: Kernel
    grid: tuple
    block: tuple
    bidx: tuple
    buffers: list
    shared: bytearray
    counters: dict = field(default_factory=lambda: {"ins": 0, "bar": 0})


def _linear(idx: tuple, dims: tuple) -> int:
    return idx[0] + idx[1] * dims[0] + idx[2] * dims[0] * dims[1]


def _unlinear(i: int, dims: tuple) -> tuple:
    return (i % dims[0], (i // dims[0]) % dims[1], i // (dims[0] * dims[1]))


def run_oracle(kernel: Kernel, grid, block, args, buffers) -> OracleResult:
    """Execute ``kernel`` over ``grid``×``block`` threads.

    ``args`` holds one value per parameter: a buffer index for pointer
    parameters, otherwise the scalar value. ``buffers`` is a list of byte
    strings; modified copies are returned.
    """
    grid = tuple(grid) + (1,) * (3 - len(grid))
    block = tuple(block) + (1,) * (3 - len(block))
    bufs = [bytearray(b) for b in buffers]
    params = {}
    for reg, a in zip(kernel.params, args):
        params[reg.id] = pointer(a) if reg.ptr else imm_value(a, reg.type)
    counters = {"ins": 0, "bar": 0}
    nthreads = block[0] * block[1] * block[2]
    nblocks = grid[0] * grid[1] * grid[2]
    for b in range(nblocks):
        ctx = _Ctx(kernel, grid, block, _unlinear(b, grid), bufs, bytearray(kernel.shared_mem_bytes), counters)
        threads = []
        for lid in range(nthreads):
            regs = {r.id: _zero(r.type) for r in kernel.registers}
            regs.update(params)
            th = _Thread(lid, _unlinear(lid, block), regs, bytearray(kernel.local_mem_bytes))
            th.gen = _run_thread(ctx, th)
            threads.append(th)
        _run_block(threads)
    return OracleResult(bufs, counters["ins"], counters["bar"])


def _zero(t: SemType):
    if t is SemType.PRED:
        return False
    return 0.0 if t.is_float else 0


def _run_block(threads: list) -> None:
    reply = {th.lid: None for th in threads}
    while True:
        for th in threads:
            if th.done or th.waiting is not None and reply[th.lid] is None:
                continue
            try:
                th.waiting = th.gen.send(reply[th.lid])
            except StopIteration:
                th.done = True
                th.waiting = None
            reply[th.lid] = None
        live = [th for th in threads if not th.done]
        if not live:
            return
        sites = {th.waiting[0] for th in live}
        if len(sites) != 1:
            raise DeadlockError(
                "threads of a block wait at different rendezvous sites", sorted(sites)
            )
        path, opcode, _ = live[0].waiting
        results = _rendezvous(opcode, live)
        for th in live:
            reply[th.lid] = ("ok", results.get(th.lid))


def _rendezvous(opcode: Opcode, live: list) -> dict:
    if opcode in BARRIER_OPS or opcode is Opcode.PAUSE_CHECK:
        return {}
    vals = {th.lid: th.waiting[2] for th in live}
    if opcode is Opcode.VOTE_ANY:
        r = any(v[0] for v in vals.values())
        return {k: r for k in vals}
    if opcode is Opcode.VOTE_ALL:
        r = all(v[0] for v in vals.values())
        return {k: r for k in vals}
    if opcode is Opcode.BALLOT:
        r = 0
        for lid, v in vals.items():
            if v[0] and lid < 64:
                r |= 1 << lid
        return {k: r for k in vals}
    # SHUFFLE(idx, val): value of the live thread with local id idx, else own
    out = {}
    for lid, (idx, val) in vals.items():
        out[lid] = vals[idx][1] if idx in vals else val
    return out


def _run_thread(ctx: _Ctx, th: _Thread):
    try:
        yield from _region(ctx, th, ctx.kernel.body, ())
    except _Return:
        return


def _region(ctx: _Ctx, th: _Thread, region: Region, prefix: tuple):
    for i, item in enumerate(region.items):
        path = prefix + (i,)
        if isinstance(item, Instruction):
            yield from _instr(ctx, th, item, path)
        elif isinstance(item, PredBlock):
            if th.regs[item.pred.id]:
                yield from _region(ctx, th, item.then, path + (0,))
            elif item.orelse is not None:
                yield from _region(ctx, th, item.orelse, path + (1,))
        else:
            while True:
                yield from _region(ctx, th, item.body, path + (0,))
                if th.regs[item.brk.id]:
                    break


def _value(th: _Thread, src, t: SemType):
    if isinstance(src, Reg):
        return th.regs[src.id]
    return imm_value(src.value, t)


def _operand_types(ins: Instruction) -> list:
    if ins.opcode is Opcode.CVT:
        return [ins.src_type]
    if ins.opcode is Opcode.SET_PREDICATE:
        return [ins.type]
    if ins.opcode in (Opcode.SHL, Opcode.SHR):
        return [ins.type, SemType.U32]
    if ins.opcode is Opcode.SHUFFLE:
        return [SemType.U32, ins.type]
    if ins.opcode in (Opcode.VOTE_ANY, Opcode.VOTE_ALL, Opcode.BALLOT):
        return [SemType.PRED]
    return [ins.type] * len(ins.srcs)


def _instr(ctx: _Ctx, th: _Thread, ins: Instruction, path: tuple):
    op = ins.opcode
    if op is not Opcode.PAUSE_CHECK:
        ctx.counters["ins"] += 1
    if op is Opcode.RETURN:
        raise _Return()
    if op in BARRIER_OPS:
        ctx.counters["bar"] += 1
        yield (path, op, ())
        return
    if op is Opcode.PAUSE_CHECK:
        return
    if op in COLLECTIVE_OPS:
        vals = tuple(_value(th, s, t) for s, t in zip(ins.srcs, _operand_types(ins)))
        _, result = yield (path, op, vals)
        th.regs[ins.dst.id] = result
        return
    if op in (Opcode.GET_GLOBAL_ID, Opcode.GET_LOCAL_ID, Opcode.GET_BLOCK_ID, Opcode.GET_BLOCK_DIM, Opcode.GET_GRID_DIM):
        d = ins.srcs[0].value
        th.regs[ins.dst.id] = {
            Opcode.GET_GLOBAL_ID: lambda: wrap(ctx.bidx[d] * ctx.block[d] + th.tid[d], SemType.U32),
            Opcode.GET_LOCAL_ID: lambda: th.tid[d],
            Opcode.GET_BLOCK_ID: lambda: ctx.bidx[d],
            Opcode.GET_BLOCK_DIM: lambda: ctx.block[d],
            Opcode.GET_GRID_DIM: lambda: ctx.grid[d],
        }[op]()
        return
    if op in (Opcode.LD, Opcode.ST, Opcode.ATOM_ADD, Opcode.ATOM_CAS):
        _memory(ctx, th, ins)
        return
    vals = [_value(th, s, t) for s, t in zip(ins.srcs, _operand_types(ins))]
    th.regs[ins.dst.id] = scalar_eval(ins, vals)
    return
    yield  # pragma: no cover - marks this function as a generator


def _locate(ctx: _Ctx, th: _Thread, ins: Instruction) -> tuple:
    addr: Addr = ins.srcs[0]
    n = ins.type.nbytes
    base = th.regs[addr.base.id] if isinstance(addr.base, Reg) else addr.base.value
    if ins.space is MemSpace.GLOBAL:
        a = (base + addr.offset) & _MASK[SemType.U64]
        buf, off = (a >> PTR_SHIFT) - 1, a & _OFF_MASK
        if not 0 <= buf < len(ctx.buffers) or off + n > len(ctx.buffers[buf]):
            raise FaultError(f"global access out of bounds at {a:#x}", th.lid, a)
        mem = ctx.buffers[buf]
    else:
        off = (base + addr.offset) & 0xFFFFFFFF
        mem = ctx.shared if ins.space is MemSpace.SHARED else th.local
        if off + n > len(mem):
            raise FaultError(f"{ins.space.value} access out of bounds at {off:#x}", th.lid, off)
    if off % n:
        raise FaultError(f"misaligned {n}-byte access at {off:#x}", th.lid, off)
    return mem, off


def _memory(ctx: _Ctx, th: _Thread, ins: Instruction) -> None:
    mem, off = _locate(ctx, th, ins)
    t = ins.type
    fmt = _FMT[t]
    if ins.opcode is Opcode.LD:
        th.regs[ins.dst.id] = struct.unpack_from(fmt, mem, off)[0]
        return
    if ins.opcode is Opcode.ST:
        struct.pack_into(fmt, mem, off, _value(th, ins.srcs[1], t))
        return
    old = struct.unpack_from(fmt, mem, off)[0]
    if ins.opcode is Opcode.ATOM_ADD:
        new = wrap(old + _value(th, ins.srcs[1], t), t)
    else:
        # ATOM_CAS dst, [addr], compare, value
        cmp, val = _value(th, ins.srcs[1], t), _value(th, ins.srcs[2], t)
        new = val if old == cmp else old
    struct.pack_into(fmt, mem, off, new)
    th.regs[ins.dst.id] = old
