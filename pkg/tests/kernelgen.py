"""Random hetIR kernels for property tests.

``random_kernel`` builds kernels that validate and terminate: loops are
counted, memory accesses stay inside the buffers of :func:`launch_buffers`,
rendezvous instructions sit only under uniform control and atomics never
feed their result back into computation, so the final memory is independent
of scheduling. ``random_module(..., executable=False)`` additionally uses
instructions with schedule-dependent results (``ATOM_CAS``) and wider
immediates, for syntax round-trips.
"""

from __future__ import annotations

import random
import struct

from hetgpu.ir import (
    Addr, Imm, Instruction, Kernel, LoopBlock, MemSpace, Module, Opcode, PredBlock, Reg, Region, SemType,
    divergent_control, iter_items, validate,
)

U32, S32, U64, F32, F64, PRED = SemType.U32, SemType.S32, SemType.U64, SemType.F32, SemType.F64, SemType.PRED
POOL_TYPES = (U32, S32, U64, F32, F64, PRED)
OUT_SLOTS = 6  # 8-byte output slots per thread
IN_WORDS = 4  # u32 input words per thread
COUNTER_SLOTS = 4

_ARITH = {
    U32: [Opcode.ADD, Opcode.SUB, Opcode.MUL, Opcode.DIV, Opcode.REM, Opcode.MIN, Opcode.MAX, Opcode.AND,
          Opcode.OR, Opcode.XOR, Opcode.SHL, Opcode.SHR],
    F32: [Opcode.ADD, Opcode.SUB, Opcode.MUL, Opcode.DIV, Opcode.MIN, Opcode.MAX],
    PRED: [Opcode.AND, Opcode.OR, Opcode.XOR],
}
_ARITH[S32] = _ARITH[U32]
_ARITH[U64] = _ARITH[U32]
_ARITH[F64] = _ARITH[F32]
_SETP = [Opcode.SETP_EQ, Opcode.SETP_NE, Opcode.SETP_LT, Opcode.SETP_LE, Opcode.SETP_GT, Opcode.SETP_GE]
_SPECIAL_F = [0.0, -0.0, 1.0, -1.5, 0.5, 3.25, 1e-3, 65504.0, float("inf"), float("-inf"), 2.0 ** -130]


def _f32(x: float) -> float:
    return struct.unpack("<f", struct.pack("<f", x))[0]


class _Gen:
    def __init__(self, rng: random.Random, *, executable: bool, block_size: int, barriers: bool,
                 collectives: bool, atomics: bool, shared: bool, max_depth: int, size: int):
        self.rng = rng
        self.executable = executable
        self.block_size = block_size
        self.barriers = barriers
        self.collectives = collectives and block_size <= 64
        self.atomics = atomics
        self.shared = shared
        self.max_depth = max_depth
        self.budget = size
        self.next_id = 0
        self.regs: list = []

    # -- registers --------------------------------------------------------------------

    def reg(self, t: SemType, ptr: bool = False) -> Reg:
        r = Reg(self.next_id, t, ptr)
        self.next_id += 1
        return r

    def local(self, t: SemType, ptr: bool = False) -> Reg:
        r = self.reg(t, ptr)
        self.regs.append(r)
        return r

    def pick(self, t: SemType) -> Reg:
        return self.rng.choice(self.pool[t])

    def imm(self, t: SemType):
        rng = self.rng
        if t is PRED:
            return Imm(rng.randint(0, 1))
        if t is U32:
            return Imm(rng.choice([0, 1, 2, 3, 7, 31, 255, 0x7FFFFFFF, 0xFFFFFFFF, rng.getrandbits(32)]))
        if t is S32:
            return Imm(rng.choice([0, 1, -1, 5, -7, -(1 << 31), (1 << 31) - 1, rng.getrandbits(31) - (1 << 30)]))
        if t is U64:
            return Imm(rng.choice([0, 1, 3, 1 << 40, (1 << 64) - 1, rng.getrandbits(64)]))
        v = rng.choice(_SPECIAL_F + [rng.uniform(-1e4, 1e4)])
        return Imm(_f32(v) if t is F32 else v)

    def operand(self, t: SemType):
        return self.imm(t) if self.rng.random() < 0.25 else self.pick(t)

    # -- statements ---------------------------------------------------------------------

    def value_instr(self) -> Instruction:
        rng = self.rng
        t = rng.choice(POOL_TYPES)
        dst = self.pick(t)
        k = rng.random()
        if k < 0.45:
            op = rng.choice(_ARITH[t])
            if op in (Opcode.SHL, Opcode.SHR):
                return Instruction(op, t, dst, (self.pick(t), self.operand(U32)))
            return Instruction(op, t, dst, (self.pick(t), self.operand(t)))
        if k < 0.55 and t is not PRED:
            if t.is_float or rng.random() < 0.5:
                return Instruction(Opcode.FMA, t, dst, (self.pick(t), self.operand(t), self.pick(t)))
            return Instruction(Opcode.NOT, t, dst, (self.pick(t),))
        if k < 0.75:
            if t is PRED:
                st = rng.choice([U32, S32, U64, F32, F64])
                return Instruction(Opcode.SET_PREDICATE, st, dst, (self.pick(st),))
            src_t = rng.choice(POOL_TYPES)
            return Instruction(Opcode.CVT, t, dst, (self.pick(src_t),), src_type=src_t)
        if k < 0.9:
            st = rng.choice([U32, S32, U64, F32, F64])
            return Instruction(rng.choice(_SETP), st, self.pick(PRED), (self.pick(st), self.operand(st)))
        return Instruction(Opcode.MOV, t, dst, (self.operand(t),))

    def collective(self) -> Instruction:
        rng = self.rng
        k = rng.randrange(4)
        if k == 0:
            return Instruction(Opcode.VOTE_ANY, PRED, self.pick(PRED), (self.pick(PRED),))
        if k == 1:
            return Instruction(Opcode.VOTE_ALL, PRED, self.pick(PRED), (self.pick(PRED),))
        if k == 2:
            return Instruction(Opcode.BALLOT, U64, self.pick(U64), (self.pick(PRED),))
        t = rng.choice(POOL_TYPES)
        lane = self.nbr_lane if rng.random() < 0.7 else self.pick(U32)
        return Instruction(Opcode.SHUFFLE, t, self.pick(t), (lane, self.pick(t)))

    def shared_exchange(self) -> list:
        t = self.rng.choice([U32, F32])
        return [
            Instruction(Opcode.BAR_SHARED),
            Instruction(Opcode.ST, t, None, (Addr(self.lid4), self.pick(t)), MemSpace.SHARED),
            Instruction(Opcode.BAR_SHARED),
            Instruction(Opcode.LD, t, self.pick(t), (Addr(self.nbr4),), MemSpace.SHARED),
            Instruction(Opcode.BAR_SHARED),
        ]

    def atomic(self) -> Instruction:
        rng = self.rng
        t = rng.choice([U32, U64])
        # 32- and 64-bit adds to one word do not commute, so each width has its own slots
        slot = (rng.randrange(COUNTER_SLOTS // 2) + (COUNTER_SLOTS // 2 if t is U64 else 0)) * 8
        if not self.executable and rng.random() < 0.4:
            return Instruction(Opcode.ATOM_CAS, t, self.pick(t), (Addr(self.ctr, slot), self.operand(t), self.operand(t)),
                               MemSpace.GLOBAL)
        return Instruction(Opcode.ATOM_ADD, t, self.sink[t], (Addr(self.ctr, slot), self.operand(t)), MemSpace.GLOBAL)

    def store_slot(self) -> list:
        t = self.rng.choice(POOL_TYPES)
        slot = self.rng.randrange(OUT_SLOTS) * 8
        if t is PRED:
            tmp = self.pick(U32)
            return [Instruction(Opcode.CVT, U32, tmp, (self.pick(PRED),), src_type=PRED),
                    Instruction(Opcode.ST, U32, None, (Addr(self.pout, slot), tmp), MemSpace.GLOBAL)]
        return [Instruction(Opcode.ST, t, None, (Addr(self.pout, slot), self.pick(t)), MemSpace.GLOBAL)]

    def region(self, depth: int, uniform: bool) -> list:
        rng = self.rng
        items = []
        n = rng.randint(1, 6)
        for _ in range(n):
            if self.budget <= 0:
                break
            self.budget -= 1
            k = rng.random()
            if k < 0.12 and depth < self.max_depth:
                items.extend(self.pred_block(depth, uniform))
            elif k < 0.22 and depth < self.max_depth:
                items.extend(self.loop(depth, uniform))
            elif k < 0.28 and self.barriers and uniform:
                items.append(Instruction(rng.choice([Opcode.BAR_SHARED, Opcode.BAR_SHARED, Opcode.BAR_GLOBAL])))
            elif k < 0.34 and self.collectives and uniform:
                items.append(self.collective())
            elif k < 0.38 and self.shared and self.barriers and uniform:
                items.extend(self.shared_exchange())
            elif k < 0.43 and self.atomics:
                items.append(self.atomic())
            elif k < 0.50:
                items.extend(self.store_slot())
            else:
                items.append(self.value_instr())
        return items

    def pred_block(self, depth: int, uniform: bool) -> list:
        rng = self.rng
        pre = []
        if rng.random() < 0.4:
            p = self.upred
            cond = Instruction(rng.choice(_SETP), U32, p, (self.useed, self.imm(U32)))
            pre.append(cond)
            inner_uniform = uniform
        else:
            p = self.pick(PRED)
            inner_uniform = False
        then = self.region(depth + 1, inner_uniform)
        if not inner_uniform and rng.random() < 0.15:
            then += self.store_slot() + [Instruction(Opcode.RETURN)]
        orelse = Region(tuple(self.region(depth + 1, inner_uniform))) if rng.random() < 0.4 else None
        return pre + [PredBlock(p, Region(tuple(then)), orelse)]

    def loop(self, depth: int, uniform: bool) -> list:
        rng = self.rng
        ctr = self.local(U32)
        brk = self.local(PRED)
        pre = [Instruction(Opcode.MOV, U32, ctr, (Imm(0),))]
        if rng.random() < 0.6:
            bound = Imm(rng.randint(1, 4))
            inner_uniform = uniform
        else:
            b = self.local(U32)
            pre += [Instruction(Opcode.AND, U32, b, (self.gid, Imm(3))),
                    Instruction(Opcode.ADD, U32, b, (b, Imm(1)))]
            bound = b
            inner_uniform = False
        body = self.region(depth + 1, inner_uniform)
        body += [Instruction(Opcode.ADD, U32, ctr, (ctr, Imm(1))),
                 Instruction(Opcode.SETP_GE, U32, brk, (ctr, bound))]
        trip = rng.choice([None, None, 4]) if not self.executable else None
        return pre + [LoopBlock(Region(tuple(body)), brk, trip)]

    # -- kernel -------------------------------------------------------------------------

    def kernel(self, name: str) -> Kernel:
        rng = self.rng
        out, inp, ctr, seed = self.reg(U64, True), self.reg(U64, True), self.reg(U64, True), self.reg(U32)
        self.ctr = ctr
        params = (out, inp, ctr, seed)
        self.useed = seed
        self.gid, lid = self.local(U32), self.local(U32)
        t64, pin, self.pout = self.local(U64), self.local(U64, True), self.local(U64, True)
        self.lid4, self.nbr_lane, self.nbr4 = self.local(U32), self.local(U32), self.local(U32)
        self.upred = self.local(PRED)
        self.pool = {t: [self.local(t) for _ in range(3)] for t in POOL_TYPES}
        self.sink = {U32: self.local(U32), U64: self.local(U64)}
        pre = [
            Instruction(Opcode.GET_GLOBAL_ID, U32, self.gid, (Imm(0),)),
            Instruction(Opcode.GET_LOCAL_ID, U32, lid, (Imm(0),)),
            Instruction(Opcode.CVT, U64, t64, (self.gid,), src_type=U32),
            Instruction(Opcode.MUL, U64, t64, (t64, Imm(IN_WORDS * 4))),
            Instruction(Opcode.ADD, U64, pin, (inp, t64)),
            Instruction(Opcode.CVT, U64, t64, (self.gid,), src_type=U32),
            Instruction(Opcode.MUL, U64, t64, (t64, Imm(OUT_SLOTS * 8))),
            Instruction(Opcode.ADD, U64, self.pout, (out, t64)),
            Instruction(Opcode.SHL, U32, self.lid4, (lid, Imm(2))),
            Instruction(Opcode.ADD, U32, self.nbr_lane, (lid, Imm(rng.randint(1, 5)))),
            Instruction(Opcode.AND, U32, self.nbr_lane, (self.nbr_lane, Imm(self.block_size - 1))),
            Instruction(Opcode.SHL, U32, self.nbr4, (self.nbr_lane, Imm(2))),
            Instruction(Opcode.SETP_NE, U32, self.upred, (seed, Imm(0))),
        ]
        for i, r in enumerate(self.pool[U32]):
            pre.append(Instruction(Opcode.LD, U32, r, (Addr(pin, 4 * i),), MemSpace.GLOBAL))
        s = self.pool[S32]
        pre += [Instruction(Opcode.CVT, S32, s[0], (self.pool[U32][0],), src_type=U32),
                Instruction(Opcode.LD, S32, s[1], (Addr(pin, 12),), MemSpace.GLOBAL),
                Instruction(Opcode.MOV, S32, s[2], (self.imm(S32),))]
        q = self.pool[U64]
        pre += [Instruction(Opcode.CVT, U64, q[0], (self.pool[U32][1],), src_type=U32),
                Instruction(Opcode.MUL, U64, q[1], (q[0], Imm(0x9E3779B97F4A7C15))),
                Instruction(Opcode.MOV, U64, q[2], (self.imm(U64),))]
        f = self.pool[F32]
        pre += [Instruction(Opcode.CVT, F32, f[0], (s[0],), src_type=S32),
                Instruction(Opcode.CVT, F32, f[1], (self.pool[U32][2],), src_type=U32),
                Instruction(Opcode.MOV, F32, f[2], (self.imm(F32),))]
        d = self.pool[F64]
        pre += [Instruction(Opcode.CVT, F64, d[0], (f[0],), src_type=F32),
                Instruction(Opcode.CVT, F64, d[1], (s[1],), src_type=S32),
                Instruction(Opcode.MOV, F64, d[2], (self.imm(F64),))]
        p = self.pool[PRED]
        pre += [Instruction(Opcode.SETP_LT, U32, p[0], (self.pool[U32][0], self.pool[U32][1])),
                Instruction(Opcode.SETP_GT, F32, p[1], (f[0], f[1])),
                Instruction(Opcode.SETP_EQ, U32, p[2], (seed, Imm(7)))]
        for r in self.sink.values():
            pre.append(Instruction(Opcode.MOV, r.type, r, (Imm(0),)))
        body = self.region(0, True)
        while self.budget > 0:
            body += self.region(0, True)
        tail = []
        for i, t in enumerate([U32, S32, U64, F32, F64]):
            tail.append(Instruction(Opcode.ST, t, None, (Addr(self.pout, 8 * i), self.pick(t)), MemSpace.GLOBAL))
        tail.append(Instruction(Opcode.RETURN))
        shared = self.block_size * 4 if self.shared else 0
        k = Kernel(name, params, tuple(self.regs), Region(tuple(pre + body + tail)), shared, 0)
        return _uniformize(k)


def _rendezvous_free(ins: Instruction) -> list:
    """Replacement for a rendezvous instruction found under divergent control."""
    op = ins.opcode
    if op in (Opcode.BAR_SHARED, Opcode.BAR_GLOBAL) or ins.space is MemSpace.SHARED:
        # a shared exchange without its barriers would race; drop it whole
        return []
    if op in (Opcode.VOTE_ANY, Opcode.VOTE_ALL):
        return [Instruction(Opcode.MOV, PRED, ins.dst, (ins.srcs[0],))]
    if op is Opcode.BALLOT:
        return [Instruction(Opcode.CVT, U64, ins.dst, (ins.srcs[0],), src_type=PRED)]
    return [Instruction(Opcode.MOV, ins.type, ins.dst, (ins.srcs[1],))]


def _uniformize(k: Kernel) -> Kernel:
    """Rewrite rendezvous instructions that ended up under divergent control
    (the generator's uniformity guess is approximate) until none remain."""
    from hetgpu.ir import RENDEZVOUS_OPS

    while True:
        ctl = divergent_control(k)
        bad = {p for p, it in iter_items(k.body)
               if isinstance(it, Instruction) and ctl[p]
               and (it.opcode in RENDEZVOUS_OPS or it.space is MemSpace.SHARED)}
        if not bad:
            return k

        def fix(region: Region, prefix: tuple) -> Region:
            out = []
            for i, it in enumerate(region.items):
                path = prefix + (i,)
                if isinstance(it, Instruction):
                    out.extend(_rendezvous_free(it) if path in bad else [it])
                elif isinstance(it, PredBlock):
                    out.append(PredBlock(it.pred, fix(it.then, path + (0,)),
                                         fix(it.orelse, path + (1,)) if it.orelse is not None else None))
                else:
                    out.append(LoopBlock(fix(it.body, path + (0,)), it.brk, it.trip))
            return Region(tuple(out))

        k = Kernel(k.name, k.params, k.registers, fix(k.body, ()), k.shared_mem_bytes, k.local_mem_bytes)


def random_kernel(rng: random.Random, name: str = "k", *, executable: bool = True, block_size: int = 32,
                  barriers: bool = True, collectives: bool = True, atomics: bool = True, shared: bool = True,
                  max_depth: int = 3, size: int = 24) -> Kernel:
    g = _Gen(rng, executable=executable, block_size=block_size, barriers=barriers, collectives=collectives,
             atomics=atomics, shared=shared, max_depth=max_depth, size=size)
    k = g.kernel(name)
    report = validate(Module((k,)))
    assert report.ok, report.diagnostics[:3]
    return k


def random_module(rng: random.Random, *, executable: bool = False) -> Module:
    n = rng.randint(1, 3)
    ks = [random_kernel(rng, f"k{i}_{rng.randrange(1000)}", executable=executable,
                        block_size=rng.choice([16, 32, 64]), size=rng.randint(4, 30)) for i in range(n)]
    return Module(tuple(ks), version=1)


def launch_buffers(rng: random.Random, nthreads: int) -> list:
    """(out, in, counters) initial contents for a kernel from :func:`random_kernel`."""
    inp = bytes(rng.getrandbits(8) for _ in range(nthreads * IN_WORDS * 4))
    return [bytes(nthreads * OUT_SLOTS * 8), inp, bytes(COUNTER_SLOTS * 8)]
