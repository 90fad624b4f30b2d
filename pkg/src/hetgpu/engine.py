"""Execution engine shared by the simulated SIMT and MIMD devices.

A launch is executed by *groups* of lanes that share one instruction stream:
a warp on the SIMT device, a core's vector unit on the MIMD device
(SINGLE_CORE / MULTI_CORE), or a single scalar thread context
(INDEPENDENT_THREAD). The scheduler gives every runnable group one lowered op
per turn, round-robin, optionally in a seeded random order.

Barriers, collectives, pause checks and MULTI_CORE divergence agreements are
block-level rendezvous: a group that reaches one waits until every live
thread (or, for agreements, every live core) of its block has arrived.
Threads that have executed RETURN are no longer counted.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import alu
from .errors import DeadlockError, FaultError, ProtocolError, StateError
from .ir import Imm, MemSpace, Opcode, Reg, SemType, block_threads
from .lowering import DeviceProgram, Strategy

COMPLETED = "COMPLETED"
PAUSED = "PAUSED"
RUNNING = "RUNNING"

RUN, WAIT, DONE, HALTED = 0, 1, 2, 3

THEN, ELSE, CONTINUE, EXIT = "THEN", "ELSE", "CONTINUE", "EXIT"

DEFAULT_STEP_LIMIT = 20_000_000


def dims3(d) -> tuple:
    d = tuple(int(x) for x in d)
    return d + (1,) * (3 - len(d))


def linear_index(idx: tuple, dims: tuple) -> int:
    return idx[0] + idx[1] * dims[0] + idx[2] * dims[0] * dims[1]


def unlinear_index(i: int, dims: tuple) -> tuple:
    return (i % dims[0], (i // dims[0]) % dims[1], i // (dims[0] * dims[1]))


def mask_int(mask: np.ndarray) -> int:
    return int.from_bytes(np.packbits(mask, bitorder="little").tobytes(), "little")


# ---------------------------------------------------------------------------
# state records


@dataclass(eq=False)
class BlockDump:
    """Architecture-neutral state of one paused block.

    ``values`` is a thread-major ``(thread_count, len(reg_ids))`` array of
    64-bit register slots, in liveness-table order. Threads flagged in
    ``exited`` have returned; their slots are zero.
    """

    block_index: tuple
    resume_point_id: int
    thread_count: int
    reg_ids: tuple
    tags: tuple
    values: np.ndarray
    exited: np.ndarray
    shared_mem: bytes = b""
    local_mem: bytes = b""

    @property
    def registers(self) -> list:
        """Per thread, the list of ``(reg_id, tag, value)`` triples."""
        return [
            [(rid, tag, int(v)) for rid, tag, v in zip(self.reg_ids, self.tags, row)]
            for row in self.values
        ]

    def __eq__(self, other) -> bool:
        if not isinstance(other, BlockDump):
            return NotImplemented
        return (
            self.block_index == other.block_index
            and self.resume_point_id == other.resume_point_id
            and self.thread_count == other.thread_count
            and self.reg_ids == other.reg_ids
            and self.tags == other.tags
            and np.array_equal(self.values, other.values)
            and np.array_equal(self.exited, other.exited)
            and self.shared_mem == other.shared_mem
            and self.local_mem == other.local_mem
        )


@dataclass(frozen=True)
class PauseTrigger:
    """Deterministic pause schedule: after N executed thread-instructions, or
    when a block reaches pause check ``at_resume`` for the ``occurrence``-th time."""

    after_instructions: Optional[int] = None
    at_resume: Optional[int] = None
    occurrence: int = 1


@dataclass
class DeviceControlBlock:
    """Device-side control state: pause flag, completion flags, dump area,
    spin-lock words and divergence rendezvous cells."""

    pause_flag: bool = False
    completion_flags: Optional[np.ndarray] = None
    dump_area: list = field(default_factory=list)
    locks: dict = field(default_factory=dict)
    cells: dict = field(default_factory=dict)  # (block, site) -> generation
    staging: dict = field(default_factory=dict)  # block -> register staging bytes (resume)

    def reset(self, nblocks: int):
        self.pause_flag = False
        self.completion_flags = np.zeros(nblocks, dtype=bool)
        self.dump_area = []
        self.locks = {}
        self.cells = {}
        self.staging = {}


# ---------------------------------------------------------------------------
# runtime structures


class Group:
    __slots__ = (
        "block", "index", "lids", "n", "core", "tid", "gid", "regs", "alive", "mask",
        "nact", "full", "stack", "pc", "state", "plan", "local", "addr", "staging",
        "micro", "plan_log", "payload", "key",
    )

    def __init__(self, block, index: int, lids: np.ndarray, core):
        self.block = block
        self.index = index
        self.lids = lids
        self.n = len(lids)
        self.core = core
        self.stack = []
        self.pc = 0
        self.state = RUN
        self.plan = ()
        self.addr = None
        self.staging = np.zeros(self.n * 8, dtype=np.uint8)
        self.micro = None
        self.plan_log = []
        self.payload = None
        self.key = (block.linear, index)

    def set_mask(self, m: np.ndarray):
        self.mask = m
        self.nact = int(np.count_nonzero(m))
        self.full = self.nact == self.n


class Block:
    def __init__(self, linear: int, index: tuple, cores: tuple):
        self.linear = linear
        self.index = index
        self.cores = cores
        self.groups: list = []
        self.shared = None
        self.waiting: dict = {}
        self.state = RUN
        self.gbar = None
        self.resume = None
        self.xchg = None


@dataclass
class ResumeBlock:
    """Restore data for one block of a resumed launch."""

    block: int  # linear block index
    rid: int
    regs: tuple  # liveness-ordered registers
    values: np.ndarray  # (threads, len(regs)) uint64 slots
    exited: np.ndarray
    shared: bytes = b""
    local: bytes = b""


@dataclass
class ResumeState:
    blocks: dict  # linear block index -> ResumeBlock
    completed: frozenset = frozenset()


# ---------------------------------------------------------------------------


class Engine:
    """Executes one launch of a DeviceProgram on a device."""

    def __init__(self, device, prog: DeviceProgram, grid, block, args, waves, *, mode: str,
                 resume: Optional[ResumeState] = None, seed=None, trigger: Optional[PauseTrigger] = None,
                 trace: bool = False, regions=None, step_limit: int = DEFAULT_STEP_LIMIT):
        self.dev = device
        self.prog = prog
        self.code = prog.code
        self.grid = dims3(grid)
        self.bdim = dims3(block)
        self.nthreads = block_threads(self.bdim)
        self.nblocks = block_threads(self.grid)
        self.mode = mode  # "simt" | "single_core" | "multi_core" | "independent"
        self.agreeing = mode == "multi_core"
        self.mimd = mode != "simt"
        self.kernel = prog.kernel
        self.params = {}
        if len(args) != len(self.kernel.params):
            raise StateError(f"kernel {self.kernel.name} takes {len(self.kernel.params)} arguments, got {len(args)}")
        for reg, a in zip(self.kernel.params, args):
            self.params[reg.id] = np.array(a, dtype=alu.DTYPES[reg.type]) if reg.type is not SemType.PRED else np.array(bool(a))
        self.waves = [list(w) for w in waves]
        self.wave_pos = 0
        self.resume = resume
        self.rng = random.Random(seed) if seed is not None else None
        self.trigger = trigger or PauseTrigger()
        self.trace = [] if trace else None
        self.step_limit = step_limit
        self.control: DeviceControlBlock = device.control
        self.control.reset(self.nblocks)
        self.mem = device.mem
        self.regions = None
        if regions is not None:
            rs = sorted(regions)
            self.regions = (np.array([r[0] for r in rs], dtype=np.uint64), np.array([r[1] for r in rs], dtype=np.uint64))
        self.executed = 0
        self.barrier_visits = 0
        self.steps = 0
        self.pause_counts: dict = {}
        self.resident: list = []
        self.blocks: dict = {}
        self.dumps: dict = {}
        self.completed: set = set(resume.completed) if resume else set()
        self.status = RUNNING
        self.reg_types = {r.id: r for r in self.kernel.all_regs()}
        self._compile()
        self._handlers = {
            "alu": self._h_alu, "valu": self._h_alu, "id": self._h_id,
            "ld": self._h_ld, "st": self._h_st, "spm_ld": self._h_ld, "spm_st": self._h_st,
            "atom": self._h_atom, "addr": self._h_addr, "dma_rd": self._h_dma_rd, "vload": self._h_vload,
            "vstore": self._h_vstore, "dma_wr": self._h_dma_wr, "atom_lock": self._h_atom_lock,
            "bar": self._h_rendezvous, "mesh_bar": self._h_rendezvous, "gbar": self._h_rendezvous,
            "coll": self._h_rendezvous, "mesh_coll": self._h_mesh_coll, "pause": self._h_pause,
            "agree": self._h_agree,
            "if": self._h_if, "vmask_push": self._h_if, "else": self._h_else, "vmask_else": self._h_else,
            "endif": self._h_endif, "vmask_pop": self._h_endif, "loop": self._h_loop, "endloop": self._h_endloop,
            "ret": self._h_ret, "exit": self._h_exit, "switch": self._h_switch,
        }
        if resume is not None:
            for lin, rb in resume.blocks.items():
                if rb.rid not in prog.resume_entries:
                    raise StateError(f"resume point {rb.rid} is not in the program's resume table")
                if tuple(r.id for r in rb.regs) != tuple(r.id for r in prog.liveness[rb.rid]):
                    raise StateError(f"saved registers of block {lin} do not match the liveness table")
                self.control.staging[lin] = rb.values

    # -- compilation ---------------------------------------------------------

    def _compile(self):
        self.operands = []
        for op in self.code:
            ins = op.ins
            plan = ()
            if ins is not None and ins.opcode not in (Opcode.PAUSE_CHECK,):
                if ins.opcode in (Opcode.LD, Opcode.ST, Opcode.ATOM_ADD, Opcode.ATOM_CAS):
                    types = [None] + [ins.type] * (len(ins.srcs) - 1)
                elif ins.opcode is Opcode.SHUFFLE:
                    types = [SemType.U32, ins.type]
                elif ins.opcode in (Opcode.VOTE_ANY, Opcode.VOTE_ALL, Opcode.BALLOT):
                    types = [SemType.PRED]
                elif op.kind in ("alu", "valu"):
                    types = alu.src_types(ins)
                else:
                    types = [None] * len(ins.srcs)
                plan = tuple(
                    (s.id, None) if isinstance(s, Reg)
                    else (None, _const(s.value, t)) if isinstance(s, Imm) and t is not None
                    else (None, None)
                    for s, t in zip(ins.srcs, types)
                )
            self.operands.append(plan)

    def _fetch(self, g: Group, pc: int, i: int, full: bool = False):
        rid, const = self.operands[pc][i]
        if rid is not None:
            return g.regs[rid]
        if full:
            return np.full(g.n, const, dtype=const.dtype)
        return const

    # -- blocks and groups -------------------------------------------------

    def _start_block(self, linear: int, cores: tuple) -> Block:
        b = Block(linear, unlinear_index(linear, self.grid), cores)
        rb = self.resume.blocks.get(linear) if self.resume else None
        b.resume = rb
        b.shared = self.dev.block_shared(self, b)
        if rb is not None and rb.shared:
            b.shared[:] = np.frombuffer(rb.shared, dtype=np.uint8)
        if self.mode in ("multi_core", "independent"):
            b.xchg = np.zeros((self.nthreads, 2), dtype=np.uint64)
        for gi, (lids, core) in enumerate(self.dev.partition(self, b)):
            g = Group(b, gi, np.asarray(lids, dtype=np.intp), core)
            self._init_group(g, rb)
            b.groups.append(g)
        self.blocks[linear] = b
        return b

    def _init_group(self, g: Group, rb: Optional[ResumeBlock]):
        lids = g.lids
        t = [(lids % self.bdim[0]), (lids // self.bdim[0]) % self.bdim[1], lids // (self.bdim[0] * self.bdim[1])]
        g.tid = [x.astype(np.uint32) for x in t]
        bidx = g.block.index
        g.gid = [
            (np.uint32(bidx[d]) * np.uint32(self.bdim[d]) + g.tid[d]).astype(np.uint32) for d in range(3)
        ]
        g.regs = {}
        for r in self.kernel.registers:
            g.regs[r.id] = alu.zeros(r.type, g.n)
        for rid, v in self.params.items():
            g.regs[rid] = np.full(g.n, v, dtype=v.dtype)
        g.local = np.zeros(g.n * self.prog.local_mem_bytes, dtype=np.uint8)
        alive = np.ones(g.n, dtype=bool)
        if rb is not None:
            alive = ~rb.exited[lids]
            if rb.local:
                lb = self.prog.local_mem_bytes
                allb = np.frombuffer(rb.local, dtype=np.uint8).reshape(self.nthreads, lb)
                g.local[:] = allb[lids].reshape(-1)
            if self.mimd and rb.rid != 0:
                # MIMD cores receive their registers directly
                for j, r in enumerate(rb.regs):
                    g.regs[r.id] = alu.from_bits(rb.values[lids, j], r.type)
        g.alive = alive
        g.set_mask(alive.copy())
        if not alive.any():
            g.state = DONE

    # -- scheduling ----------------------------------------------------------

    def _next_wave(self) -> bool:
        while self.wave_pos < len(self.waves):
            wave = self.waves[self.wave_pos]
            if self.control.pause_flag and self.prog.has_pause_checks:
                return False
            self.wave_pos += 1
            todo = [(lin, cores) for lin, cores in wave if lin not in self.completed]
            if not todo:
                continue
            self.resident = [self._start_block(lin, cores) for lin, cores in todo]
            for b in self.resident:
                self._check_block_done(b)
            return True
        return False

    def run(self, budget: Optional[int] = None) -> str:
        if self.status != RUNNING:
            return self.status
        start = self.executed
        while True:
            if all(b.state != RUN for b in self.resident):
                self.resident = []
                if not self._next_wave():
                    return self._finish()
                continue
            groups = [g for b in self.resident for g in b.groups if g.state == RUN]
            if not groups:
                self._deadlock()
            if self.rng is not None:
                self.rng.shuffle(groups)
            for g in groups:
                if g.state != RUN:
                    continue
                self._step(g)
                if budget is not None and self.executed - start >= budget:
                    return RUNNING

    def _finish(self) -> str:
        # blocks never started (pause requested before their wave) resume from entry
        for wave in self.waves:
            for lin, _ in wave:
                if lin not in self.completed and lin not in self.dumps:
                    self.dumps[lin] = self._entry_dump(lin)
        self.status = PAUSED if self.dumps else COMPLETED
        self.control.dump_area = [self.dumps[k] for k in sorted(self.dumps)]
        return self.status

    def _step(self, g: Group):
        self.steps += 1
        if self.steps > self.step_limit:
            raise FaultError(f"step limit of {self.step_limit} exceeded (non-terminating kernel?)")
        op = self.code[g.pc]
        if self.trace is not None:
            pc, before = g.pc, mask_int(g.mask)
            self._handlers[op.kind](g, op)
            self.trace.append(("exec", g.block.linear, g.index, pc, op.kind, before, mask_int(g.mask)))
        else:
            self._handlers[op.kind](g, op)

    def _count(self, g: Group, op):
        if op.counted:
            self.executed += g.nact
            n = self.trigger.after_instructions
            if n is not None and self.executed >= n:
                self.control.pause_flag = True

    # -- value ops -------------------------------------------------------------

    def _write(self, g: Group, dst: Reg, res):
        dt = alu.DTYPES[dst.type]
        res = np.asarray(res)
        if res.dtype != dt:
            res = res.astype(dt)
        if res.ndim == 0:
            res = np.full(g.n, res, dtype=dt)
        if g.full:
            g.regs[dst.id] = res
        else:
            g.regs[dst.id] = np.where(g.mask, res, g.regs[dst.id])

    def _h_alu(self, g: Group, op):
        if g.nact:
            vals = [np.broadcast_to(self._fetch(g, g.pc, i), (g.n,)) for i in range(len(op.ins.srcs))]
            self._write(g, op.ins.dst, alu.evaluate(op.ins, vals))
        self._count(g, op)
        g.pc += 1

    def _h_id(self, g: Group, op):
        ins = op.ins
        d = ins.srcs[0].value
        o = ins.opcode
        if o is Opcode.GET_GLOBAL_ID:
            v = g.gid[d]
        elif o is Opcode.GET_LOCAL_ID:
            v = g.tid[d]
        elif o is Opcode.GET_BLOCK_ID:
            v = np.uint32(g.block.index[d])
        elif o is Opcode.GET_BLOCK_DIM:
            v = np.uint32(self.bdim[d])
        else:
            v = np.uint32(self.grid[d])
        if g.nact:
            self._write(g, ins.dst, v)
        self._count(g, op)
        g.pc += 1

    # -- memory ---------------------------------------------------------------

    def thread_id(self, g: Group, lane: int) -> int:
        return g.block.linear * self.nthreads + int(g.lids[lane])

    def _addresses(self, g: Group, pc: int, ins) -> np.ndarray:
        a = ins.srcs[0]
        base = g.regs[a.base.id] if isinstance(a.base, Reg) else None
        if ins.space is MemSpace.GLOBAL:
            return (base + np.uint64(a.offset & 0xFFFFFFFFFFFFFFFF)).astype(np.uint64)
        if base is None:
            base = np.full(g.n, a.base.value, dtype=np.uint32)
        return (base.astype(np.uint64) + np.uint64(a.offset & 0xFFFFFFFFFFFFFFFF)) & np.uint64(0xFFFFFFFF)

    def _check_global(self, g: Group, lanes: np.ndarray, a: np.ndarray, n: int):
        size = np.uint64(len(self.mem))
        bad = (a % np.uint64(n) != 0) | (a > size - np.uint64(n))
        if self.regions is not None and not bad.all():
            starts, ends = self.regions
            idx = np.searchsorted(starts, a, side="right").astype(np.int64) - 1
            inside = idx >= 0
            safe = np.where(inside, idx, 0)
            bad |= ~inside | (a + np.uint64(n) > ends[safe])
        if bad.any():
            k = int(np.flatnonzero(bad)[0])
            lane = int(lanes[k])
            raise FaultError(
                f"global access fault at address {int(a[k]):#x} by thread {self.thread_id(g, lane)}",
                thread=self.thread_id(g, lane), address=int(a[k]),
            )

    def _local_target(self, g: Group, space: MemSpace, lanes, a, n):
        if space is MemSpace.SHARED:
            mem, limit = g.block.shared, len(g.block.shared)
            idx = a
        else:
            lb = self.prog.local_mem_bytes
            mem, limit = g.local, lb
            idx = a + lanes.astype(np.uint64) * np.uint64(lb)
        bad = (a % np.uint64(n) != 0) | (a + np.uint64(n) > np.uint64(limit))
        if bad.any():
            k = int(np.flatnonzero(bad)[0])
            tid = self.thread_id(g, int(lanes[k]))
            raise FaultError(f"{space.value} access fault at address {int(a[k]):#x} by thread {tid}",
                             thread=tid, address=int(a[k]))
        return mem, idx

    def _target(self, g: Group, ins, lanes, a):
        n = ins.type.nbytes
        if ins.space is MemSpace.GLOBAL:
            self._check_global(g, lanes, a, n)
            return self.mem, a
        return self._local_target(g, ins.space, lanes, a, n)

    def _h_ld(self, g: Group, op):
        ins = op.ins
        if g.nact:
            lanes = np.flatnonzero(g.mask)
            a = self._addresses(g, g.pc, ins)[lanes]
            mem, idx = self._target(g, ins, lanes, a)
            n = ins.type.nbytes
            raw = mem[idx.astype(np.intp)[:, None] + np.arange(n)]
            vals = raw.view(alu.DTYPES[ins.type]).reshape(-1)
            res = g.regs[ins.dst.id].copy()
            res[lanes] = vals
            g.regs[ins.dst.id] = res
        self._count(g, op)
        g.pc += 1

    def _h_st(self, g: Group, op):
        ins = op.ins
        if g.nact:
            lanes = np.flatnonzero(g.mask)
            a = self._addresses(g, g.pc, ins)[lanes]
            mem, idx = self._target(g, ins, lanes, a)
            n = ins.type.nbytes
            v = np.broadcast_to(self._fetch(g, g.pc, 1), (g.n,))[lanes]
            mem[idx.astype(np.intp)[:, None] + np.arange(n)] = (
                np.ascontiguousarray(v, dtype=alu.DTYPES[ins.type]).view(np.uint8).reshape(-1, n)
            )
        self._count(g, op)
        g.pc += 1

    def _atomic_lane(self, g: Group, ins, lane: int, addr: int):
        n = ins.type.nbytes
        dt = alu.DTYPES[ins.type]
        old = self.mem[addr:addr + n].view(dt).copy()
        ops = [np.broadcast_to(self._fetch(g, g.pc, i), (g.n,))[lane:lane + 1] for i in range(1, len(ins.srcs))]
        new = alu.atomic_update(ins.opcode, ins.type, old, ops)
        return old, new

    def _h_atom(self, g: Group, op):
        # native atomics: each active lane's read-modify-write is indivisible
        ins = op.ins
        if g.nact:
            lanes = np.flatnonzero(g.mask)
            a = self._addresses(g, g.pc, ins)[lanes]
            self._check_global(g, lanes, a, ins.type.nbytes)
            res = g.regs[ins.dst.id].copy()
            for lane, addr in zip(lanes.tolist(), a.tolist()):
                old, new = self._atomic_lane(g, ins, lane, addr)
                self.mem[addr:addr + ins.type.nbytes] = new.view(np.uint8)
                res[lane] = old[0]
            g.regs[ins.dst.id] = res
        self._count(g, op)
        g.pc += 1

    # MIMD memory path: address compute, DMA through a staging buffer, vector move

    def _h_addr(self, g: Group, op):
        g.addr = self._addresses(g, g.pc, op.ins)
        g.pc += 1

    def _runs(self, g: Group, lanes: np.ndarray, a: np.ndarray, n: int) -> list:
        """Split active lanes into DMA runs of consecutive lanes at consecutive addresses."""
        if len(lanes) == 0:
            return []
        lc = self.dev.desc.lane_count
        brk = (np.diff(lanes) != 1) | (np.diff(a) != np.uint64(n)) | (np.diff(lanes // lc) != 0)
        cut = np.flatnonzero(brk) + 1
        starts = np.concatenate(([0], cut))
        ends = np.concatenate((cut, [len(lanes)]))
        return [(int(lanes[s]), int(a[s]), int(e - s)) for s, e in zip(starts, ends)]

    def _dma_space(self, g: Group, ins):
        if ins.space is MemSpace.GLOBAL:
            return "global", self.mem
        return "shared", g.block.shared

    def _dma_check(self, g: Group, ins, lanes, a):
        n = ins.type.nbytes
        if ins.space is MemSpace.GLOBAL:
            self._check_global(g, lanes, a, n)
        else:
            self._local_target(g, ins.space, lanes, a, n)

    def _h_dma_rd(self, g: Group, op):
        ins = op.ins
        if g.nact:
            lanes = np.flatnonzero(g.mask)
            a = g.addr[lanes]
            self._dma_check(g, ins, lanes, a)
            n = ins.type.nbytes
            space, mem = self._dma_space(g, ins)
            for lane, addr, count in self._runs(g, lanes, a, n):
                self.dev.dma(g.core, "READ", addr, lane * n, count * n, local=g.staging, space=space, memory=mem)
        g.pc += 1

    def _h_vload(self, g: Group, op):
        ins = op.ins
        if g.nact:
            n = ins.type.nbytes
            vals = g.staging[: g.n * n].view(alu.DTYPES[ins.type])
            self._write(g, ins.dst, vals.copy())
        self._count(g, op)
        g.pc += 1

    def _h_vstore(self, g: Group, op):
        ins = op.ins
        if g.nact:
            n = ins.type.nbytes
            v = np.broadcast_to(self._fetch(g, g.pc, 1), (g.n,))
            g.staging[: g.n * n] = np.ascontiguousarray(v, dtype=alu.DTYPES[ins.type]).view(np.uint8)
        g.pc += 1

    def _h_dma_wr(self, g: Group, op):
        ins = op.ins
        if g.nact:
            lanes = np.flatnonzero(g.mask)
            a = g.addr[lanes]
            self._dma_check(g, ins, lanes, a)
            n = ins.type.nbytes
            space, mem = self._dma_space(g, ins)
            for lane, addr, count in self._runs(g, lanes, a, n):
                self.dev.dma(g.core, "WRITE", addr, lane * n, count * n, local=g.staging, space=space, memory=mem)
        self._count(g, op)
        g.pc += 1

    def _h_atom_lock(self, g: Group, op):
        """Spin-lock emulated atomic: per active lane, take the lock word of the
        target region, DMA-read, modify, DMA-write, release. One step per turn."""
        ins = op.ins
        n = ins.type.nbytes
        if g.micro is None:
            lanes = np.flatnonzero(g.mask)
            a = g.addr[lanes]
            self._check_global(g, lanes, a, n)
            g.micro = [lanes.tolist(), a.tolist(), 0, 0, g.regs[ins.dst.id].copy()]
        lanes, addrs, i, stepno, res = g.micro
        if i < len(lanes):
            lane, addr = lanes[i], addrs[i]
            region = addr >> 6
            slot = lane * 8
            if stepno == 0:
                owner = self.control.locks.get(region)
                if owner is not None and owner != g.key:
                    return  # spin: retry next turn
                self.control.locks[region] = g.key
                g.micro[3] = 1
                return
            if stepno == 1:
                self.dev.dma(g.core, "READ", addr, slot, n, local=g.staging, space="global", memory=self.mem)
                g.micro[3] = 2
                return
            if stepno == 2:
                dt = alu.DTYPES[ins.type]
                old = g.staging[slot:slot + n].view(dt).copy()
                ops = [np.broadcast_to(self._fetch(g, g.pc, k), (g.n,))[lane:lane + 1] for k in range(1, len(ins.srcs))]
                new = alu.atomic_update(ins.opcode, ins.type, old, ops)
                res[lane] = old[0]
                g.staging[slot:slot + n] = new.view(np.uint8)
                self.dev.dma(g.core, "WRITE", addr, slot, n, local=g.staging, space="global", memory=self.mem)
                g.micro[3] = 3
                return
            del self.control.locks[region]
            g.micro[2] += 1
            g.micro[3] = 0
            if g.micro[2] < len(lanes):
                return
        g.regs[ins.dst.id] = res
        g.micro = None
        self._count(g, op)
        g.pc += 1

    # -- control flow ------------------------------------------------------------

    def _skip_empty(self, g: Group):
        """With no active lanes left, jump to the closing op of the innermost region."""
        if self.agreeing or g.nact or not g.stack:
            return
        kind, head = g.stack[-1][0], g.stack[-1][1]
        hop = self.code[head]
        if kind == "loop":
            g.pc = hop.a[0]
        elif kind == "if":
            g.pc = hop.a[1]
        else:
            g.pc = hop.a[2]

    def _h_if(self, g: Group, op):
        pred_id, else_pc, end_pc = op.a
        p = g.regs[pred_id]
        m = g.mask
        then_m = m & p
        g.stack.append(["if", g.pc, m, m & ~p, g.plan])
        g.set_mask(then_m)
        if self.agreeing:
            take = THEN in g.plan
        else:
            take = g.nact > 0
        g.pc = g.pc + 1 if take else else_pc

    def _h_else(self, g: Group, op):
        f = g.stack[-1]
        f[0] = "else"
        g.set_mask(f[3] & g.alive)
        if self.agreeing:
            take = ELSE in f[4]
        else:
            take = g.nact > 0
        g.pc = g.pc + 1 if take else op.a[0]

    def _h_endif(self, g: Group, op):
        f = g.stack.pop()
        g.set_mask(f[2] & g.alive)
        g.pc += 1

    def _h_loop(self, g: Group, op):
        g.stack.append(["loop", g.pc, g.mask, None, ()])
        g.pc += 1

    def _h_endloop(self, g: Group, op):
        brk_id, body_pc, _site = op.a
        cont = g.mask & ~g.regs[brk_id]
        go = (CONTINUE in g.plan) if self.agreeing else bool(cont.any())
        if go:
            g.set_mask(cont)
            g.pc = body_pc
        else:
            f = g.stack.pop()
            g.set_mask(f[2] & g.alive)
            g.pc += 1

    def _h_ret(self, g: Group, op):
        self._count(g, op)
        g.alive = g.alive & ~g.mask
        g.set_mask(np.zeros(g.n, dtype=bool))
        g.pc += 1
        if not g.alive.any():
            self._group_done(g)
        else:
            self._skip_empty(g)

    def _h_exit(self, g: Group, op):
        g.alive = np.zeros(g.n, dtype=bool)
        g.set_mask(g.alive)
        self._group_done(g)

    def _h_switch(self, g: Group, op):
        rb = g.block.resume
        if rb is None or rb.rid == 0:
            g.pc += 1
            return
        if not self.mimd:
            self.dev.smuggle(self, g, rb)
        pc, frames = self.prog.resume_entries[rb.rid]
        for kind, head in frames:
            g.stack.append([kind, head, g.alive.copy(), np.zeros(g.n, dtype=bool), ()])
        g.set_mask(g.alive.copy())
        g.pc = pc

    def _group_done(self, g: Group):
        g.state = DONE
        b = g.block
        for gs in b.waiting.values():
            if g in gs:
                gs.remove(g)
        self._try_complete(b)
        self._check_block_done(b)

    def _check_block_done(self, b: Block):
        if b.state == RUN and all(x.state == DONE for x in b.groups):
            b.state = DONE
            self.completed.add(b.linear)
            self.control.completion_flags[b.linear] = True
            self._try_global()

    # -- rendezvous ----------------------------------------------------------------

    def _arrive(self, g: Group, op, payload=None):
        g.state = WAIT
        g.payload = payload
        if op.kind in ("bar", "mesh_bar", "gbar"):
            self.barrier_visits += g.nact
        self._count(g, op)
        g.block.waiting.setdefault(g.pc, []).append(g)
        self._try_complete(g.block)

    def _h_rendezvous(self, g: Group, op):
        self._arrive(g, op)

    def _h_pause(self, g: Group, op):
        self._arrive(g, op)

    def _h_mesh_coll(self, g: Group, op):
        # publish operands to the block's exchange cells before the mesh barrier
        lanes = np.flatnonzero(g.mask)
        lids = g.lids[lanes]
        ins = op.ins
        for i in range(len(ins.srcs)):
            v = np.broadcast_to(self._fetch(g, g.pc, i), (g.n,))[lanes]
            t = SemType.U32 if (ins.opcode is Opcode.SHUFFLE and i == 0) else (
                SemType.PRED if ins.opcode in (Opcode.VOTE_ANY, Opcode.VOTE_ALL, Opcode.BALLOT) else ins.type)
            g.block.xchg[lids, i] = alu.to_bits(np.ascontiguousarray(v, dtype=alu.DTYPES[t]), t)
        self.dev.log_exchange(g, "WRITE", len(lids))
        self._arrive(g, op)

    def _h_agree(self, g: Group, op):
        pred_id, _site, is_loop = op.a
        p = g.regs[pred_id]
        if is_loop:
            bits = (bool((g.mask & ~p).any()),)
        else:
            bits = (bool((g.mask & p).any()), bool((g.mask & ~p).any()))
        g.block.waiting.setdefault(g.pc, []).append(g)
        g.state = WAIT
        g.payload = bits
        self._try_complete(g.block)

    def _try_complete(self, b: Block):
        if b.state != RUN:
            return
        live = [x for x in b.groups if x.state != DONE]
        live_threads = sum(int(np.count_nonzero(x.alive)) for x in live)
        for pc in list(b.waiting):
            gs = b.waiting.get(pc)
            if not gs:
                b.waiting.pop(pc, None)
                continue
            op = self.code[pc]
            if op.kind == "agree":
                ready = len(gs) == len(live)
            else:
                ready = sum(x.nact for x in gs) == live_threads
            if not ready:
                continue
            if op.kind == "gbar":
                b.gbar = pc
                self._try_global()
                return
            del b.waiting[pc]
            self._complete(b, pc, op, gs)
            return

    def _release(self, gs: list, b: Block, pc: int):
        for x in gs:
            x.state = RUN
            x.pc = pc + 1
        if self.trace is not None:
            self.trace.append(("release", b.linear, pc))

    def _try_global(self):
        active = [b for b in self.resident if b.state == RUN]
        if not active or any(b.gbar is None for b in active):
            return
        sites = {b.gbar for b in active}
        if len(sites) != 1:
            return
        pc = sites.pop()
        for b in active:
            gs = b.waiting.pop(pc)
            b.gbar = None
            self._release(gs, b, pc)

    def _complete(self, b: Block, pc: int, op, gs: list):
        kind = op.kind
        if kind in ("bar", "mesh_bar"):
            self._release(gs, b, pc)
        elif kind in ("coll", "mesh_coll"):
            self._collective(b, pc, op, gs)
            self._release(gs, b, pc)
        elif kind == "agree":
            self._agree(b, pc, op, gs)
            self._release(gs, b, pc)
        elif kind == "pause":
            rid = op.a[0]
            if self.trigger.at_resume == rid:
                c = self.pause_counts.get(rid, 0) + 1
                self.pause_counts[rid] = c
                if c == self.trigger.occurrence:
                    self.control.pause_flag = True
            if self.control.pause_flag:
                self._dump(b, rid)
            else:
                self._release(gs, b, pc)

    def _agree(self, b: Block, pc: int, op, gs: list):
        site, is_loop = op.a[1], op.a[2]
        key = (b.linear, site)
        gen = self.control.cells.get(key, 0)
        self.control.cells[key] = gen + 1
        ordered = sorted(gs, key=lambda x: x.index)
        if is_loop:
            plan = (CONTINUE,) if any(x.payload[0] for x in ordered) else (EXIT,)
        else:
            plan = agreement_plan([x.payload[0] for x in ordered], [x.payload[1] for x in ordered])
        for x in ordered:
            x.plan = plan
            x.plan_log.append((site, gen, plan))
            self.dev.log_plan(x, site, gen, plan)

    def _collective(self, b: Block, pc: int, op, gs: list):
        ins = op.ins
        o = ins.opcode
        per = []
        exchange = op.kind == "mesh_coll"
        for g in gs:
            lanes = np.flatnonzero(g.mask)
            lids = g.lids[lanes]
            if exchange:
                self.dev.log_exchange(g, "READ", self.nthreads)
                vals = [b.xchg[lids, i] for i in range(len(ins.srcs))]
                if o is Opcode.SHUFFLE:
                    vals = [alu.from_bits(vals[0], SemType.U32), vals[1]]
                else:
                    vals = [vals[0] != 0]
            else:
                vals = [np.broadcast_to(self._fetch(g, pc, i), (g.n,))[lanes] for i in range(len(ins.srcs))]
            per.append((g, lanes, lids, vals))
        if o in (Opcode.VOTE_ANY, Opcode.VOTE_ALL):
            allv = np.concatenate([v[0] for *_, v in per]) if per else np.zeros(0, bool)
            r = bool(allv.any()) if o is Opcode.VOTE_ANY else bool(allv.all())
            for g, lanes, _, _ in per:
                self._write_lanes(g, ins.dst, lanes, np.full(len(lanes), r))
        elif o is Opcode.BALLOT:
            r = 0
            for _, _, lids, v in per:
                for lid in lids[np.asarray(v[0], dtype=bool) & (lids < 64)].tolist():
                    r |= 1 << lid
            for g, lanes, _, _ in per:
                self._write_lanes(g, ins.dst, lanes, np.full(len(lanes), r, dtype=np.uint64))
        else:
            dt = alu.DTYPES[ins.type]
            table = np.zeros(self.nthreads, dtype=np.uint64 if exchange else dt)
            present = np.zeros(self.nthreads, dtype=bool)
            for _, _, lids, v in per:
                table[lids] = v[1]
                present[lids] = True
            for g, lanes, _, v in per:
                idx = v[0].astype(np.int64)
                ok = idx < self.nthreads
                safe = np.where(ok, idx, 0)
                ok &= present[safe]
                got = np.where(ok, table[safe], v[1])
                if exchange:
                    got = alu.from_bits(got, ins.type)
                self._write_lanes(g, ins.dst, lanes, got)

    def _write_lanes(self, g: Group, dst: Reg, lanes: np.ndarray, vals):
        res = g.regs[dst.id].copy()
        res[lanes] = np.asarray(vals).astype(res.dtype)
        g.regs[dst.id] = res

    # -- pause / dumps ---------------------------------------------------------------

    def _dump(self, b: Block, rid: int):
        regs = self.prog.liveness[rid]
        values = np.zeros((self.nthreads, len(regs)), dtype=np.uint64)
        exited = np.ones(self.nthreads, dtype=bool)
        lb = self.prog.local_mem_bytes
        local = np.zeros((self.nthreads, lb), dtype=np.uint8)
        for g in b.groups:
            exited[g.lids] = ~g.alive
            for j, r in enumerate(regs):
                values[g.lids, j] = alu.to_bits(g.regs[r.id], r.type)
            if lb:
                local[g.lids] = g.local.reshape(g.n, lb)
            g.state = HALTED
        values[exited] = 0
        if lb:
            local[exited] = 0
        b.waiting.clear()
        b.state = HALTED
        self.dumps[b.linear] = BlockDump(
            block_index=b.index,
            resume_point_id=rid,
            thread_count=self.nthreads,
            reg_ids=tuple(r.id for r in regs),
            tags=tuple(r.tag for r in regs),
            values=values,
            exited=exited,
            shared_mem=bytes(b.shared) if b.shared is not None else b"",
            local_mem=local.tobytes(),
        )
        if self.trace is not None:
            self.trace.append(("dump", b.linear, rid))
        self._try_global()

    def _entry_dump(self, linear: int) -> BlockDump:
        """State of a block that has not started: its restored state if it came
        from a checkpoint, otherwise everything at resume point 0."""
        rb = self.resume.blocks.get(linear) if self.resume else None
        if rb is not None:
            return BlockDump(
                block_index=unlinear_index(linear, self.grid),
                resume_point_id=rb.rid,
                thread_count=self.nthreads,
                reg_ids=tuple(r.id for r in rb.regs),
                tags=tuple(r.tag for r in rb.regs),
                values=rb.values.copy(),
                exited=rb.exited.copy(),
                shared_mem=bytes(rb.shared) if rb.shared else bytes(self.prog.shared_mem_bytes),
                local_mem=bytes(rb.local) if rb.local else bytes(self.nthreads * self.prog.local_mem_bytes),
            )
        regs = self.prog.liveness[0]
        values = np.zeros((self.nthreads, len(regs)), dtype=np.uint64)
        for j, r in enumerate(regs):
            if r.id in self.params:
                values[:, j] = alu.to_bits(np.atleast_1d(self.params[r.id]), r.type)[0]
        exited = np.zeros(self.nthreads, dtype=bool)
        return BlockDump(
            block_index=unlinear_index(linear, self.grid),
            resume_point_id=0,
            thread_count=self.nthreads,
            reg_ids=tuple(r.id for r in regs),
            tags=tuple(r.tag for r in regs),
            values=values,
            exited=exited,
            shared_mem=bytes(self.prog.shared_mem_bytes),
            local_mem=bytes(self.nthreads * self.prog.local_mem_bytes),
        )

    # -- diagnostics -------------------------------------------------------------------

    def _deadlock(self):
        sites = []
        mismatch = False
        for b in self.resident:
            if b.state != RUN:
                continue
            pcs = sorted(pc for pc, gs in b.waiting.items() if gs)
            bar_pcs = [pc for pc in pcs if self.code[pc].kind in ("mesh_bar", "bar", "gbar")]
            if len(bar_pcs) > 1:
                mismatch = True
            for pc in pcs:
                sites.append((b.index, pc, self.code[pc].path))
        if self.mimd and mismatch:
            raise ProtocolError(f"mesh barrier tag mismatch among the cores of a block: {sites}")
        raise DeadlockError(f"deadlock: no group can make progress; waiting at {sites}", sites)

    def block_states(self) -> dict:
        return {lin: b.state for lin, b in self.blocks.items()}


def agreement_plan(any_then: list, any_else: list) -> tuple:
    """The path plan all participants execute: THEN first, then ELSE."""
    plan = []
    if any(any_then):
        plan.append(THEN)
    if any(any_else):
        plan.append(ELSE)
    return tuple(plan)


def _const(value, t: SemType):
    if t is SemType.PRED:
        return np.bool_(bool(value))
    return np.array(value, dtype=alu.DTYPES[t])[()]


# ---------------------------------------------------------------------------
# device plumbing shared by both device models

ALLOC_ALIGN = 256


@dataclass(eq=False)
class LaunchTicket:
    """Handle for one launch; ``status`` is RUNNING, COMPLETED or PAUSED."""

    device: object
    engine: Engine
    grid: tuple
    block: tuple

    @property
    def status(self) -> str:
        return self.engine.status

    @property
    def instructions(self) -> int:
        return self.engine.executed

    @property
    def barrier_visits(self) -> int:
        return self.engine.barrier_visits

    @property
    def trace(self):
        return self.engine.trace


class DeviceBase:
    """Global memory, a first-fit allocator, the control block and launch tickets."""

    def __init__(self, desc):
        problems = desc.check()
        if problems:
            raise ValueError("invalid device description: " + "; ".join(problems))
        self.desc = desc
        self.mem = np.zeros(desc.global_mem_bytes, dtype=np.uint8)
        self.control = DeviceControlBlock()
        self.allocations: dict = {}  # offset -> size
        self.active: Optional[LaunchTicket] = None

    # -- allocator (offset 0 is never handed out, so a zero pointer always faults) --

    def alloc(self, size: int) -> int:
        from .errors import OOMError

        size = max(int(size), 1)
        rounded = -(-size // ALLOC_ALIGN) * ALLOC_ALIGN
        cursor = ALLOC_ALIGN
        for off in sorted(self.allocations):
            if off - cursor >= rounded:
                break
            cursor = max(cursor, off + -(-self.allocations[off] // ALLOC_ALIGN) * ALLOC_ALIGN)
        if cursor + rounded > len(self.mem):
            raise OOMError(f"cannot allocate {size} bytes: device memory exhausted")
        self.allocations[cursor] = size
        return cursor

    def free(self, offset: int):
        if offset not in self.allocations:
            raise StateError(f"no allocation at offset {offset:#x}")
        del self.allocations[offset]

    def regions(self) -> list:
        return [(o, o + s) for o, s in self.allocations.items()]

    # -- host access -----------------------------------------------------------------

    def _range(self, offset: int, length: int):
        if offset < 0 or length < 0 or offset + length > len(self.mem):
            raise FaultError(
                f"host access [{offset:#x}, {offset + length:#x}) outside device memory of {len(self.mem)} bytes",
                address=offset,
            )

    def read_global(self, offset: int, length: int) -> bytes:
        self._range(offset, length)
        return self.mem[offset:offset + length].tobytes()

    def write_global(self, offset: int, data) -> None:
        data = bytes(data)
        self._range(offset, len(data))
        self.mem[offset:offset + len(data)] = np.frombuffer(data, dtype=np.uint8)

    # -- launch control ----------------------------------------------------------------

    def set_pause_flag(self):
        self.control.pause_flag = True

    def completion_flags(self) -> np.ndarray:
        flags = self.control.completion_flags
        return np.zeros(0, dtype=bool) if flags is None else flags.copy()

    def _ticket(self, engine: Engine, grid, block) -> LaunchTicket:
        t = LaunchTicket(self, engine, dims3(grid), dims3(block))
        self.active = t
        return t

    def run_until_quiescent(self, ticket: LaunchTicket, budget: Optional[int] = None) -> str:
        """Run until every block finished or dumped (or ``budget`` thread-instructions elapsed)."""
        return ticket.engine.run(budget)

    def collect_block_dumps(self, ticket: LaunchTicket) -> list:
        if ticket.status == RUNNING:
            raise StateError("block dumps are only available once the launch is quiescent")
        if ticket.status == COMPLETED:
            return []
        return list(self.control.dump_area)

    # engine hooks with neutral defaults
    def log_plan(self, group, site, gen, plan):
        pass

    def log_exchange(self, group, direction, count):
        pass

    def smuggle(self, engine, group, rb):
        pass
