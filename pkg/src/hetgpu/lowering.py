"""Lowering: hetIR kernels to device programs.

The pipeline is

1. ``insert_segment_barriers`` — uniform outermost loops get a ``BAR_GLOBAL``
   every X iterations, bounding how long a pause request waits;
2. ``insert_pause_checks`` (migration mode) — a ``PAUSE_CHECK k`` right after
   the k-th barrier;
3. ``assign_resume_points`` — barrier sites numbered 1.. in pre-order, 0 is
   the kernel entry;
4. ``compute_liveness`` — registers each resume point must carry;
5. instruction selection into a flat code list for the SIMT or MIMD device.

The flat code keeps the region structure as bracketing control ops (``if`` /
``else`` / ``endif``, ``loop`` / ``endloop``), which the devices interpret
with a mask stack (SIMT) or a vmask stack (MIMD).
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field, replace
from typing import Optional

from .errors import LoweringError
from .ir import (
    Addr,
    BARRIER_OPS,
    COLLECTIVE_OPS,
    ID_OPS,
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
    DeviceDesc,
    DeviceModel,
    block_threads,
    divergent_control,
    divergent_registers,
    iter_items,
)


class Strategy(enum.Enum):
    SINGLE_CORE = "single_core"
    MULTI_CORE = "multi_core"
    INDEPENDENT_THREAD = "independent"


@dataclass(frozen=True)
class LoweringConfig:
    segment_interval_X: int = 64
    migration_mode: bool = False
    mimd_strategy: Strategy = Strategy.SINGLE_CORE
    partition_width: Optional[int] = None  # threads per core in MULTI_CORE; None = lane count

    def fingerprint(self) -> str:
        text = f"X={self.segment_interval_X};mig={int(self.migration_mode)};" \
               f"strategy={self.mimd_strategy.value};pw={self.partition_width}"
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class ResumeTable:
    entries: dict  # resume id -> InstructionPath (() for the kernel entry)

    def __len__(self):
        return len(self.entries)


@dataclass(frozen=True)
class LivenessTable:
    entries: dict  # resume id -> tuple of Reg, ascending id

    def __getitem__(self, rid: int) -> tuple:
        return self.entries[rid]

    def __len__(self):
        return len(self.entries)


# ---------------------------------------------------------------------------
# segment barriers


def insert_segment_barriers(kernel: Kernel, X: int) -> Kernel:
    """Give every uniform outermost loop a BAR_GLOBAL at iterations X, 2X, ...

    The iteration counter starts at 0 for the first pass through the body;
    the barrier runs at the top of the body when ``count % X == 0`` and
    ``count > 0``. Loops whose trip count may differ between threads are left
    alone, since a barrier there could never be reached by the whole block.
    """
    if X <= 0:
        raise LoweringError("segment interval must be positive")
    ctl = divergent_control(kernel)
    div = divergent_registers(kernel)
    next_id = [kernel.next_reg_id()]
    new_regs = []

    def fresh(t: SemType) -> Reg:
        r = Reg(next_id[0], t)
        next_id[0] += 1
        new_regs.append(r)
        return r

    def rewrite(region: Region, prefix: tuple) -> Region:
        items = []
        for i, item in enumerate(region.items):
            path = prefix + (i,)
            if isinstance(item, PredBlock):
                then = rewrite(item.then, path + (0,))
                orelse = rewrite(item.orelse, path + (1,)) if item.orelse is not None else None
                items.append(PredBlock(item.pred, then, orelse))
            elif isinstance(item, LoopBlock) and not ctl[path] and item.brk.id not in div:
                cnt, m = fresh(SemType.U32), fresh(SemType.U32)
                at, nz, go = fresh(SemType.PRED), fresh(SemType.PRED), fresh(SemType.PRED)
                head = (
                    Instruction(Opcode.REM, SemType.U32, m, (cnt, Imm(X))),
                    Instruction(Opcode.SETP_EQ, SemType.U32, at, (m, Imm(0))),
                    Instruction(Opcode.SETP_NE, SemType.U32, nz, (cnt, Imm(0))),
                    Instruction(Opcode.AND, SemType.PRED, go, (at, nz)),
                    PredBlock(go, Region((Instruction(Opcode.BAR_GLOBAL),))),
                    Instruction(Opcode.ADD, SemType.U32, cnt, (cnt, Imm(1))),
                )
                items.append(Instruction(Opcode.MOV, SemType.U32, cnt, (Imm(0),)))
                items.append(LoopBlock(Region(head + item.body.items), item.brk, item.trip))
            else:
                items.append(item)
        return Region(tuple(items))

    body = rewrite(kernel.body, ())
    return replace(kernel, body=body, registers=kernel.registers + tuple(new_regs), meta=None)


# ---------------------------------------------------------------------------
# resume points and pause checks


def _barrier_paths(kernel: Kernel) -> list:
    return [p for p, it in iter_items(kernel.body) if isinstance(it, Instruction) and it.opcode in BARRIER_OPS]


def assign_resume_points(kernel: Kernel) -> tuple:
    """Number barrier sites in pre-order: ``{0: entry, 1: first barrier, ...}``."""
    entries = {0: ()}
    for k, path in enumerate(_barrier_paths(kernel), start=1):
        entries[k] = path
    return kernel, ResumeTable(entries)


def insert_pause_checks(kernel: Kernel) -> Kernel:
    """Insert ``PAUSE_CHECK k`` directly after the k-th barrier site."""
    counter = [0]

    def rewrite(region: Region) -> Region:
        items = []
        for item in region.items:
            if isinstance(item, Instruction):
                items.append(item)
                if item.opcode in BARRIER_OPS:
                    counter[0] += 1
                    items.append(Instruction(Opcode.PAUSE_CHECK, None, None, (Imm(counter[0]),)))
            elif isinstance(item, PredBlock):
                then = rewrite(item.then)
                orelse = rewrite(item.orelse) if item.orelse is not None else None
                items.append(PredBlock(item.pred, then, orelse))
            else:
                items.append(LoopBlock(rewrite(item.body), item.brk, item.trip))
        return Region(tuple(items))

    return replace(kernel, body=rewrite(kernel.body), meta=None)


# ---------------------------------------------------------------------------
# liveness


def _written_params(kernel: Kernel) -> set:
    params = {r.id for r in kernel.params}
    return {
        it.dst.id for _, it in iter_items(kernel.body)
        if isinstance(it, Instruction) and it.dst is not None and it.dst.id in params
    }


def live_after_map(kernel: Kernel) -> dict:
    """Path of every instruction -> set of register ids live right after it."""
    after: dict = {}

    def instr(ins: Instruction, out: frozenset) -> frozenset:
        if ins.opcode is Opcode.RETURN:
            return frozenset()
        s = out - {r.id for r in ins.regs_written()}
        return s | {r.id for r in ins.regs_read()}

    def region(reg: Region, prefix: tuple, out: frozenset) -> frozenset:
        live = out
        for i in range(len(reg.items) - 1, -1, -1):
            item = reg.items[i]
            path = prefix + (i,)
            if isinstance(item, Instruction):
                after[path] = live
                live = instr(item, live)
            elif isinstance(item, PredBlock):
                t = region(item.then, path + (0,), live)
                e = region(item.orelse, path + (1,), live) if item.orelse is not None else live
                live = t | e | {item.pred.id}
            else:
                body_in = frozenset()
                while True:
                    end = live | body_in | {item.brk.id}
                    new_in = region(item.body, path + (0,), end)
                    if new_in == body_in:
                        break
                    body_in = new_in
                live = body_in
        return live

    entry = region(kernel.body, (), frozenset())
    after[()] = entry  # live at kernel entry
    return after


def compute_liveness(kernel: Kernel, table: ResumeTable) -> LivenessTable:
    """Registers live at each resume point, ascending by id.

    Parameters that the kernel never writes are excluded: a resumed launch
    receives them again as arguments.
    """
    after = live_after_map(kernel)
    regs = kernel.reg_table()
    skip = {r.id for r in kernel.params} - _written_params(kernel)
    out = {}
    for rid, path in table.entries.items():
        live = after[path]
        out[rid] = tuple(regs[i] for i in sorted(live) if i not in skip)
    return LivenessTable(out)


# ---------------------------------------------------------------------------
# flat device code


@dataclass(frozen=True)
class LOp:
    """One lowered operation.

    ``a`` holds kind-specific integers (jump targets, register ids, resume
    ids, site numbers). ``counted`` marks the op that completes a hetIR
    instruction; executed-instruction totals count active threads at it.
    """

    kind: str
    ins: Optional[Instruction] = None
    a: tuple = ()
    counted: bool = False
    path: Optional[tuple] = None

    def text(self) -> str:
        from .asm import format_instruction

        parts = [self.kind]
        if self.a:
            parts.append(" ".join(str(x) for x in self.a))
        if self.ins is not None:
            parts.append(format_instruction(self.ins))
        return "  ".join(parts)


@dataclass
class DeviceProgram:
    kernel_name: str
    target_model: DeviceModel
    code: tuple
    resume_table: ResumeTable
    liveness: LivenessTable
    shared_mem_bytes: int
    config_used: LoweringConfig
    kernel: Kernel = None
    strategy: Optional[Strategy] = None
    local_mem_bytes: int = 0
    resume_entries: dict = field(default_factory=dict)  # rid -> (pc, frames)
    divergence_sites: int = 0
    block_size: Optional[int] = None

    @property
    def has_pause_checks(self) -> bool:
        return any(op.kind == "pause" for op in self.code)

    def text(self) -> str:
        head = [
            f"// {self.kernel_name} for {self.target_model.value}"
            + (f" ({self.strategy.value})" if self.strategy else ""),
            f"// resume points: {dict(self.resume_table.entries)}",
        ]
        for rid, regs in self.liveness.entries.items():
            head.append(f"// live at {rid}: {' '.join(r.name for r in regs) or '-'}")
        body = [f"{pc:4d}: {op.text()}" for pc, op in enumerate(self.code)]
        return "\n".join(head + body) + "\n"


def prepare_kernel(kernel: Kernel, cfg: LoweringConfig) -> tuple:
    """Machine-independent passes; returns (kernel, resume table, liveness)."""
    k = insert_segment_barriers(kernel, cfg.segment_interval_X)
    if cfg.migration_mode:
        k = insert_pause_checks(k)
    k, table = assign_resume_points(k)
    return k, table, compute_liveness(k, table)


class _Emitter:
    def __init__(self, target: DeviceModel, strategy: Optional[Strategy], first_hidden_reg: int):
        self.code: list = []
        # registers from this id up belong to segment-barrier instrumentation;
        # instructions touching them (and the barrier they guard) are not counted;
        # pause checks always are, wherever they sit
        self.first_hidden_reg = first_hidden_reg
        self.hidden = 0
        self.target = target
        self.strategy = strategy
        self.frames: list = []  # enclosing ("if"|"else"|"loop", pc)
        self.resume: dict = {}
        self.sites = 0

    @property
    def mimd(self) -> bool:
        return self.target is DeviceModel.MIMD

    @property
    def agreeing(self) -> bool:
        return self.strategy is Strategy.MULTI_CORE

    def emit(self, kind, ins=None, a=(), counted=False, path=None) -> int:
        if counted and kind != "pause" and (self.hidden or ins is not None and any(
                r.id >= self.first_hidden_reg for r in ins.regs_read() + ins.regs_written())):
            counted = False
        self.code.append(LOp(kind, ins, tuple(a), counted, path))
        return len(self.code) - 1

    def patch(self, pc: int, a: tuple):
        self.code[pc] = replace(self.code[pc], a=tuple(a))

    def region(self, region: Region, prefix: tuple):
        for i, item in enumerate(region.items):
            path = prefix + (i,)
            if isinstance(item, Instruction):
                self.instruction(item, path)
            elif isinstance(item, PredBlock):
                self.pred_block(item, path)
            else:
                self.loop(item, path)

    def pred_block(self, item: PredBlock, path: tuple):
        names = ("vmask_push", "vmask_else", "vmask_pop") if self.mimd else ("if", "else", "endif")
        if self.agreeing:
            self.emit("agree", a=(item.pred.id, self.sites, 0), path=path)
            self.sites += 1
        head = self.emit(names[0], a=(item.pred.id, -1, -1), path=path)
        hidden = item.pred.id >= self.first_hidden_reg
        self.hidden += hidden
        self.frames.append(("if", head))
        self.region(item.then, path + (0,))
        self.frames.pop()
        self.hidden -= hidden
        else_pc = None
        if item.orelse is not None:
            else_pc = self.emit(names[1], a=(-1,), path=path)
            self.frames.append(("else", head))
            self.region(item.orelse, path + (1,))
            self.frames.pop()
        end = self.emit(names[2], path=path)
        self.patch(head, (item.pred.id, else_pc if else_pc is not None else end, end))
        if else_pc is not None:
            self.patch(else_pc, (end,))

    def loop(self, item: LoopBlock, path: tuple):
        head = self.emit("loop", path=path)
        self.frames.append(("loop", head))
        self.region(item.body, path + (0,))
        self.frames.pop()
        site = -1
        if self.agreeing:
            site = self.sites
            self.emit("agree", a=(item.brk.id, site, 1), path=path)
            self.sites += 1
        end = self.emit("endloop", a=(item.brk.id, head + 1, site), path=path)
        self.patch(head, (end,))

    def instruction(self, ins: Instruction, path: tuple):
        op = ins.opcode
        if op is Opcode.RETURN:
            self.emit("ret", ins, counted=True, path=path)
        elif op in ID_OPS:
            self.emit("id", ins, counted=True, path=path)
        elif op is Opcode.BAR_SHARED:
            self.emit("mesh_bar" if self.mimd else "bar", ins, counted=True, path=path)
        elif op is Opcode.BAR_GLOBAL:
            self.emit("gbar", ins, counted=True, path=path)
        elif op is Opcode.PAUSE_CHECK:
            rid = ins.srcs[0].value
            pc = self.emit("pause", ins, a=(rid,), counted=True, path=path)
            self.resume[rid] = (pc + 1, tuple(self.frames))
        elif op in COLLECTIVE_OPS:
            exchange = self.mimd and self.strategy is not Strategy.SINGLE_CORE
            self.emit("mesh_coll" if exchange else "coll", ins, counted=True, path=path)
        elif op in (Opcode.LD, Opcode.ST, Opcode.ATOM_ADD, Opcode.ATOM_CAS):
            self.memory(ins, path)
        else:
            self.emit("valu" if self.mimd else "alu", ins, counted=True, path=path)

    def memory(self, ins: Instruction, path: tuple):
        op = ins.opcode
        if not self.mimd:
            kind = {Opcode.LD: "ld", Opcode.ST: "st"}.get(op, "atom")
            self.emit(kind, ins, counted=True, path=path)
            return
        if op in (Opcode.ATOM_ADD, Opcode.ATOM_CAS):
            # lock word, DMA read, modify, DMA write, unlock - one lane at a time
            self.emit("addr", ins, path=path)
            self.emit("atom_lock", ins, counted=True, path=path)
            return
        scratch = ins.space is MemSpace.LOCAL or (
            ins.space is MemSpace.SHARED and self.strategy is Strategy.SINGLE_CORE
        )
        if scratch:
            self.emit("spm_ld" if op is Opcode.LD else "spm_st", ins, counted=True, path=path)
            return
        # global memory, or block shared memory kept in a global region
        self.emit("addr", ins, path=path)
        if op is Opcode.LD:
            self.emit("dma_rd", ins, path=path)
            self.emit("vload", ins, counted=True, path=path)
        else:
            self.emit("vstore", ins, path=path)
            self.emit("dma_wr", ins, counted=True, path=path)


def _lower(kernel: Kernel, desc: DeviceDesc, cfg: LoweringConfig, target: DeviceModel,
           strategy: Optional[Strategy]) -> DeviceProgram:
    k, table, live = prepare_kernel(kernel, cfg)
    em = _Emitter(target, strategy, kernel.next_reg_id())
    if cfg.migration_mode:
        em.emit("switch")
    em.region(k.body, ())
    em.emit("exit")
    entries = {0: (1 if cfg.migration_mode else 0, ())}
    entries.update(em.resume)
    return DeviceProgram(
        kernel_name=kernel.name,
        target_model=target,
        code=tuple(em.code),
        resume_table=table,
        liveness=live,
        shared_mem_bytes=kernel.shared_mem_bytes,
        config_used=cfg,
        kernel=k,
        strategy=strategy,
        local_mem_bytes=kernel.local_mem_bytes,
        resume_entries=entries,
        divergence_sites=em.sites,
    )


def lower_for_simt(kernel: Kernel, desc: DeviceDesc, cfg: LoweringConfig, block=None) -> DeviceProgram:
    if desc.model is not DeviceModel.SIMT:
        raise LoweringError("lower_for_simt needs a SIMT device")
    if block is not None and block_threads(block) > desc.max_threads_per_block:
        raise LoweringError(
            f"block of {block_threads(block)} threads exceeds the device limit of {desc.max_threads_per_block}"
        )
    prog = _lower(kernel, desc, cfg, DeviceModel.SIMT, None)
    prog.block_size = block_threads(block) if block is not None else None
    return prog


def staging_bytes(desc: DeviceDesc) -> int:
    return desc.lane_count * 8


def lower_for_mimd(kernel: Kernel, desc: DeviceDesc, cfg: LoweringConfig, block=None) -> DeviceProgram:
    if desc.model is not DeviceModel.MIMD:
        raise LoweringError("lower_for_mimd needs a MIMD device")
    strategy = cfg.mimd_strategy
    pw = cfg.partition_width or desc.lane_count
    if strategy is Strategy.SINGLE_CORE:
        need = kernel.shared_mem_bytes + staging_bytes(desc)
        if need > desc.scratchpad_bytes:
            raise LoweringError(
                f"shared memory ({kernel.shared_mem_bytes} bytes) plus DMA staging does not fit the "
                f"{desc.scratchpad_bytes}-byte scratchpad; use MULTI_CORE, which keeps shared memory in global memory"
            )
    if strategy is Strategy.MULTI_CORE:
        if pw > desc.lane_count:
            raise LoweringError("partition width exceeds the core lane count")
        if block is not None and block_threads(block) % pw:
            raise LoweringError(
                f"partition width {pw} does not divide the block size {block_threads(block)}"
            )
    prog = _lower(kernel, desc, cfg, DeviceModel.MIMD, strategy)
    prog.block_size = block_threads(block) if block is not None else None
    return prog


def lower(kernel: Kernel, desc: DeviceDesc, cfg: LoweringConfig, block=None) -> DeviceProgram:
    if desc.model is DeviceModel.SIMT:
        return lower_for_simt(kernel, desc, cfg, block)
    return lower_for_mimd(kernel, desc, cfg, block)
