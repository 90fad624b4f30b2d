"""hetIR program representation, operand signatures and static validation.

A module is a list of kernels. A kernel body is a structured region tree made
of instructions, predicated blocks and loops; there are no labels or jumps, so
every divergent region reconverges at its own end.
"""

from __future__ import annotations

import enum
import hashlib
import struct
from dataclasses import dataclass, field
from typing import Iterator, Optional, Union


class SemType(enum.Enum):
    U32 = "u32"
    S32 = "s32"
    U64 = "u64"
    F32 = "f32"
    F64 = "f64"
    PRED = "pred"

    @property
    def bits(self) -> int:
        return {"u32": 32, "s32": 32, "u64": 64, "f32": 32, "f64": 64, "pred": 1}[self.value]

    @property
    def nbytes(self) -> int:
        return {"u32": 4, "s32": 4, "u64": 8, "f32": 4, "f64": 8, "pred": 1}[self.value]

    @property
    def is_float(self) -> bool:
        return self in (SemType.F32, SemType.F64)

    @property
    def is_int(self) -> bool:
        return self in (SemType.U32, SemType.S32, SemType.U64)


INT_TYPES = frozenset({SemType.U32, SemType.S32, SemType.U64})
FLOAT_TYPES = frozenset({SemType.F32, SemType.F64})
NUM_TYPES = INT_TYPES | FLOAT_TYPES
ALL_TYPES = NUM_TYPES | {SemType.PRED}

# Stable numeric tags used by the snapshot encoding. PTR marks a U64 register
# carrying a global pointer, which is rebased when a kernel changes device.
TYPE_TAGS = {
    SemType.U32: 0,
    SemType.S32: 1,
    SemType.U64: 2,
    SemType.F32: 3,
    SemType.F64: 4,
    SemType.PRED: 5,
}
PTR_TAG = 6


class MemSpace(enum.Enum):
    GLOBAL = "global"
    SHARED = "shared"
    LOCAL = "local"


class Opcode(enum.Enum):
    ADD = "ADD"
    SUB = "SUB"
    MUL = "MUL"
    DIV = "DIV"
    REM = "REM"
    FMA = "FMA"
    MIN = "MIN"
    MAX = "MAX"
    AND = "AND"
    OR = "OR"
    XOR = "XOR"
    NOT = "NOT"
    SHL = "SHL"
    SHR = "SHR"
    SETP_EQ = "SETP.EQ"
    SETP_NE = "SETP.NE"
    SETP_LT = "SETP.LT"
    SETP_LE = "SETP.LE"
    SETP_GT = "SETP.GT"
    SETP_GE = "SETP.GE"
    MOV = "MOV"
    CVT = "CVT"
    GET_GLOBAL_ID = "GET_GLOBAL_ID"
    GET_LOCAL_ID = "GET_LOCAL_ID"
    GET_BLOCK_ID = "GET_BLOCK_ID"
    GET_BLOCK_DIM = "GET_BLOCK_DIM"
    GET_GRID_DIM = "GET_GRID_DIM"
    LD = "LD"
    ST = "ST"
    ATOM_ADD = "ATOM_ADD"
    ATOM_CAS = "ATOM_CAS"
    BAR_SHARED = "BAR_SHARED"
    BAR_GLOBAL = "BAR_GLOBAL"
    VOTE_ANY = "VOTE_ANY"
    VOTE_ALL = "VOTE_ALL"
    BALLOT = "BALLOT"
    SHUFFLE = "SHUFFLE"
    SET_PREDICATE = "SET_PREDICATE"
    RETURN = "RETURN"
    # Inserted by lowering at suspension points; never written by hand.
    PAUSE_CHECK = "PAUSE_CHECK"


SETP_OPS = frozenset(
    {Opcode.SETP_EQ, Opcode.SETP_NE, Opcode.SETP_LT, Opcode.SETP_LE, Opcode.SETP_GT, Opcode.SETP_GE}
)
ID_OPS = frozenset(
    {Opcode.GET_GLOBAL_ID, Opcode.GET_LOCAL_ID, Opcode.GET_BLOCK_ID, Opcode.GET_BLOCK_DIM, Opcode.GET_GRID_DIM}
)
BARRIER_OPS = frozenset({Opcode.BAR_SHARED, Opcode.BAR_GLOBAL})
COLLECTIVE_OPS = frozenset({Opcode.VOTE_ANY, Opcode.VOTE_ALL, Opcode.BALLOT, Opcode.SHUFFLE})
ATOMIC_OPS = frozenset({Opcode.ATOM_ADD, Opcode.ATOM_CAS})
MEMORY_OPS = frozenset({Opcode.LD, Opcode.ST}) | ATOMIC_OPS
# Operations every live thread of a block must reach together.
RENDEZVOUS_OPS = BARRIER_OPS | COLLECTIVE_OPS | {Opcode.PAUSE_CHECK}


@dataclass(frozen=True)
class Reg:
    """A virtual register. ``ptr`` marks a 64-bit global pointer (``<1>`` tag)."""

    id: int
    type: SemType
    ptr: bool = False

    @property
    def name(self) -> str:
        if self.type is SemType.PRED:
            return f"%p{self.id}"
        if self.type.bits == 64:
            return f"%rd{self.id}"
        return f"%r{self.id}"

    @property
    def tag(self) -> int:
        return PTR_TAG if self.ptr else TYPE_TAGS[self.type]


@dataclass(frozen=True)
class Imm:
    value: Union[int, float]


@dataclass(frozen=True)
class Addr:
    """Memory operand ``[base+offset]``; base is a register or an immediate."""

    base: Union[Reg, Imm]
    offset: int = 0


Operand = Union[Reg, Imm, Addr]


@dataclass(frozen=True)
class Instruction:
    opcode: Opcode
    type: Optional[SemType] = None
    dst: Optional[Reg] = None
    srcs: tuple = ()
    space: Optional[MemSpace] = None
    src_type: Optional[SemType] = None  # CVT only

    def regs_read(self) -> list[Reg]:
        out = []
        for s in self.srcs:
            if isinstance(s, Reg):
                out.append(s)
            elif isinstance(s, Addr) and isinstance(s.base, Reg):
                out.append(s.base)
        return out

    def regs_written(self) -> list[Reg]:
        return [self.dst] if self.dst is not None else []


@dataclass(frozen=True)
class Region:
    items: tuple = ()

    def __iter__(self):
        return iter(self.items)

    def __len__(self):
        return len(self.items)


@dataclass(frozen=True)
class PredBlock:
    pred: Reg
    then: Region
    orelse: Optional[Region] = None


@dataclass(frozen=True)
class LoopBlock:
    """Do-while loop: the body runs, then threads whose ``brk`` is true leave."""

    body: Region
    brk: Reg
    trip: Optional[int] = None


Item = Union[Instruction, PredBlock, LoopBlock]
Path = tuple


@dataclass
class KernelMeta:
    suspension_points: tuple = ()
    source_lines: dict = field(default_factory=dict, compare=False)


@dataclass
class Kernel:
    name: str
    params: tuple
    registers: tuple
    body: Region
    shared_mem_bytes: int = 0
    local_mem_bytes: int = 0
    meta: Optional[KernelMeta] = None

    def __post_init__(self):
        self.params = tuple(self.params)
        self.registers = tuple(sorted(self.registers, key=lambda r: r.id))
        if self.meta is None:
            self.meta = KernelMeta()
        self.meta.suspension_points = tuple(suspension_points(self))

    def all_regs(self) -> tuple:
        return self.params + self.registers

    def reg_table(self) -> dict:
        return {r.id: r for r in self.all_regs()}

    def next_reg_id(self) -> int:
        ids = [r.id for r in self.all_regs()]
        return max(ids) + 1 if ids else 0

    @property
    def exit_path(self) -> Path:
        return (len(self.body.items),)


@dataclass
class Module:
    kernels: tuple
    version: int = 1

    def __post_init__(self):
        self.kernels = tuple(self.kernels)

    def kernel(self, name: str) -> Kernel:
        for k in self.kernels:
            if k.name == name:
                return k
        raise KeyError(name)

    @property
    def module_id(self) -> str:
        from .asm import print_module

        return hashlib.sha256(print_module(self)).hexdigest()


# ---------------------------------------------------------------------------
# operand signatures


@dataclass(frozen=True)
class OperandSignature:
    """Operand shape of an opcode.

    Operand entries are a SemType, ``"T"`` (the instruction type), ``"ADDR"``
    (memory operand), ``"DIM"`` (dimension immediate 0..2) or ``"RID"``
    (resume-point immediate). ``result`` uses the same vocabulary or None.
    """

    operands: tuple
    result: object
    types: frozenset
    typed: bool = True

    @property
    def arity(self) -> int:
        return len(self.operands)

    def resolve(self, t: Optional[SemType]) -> tuple:
        def sub(x):
            return t if x == "T" else x

        return tuple(sub(x) for x in self.operands), sub(self.result)


_BIN_NUM = OperandSignature(("T", "T"), "T", NUM_TYPES)
_SIGS = {
    Opcode.ADD: _BIN_NUM,
    Opcode.SUB: _BIN_NUM,
    Opcode.MUL: _BIN_NUM,
    Opcode.DIV: _BIN_NUM,
    Opcode.REM: OperandSignature(("T", "T"), "T", INT_TYPES),
    Opcode.FMA: OperandSignature(("T", "T", "T"), "T", NUM_TYPES),
    Opcode.MIN: _BIN_NUM,
    Opcode.MAX: _BIN_NUM,
    Opcode.AND: OperandSignature(("T", "T"), "T", INT_TYPES | {SemType.PRED}),
    Opcode.OR: OperandSignature(("T", "T"), "T", INT_TYPES | {SemType.PRED}),
    Opcode.XOR: OperandSignature(("T", "T"), "T", INT_TYPES | {SemType.PRED}),
    Opcode.NOT: OperandSignature(("T",), "T", INT_TYPES | {SemType.PRED}),
    Opcode.SHL: OperandSignature(("T", SemType.U32), "T", INT_TYPES),
    Opcode.SHR: OperandSignature(("T", SemType.U32), "T", INT_TYPES),
    Opcode.SETP_EQ: OperandSignature(("T", "T"), SemType.PRED, ALL_TYPES),
    Opcode.SETP_NE: OperandSignature(("T", "T"), SemType.PRED, ALL_TYPES),
    Opcode.SETP_LT: OperandSignature(("T", "T"), SemType.PRED, NUM_TYPES),
    Opcode.SETP_LE: OperandSignature(("T", "T"), SemType.PRED, NUM_TYPES),
    Opcode.SETP_GT: OperandSignature(("T", "T"), SemType.PRED, NUM_TYPES),
    Opcode.SETP_GE: OperandSignature(("T", "T"), SemType.PRED, NUM_TYPES),
    Opcode.MOV: OperandSignature(("T",), "T", ALL_TYPES),
    # CVT's single operand has the instruction's src_type; checked separately.
    Opcode.CVT: OperandSignature(("SRC",), "T", NUM_TYPES),
    Opcode.LD: OperandSignature(("ADDR",), "T", NUM_TYPES),
    Opcode.ST: OperandSignature(("ADDR", "T"), None, NUM_TYPES),
    Opcode.ATOM_ADD: OperandSignature(("ADDR", "T"), "T", INT_TYPES),
    Opcode.ATOM_CAS: OperandSignature(("ADDR", "T", "T"), "T", INT_TYPES),
    Opcode.BAR_SHARED: OperandSignature((), None, frozenset(), typed=False),
    Opcode.BAR_GLOBAL: OperandSignature((), None, frozenset(), typed=False),
    Opcode.VOTE_ANY: OperandSignature((SemType.PRED,), SemType.PRED, frozenset({SemType.PRED}), typed=False),
    Opcode.VOTE_ALL: OperandSignature((SemType.PRED,), SemType.PRED, frozenset({SemType.PRED}), typed=False),
    Opcode.BALLOT: OperandSignature((SemType.PRED,), SemType.U64, frozenset({SemType.U64}), typed=False),
    Opcode.SHUFFLE: OperandSignature((SemType.U32, "T"), "T", ALL_TYPES),
    Opcode.SET_PREDICATE: OperandSignature(("T",), SemType.PRED, NUM_TYPES),
    Opcode.RETURN: OperandSignature((), None, frozenset(), typed=False),
    Opcode.PAUSE_CHECK: OperandSignature(("RID",), None, frozenset(), typed=False),
}
for _op in ID_OPS:
    _SIGS[_op] = OperandSignature(("DIM",), SemType.U32, frozenset({SemType.U32}), typed=False)

CVT_SRC_TYPES = NUM_TYPES | {SemType.PRED}


def signature_of(opcode: Opcode, sem_type: Optional[SemType] = None) -> OperandSignature:
    """Operand signature of ``opcode``; with ``sem_type`` the ``"T"`` slots are filled in."""
    sig = _SIGS[opcode]
    if sem_type is None or not sig.typed:
        return sig
    ops, res = sig.resolve(sem_type)
    return OperandSignature(ops, res, sig.types, sig.typed)


def default_type(opcode: Opcode) -> Optional[SemType]:
    """The fixed instruction type of an untyped opcode."""
    sig = _SIGS[opcode]
    if sig.typed:
        return None
    return sig.result if isinstance(sig.result, SemType) else None


# ---------------------------------------------------------------------------
# tree walking


def iter_items(region: Region, prefix: Path = ()) -> Iterator[tuple]:
    """Pre-order walk yielding ``(path, item)``.

    A path alternates item indices and branch selectors: 0 is the then-region
    or loop body, 1 the else-region.
    """
    for i, item in enumerate(region.items):
        path = prefix + (i,)
        yield path, item
        if isinstance(item, PredBlock):
            yield from iter_items(item.then, path + (0,))
            if item.orelse is not None:
                yield from iter_items(item.orelse, path + (1,))
        elif isinstance(item, LoopBlock):
            yield from iter_items(item.body, path + (0,))


def item_at(region: Region, path: Path):
    item = region.items[path[0]]
    rest = path[1:]
    while rest:
        sel, idx = rest[0], rest[1]
        if isinstance(item, PredBlock):
            sub = item.then if sel == 0 else item.orelse
        else:
            sub = item.body
        item = sub.items[idx]
        rest = rest[2:]
    return item


def barrier_sites(kernel: Kernel) -> list:
    return [
        p for p, it in iter_items(kernel.body)
        if isinstance(it, Instruction) and it.opcode in BARRIER_OPS
    ]


def suspension_points(kernel: Kernel) -> list:
    return barrier_sites(kernel) + [kernel.exit_path]


# ---------------------------------------------------------------------------
# uniformity


_DIVERGENT_SOURCES = frozenset(
    {Opcode.GET_GLOBAL_ID, Opcode.GET_LOCAL_ID, Opcode.LD, Opcode.ATOM_ADD, Opcode.ATOM_CAS, Opcode.SHUFFLE}
)
_UNIFORM_RESULTS = frozenset({Opcode.VOTE_ANY, Opcode.VOTE_ALL, Opcode.BALLOT})


def divergent_registers(kernel: Kernel) -> set:
    """Ids of registers whose value may differ between live threads of one block.

    Thread ids, loads, atomics and shuffles are divergent sources; values
    combined from divergent inputs, or defined under divergent control, are
    divergent. Iterated to a fixed point so loop-carried values settle.
    """
    div: set = set()

    def walk(region: Region, ctl_div: bool) -> bool:
        changed = False
        for item in region.items:
            if isinstance(item, Instruction):
                d = item.dst
                if d is None or d.id in div:
                    continue
                if item.opcode in _UNIFORM_RESULTS and not ctl_div:
                    continue
                if (
                    ctl_div
                    or item.opcode in _DIVERGENT_SOURCES
                    or any(r.id in div for r in item.regs_read())
                ):
                    div.add(d.id)
                    changed = True
            elif isinstance(item, PredBlock):
                inner = ctl_div or item.pred.id in div
                changed |= walk(item.then, inner)
                if item.orelse is not None:
                    changed |= walk(item.orelse, inner)
            elif isinstance(item, LoopBlock):
                # Break predicate is evaluated after the body; decide with the
                # current estimate, and rerun until stable.
                inner = ctl_div or item.brk.id in div
                changed |= walk(item.body, inner)
        return changed

    while walk(kernel.body, False):
        pass
    return div


def divergent_control(kernel: Kernel) -> dict:
    """Map path -> True when the item at path can be reached by only part of a block."""
    div = divergent_registers(kernel)
    out = {}

    def walk(region: Region, prefix: Path, ctl: bool):
        for i, item in enumerate(region.items):
            path = prefix + (i,)
            out[path] = ctl
            if isinstance(item, PredBlock):
                inner = ctl or item.pred.id in div
                walk(item.then, path + (0,), inner)
                if item.orelse is not None:
                    walk(item.orelse, path + (1,), inner)
            elif isinstance(item, LoopBlock):
                walk(item.body, path + (0,), ctl or item.brk.id in div)

    walk(kernel.body, (), False)
    return out


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Diagnostic:
    kernel: str
    path: Path
    message: str

    def __str__(self) -> str:
        where = ".".join(str(p) for p in self.path)
        return f"{self.kernel}@{where}: {self.message}"


@dataclass
class ValidationReport:
    diagnostics: list
    module_id: Optional[bytes] = None

    @property
    def ok(self) -> bool:
        return not self.diagnostics


_F32_MAX = struct.unpack("<f", b"\xff\xff\x7f\x7f")[0]


def imm_fits(value, t: SemType) -> bool:
    if t is SemType.PRED:
        return isinstance(value, int) and not isinstance(value, bool) and value in (0, 1)
    if t.is_int:
        if not isinstance(value, int) or isinstance(value, bool):
            return False
        if t is SemType.U32:
            return 0 <= value < 1 << 32
        if t is SemType.S32:
            return -(1 << 31) <= value < 1 << 31
        return 0 <= value < 1 << 64
    if not isinstance(value, float):
        return False
    if t is SemType.F32 and value == value and abs(value) != float("inf"):
        if abs(value) > _F32_MAX:
            return False
        return struct.unpack("<f", struct.pack("<f", value))[0] == value
    return True


def check_instruction(ins: Instruction, kernel: Optional[Kernel] = None) -> list:
    """Operand checks against the signature table. Returns a list of messages."""
    msgs = []
    sig = _SIGS.get(ins.opcode)
    if sig is None:
        return [f"unknown opcode {ins.opcode}"]
    mnem = ins.opcode.value
    t = ins.type
    if sig.typed:
        if t not in sig.types:
            msgs.append(f"{mnem} does not accept type {t.value if t else None}")
            return msgs
    elif t != default_type(ins.opcode):
        msgs.append(f"{mnem} is untyped")
        return msgs
    ops, res = sig.resolve(t)
    if ins.opcode is Opcode.CVT:
        if ins.src_type not in CVT_SRC_TYPES:
            msgs.append("CVT requires a numeric or predicate source type")
            return msgs
        ops = (ins.src_type,)
    elif ins.src_type is not None:
        msgs.append(f"{mnem} takes no source type")
    want = len(ops) + (1 if res is not None else 0)
    got = len(ins.srcs) + (1 if ins.dst is not None else 0)
    if res is not None and ins.dst is None or res is None and ins.dst is not None or len(ops) != len(ins.srcs):
        msgs.append(f"{mnem} signature arity mismatch: expects {want} operands, got {got}")
        return msgs
    if ins.dst is not None and ins.dst.type is not res:
        msgs.append(f"{mnem} result type {res.value} does not match {ins.dst.name} ({ins.dst.type.value})")
    if ins.opcode in MEMORY_OPS:
        if ins.opcode in ATOMIC_OPS and ins.space is not MemSpace.GLOBAL:
            msgs.append(f"{mnem} requires GLOBAL memory")
        if ins.space is None:
            msgs.append(f"{mnem} requires a memory space")
    elif ins.space is not None:
        msgs.append(f"{mnem} takes no memory space")
    for want_t, src in zip(ops, ins.srcs):
        if want_t == "ADDR":
            if not isinstance(src, Addr):
                msgs.append(f"{mnem} expects a memory operand")
                continue
            if ins.space is MemSpace.GLOBAL:
                if not (isinstance(src.base, Reg) and src.base.ptr):
                    msgs.append(f"{mnem} global address must be a pointer register")
            elif isinstance(src.base, Reg):
                if src.base.type is not SemType.U32 or src.base.ptr:
                    msgs.append(f"{mnem} {ins.space.value if ins.space else ''} address must be u32")
            elif not imm_fits(src.base.value, SemType.U32):
                msgs.append(f"{mnem} address immediate out of range")
            if not -(1 << 31) <= src.offset < 1 << 31:
                msgs.append(f"{mnem} address offset out of range")
        elif want_t in ("DIM", "RID"):
            if not isinstance(src, Imm) or not isinstance(src.value, int) or isinstance(src.value, bool):
                msgs.append(f"{mnem} expects an integer immediate")
            elif want_t == "DIM" and not 0 <= src.value <= 2:
                msgs.append(f"{mnem} dimension must be 0, 1 or 2")
            elif want_t == "RID" and src.value < 0:
                msgs.append(f"{mnem} resume id must be non-negative")
        elif isinstance(src, Reg):
            if src.type is not want_t:
                msgs.append(f"{mnem} operand {src.name} has type {src.type.value}, expected {want_t.value}")
        elif isinstance(src, Imm):
            if not imm_fits(src.value, want_t):
                msgs.append(f"{mnem} immediate {src.value!r} does not fit {want_t.value}")
        else:
            msgs.append(f"{mnem} unexpected memory operand")
    msgs.extend(_check_pointers(ins))
    return msgs


def _check_pointers(ins: Instruction) -> list:
    ptr_srcs = [s for s in ins.srcs if isinstance(s, Reg) and s.ptr]
    if ins.dst is not None and ins.dst.ptr:
        if ins.dst.type is not SemType.U64:
            return ["pointer register must be u64"]
        if ins.opcode not in (Opcode.MOV, Opcode.ADD, Opcode.SUB) or len(ptr_srcs) != 1:
            return ["pointer register must derive from exactly one pointer by MOV/ADD/SUB"]
        if ins.opcode is Opcode.SUB and not (isinstance(ins.srcs[0], Reg) and ins.srcs[0].ptr):
            return ["pointer SUB must subtract from the pointer operand"]
        return []
    if ptr_srcs and ins.opcode not in SETP_OPS:
        return ["pointer value escapes into a non-pointer value"]
    return []


def _validate_kernel(kernel: Kernel) -> list:
    diags = []

    def diag(path, msg):
        diags.append(Diagnostic(kernel.name, path, msg))

    declared: dict = {}
    for r in kernel.all_regs():
        if r.id in declared:
            diag((), f"duplicate register id {r.id}")
        declared[r.id] = r
        if r.ptr and r.type is not SemType.U64:
            diag((), f"pointer register {r.name} must be u64")
    if kernel.shared_mem_bytes < 0 or kernel.local_mem_bytes < 0:
        diag((), "negative memory size")

    for path, item in iter_items(kernel.body):
        regs = []
        if isinstance(item, Instruction):
            for m in check_instruction(item, kernel):
                diag(path, m)
            regs = item.regs_read() + item.regs_written()
            if item.opcode in (Opcode.LD, Opcode.ST) and item.space in (MemSpace.SHARED, MemSpace.LOCAL):
                size = kernel.shared_mem_bytes if item.space is MemSpace.SHARED else kernel.local_mem_bytes
                what = "store" if item.opcode is Opcode.ST else "load"
                if size == 0:
                    diag(path, f"{item.space.value} {what} without {item.space.value} allocation")
                else:
                    a = item.srcs[0]
                    if isinstance(a, Addr) and isinstance(a.base, Imm) and isinstance(a.base.value, int):
                        end = a.base.value + a.offset + (item.type.nbytes if item.type else 0)
                        if end > size:
                            diag(path, f"{item.space.value} {what} out of bounds")
        elif isinstance(item, PredBlock):
            regs = [item.pred]
            if item.pred.type is not SemType.PRED:
                diag(path, "predicated block needs a predicate register")
        elif isinstance(item, LoopBlock):
            regs = [item.brk]
            if item.brk.type is not SemType.PRED:
                diag(path, "loop break needs a predicate register")
            if item.trip is not None and item.trip < 0:
                diag(path, "negative trip annotation")
        for r in regs:
            d = declared.get(r.id)
            if d is None:
                diag(path, f"undeclared register {r.name}")
            elif d != r:
                diag(path, f"register {r.name} used with a type differing from its declaration")

    if diags:
        return diags

    _check_definitions(kernel, diag)

    ctl = divergent_control(kernel)
    for path, item in iter_items(kernel.body):
        if isinstance(item, Instruction) and item.opcode in RENDEZVOUS_OPS and ctl[path]:
            kind = "barrier" if item.opcode in BARRIER_OPS else "collective"
            diag(path, f"{kind} under divergent control")
    return diags


_ALL = None  # "every register" - the defined set after a RETURN


def _check_definitions(kernel: Kernel, diag) -> None:
    reported = set()

    def use(path, r, defined):
        if defined is not _ALL and r.id not in defined and (path, r.id) not in reported:
            reported.add((path, r.id))
            diag(path, f"use before definition of {r.name}")

    def meet(a, b):
        if a is _ALL:
            return b
        if b is _ALL:
            return a
        return a & b

    def walk(region: Region, prefix: Path, defined):
        for i, item in enumerate(region.items):
            path = prefix + (i,)
            if isinstance(item, Instruction):
                for r in item.regs_read():
                    use(path, r, defined)
                if item.opcode is Opcode.RETURN:
                    defined = _ALL
                elif item.dst is not None and defined is not _ALL:
                    defined = defined | {item.dst.id}
            elif isinstance(item, PredBlock):
                use(path, item.pred, defined)
                t = walk(item.then, path + (0,), defined)
                e = walk(item.orelse, path + (1,), defined) if item.orelse is not None else defined
                defined = meet(t, e)
            elif isinstance(item, LoopBlock):
                out = walk(item.body, path + (0,), defined)
                use(path, item.brk, out)
                defined = out
        return defined

    walk(kernel.body, (), frozenset(r.id for r in kernel.params))


def validate(module: Module) -> ValidationReport:
    diags = []
    seen = set()
    if not module.kernels:
        diags.append(Diagnostic("", (), "module has no kernels"))
    for k in module.kernels:
        if k.name in seen:
            diags.append(Diagnostic(k.name, (), f"duplicate kernel name {k.name}"))
        seen.add(k.name)
        diags.extend(_validate_kernel(k))
    return ValidationReport(diags, None if diags else module.module_id)


def validate_kernel(kernel: Kernel) -> list:
    return _validate_kernel(kernel)


def block_threads(block) -> int:
    n = 1
    for d in block:
        n *= d
    return n


def check_launch_shape(kernel: Kernel, block) -> list:
    """Launch-time checks that depend on the block shape."""
    msgs = []
    uses_ballot = any(
        isinstance(it, Instruction) and it.opcode is Opcode.BALLOT for _, it in iter_items(kernel.body)
    )
    if uses_ballot and block_threads(block) > 64:
        msgs.append("BALLOT requires blocks of at most 64 threads")
    return msgs


# ---------------------------------------------------------------------------
# device capability records


class DeviceModel(enum.Enum):
    SIMT = "simt"
    MIMD = "mimd"


def _pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


@dataclass(frozen=True)
class DeviceDesc:
    """Capabilities of a simulated device.

    For SIMT devices ``core_count`` is the number of multiprocessors, each of
    which holds one resident block; for MIMD devices it is the number of
    cores, each with a ``lane_count``-wide vector unit and a private
    scratchpad.
    """

    model: DeviceModel
    warp_width: int = 32
    core_count: int = 4
    lane_count: int = 32
    scratchpad_bytes: int = 64 * 1024
    global_mem_bytes: int = 1 << 20
    max_threads_per_block: int = 1024

    def check(self) -> list:
        msgs = []
        if self.global_mem_bytes <= 0:
            msgs.append("global memory size must be positive")
        if self.core_count <= 0:
            msgs.append("core count must be positive")
        if self.scratchpad_bytes < 0:
            msgs.append("scratchpad size must be non-negative")
        if self.model is DeviceModel.SIMT and not _pow2(self.warp_width):
            msgs.append("warp width must be a positive power of two")
        if self.model is DeviceModel.MIMD and not _pow2(self.lane_count):
            msgs.append("lane count must be a positive power of two")
        if self.max_threads_per_block <= 0:
            msgs.append("max threads per block must be positive")
        return msgs
