"""Architecture-neutral kernel state: capture, wire format, restore, migration.

Blob wire format (``.hgpb``), all integers little-endian::

    "HGPB"  u16 version=1  u16 flags=0
    section HEAD  u32 length, then
        str module_id, str kernel_name, u32 grid[3], u32 block[3], u32 segment_interval
    section ARGS  u32 length, then u32 count, count x (u8 kind, u8 tag, u64 value)
                  kind 0 = scalar (tag = type tag, value = zero-extended bits)
                  kind 1 = virtual pointer (value = vp id)
    section DONE  u32 length, then u32 block_count, ceil(block_count/8) bitmap bytes
    section DUMP  u32 length, then u32 count, count x dump:
        u32 block_index[3], u32 resume_id, u32 thread_count, u32 reg_count,
        reg_count x (u32 reg_id, u8 tag), ceil(thread_count/8) exited bitmap bytes,
        thread_count*reg_count u64 register slots (thread-major),
        u32 length + shared bytes, u32 length + local bytes
    section MEM   u32 length, then u32 count, count x (u32 vp_id, u64 size, size bytes)
    u64 FNV-1a-64 checksum of every preceding byte

Strings are u16 length + UTF-8. Bitmaps are LSB-first. Pointer-typed register
slots hold virtual addresses: ``vp_id << 40 | (offset within the allocation,
40-bit two's complement)``; vp id 0 marks an address outside every
allocation, kept as its low 40 bits.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import alu
from .engine import COMPLETED, PAUSED, BlockDump, PauseTrigger, ResumeBlock, ResumeState, dims3, unlinear_index
from .errors import HetGPUError, StateError
from .ir import PTR_TAG, TYPE_TAGS, SemType, block_threads
from .lowering import LoweringConfig, prepare_kernel
from .runtime import HOST, LaunchOp, Runtime, Stream, VirtualPointer, get_runtime

MAGIC = b"HGPB"
FORMAT_VERSION = 1
VP_SHIFT = 40
VP_MASK = (1 << VP_SHIFT) - 1
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3

ARG_SCALAR = 0
ARG_POINTER = 1

_TAG_TYPES = {tag: t for t, tag in TYPE_TAGS.items()}

__all__ = [
    "BlockDump", "StateBlob", "BlobFormatError", "ResumePlan", "MigrationReport", "MigrationError",
    "serialize", "deserialize", "checkpoint", "restore", "migrate", "check_blob", "fnv1a64",
]


class BlobFormatError(StateError):
    """A blob that cannot be decoded (bad magic/version, truncation, checksum)."""


class MigrationError(StateError):
    def __init__(self, message: str, report: "MigrationReport"):
        super().__init__(message)
        self.report = report


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


@dataclass(eq=False)
class StateBlob:
    module_id: str
    kernel_name: str
    grid: tuple
    block: tuple
    segment_interval: int
    args: list  # (kind, tag, value)
    completed: np.ndarray  # bool per block (linear order)
    dumps: list  # BlockDump, ascending block order
    memory: list  # (vp_id, size, bytes)
    format_version: int = FORMAT_VERSION

    @property
    def idle(self) -> bool:
        return not self.kernel_name

    @property
    def finished(self) -> bool:
        return not self.dumps

    def memory_bytes(self) -> int:
        return sum(size for _, size, _ in self.memory)

    def __eq__(self, other) -> bool:
        if not isinstance(other, StateBlob):
            return NotImplemented
        return (
            self.format_version == other.format_version
            and self.module_id == other.module_id
            and self.kernel_name == other.kernel_name
            and tuple(self.grid) == tuple(other.grid)
            and tuple(self.block) == tuple(other.block)
            and self.segment_interval == other.segment_interval
            and [tuple(a) for a in self.args] == [tuple(a) for a in other.args]
            and np.array_equal(self.completed, other.completed)
            and self.dumps == other.dumps
            and [(v, s, bytes(d)) for v, s, d in self.memory] == [(v, s, bytes(d)) for v, s, d in other.memory]
        )

    def summary(self) -> str:
        lines = [
            f"format_version={self.format_version}",
            f"module_id={self.module_id}",
            f"kernel={self.kernel_name or '-'}",
            f"grid={'x'.join(map(str, self.grid))}",
            f"block={'x'.join(map(str, self.block))}",
            f"segment_interval={self.segment_interval}",
            f"args={len(self.args)}",
            f"blocks_completed={int(np.count_nonzero(self.completed))}/{len(self.completed)}",
            f"block_dumps={len(self.dumps)}",
        ]
        for d in self.dumps:
            lines.append(
                f"dump block={','.join(map(str, d.block_index))} resume_id={d.resume_point_id} "
                f"threads={d.thread_count} regs={len(d.reg_ids)} exited={int(np.count_nonzero(d.exited))} "
                f"shared_bytes={len(d.shared_mem)} local_bytes={len(d.local_mem)}"
            )
        lines.append(f"memory_sections={len(self.memory)}")
        lines.append(f"memory_bytes={self.memory_bytes()}")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# wire format


def _bits(flags) -> bytes:
    return np.packbits(np.asarray(flags, dtype=bool), bitorder="little").tobytes()


def _str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


def _section(payload: bytes) -> bytes:
    return struct.pack("<I", len(payload)) + payload


def serialize(blob: StateBlob) -> bytes:
    head = _str(blob.module_id) + _str(blob.kernel_name)
    head += struct.pack("<3I", *dims3(blob.grid)) + struct.pack("<3I", *dims3(blob.block))
    head += struct.pack("<I", blob.segment_interval)
    args = struct.pack("<I", len(blob.args)) + b"".join(struct.pack("<BBQ", k, t, v) for k, t, v in blob.args)
    done = struct.pack("<I", len(blob.completed)) + _bits(blob.completed)
    dumps = [struct.pack("<I", len(blob.dumps))]
    for d in blob.dumps:
        n, r = d.thread_count, len(d.reg_ids)
        dumps.append(struct.pack("<3I", *dims3(d.block_index)))
        dumps.append(struct.pack("<III", d.resume_point_id, n, r))
        dumps.append(b"".join(struct.pack("<IB", rid, tag) for rid, tag in zip(d.reg_ids, d.tags)))
        dumps.append(_bits(d.exited))
        dumps.append(np.ascontiguousarray(d.values, dtype="<u8").reshape(n, r).tobytes())
        dumps.append(struct.pack("<I", len(d.shared_mem)) + bytes(d.shared_mem))
        dumps.append(struct.pack("<I", len(d.local_mem)) + bytes(d.local_mem))
    mem = [struct.pack("<I", len(blob.memory))]
    for vp_id, size, data in blob.memory:
        if len(data) != size:
            raise StateError(f"memory section of vp {vp_id} holds {len(data)} bytes, expected {size}")
        mem.append(struct.pack("<IQ", vp_id, size) + bytes(data))
    body = MAGIC + struct.pack("<HH", blob.format_version, 0)
    body += _section(head) + _section(args) + _section(done) + _section(b"".join(dumps)) + _section(b"".join(mem))
    return body + struct.pack("<Q", fnv1a64(body))


class _Reader:
    def __init__(self, data: bytes, start: int = 0, end: Optional[int] = None, what: str = "blob"):
        self.data = data
        self.pos = start
        self.end = len(data) if end is None else end
        self.what = what

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > self.end:
            raise BlobFormatError(f"unexpected end of {self.what} at byte {self.pos} (needed {n} more)")
        b = self.data[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def str(self) -> str:
        (n,) = self.unpack("<H")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise BlobFormatError(f"malformed string in {self.what}")

    def bits(self, count: int) -> np.ndarray:
        raw = np.frombuffer(self.take((count + 7) // 8), dtype=np.uint8)
        return np.unpackbits(raw, bitorder="little")[:count].astype(bool)

    def section(self, name: str) -> "_Reader":
        (n,) = self.unpack("<I")
        start = self.pos
        self.take(n)
        return _Reader(self.data, start, start + n, f"{name} section")

    def done(self):
        if self.pos != self.end:
            raise BlobFormatError(f"{self.end - self.pos} trailing bytes in {self.what}")


def deserialize(data: bytes) -> StateBlob:
    data = bytes(data)
    if len(data) < 8 + 8:
        raise BlobFormatError("unexpected end of blob: too short for header and checksum")
    if data[:4] != MAGIC:
        raise BlobFormatError("not a state blob (bad magic)")
    (stored,) = struct.unpack("<Q", data[-8:])
    if fnv1a64(data[:-8]) != stored:
        raise BlobFormatError("checksum mismatch: blob is corrupted")
    r = _Reader(data, 4, len(data) - 8)
    version, flags = r.unpack("<HH")
    if version != FORMAT_VERSION:
        raise BlobFormatError(f"unsupported blob format version {version}")
    if flags != 0:
        raise BlobFormatError(f"unknown blob flags {flags:#x}")
    h = r.section("HEAD")
    module_id, kernel_name = h.str(), h.str()
    grid, block = h.unpack("<3I"), h.unpack("<3I")
    (segx,) = h.unpack("<I")
    h.done()
    a = r.section("ARGS")
    (n,) = a.unpack("<I")
    args = [a.unpack("<BBQ") for _ in range(n)]
    a.done()
    for kind, tag, _ in args:
        if kind not in (ARG_SCALAR, ARG_POINTER) or tag not in _TAG_TYPES and tag != PTR_TAG:
            raise BlobFormatError(f"bad argument record (kind {kind}, tag {tag})")
    d = r.section("DONE")
    (nblocks,) = d.unpack("<I")
    if nblocks != block_threads(grid):
        raise BlobFormatError("completion bitmap does not match the grid")
    completed = d.bits(nblocks)
    d.done()
    s = r.section("DUMP")
    (ndumps,) = s.unpack("<I")
    dumps = []
    for _ in range(ndumps):
        bidx = s.unpack("<3I")
        rid, threads, nregs = s.unpack("<III")
        if threads != block_threads(block):
            raise BlobFormatError("dump thread count does not match the block")
        regs = [s.unpack("<IB") for _ in range(nregs)]
        exited = s.bits(threads)
        values = np.frombuffer(s.take(8 * threads * nregs), dtype="<u8").astype(np.uint64).reshape(threads, nregs)
        (ls,) = s.unpack("<I")
        shared = s.take(ls)
        (ll,) = s.unpack("<I")
        local = s.take(ll)
        dumps.append(BlockDump(
            block_index=tuple(bidx), resume_point_id=rid, thread_count=threads,
            reg_ids=tuple(x for x, _ in regs), tags=tuple(t for _, t in regs), values=values,
            exited=exited, shared_mem=shared, local_mem=local,
        ))
    s.done()
    m = r.section("MEM")
    (nmem,) = m.unpack("<I")
    memory = []
    for _ in range(nmem):
        vp_id, size = m.unpack("<IQ")
        memory.append((vp_id, size, m.take(size)))
    m.done()
    r.done()
    return StateBlob(module_id, kernel_name, tuple(grid), tuple(block), segx, args, completed, dumps, memory, version)


def check_blob(blob: StateBlob, kernel) -> None:
    """Every dump stores exactly the live registers of its resume point."""
    cfg = LoweringConfig(segment_interval_X=blob.segment_interval, migration_mode=True)
    _, table, live = prepare_kernel(kernel, cfg)
    for d in blob.dumps:
        if d.resume_point_id not in table.entries:
            raise StateError(f"resume point {d.resume_point_id} is not in the kernel's resume table")
        want = live[d.resume_point_id]
        if d.reg_ids != tuple(r.id for r in want) or d.tags != tuple(r.tag for r in want):
            raise StateError(
                f"block {d.block_index}: stored registers {list(d.reg_ids)} differ from the liveness table "
                f"{[r.id for r in want]} at resume point {d.resume_point_id}"
            )


# ---------------------------------------------------------------------------
# pointer virtualization


def _virtualize(values: np.ndarray, bases: list) -> np.ndarray:
    """Device addresses -> (vp_id << 40 | delta) using the allocation with the
    largest base not above the address."""
    out = np.empty_like(values)
    starts = np.array([b for b, _ in bases], dtype=np.uint64)
    ids = np.array([v for _, v in bases], dtype=np.uint64)
    for i, a in enumerate(values.tolist()):
        k = int(np.searchsorted(starts, np.uint64(a), side="right")) - 1 if len(starts) else -1
        if k < 0:
            out[i] = a & VP_MASK
        else:
            out[i] = (int(ids[k]) << VP_SHIFT) | ((a - int(starts[k])) & VP_MASK)
    return out


def _devirtualize(values: np.ndarray, base_of) -> np.ndarray:
    out = np.empty_like(values)
    for i, v in enumerate(values.tolist()):
        vid, delta = v >> VP_SHIFT, v & VP_MASK
        if vid == 0:
            out[i] = delta
            continue
        if delta >> (VP_SHIFT - 1):
            delta -= 1 << VP_SHIFT
        out[i] = (base_of(vid) + delta) & 0xFFFFFFFFFFFFFFFF
    return out


# ---------------------------------------------------------------------------
# checkpoint


def _arg_record(reg, a) -> tuple:
    if isinstance(a, VirtualPointer):
        return (ARG_POINTER, PTR_TAG, a.vp_id)
    bits = alu.to_bits(np.atleast_1d(np.array(a, dtype=alu.DTYPES[reg.type])), reg.type)
    return (ARG_SCALAR, TYPE_TAGS[reg.type], int(bits[0]))


def _memory_section(rt: Runtime) -> list:
    out = []
    for vp_id in sorted(rt.vps):
        vp = rt.vps[vp_id]
        rt.make_coherent(vp)
        out.append((vp_id, vp.size, bytes(vp.host_mirror)))
    return out


def checkpoint(stream: Stream, trigger: Optional[PauseTrigger] = None, runtime: Optional[Runtime] = None) -> StateBlob:
    """Pause the stream's kernel at its next suspension point and capture it.

    Operations queued ahead of the stream's next launch run first. With a
    ``trigger`` the pause happens when it fires; without one the pause flag is
    raised immediately. A kernel that finishes before pausing yields a blob
    recording full completion. The stream is left quiesced.
    """
    rt = runtime or get_runtime()
    with stream.lock:
        op = stream.suspended
        if op is None:
            while stream.current is None and stream.queue and not isinstance(stream.queue[0], LaunchOp):
                c = stream.queue.popleft()
                c.fn()
                c.status = COMPLETED
                stream.log.append(c)
            if stream.current is None and not stream.queue:
                return StateBlob("", "", (1, 1, 1), (1, 1, 1), 0, [], np.zeros(1, bool), [], _memory_section(rt))
            if stream.current is None:
                rt._start(stream, stream.queue.popleft())
            op = stream.current
            dev = rt.device(stream.device_id)
            if trigger is not None:
                op.trigger = op.ticket.engine.trigger = trigger
            else:
                dev.set_pause_flag()
            try:
                status = dev.run_until_quiescent(op.ticket)
            except HetGPUError as e:
                stream.current = None
                op.status = "FAULTED"
                raise StateError(f"device fault while draining for a checkpoint: {e}") from e
            rt._finish_launch(stream, op)
        return _blob_from(rt, stream, op)


def _blob_from(rt: Runtime, stream: Stream, op: LaunchOp) -> StateBlob:
    dev = rt.device(op.device_id)
    engine = op.ticket.engine
    nblocks = block_threads(op.grid)
    completed = np.array([lin in engine.completed for lin in range(nblocks)], dtype=bool)
    raw = dev.collect_block_dumps(op.ticket) if op.status == PAUSED else []
    bases = sorted((vp.backing[op.device_id], vp.vp_id) for vp in rt.vps.values() if op.device_id in vp.backing)
    dumps = []
    for d in raw:
        values = d.values.copy()
        for j, tag in enumerate(d.tags):
            if tag == PTR_TAG:
                values[:, j] = _virtualize(values[:, j], bases)
        values[d.exited] = 0
        dumps.append(BlockDump(d.block_index, d.resume_point_id, d.thread_count, d.reg_ids, d.tags, values,
                               d.exited.copy(), d.shared_mem, d.local_mem))
    args = [_arg_record(reg, a) for reg, a in zip(op.kernel.params, op.args)]
    return StateBlob(op.module.module_id, op.kernel.name, op.grid, op.block, op.cfg.segment_interval_X, args,
                     completed, dumps, _memory_section(rt))


# ---------------------------------------------------------------------------
# restore


@dataclass
class ResumePlan:
    """What a resume launch needs: per-block register staging buffers and the
    resume point each block dispatches to."""

    device_id: int
    staging: dict  # block linear index -> bytes (thread-major u64 slots, liveness order)
    dispatch: dict  # block linear index -> resume point id
    exited: dict  # block linear index -> bool array
    shared: dict
    local: dict
    tags: dict  # block -> register tags
    reg_ids: dict
    completed: frozenset
    vp_ids: tuple
    thread_count: int

    def to_state(self, base_of, program) -> ResumeState:
        blocks = {}
        for lin, rid in self.dispatch.items():
            regs = program.liveness[rid]
            if tuple(r.id for r in regs) != self.reg_ids[lin]:
                raise StateError(f"block {lin}: saved registers do not match the target's liveness table")
            values = np.frombuffer(self.staging[lin], dtype="<u8").astype(np.uint64)
            values = values.reshape(self.thread_count, len(regs)).copy()
            for j, tag in enumerate(self.tags[lin]):
                if tag == PTR_TAG:
                    values[:, j] = _devirtualize(values[:, j], base_of)
            blocks[lin] = ResumeBlock(lin, rid, tuple(regs), values, self.exited[lin], self.shared[lin], self.local[lin])
        return ResumeState(blocks, self.completed)


def restore(blob: StateBlob, device_id: int, stream: Stream, runtime: Optional[Runtime] = None) -> ResumePlan:
    """Upload the blob's memory and queue a resume launch on ``device_id``.

    The stream is rebound to ``device_id``; blocks recorded as completed are
    not re-run.
    """
    rt = runtime or get_runtime()
    rt.device(device_id)
    kernel = module = None
    if not blob.idle:
        module = rt.module(blob.module_id)
        try:
            kernel = module.kernel(blob.kernel_name)
        except KeyError:
            raise StateError(f"kernel {blob.kernel_name!r} is not in module {blob.module_id[:12]}")
        check_blob(blob, kernel)
    with stream.lock:
        for vp_id, size, data in blob.memory:
            vp = rt.adopt(vp_id, size)
            rt._check_idle(vp)
            vp.host_mirror[:] = data
            vp.valid = {HOST}
        stream.device_id = device_id
        stream.suspended = None
        nblocks = block_threads(blob.grid)
        dispatch = {}
        plan = ResumePlan(device_id, {}, dispatch, {}, {}, {}, {}, {}, frozenset(), (), block_threads(blob.block))
        if blob.idle or (blob.finished and blob.completed.all()):
            plan.completed = frozenset(range(nblocks)) if not blob.idle else frozenset()
            return plan
        for d in blob.dumps:
            lin = d.block_index[0] + d.block_index[1] * blob.grid[0] + d.block_index[2] * blob.grid[0] * blob.grid[1]
            dispatch[lin] = d.resume_point_id
            plan.staging[lin] = np.ascontiguousarray(d.values, dtype="<u8").tobytes()
            plan.exited[lin] = d.exited.copy()
            plan.shared[lin] = bytes(d.shared_mem)
            plan.local[lin] = bytes(d.local_mem)
            plan.tags[lin] = tuple(d.tags)
            plan.reg_ids[lin] = tuple(d.reg_ids)
        plan.completed = frozenset(int(i) for i in np.flatnonzero(blob.completed))
        plan.vp_ids = tuple(v for v, _, _ in blob.memory)
        args = []
        for reg, (kind, tag, value) in zip(kernel.params, blob.args):
            if kind == ARG_POINTER:
                if value not in rt.vps:
                    raise StateError(f"argument {reg.name} refers to vp {value}, which the blob does not carry")
                args.append(rt.vps[value])
            else:
                t = _TAG_TYPES[tag]
                args.append(alu.from_bits(np.array([value], dtype=np.uint64), t)[0])
        if len(args) != len(kernel.params):
            raise StateError("blob argument count does not match the kernel")
        cfg = LoweringConfig(segment_interval_X=blob.segment_interval, migration_mode=True)
        op = LaunchOp(module, kernel, dims3(blob.grid), dims3(blob.block), args, cfg, resume=plan)
        rt.enqueue_resume(stream, op)
        return plan


# ---------------------------------------------------------------------------
# migration


@dataclass
class MigrationReport:
    source: int
    target: int
    ok: bool = False
    stage: str = "checkpoint"
    checkpoint_status: str = ""
    bytes_moved: int = 0
    blob_bytes: int = 0
    blocks_resumed: int = 0
    blocks_completed: int = 0
    dump_ops: int = 0
    restore_ops: int = 0
    resume_points: tuple = ()
    error: Optional[BaseException] = None

    def text(self) -> str:
        lines = [
            f"source_device={self.source}",
            f"target_device={self.target}",
            f"ok={int(self.ok)}",
            f"stage={self.stage}",
            f"checkpoint_status={self.checkpoint_status}",
            f"bytes_moved={self.bytes_moved}",
            f"blob_bytes={self.blob_bytes}",
            f"blocks_resumed={self.blocks_resumed}",
            f"blocks_completed={self.blocks_completed}",
            f"dump_ops={self.dump_ops}",
            f"restore_ops={self.restore_ops}",
            f"resume_points={','.join(map(str, self.resume_points)) or '-'}",
        ]
        if self.error is not None:
            lines.append(f"error={self.error}")
        return "\n".join(lines)


def migrate(stream: Stream, target_device: int, trigger: Optional[PauseTrigger] = None,
            runtime: Optional[Runtime] = None) -> MigrationReport:
    """Checkpoint the stream, push the state through the wire format, and
    restore it on ``target_device``. The stream is rebound to the target."""
    rt = runtime or get_runtime()
    report = MigrationReport(stream.device_id, target_device)
    try:
        rt.device(target_device)
        blob = checkpoint(stream, trigger, rt)
        report.checkpoint_status = "IDLE" if blob.idle else (PAUSED if blob.dumps else COMPLETED)
        report.dump_ops = len(blob.dumps)
        report.blocks_completed = int(np.count_nonzero(blob.completed)) if not blob.idle else 0
        report.stage = "serialize"
        wire = serialize(blob)
        report.blob_bytes = len(wire)
        report.stage = "deserialize"
        blob = deserialize(wire)
        report.stage = "restore"
        plan = restore(blob, target_device, stream, rt)
        report.bytes_moved = blob.memory_bytes()
        report.blocks_resumed = len(plan.dispatch)
        report.restore_ops = 1 if plan.dispatch else 0
        report.resume_points = tuple(sorted(set(plan.dispatch.values())))
        report.stage = "done"
        report.ok = True
        return report
    except HetGPUError as e:
        report.error = e
        raise MigrationError(f"migration failed during {report.stage}: {e}", report) from e
