"""Host runtime: device registry, virtual pointers, translation cache and streams.

Kernel arguments that hold addresses are :class:`VirtualPointer` objects. A
virtual pointer may be backed on several devices; a logically pinned host
mirror is the transport between them, and every copy is brought up to date
at synchronization points. Launches are queued per stream and executed in
enqueue order when the stream is synchronized.
"""

from __future__ import annotations

import os
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from . import asm, device_mimd, device_simt
from .engine import COMPLETED, PAUSED, RUNNING, LaunchTicket, PauseTrigger, dims3
from .errors import HetGPUError, LaunchError, StateError, ValidationError
from .ir import DeviceDesc, DeviceModel, Kernel, Module, block_threads, check_launch_shape, validate
from .lowering import DeviceProgram, LoweringConfig, Strategy, lower

HOST = "host"
DEFAULT_SEGMENT_X = 64
ENV_STRATEGY = "HETGPU_STRATEGY"
ENV_SEGMENT_X = "HETGPU_SEGMENT_X"


# ---------------------------------------------------------------------------
# memory


class VirtualPointer:
    """A device-independent allocation.

    ``backing`` maps device id to the byte offset of this allocation in that
    device's memory; ``valid`` names the copies (device ids and/or ``"host"``)
    currently holding the logical contents.
    """

    def __init__(self, vp_id: int, size: int):
        self.vp_id = vp_id
        self.size = size
        self.backing: dict = {}
        self.valid: set = {HOST}
        self.host_mirror = bytearray(size)
        self.freed = False

    def __repr__(self) -> str:
        return f"VirtualPointer(vp_id={self.vp_id}, size={self.size})"


@dataclass
class CacheStats:
    hits: int = 0
    misses: int = 0


class TranslationCache:
    """Lowered programs keyed by module, kernel, device model, lowering
    configuration and the device parameters lowering depends on."""

    def __init__(self):
        self._entries: dict = {}
        self._lock = threading.Lock()
        self.stats = CacheStats()

    def key(self, module: Module, kernel: str, desc: DeviceDesc, cfg: LoweringConfig, block) -> tuple:
        shape = (desc.lane_count, desc.scratchpad_bytes, desc.max_threads_per_block)
        return (module.module_id, kernel, desc.model.value, cfg.fingerprint(), shape, block_threads(dims3(block)))

    def get(self, module: Module, kernel: Kernel, desc: DeviceDesc, cfg: LoweringConfig, block) -> DeviceProgram:
        k = self.key(module, kernel.name, desc, cfg, block)
        with self._lock:
            prog = self._entries.get(k)
            if prog is not None:
                self.stats.hits += 1
                return prog
            self.stats.misses += 1
        prog = lower(kernel, desc, cfg, dims3(block))
        with self._lock:
            self._entries.setdefault(k, prog)
            return self._entries[k]

    def __len__(self) -> int:
        return len(self._entries)

    def clear(self):
        with self._lock:
            self._entries.clear()
            self.stats = CacheStats()


# ---------------------------------------------------------------------------
# streams


@dataclass(eq=False)
class LaunchOp:
    """A queued (or finished) kernel launch."""

    module: Module
    kernel: Kernel
    grid: tuple
    block: tuple
    args: list
    cfg: LoweringConfig
    seed: Optional[int] = None
    trigger: Optional[PauseTrigger] = None
    trace: bool = False
    resume: object = None  # snapshot.ResumePlan for launches that continue a checkpoint
    device_id: Optional[int] = None
    program: Optional[DeviceProgram] = None
    ticket: Optional[LaunchTicket] = None
    status: str = "QUEUED"

    @property
    def instructions(self) -> int:
        return self.ticket.instructions if self.ticket else 0


@dataclass(eq=False)
class CopyOp:
    fn: Callable
    description: str
    status: str = "QUEUED"


@dataclass(eq=False)
class Stream:
    stream_id: int
    device_id: int
    queue: deque = field(default_factory=deque)
    log: list = field(default_factory=list)  # executed operations, in order
    current: Optional[LaunchOp] = None  # started, not yet finished launch
    suspended: Optional[LaunchOp] = None  # launch quiesced by a checkpoint
    lock: threading.RLock = field(default_factory=threading.RLock)


# ---------------------------------------------------------------------------


def default_strategy(desc: DeviceDesc, block) -> Strategy:
    """SINGLE_CORE when a block fits one vector unit, else MULTI_CORE when the
    block splits evenly over available cores, else SINGLE_CORE strip-mined."""
    hint = os.environ.get(ENV_STRATEGY)
    if hint:
        try:
            return Strategy(hint.strip().lower())
        except ValueError:
            raise ValidationError(f"{ENV_STRATEGY}={hint!r} is not one of single_core, multi_core, independent")
    n = block_threads(dims3(block))
    if n <= desc.lane_count:
        return Strategy.SINGLE_CORE
    if n % desc.lane_count == 0 and n // desc.lane_count <= desc.core_count:
        return Strategy.MULTI_CORE
    return Strategy.SINGLE_CORE


def default_segment_interval() -> int:
    v = os.environ.get(ENV_SEGMENT_X)
    if not v:
        return DEFAULT_SEGMENT_X
    try:
        x = int(v)
    except ValueError:
        raise ValidationError(f"{ENV_SEGMENT_X}={v!r} is not an integer")
    if x <= 0:
        raise ValidationError(f"{ENV_SEGMENT_X} must be positive")
    return x


class Runtime:
    """One process-wide hetGPU context. All public methods are thread-safe."""

    def __init__(self, *, migration_mode: bool = True, segment_interval: Optional[int] = None,
                 strategy: Optional[Strategy] = None, partition_width: Optional[int] = None):
        self._lock = threading.RLock()
        self.devices: list = []
        self.vps: dict = {}
        self._next_vp = 1
        self.modules: dict = {}
        self.cache = TranslationCache()
        self.streams: list = []
        self.migration_mode = migration_mode
        self.segment_interval = segment_interval
        self.strategy = strategy
        self.partition_width = partition_width

    # -- devices ---------------------------------------------------------------

    def register_device(self, desc: DeviceDesc) -> int:
        dev = device_simt.create_device(desc) if desc.model is DeviceModel.SIMT else device_mimd.create_device(desc)
        with self._lock:
            self.devices.append(dev)
            return len(self.devices) - 1

    def enumerate_devices(self) -> list:
        return [d.desc for d in self.devices]

    def device(self, device_id: int):
        with self._lock:
            if not self.devices:
                raise StateError("no device registered")
            if not 0 <= device_id < len(self.devices):
                raise StateError(f"device {device_id} is not registered")
            return self.devices[device_id]

    # -- streams ----------------------------------------------------------------

    def create_stream(self, device_id: int = 0) -> Stream:
        self.device(device_id)
        with self._lock:
            s = Stream(len(self.streams), device_id)
            self.streams.append(s)
            return s

    def default_stream(self) -> Stream:
        with self._lock:
            if not self.streams:
                return self.create_stream(0)
            return self.streams[0]

    # -- memory -------------------------------------------------------------------

    def het_malloc(self, size: int, stream: Optional[Stream] = None) -> VirtualPointer:
        if size <= 0:
            raise ValidationError("allocation size must be positive")
        stream = stream or self.default_stream()
        with self._lock:
            vp = VirtualPointer(self._next_vp, int(size))
            self._next_vp += 1
            self._back(vp, stream.device_id)
            self.vps[vp.vp_id] = vp
            return vp

    def adopt(self, vp_id: int, size: int) -> VirtualPointer:
        """The pointer with id ``vp_id``, created (host-backed only) if unknown."""
        with self._lock:
            vp = self.vps.get(vp_id)
            if vp is None:
                vp = VirtualPointer(vp_id, size)
                self.vps[vp_id] = vp
                self._next_vp = max(self._next_vp, vp_id + 1)
            elif vp.size != size:
                raise StateError(f"virtual pointer {vp_id} has size {vp.size}, checkpoint says {size}")
            return vp

    def het_free(self, vp: VirtualPointer):
        with self._lock:
            for dev_id, off in vp.backing.items():
                self.devices[dev_id].free(off)
            vp.backing.clear()
            vp.freed = True
            self.vps.pop(vp.vp_id, None)

    def _live(self, vp: VirtualPointer):
        if vp.freed or self.vps.get(vp.vp_id) is not vp:
            raise StateError(f"{vp!r} has been freed or belongs to another runtime")

    def _back(self, vp: VirtualPointer, dev_id: int) -> int:
        if dev_id not in vp.backing:
            vp.backing[dev_id] = self.device(dev_id).alloc(vp.size)
        return vp.backing[dev_id]

    def _pull_to_host(self, vp: VirtualPointer):
        if HOST in vp.valid:
            return
        src = min(d for d in vp.valid)
        vp.host_mirror[:] = self.devices[src].read_global(vp.backing[src], vp.size)
        vp.valid.add(HOST)

    def ensure_on(self, vp: VirtualPointer, dev_id: int) -> int:
        """Device offset of ``vp`` on ``dev_id``, copying current contents there if stale."""
        with self._lock:
            self._live(vp)
            off = self._back(vp, dev_id)
            if dev_id not in vp.valid:
                self._pull_to_host(vp)
                self.devices[dev_id].write_global(off, vp.host_mirror)
                vp.valid.add(dev_id)
            return off

    def _written_on(self, vp: VirtualPointer, dev_id: int):
        vp.valid = {dev_id}

    def make_coherent(self, vp: VirtualPointer):
        """Bring the host mirror and every backing up to date."""
        with self._lock:
            self._pull_to_host(vp)
            for dev_id in vp.backing:
                self.ensure_on(vp, dev_id)

    def _check_idle(self, vp: VirtualPointer):
        for s in self.streams:
            if s.current is not None and any(a is vp for a in s.current.args):
                raise StateError(f"{vp!r} is in use by a running kernel; synchronize first")

    def het_memcpy(self, dst, src, length: Optional[int] = None, stream: Optional[Stream] = None):
        """Copy host→device, device→host or device→device.

        Without ``stream`` the copy is synchronous (all streams are
        synchronized first). With a stream it is queued in stream order;
        device→host copies then need a writable host buffer as ``dst``.
        """
        if stream is not None:
            op = CopyOp(lambda: self._copy(dst, src, length), f"memcpy {_describe(src)} -> {_describe(dst)}")
            self._check_copy(dst, src, length)
            with stream.lock:
                stream.queue.append(op)
            return None
        self.device_synchronize()
        return self._copy(dst, src, length)

    def _check_copy(self, dst, src, length):
        n = _length(dst, src, length)
        for x in (dst, src):
            if isinstance(x, VirtualPointer):
                self._live(x)
                if n > x.size:
                    raise ValidationError(f"copy of {n} bytes exceeds {x!r}")
            elif isinstance(x, (bytes, memoryview)) and x is dst:
                raise ValidationError("destination host buffer must be writable")
            elif len(x) < n if not isinstance(x, np.ndarray) else x.nbytes < n:
                raise ValidationError(f"copy of {n} bytes exceeds the host buffer")
        if isinstance(dst, VirtualPointer) and dst is src:
            raise ValidationError("overlapping device-to-device copy within one allocation")
        return n

    def _copy(self, dst, src, length):
        n = self._check_copy(dst, src, length)
        with self._lock:
            if isinstance(src, VirtualPointer):
                self._check_idle(src)
                self._pull_to_host(src)
                data = bytes(src.host_mirror[:n])
            else:
                data = _host_bytes(src)[:n]
            if isinstance(dst, VirtualPointer):
                self._check_idle(dst)
                self._pull_to_host(dst)
                dst.host_mirror[:n] = data
                dst.valid = {HOST}
                return None
            if isinstance(dst, np.ndarray):
                dst.reshape(-1).view(np.uint8)[:n] = np.frombuffer(data, dtype=np.uint8)
            else:
                dst[:n] = data
            return data

    def read(self, vp: VirtualPointer) -> bytes:
        """Synchronous device→host copy of a whole allocation."""
        return self.het_memcpy(bytearray(vp.size), vp)

    def write(self, vp: VirtualPointer, data) -> None:
        self.het_memcpy(vp, data)

    # -- modules and launches --------------------------------------------------------

    def load_module(self, source: Union[str, Module]) -> Module:
        module = asm.parse(source) if isinstance(source, str) else source
        report = validate(module)
        if not report.ok:
            raise ValidationError("module failed validation", report.diagnostics)
        with self._lock:
            self.modules[module.module_id] = module
        return module

    def module(self, module_id: str) -> Module:
        with self._lock:
            if module_id not in self.modules:
                raise StateError(f"module {module_id[:12]} is not loaded")
            return self.modules[module_id]

    def config_for(self, desc: DeviceDesc, block, *, migration_mode=None, segment_interval=None,
                   strategy=None, partition_width=None) -> LoweringConfig:
        x = segment_interval or self.segment_interval or default_segment_interval()
        mode = self.migration_mode if migration_mode is None else migration_mode
        if desc.model is DeviceModel.SIMT:
            return LoweringConfig(segment_interval_X=x, migration_mode=mode)
        strat = strategy or self.strategy or default_strategy(desc, block)
        pw = partition_width or self.partition_width
        if strat is Strategy.MULTI_CORE and pw is None:
            pw = min(desc.lane_count, block_threads(dims3(block)))
        return LoweringConfig(segment_interval_X=x, migration_mode=mode, mimd_strategy=strat,
                              partition_width=pw if strat is Strategy.MULTI_CORE else None)

    def launch_kernel(self, module: Module, kernel_name: str, grid, block, args: list,
                      stream: Optional[Stream] = None, *, seed=None, trigger: Optional[PauseTrigger] = None,
                      trace: bool = False, **cfg_overrides) -> LaunchOp:
        stream = stream or self.default_stream()
        if module.module_id not in self.modules:
            self.load_module(module)
        try:
            kernel = module.kernel(kernel_name)
        except KeyError:
            raise LaunchError(f"no kernel named {kernel_name!r} in the module")
        if len(args) != len(kernel.params):
            raise LaunchError(f"kernel {kernel_name} takes {len(kernel.params)} arguments, got {len(args)}")
        for reg, a in zip(kernel.params, args):
            if reg.ptr != isinstance(a, VirtualPointer):
                what = "a VirtualPointer" if reg.ptr else "a scalar"
                raise LaunchError(f"argument {reg.name} of {kernel_name} must be {what}")
            if isinstance(a, VirtualPointer):
                self._live(a)
        grid, block = dims3(grid), dims3(block)
        problems = check_launch_shape(kernel, block)
        if problems:
            raise LaunchError("; ".join(problems))
        desc = self.device(stream.device_id).desc
        cfg = self.config_for(desc, block, **cfg_overrides)
        op = LaunchOp(module, kernel, grid, block, list(args), cfg, seed=seed, trigger=trigger, trace=trace)
        # translation happens now so validation/lowering errors surface before enqueue
        op.program = self.cache.get(module, kernel, desc, cfg, block)
        op.device_id = stream.device_id
        with stream.lock:
            stream.queue.append(op)
        return op

    def enqueue_resume(self, stream: Stream, op: LaunchOp):
        """Queue a launch that continues a checkpoint (used by restore)."""
        desc = self.device(stream.device_id).desc
        op.cfg = self.config_for(desc, op.block, migration_mode=True, segment_interval=op.cfg.segment_interval_X,
                                 strategy=None, partition_width=None)
        op.program = self.cache.get(op.module, op.kernel, desc, op.cfg, op.block)
        op.device_id = stream.device_id
        with stream.lock:
            stream.queue.appendleft(op)

    # -- execution ----------------------------------------------------------------------

    def _start(self, stream: Stream, op: LaunchOp):
        dev_id = stream.device_id
        if op.device_id != dev_id:
            # the stream was rebound (migration): translate for the new device
            desc = self.device(dev_id).desc
            op.cfg = self.config_for(desc, op.block, migration_mode=op.cfg.migration_mode,
                                     segment_interval=op.cfg.segment_interval_X)
            op.program = self.cache.get(op.module, op.kernel, desc, op.cfg, op.block)
            op.device_id = dev_id
        dev = self.device(dev_id)
        with self._lock:
            args, regions = [], []
            for a in op.args:
                if isinstance(a, VirtualPointer):
                    off = self.ensure_on(a, dev_id)
                    args.append(off)
                    regions.append((off, off + a.size))
                else:
                    args.append(a)
            resume = None
            if op.resume is not None:
                for vid in op.resume.vp_ids:
                    vp = self.vps[vid]
                    off = self.ensure_on(vp, dev_id)
                    if (off, off + vp.size) not in regions:
                        regions.append((off, off + vp.size))
                resume = op.resume.to_state(lambda vid: self.vps[vid].backing[dev_id], op.program)
        kw = dict(resume=resume, seed=op.seed, trigger=op.trigger, trace=op.trace, regions=regions)
        if isinstance(dev, device_mimd.MimdDevice):
            assignment = dev.assign_blocks(op.grid, block_threads(op.block), op.cfg)
            op.ticket = dev.launch(op.program, assignment, op.grid, op.block, args, **kw)
        else:
            op.ticket = dev.launch(op.program, op.grid, op.block, args, **kw)
        op.status = RUNNING
        stream.current = op

    def _finish_launch(self, stream: Stream, op: LaunchOp):
        with self._lock:
            for a in op.args:
                if isinstance(a, VirtualPointer):
                    self._written_on(a, stream.device_id)
            if op.resume is not None:
                for vid in op.resume.vp_ids:
                    self._written_on(self.vps[vid], stream.device_id)
        op.status = op.ticket.status
        stream.current = None
        stream.log.append(op)
        if op.status == PAUSED:
            stream.suspended = op

    def advance(self, stream: Stream, budget: Optional[int] = None) -> str:
        """Run the stream's head operations; with ``budget`` stop an in-flight
        launch after about that many thread-instructions. Returns the status of
        the last launch touched (COMPLETED when the queue drained)."""
        with stream.lock:
            while True:
                if stream.suspended is not None:
                    return PAUSED
                if stream.current is None:
                    if not stream.queue:
                        return COMPLETED
                    op = stream.queue.popleft()
                    if isinstance(op, CopyOp):
                        op.fn()
                        op.status = COMPLETED
                        stream.log.append(op)
                        continue
                    self._start(stream, op)
                op = stream.current
                dev = self.device(stream.device_id)
                try:
                    status = dev.run_until_quiescent(op.ticket, budget)
                except HetGPUError:
                    stream.current = None
                    op.status = "FAULTED"
                    stream.log.append(op)
                    raise
                if status == RUNNING:
                    return RUNNING
                self._finish_launch(stream, op)
                if status == PAUSED:
                    return PAUSED

    def synchronize(self, stream: Optional[Stream] = None):
        stream = stream or self.default_stream()
        status = self.advance(stream)
        if status == PAUSED:
            raise StateError(f"stream {stream.stream_id} is paused at a checkpoint; restore it to continue")
        with self._lock:
            for vp in self.vps.values():
                self.make_coherent(vp)

    def device_synchronize(self):
        for s in list(self.streams):
            self.synchronize(s)

    def request_pause(self, stream: Stream):
        """Ask the kernel running on ``stream`` to pause at its next pause check
        (safe to call from another thread)."""
        self.device(stream.device_id).set_pause_flag()


def _host_bytes(x) -> bytes:
    if isinstance(x, np.ndarray):
        return np.ascontiguousarray(x).tobytes()
    return bytes(x)


def _length(dst, src, length) -> int:
    if length is not None:
        if length < 0:
            raise ValidationError("negative copy length")
        return int(length)
    sizes = []
    for x in (dst, src):
        if isinstance(x, VirtualPointer):
            sizes.append(x.size)
        elif isinstance(x, np.ndarray):
            sizes.append(x.nbytes)
        else:
            sizes.append(len(x))
    return min(sizes)


def _describe(x) -> str:
    return repr(x) if isinstance(x, VirtualPointer) else f"host[{len(x) if not isinstance(x, np.ndarray) else x.nbytes}]"


# ---------------------------------------------------------------------------
# process-wide default runtime

_default: Optional[Runtime] = None
_default_lock = threading.Lock()


def get_runtime() -> Runtime:
    global _default
    with _default_lock:
        if _default is None:
            _default = Runtime()
        return _default


def reset_runtime(**kw) -> Runtime:
    global _default
    with _default_lock:
        _default = Runtime(**kw)
        return _default


def register_device(desc: DeviceDesc) -> int:
    return get_runtime().register_device(desc)


def het_malloc(size: int, stream: Optional[Stream] = None) -> VirtualPointer:
    return get_runtime().het_malloc(size, stream)


def het_memcpy(dst, src, length: Optional[int] = None, stream: Optional[Stream] = None):
    return get_runtime().het_memcpy(dst, src, length, stream)


def load_module(source) -> Module:
    return get_runtime().load_module(source)


def launch_kernel(module: Module, kernel_name: str, grid, block, args, stream: Optional[Stream] = None, **kw) -> LaunchOp:
    return get_runtime().launch_kernel(module, kernel_name, grid, block, args, stream, **kw)


def device_synchronize():
    get_runtime().device_synchronize()
