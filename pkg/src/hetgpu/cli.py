"""Command-line driver: ``check``, ``run``, ``migrate`` and ``blob inspect``.

Exit codes: 0 success, 1 user or validation error, 2 device fault,
3 state or migration error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import asm, snapshot
from .engine import COMPLETED, PAUSED, PauseTrigger
from .errors import (
    FaultError, HetGPUError, LaunchError, LoweringError, OOMError, ProtocolError, StateError, ValidationError,
)
from .ir import DeviceDesc, DeviceModel, SemType
from .lowering import Strategy
from .runtime import Runtime

EXIT_OK, EXIT_USER, EXIT_FAULT, EXIT_STATE = 0, 1, 2, 3

_ELEMENT_TYPES = {"u8": np.uint8, "u32": np.uint32, "s32": np.int32, "u64": np.uint64, "f32": np.float32,
                  "f64": np.float64}
DEVICE_NAMES = ("simt", "mimd")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# run specification


def parse_buffer(text: str, default_count: int) -> np.ndarray:
    """Buffer initializer: ``zero[:TYPE]``, ``fill:TYPE:VALUE``, ``iota:TYPE`` or
    ``file:PATH``, optionally followed by ``#COUNT`` (elements)."""
    count = default_count
    if not text.startswith("file:") and "#" in text:
        text, _, n = text.rpartition("#")
        try:
            count = int(n)
        except ValueError:
            raise UsageError(f"bad element count {n!r} in buffer initializer")
    kind, _, rest = text.partition(":")
    if kind == "file":
        try:
            return np.frombuffer(Path(rest).read_bytes(), dtype=np.uint8).copy()
        except OSError as e:
            raise UsageError(f"cannot read buffer file {rest!r}: {e.strerror}")
    parts = rest.split(":") if rest else []
    tname = parts[0] if parts else "u32"
    if tname not in _ELEMENT_TYPES:
        raise UsageError(f"unknown element type {tname!r} (expected one of {', '.join(_ELEMENT_TYPES)})")
    dt = _ELEMENT_TYPES[tname]
    if kind == "zero":
        return np.zeros(count, dtype=dt)
    if kind == "iota":
        return np.arange(count).astype(dt)
    if kind == "fill":
        if len(parts) != 2:
            raise UsageError("fill needs a type and a value, e.g. fill:f32:3.5")
        try:
            value = float(parts[1]) if np.dtype(dt).kind == "f" else int(parts[1], 0)
        except ValueError:
            raise UsageError(f"bad fill value {parts[1]!r}")
        return np.full(count, value, dtype=dt)
    raise UsageError(f"unknown buffer initializer {kind!r} (expected zero, fill, iota or file)")


def parse_scalar(text: str, t: SemType):
    try:
        if t.is_float:
            return float(text)
        if t is SemType.PRED:
            return text.lower() in ("1", "true")
        return int(text, 0)
    except ValueError:
        raise UsageError(f"bad scalar argument {text!r} for a {t.name} parameter")


def parse_dims(text: str) -> tuple:
    try:
        dims = tuple(int(x) for x in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"bad dimensions {text!r} (expected e.g. 4 or 16x16)")
    if not 1 <= len(dims) <= 3 or any(d <= 0 for d in dims):
        raise UsageError(f"bad dimensions {text!r}")
    return dims + (1,) * (3 - len(dims))


@dataclass
class RunSpec:
    module_file: str
    kernel: str
    grid: tuple
    block: tuple
    args: list  # raw strings, one per kernel parameter
    elements: int = 1024
    device: str = "simt"
    strategy: Optional[Strategy] = None
    segment_x: Optional[int] = None
    pause_after: Optional[int] = None
    pause_at_barrier: Optional[int] = None
    seed: Optional[int] = None
    cores: int = 16
    lanes: int = 32
    warp: int = 32
    memory: int = 1 << 22

    @property
    def trigger(self) -> Optional[PauseTrigger]:
        if self.pause_after is not None:
            return PauseTrigger(after_instructions=self.pause_after)
        if self.pause_at_barrier is not None:
            return PauseTrigger(at_resume=self.pause_at_barrier)
        return None


def _spec(ns) -> RunSpec:
    return RunSpec(
        module_file=ns.file, kernel=ns.kernel, grid=parse_dims(ns.grid), block=parse_dims(ns.block),
        args=list(ns.arg or []), elements=ns.elements, device=getattr(ns, "device", "simt"),
        strategy=Strategy(ns.strategy) if ns.strategy else None, segment_x=ns.segment_x,
        pause_after=ns.pause_after, pause_at_barrier=ns.pause_at_barrier, seed=ns.seed, cores=ns.cores,
        lanes=ns.lanes, warp=ns.warp, memory=ns.memory,
    )


def _runtime(spec: RunSpec) -> Runtime:
    rt = Runtime(segment_interval=spec.segment_x, strategy=spec.strategy)
    rt.register_device(DeviceDesc(DeviceModel.SIMT, warp_width=spec.warp, core_count=max(spec.cores // 4, 1),
                                  global_mem_bytes=spec.memory))
    rt.register_device(DeviceDesc(DeviceModel.MIMD, core_count=spec.cores, lane_count=spec.lanes,
                                  global_mem_bytes=spec.memory))
    return rt


def device_id(name: str, rt: Optional[Runtime] = None) -> int:
    if name in DEVICE_NAMES:
        dev = DEVICE_NAMES.index(name)
    else:
        try:
            dev = int(name)
        except ValueError:
            raise UsageError(f"unknown device {name!r} (expected simt, mimd or a device id)")
    if rt is not None and not 0 <= dev < len(rt.enumerate_devices()):
        raise UsageError(f"device {name} is not registered")
    return dev


def _load(path: str):
    try:
        text = Path(path).read_bytes()
    except OSError as e:
        raise UsageError(f"cannot read {path!r}: {e.strerror}")
    return asm.parse(text, path)


def _prepare(spec: RunSpec, rt: Runtime, stream):
    module = rt.load_module(_load(spec.module_file))
    try:
        kernel = module.kernel(spec.kernel)
    except KeyError:
        raise UsageError(f"no kernel named {spec.kernel!r} in {spec.module_file}")
    if len(spec.args) != len(kernel.params):
        raise UsageError(f"kernel {kernel.name} takes {len(kernel.params)} arguments "
                         f"({', '.join(r.name for r in kernel.params)}); got {len(spec.args)}")
    args, buffers = [], []
    for reg, text in zip(kernel.params, spec.args):
        if reg.ptr:
            data = parse_buffer(text, spec.elements)
            vp = rt.het_malloc(max(data.nbytes, 1), stream)
            rt.write(vp, data.tobytes())
            args.append(vp)
            buffers.append((reg, vp))
        else:
            args.append(parse_scalar(text, reg.type))
    return module, kernel, args, buffers


def _write_outputs(rt: Runtime, buffers: list, out: Optional[str]) -> list:
    names = []
    if out is None:
        return names
    d = Path(out)
    d.mkdir(parents=True, exist_ok=True)
    for i, (reg, vp) in enumerate(buffers):
        p = d / f"arg{i}_{reg.name.lstrip('%')}.bin"
        p.write_bytes(rt.read(vp))
        names.append(str(p))
    return names


def _report(pairs: list) -> str:
    return "\n".join(f"{k}={v}" for k, v in pairs)


def _dma_bytes(rt: Runtime, dev_id: int) -> tuple:
    dev = rt.device(dev_id)
    rd = wr = 0
    for core in getattr(dev, "cores", ()):
        for direction, _space, _off, n in core.dma_log:
            if direction == "READ":
                rd += n
            else:
                wr += n
    return rd, wr


# ---------------------------------------------------------------------------
# commands


def cmd_check(ns) -> int:
    try:
        text = Path(ns.file).read_bytes()
    except OSError as e:
        print(f"error: cannot read {ns.file!r}: {e.strerror}", file=sys.stderr)
        return EXIT_USER
    module, diags = asm.parse_with_diagnostics(text, ns.file)
    for d in diags:
        print(f"{ns.file}:{d}", file=sys.stderr)
    if module is None:
        return EXIT_USER
    if ns.emit == "canonical":
        sys.stdout.write(asm.print_module(module).decode("utf-8"))
    else:
        print(f"ok: {len(module.kernels)} kernel(s): {', '.join(k.name for k in module.kernels)}")
    return EXIT_OK


def cmd_run(ns) -> int:
    spec = _spec(ns)
    rt = _runtime(spec)
    dev = device_id(spec.device, rt)
    stream = rt.create_stream(dev)
    module, kernel, args, buffers = _prepare(spec, rt, stream)
    op = rt.launch_kernel(module, kernel.name, spec.grid, spec.block, args, stream, seed=spec.seed)
    trigger = spec.trigger
    if trigger is not None:
        blob = snapshot.checkpoint(stream, trigger, rt)
        status = PAUSED if blob.dumps else COMPLETED
        if status == PAUSED:
            if ns.snapshot:
                Path(ns.snapshot).write_bytes(snapshot.serialize(blob))
        else:
            rt.synchronize(stream)
    else:
        rt.synchronize(stream)
        status = op.status
    files = _write_outputs(rt, buffers, ns.out) if status == COMPLETED else []
    rd, wr = _dma_bytes(rt, dev)
    pairs = [
        ("status", status), ("kernel", kernel.name), ("device", spec.device),
        ("model", rt.device(dev).desc.model.value),
        ("strategy", op.cfg.mimd_strategy.value if rt.device(dev).desc.model is DeviceModel.MIMD else "-"),
        ("grid", "x".join(map(str, spec.grid))), ("block", "x".join(map(str, spec.block))),
        ("instructions", op.instructions), ("barrier_visits", op.ticket.barrier_visits if op.ticket else 0),
        ("dma_bytes_read", rd), ("dma_bytes_written", wr),
        ("cache_hits", rt.cache.stats.hits), ("cache_misses", rt.cache.stats.misses),
    ]
    if status == PAUSED:
        pairs.append(("blocks_paused", len(blob.dumps)))
        if ns.snapshot:
            pairs.append(("snapshot", ns.snapshot))
    pairs += [(f"output{i}", f) for i, f in enumerate(files)]
    print(_report(pairs))
    return EXIT_OK


def cmd_migrate(ns) -> int:
    spec = _spec(ns)
    rt = _runtime(spec)
    names = ns.path.split(",") if ns.path else [ns.source, ns.to]
    path = [device_id(x, rt) for x in names]
    if len(path) < 2:
        raise UsageError("a migration path needs at least two devices")
    stream = rt.create_stream(path[0])
    module, kernel, args, buffers = _prepare(spec, rt, stream)
    rt.launch_kernel(module, kernel.name, spec.grid, spec.block, args, stream, seed=spec.seed)
    trigger = spec.trigger or PauseTrigger(at_resume=1)
    reports = []
    for hop, target in enumerate(path[1:], 1):
        try:
            rep = snapshot.migrate(stream, target, trigger, rt)
        except snapshot.MigrationError as e:
            print(f"hop={hop}\n{e.report.text()}")
            raise
        reports.append(rep)
        print(f"hop={hop}\n{rep.text()}")
    rt.synchronize(stream)
    pairs = [("status", COMPLETED), ("path", ",".join(map(str, path)))]
    same = True
    if ns.verify:
        ref = _runtime(spec)
        s2 = ref.create_stream(path[0])
        m2, k2, a2, b2 = _prepare(spec, ref, s2)
        ref.launch_kernel(m2, k2.name, spec.grid, spec.block, a2, s2, seed=spec.seed)
        ref.synchronize(s2)
        same = all(rt.read(v) == ref.read(w) for (_, v), (_, w) in zip(buffers, b2))
        pairs.append(("matches_unmigrated", int(same)))
    files = _write_outputs(rt, buffers, ns.out)
    pairs += [(f"output{i}", f) for i, f in enumerate(files)]
    print(_report(pairs))
    return EXIT_OK if same else EXIT_STATE


def cmd_blob_inspect(ns) -> int:
    try:
        data = Path(ns.file).read_bytes()
    except OSError as e:
        print(f"error: cannot read {ns.file!r}: {e.strerror}", file=sys.stderr)
        return EXIT_USER
    blob = snapshot.deserialize(data)
    print(f"bytes={len(data)}")
    print(blob.summary())
    return EXIT_OK


# ---------------------------------------------------------------------------


def _run_flags(p: argparse.ArgumentParser):
    p.add_argument("file", help="hetIR module (.hir)")
    p.add_argument("--kernel", "-k", required=True)
    p.add_argument("--grid", default="1", help="grid dimensions, e.g. 4 or 2x2")
    p.add_argument("--block", default="32", help="block dimensions, e.g. 64 or 16x16")
    p.add_argument("--arg", "-a", action="append",
                   help="one per kernel parameter, in order: a scalar, or for pointers a buffer initializer "
                        "(zero[:T], fill:T:V, iota:T, file:PATH; optional #COUNT)")
    p.add_argument("--elements", type=int, default=1024, help="default element count of generated buffers")
    p.add_argument("--strategy", choices=[s.value for s in Strategy])
    p.add_argument("--segment-x", type=int, help="segment barrier interval (loop iterations)")
    trig = p.add_mutually_exclusive_group()
    trig.add_argument("--pause-after", type=int, metavar="N", help="pause after N executed thread-instructions")
    trig.add_argument("--pause-at-barrier", type=int, metavar="K", help="pause at resume point K")
    p.add_argument("--seed", type=int, help="randomize the scheduling order with this seed")
    p.add_argument("--cores", type=int, default=16, help="MIMD core count (SIMT gets a quarter as many SMs)")
    p.add_argument("--lanes", type=int, default=32, help="MIMD vector lanes per core")
    p.add_argument("--warp", type=int, default=32, help="SIMT warp width")
    p.add_argument("--memory", type=int, default=1 << 22, help="device global memory bytes")
    p.add_argument("--out", help="directory for output buffers")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hetgpu", description="hetIR toolchain and simulated devices")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("check", help="parse and validate a module")
    p.add_argument("file")
    p.add_argument("--emit", choices=["canonical"], help="print the module in canonical form")
    p.set_defaults(fn=cmd_check)

    p = sub.add_parser("run", help="run a kernel on one device")
    _run_flags(p)
    p.add_argument("--device", default="simt", help="simt, mimd or a device id")
    p.add_argument("--snapshot", help="write the state blob here when the run pauses")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("migrate", help="run a kernel and migrate it between devices mid-execution")
    _run_flags(p)
    p.add_argument("--from", dest="source", default="simt")
    p.add_argument("--to", default="mimd")
    p.add_argument("--path", help="comma-separated device chain, e.g. simt,mimd,simt (overrides --from/--to)")
    p.add_argument("--verify", action="store_true", help="compare against a run without migration")
    p.set_defaults(fn=cmd_migrate)

    p = sub.add_parser("blob", help="state blob utilities")
    bsub = p.add_subparsers(dest="blob_command", required=True)
    bi = bsub.add_parser("inspect", help="decode and summarize a .hgpb file")
    bi.add_argument("file")
    bi.set_defaults(fn=cmd_blob_inspect)
    return parser


def exit_code(e: BaseException) -> int:
    if isinstance(e, (UsageError, ValidationError, LoweringError, LaunchError)):
        return EXIT_USER
    if isinstance(e, (FaultError, ProtocolError, OOMError)):
        return EXIT_FAULT
    if isinstance(e, snapshot.MigrationError) and isinstance(e.__cause__, FaultError):
        return EXIT_FAULT
    if isinstance(e, StateError):
        return EXIT_STATE
    return EXIT_USER


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits with 2 on bad usage; keep 2 for device faults
        return EXIT_OK if e.code in (0, None) else EXIT_USER
    try:
        return ns.fn(ns)
    except (UsageError, HetGPUError) as e:
        kind = getattr(e, "kind", "Usage")
        print(f"error: {kind}: {e}", file=sys.stderr)
        for d in getattr(e, "diagnostics", [])[:10]:
            print(f"  {d}", file=sys.stderr)
        return exit_code(e)


if __name__ == "__main__":
    sys.exit(main())
