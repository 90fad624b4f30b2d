"""Run a kernel directly on a simulated device (below the runtime layer)."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Optional

from hetgpu import device_mimd, device_simt, lowering
from hetgpu.ir import DeviceDesc, DeviceModel, block_threads
from hetgpu.lowering import LoweringConfig, Strategy

# (label, model, strategy) for every execution mode
MODES = [
    ("simt", DeviceModel.SIMT, None),
    ("mimd-single", DeviceModel.MIMD, Strategy.SINGLE_CORE),
    ("mimd-multi", DeviceModel.MIMD, Strategy.MULTI_CORE),
    ("mimd-independent", DeviceModel.MIMD, Strategy.INDEPENDENT_THREAD),
]
MODE_IDS = [m[0] for m in MODES]


@dataclass
class DeviceRun:
    status: str
    buffers: list
    ticket: object
    device: object
    program: object
    offsets: list

    @property
    def instructions(self) -> int:
        return self.ticket.instructions


def make_device(model: DeviceModel, *, warp_width: int = 32, cores: int = 16, lanes: int = 32):
    if model is DeviceModel.SIMT:
        return device_simt.create_device(DeviceDesc(DeviceModel.SIMT, warp_width=warp_width, core_count=4))
    return device_mimd.create_device(DeviceDesc(DeviceModel.MIMD, core_count=cores, lane_count=lanes))


def run_kernel(kernel, grid, block, args, buffers, model: DeviceModel, strategy: Optional[Strategy] = None, *,
               migration_mode: bool = False, segment_interval: int = 64, partition_width: Optional[int] = None,
               seed=None, trigger=None, trace: bool = False, device=None, warp_width: int = 32, cores: int = 16,
               lanes: int = 32, budget: Optional[int] = None) -> DeviceRun:
    """``args`` uses buffer indices for pointer parameters, as the oracle does."""
    dev = device or make_device(model, warp_width=warp_width, cores=cores, lanes=lanes)
    cfg = LoweringConfig(segment_interval_X=segment_interval, migration_mode=migration_mode,
                         mimd_strategy=strategy or Strategy.SINGLE_CORE, partition_width=partition_width)
    prog = lowering.lower(kernel, dev.desc, cfg, block)
    offsets = []
    for b in buffers:
        off = dev.alloc(max(len(b), 1))
        dev.write_global(off, b)
        offsets.append(off)
    real_args = [offsets[a] if r.ptr else a for r, a in zip(kernel.params, args)]
    if model is DeviceModel.SIMT:
        ticket = dev.launch(prog, grid, block, real_args, seed=seed, trigger=trigger, trace=trace)
    else:
        assignment = dev.assign_blocks(grid, block_threads(tuple(block) + (1,) * (3 - len(block))), cfg)
        ticket = dev.launch(prog, assignment, grid, block, real_args, seed=seed, trigger=trigger, trace=trace)
    status = dev.run_until_quiescent(ticket, budget)
    out = [dev.read_global(o, len(b)) for o, b in zip(offsets, buffers)]
    return DeviceRun(status, out, ticket, dev, prog, offsets)


# ---------------------------------------------------------------------------
# runtime-level runs with migrations


def make_runtime(segment_interval: int = 64, strategy: Optional[Strategy] = None, *, cores: int = 16,
                 lanes: int = 32, warp_width: int = 32):
    """A runtime with a SIMT device (id 0) and a MIMD device (id 1)."""
    from hetgpu.runtime import Runtime

    rt = Runtime(segment_interval=segment_interval, strategy=strategy)
    rt.register_device(DeviceDesc(DeviceModel.SIMT, warp_width=warp_width, core_count=4))
    rt.register_device(DeviceDesc(DeviceModel.MIMD, core_count=cores, lane_count=lanes))
    return rt


def run_case(case, device: int, hops=(), strategy: Optional[Strategy] = None, *, rt=None, seed=None):
    """Run a corpus case on ``device``, migrating once per ``(target, trigger)``
    in ``hops``. Returns (output buffers, migration reports, runtime, stream)."""
    from hetgpu import snapshot

    rt = rt or make_runtime(case.segment_interval, strategy)
    module = rt.load_module(case.source)
    s = rt.create_stream(device)
    vps = []
    for b in case.buffer_bytes():
        vp = rt.het_malloc(len(b), s)
        rt.write(vp, b)
        vps.append(vp)
    args = [vps[a] if r.ptr else a for r, a in zip(case.kernel.params, case.args)]
    rt.launch_kernel(module, case.kernel.name, case.grid, case.block, args, s, seed=seed)
    reports = [snapshot.migrate(s, target, trigger, rt) for target, trigger in hops]
    rt.synchronize(s)
    return [rt.read(v) for v in vps], reports, rt, s


def barrier_sites(case) -> list:
    """Resume ids of every barrier site of a case's kernel (entry excluded)."""
    cfg = LoweringConfig(segment_interval_X=case.segment_interval, migration_mode=True)
    _, table, _ = lowering.prepare_kernel(case.kernel, cfg)
    return sorted(k for k in table.entries if k)


# ---------------------------------------------------------------------------
# mask discipline, reconstructed from execution traces


def check_mask_discipline(trace, code, initial):
    """Replay per-group exec events against a model of the mask stack.

    At every region close the mask must be exactly the mask at region entry
    minus the lanes that returned meanwhile.
    """
    events = defaultdict(list)
    for e in trace:
        if e[0] == "exec":
            events[(e[1], e[2])].append(e[3:])
    checked = 0
    for key, evs in events.items():
        stack, returned = [], 0
        for i, (pc, kind, before, after) in enumerate(evs):
            if kind in ("if", "vmask_push"):
                assert after & ~before == 0
                stack.append((before, after))
            elif kind in ("else", "vmask_else"):
                entry, then_mask = stack[-1]
                assert after & ~(entry & ~returned) == 0
                assert after & then_mask == 0 or after & then_mask & returned
            elif kind in ("endif", "vmask_pop"):
                entry, _ = stack.pop()
                assert after == entry & ~returned, (key, pc)
                checked += 1
            elif kind == "loop":
                stack.append((before, None))
            elif kind == "endloop":
                nxt = evs[i + 1][0] if i + 1 < len(evs) else pc + 1
                if nxt > pc:
                    entry, _ = stack.pop()
                    assert after == entry & ~returned, (key, pc)
                    checked += 1
                else:
                    assert after & ~before == 0
            elif kind == "ret":
                returned |= before
        # a group whose lanes all returned finishes without closing its regions
        assert not stack or returned == initial[key]
        assert returned & ~initial[key] == 0
    return checked


def initial_masks(run):
    out = {}
    for lin, b in run.device.active.engine.blocks.items():
        for g in b.groups:
            out[(lin, g.index)] = (1 << g.n) - 1
    return out
