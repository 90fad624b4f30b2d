"""Simulated SIMT GPU.

Blocks are placed on streaming-multiprocessor slots in ascending block order,
one block per SM at a time. Each block is split into warps of ``warp_width``
threads that execute in lock-step under an active mask; a stack of
(reconvergence point, saved mask) entries handles divergence. Warps of a block
interleave round-robin, one instruction per turn.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import alu
from .engine import (
    COMPLETED, PAUSED, RUNNING, BlockDump, DeviceBase, DeviceControlBlock, Engine, LaunchTicket,
    PauseTrigger, ResumeState, dims3,
)
from .errors import LaunchError
from .ir import DeviceDesc, DeviceModel, block_threads
from .lowering import DeviceProgram

__all__ = [
    "SimtDevice", "create_device", "launch", "run_until_quiescent", "collect_block_dumps",
    "read_global", "write_global", "set_pause_flag", "COMPLETED", "PAUSED", "RUNNING",
    "BlockDump", "DeviceControlBlock", "LaunchTicket", "PauseTrigger",
]


class SimtDevice(DeviceBase):
    def __init__(self, desc: DeviceDesc):
        if desc.model is not DeviceModel.SIMT:
            raise ValueError("a SIMT device needs a SIMT device description")
        super().__init__(desc)

    # -- engine hooks ------------------------------------------------------------

    def block_shared(self, engine: Engine, block) -> np.ndarray:
        return np.zeros(engine.prog.shared_mem_bytes, dtype=np.uint8)

    def partition(self, engine: Engine, block):
        w = self.desc.warp_width
        n = engine.nthreads
        return [(np.arange(s, min(s + w, n)), block.cores[0]) for s in range(0, n, w)]

    def smuggle(self, engine: Engine, group, rb):
        """Resume entry: each warp pulls its lanes' saved registers from the
        block's staging area (bounced through shared memory on hardware)."""
        staging = engine.control.staging[group.block.linear]
        for j, r in enumerate(rb.regs):
            group.regs[r.id] = alu.from_bits(staging[group.lids, j], r.type)

    # -- launches -------------------------------------------------------------------

    def waves(self, grid) -> list:
        nblocks = block_threads(dims3(grid))
        sms = self.desc.core_count
        return [
            [(lin, (lin - start,)) for lin in range(start, min(start + sms, nblocks))]
            for start in range(0, nblocks, sms)
        ]

    def launch(self, prog: DeviceProgram, grid, block, args, *, resume: Optional[ResumeState] = None,
               seed=None, trigger: Optional[PauseTrigger] = None, trace: bool = False,
               regions=None) -> LaunchTicket:
        if prog.target_model is not DeviceModel.SIMT:
            raise LaunchError("program was not lowered for a SIMT device")
        if block_threads(dims3(block)) > self.desc.max_threads_per_block:
            raise LaunchError(
                f"block of {block_threads(dims3(block))} threads exceeds the device limit of "
                f"{self.desc.max_threads_per_block}"
            )
        if prog.block_size is not None and prog.block_size != block_threads(dims3(block)):
            raise LaunchError("program was lowered for a different block size")
        engine = Engine(self, prog, grid, block, args, self.waves(grid), mode="simt", resume=resume,
                        seed=seed, trigger=trigger, trace=trace, regions=regions)
        return self._ticket(engine, grid, block)


def create_device(desc: DeviceDesc) -> SimtDevice:
    return SimtDevice(desc)


def launch(dev: SimtDevice, prog: DeviceProgram, grid, block, args, **kw) -> LaunchTicket:
    return dev.launch(prog, grid, block, args, **kw)


def run_until_quiescent(dev: SimtDevice, ticket: LaunchTicket, budget: Optional[int] = None) -> str:
    return dev.run_until_quiescent(ticket, budget)


def collect_block_dumps(dev: SimtDevice, ticket: LaunchTicket) -> list:
    return dev.collect_block_dumps(ticket)


def read_global(dev: SimtDevice, offset: int, length: int) -> bytes:
    return dev.read_global(offset, length)


def write_global(dev: SimtDevice, offset: int, data) -> None:
    dev.write_global(offset, data)


def set_pause_flag(dev: SimtDevice) -> None:
    dev.set_pause_flag()
