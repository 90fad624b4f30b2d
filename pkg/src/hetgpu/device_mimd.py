"""Simulated MIMD accelerator: scalar cores with lane-vector units.

Each core has a vector mask (vmask) with a save/restore stack, a private
scratchpad and a synchronous DMA engine to global memory. Blocks are mapped
onto cores in one of three ways:

* ``SINGLE_CORE`` - a whole block on one core; lane *i* is thread *i*. Blocks
  wider than the vector unit are strip-mined over the same core.
* ``MULTI_CORE`` - a block split over ``block_size / partition_width`` cores
  that keep lock-step through mesh barriers and a divergence agreement: at
  every branch each core contributes whether any of its lanes takes each side,
  and all cores then execute the same plan (THEN first, then ELSE).
* ``INDEPENDENT_THREAD`` - every thread is a scalar program context; contexts
  are hosted on ``ceil(block_size / lane_count)`` cores.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .engine import (
    COMPLETED, ELSE, PAUSED, RUNNING, THEN, BlockDump, DeviceBase, Engine, LaunchTicket, PauseTrigger,
    ResumeState, agreement_plan, dims3,
)
from .errors import FaultError, LaunchError, ProtocolError
from .ir import DeviceDesc, DeviceModel, block_threads
from .lowering import DeviceProgram, LoweringConfig, Strategy

__all__ = [
    "MimdDevice", "CoreContext", "BlockAssignment", "create_device", "assign_blocks", "launch",
    "resolve_divergence", "dma", "run_until_quiescent", "collect_block_dumps", "read_global",
    "write_global", "set_pause_flag", "COMPLETED", "PAUSED", "RUNNING", "THEN", "ELSE", "BlockDump",
    "LaunchTicket", "PauseTrigger",
]

_MODES = {
    Strategy.SINGLE_CORE: "single_core",
    Strategy.MULTI_CORE: "multi_core",
    Strategy.INDEPENDENT_THREAD: "independent",
}


@dataclass(eq=False)
class CoreContext:
    core_id: int
    scratchpad: np.ndarray
    dma_log: list = field(default_factory=list)  # (direction, space, global offset, length)
    plan_log: list = field(default_factory=list)  # (block, site, generation, plan)

    def dma_text(self) -> str:
        return "\n".join(f"{d} {s} {off:#x} {n}" for d, s, off, n in self.dma_log)

    def plan_text(self) -> str:
        return "\n".join(f"block={b} site={s} gen={g} plan={'+'.join(p) or '-'}" for b, s, g, p in self.plan_log)


@dataclass(frozen=True)
class BlockAssignment:
    """Which cores run which block, in waves of concurrently resident blocks."""

    mode: Strategy
    block_size: int
    cores_per_block: int
    lanes_per_core: int
    waves: tuple  # of tuples of (block linear index, core ids)

    def cores_of(self, block: int) -> tuple:
        for wave in self.waves:
            for lin, cores in wave:
                if lin == block:
                    return cores
        raise KeyError(block)

    def lane_map(self, block_lane: int) -> tuple:
        """(core position within the block's core set, lane) of a block thread."""
        if self.mode is Strategy.SINGLE_CORE:
            return 0, block_lane % self.lanes_per_core
        if self.mode is Strategy.MULTI_CORE:
            return block_lane // self.lanes_per_core, block_lane % self.lanes_per_core
        return block_lane // self.lanes_per_core, 0


class MimdDevice(DeviceBase):
    def __init__(self, desc: DeviceDesc):
        if desc.model is not DeviceModel.MIMD:
            raise ValueError("a MIMD device needs a MIMD device description")
        super().__init__(desc)
        self.cores = [
            CoreContext(i, np.zeros(desc.scratchpad_bytes, dtype=np.uint8)) for i in range(desc.core_count)
        ]
        self.assignment: Optional[BlockAssignment] = None

    # -- block assignment ------------------------------------------------------------

    def assign_blocks(self, grid, block_size: int, cfg: LoweringConfig) -> BlockAssignment:
        lanes = self.desc.lane_count
        mode = cfg.mimd_strategy
        if mode is Strategy.SINGLE_CORE:
            per_core, cpb = min(block_size, lanes), 1
        elif mode is Strategy.MULTI_CORE:
            per_core = cfg.partition_width or lanes
            if per_core > lanes:
                raise LaunchError("partition width exceeds the core lane count")
            if block_size % per_core:
                raise LaunchError(f"partition width {per_core} does not divide the block size {block_size}")
            cpb = block_size // per_core
        else:
            per_core, cpb = lanes, -(-block_size // lanes)
        if cpb > self.desc.core_count:
            raise LaunchError(
                f"a block of {block_size} threads needs {cpb} cores; the device has {self.desc.core_count}"
            )
        per_wave = self.desc.core_count // cpb
        nblocks = block_threads(dims3(grid))
        waves = tuple(
            tuple((lin, tuple(range((lin - s) * cpb, (lin - s + 1) * cpb))) for lin in range(s, min(s + per_wave, nblocks)))
            for s in range(0, nblocks, per_wave)
        )
        return BlockAssignment(mode, block_size, cpb, per_core, waves)

    # -- engine hooks -----------------------------------------------------------------

    def block_shared(self, engine: Engine, block) -> np.ndarray:
        size = engine.prog.shared_mem_bytes
        if engine.mode == "single_core":
            pad = self.cores[block.cores[0]].scratchpad
            pad[:size] = 0
            return pad[:size]
        # multi-core blocks keep shared memory in a reserved global region
        return np.zeros(size, dtype=np.uint8)

    def partition(self, engine: Engine, block):
        n = engine.nthreads
        a = self.assignment
        if engine.mode == "independent":
            return [(np.array([t]), block.cores[t // a.lanes_per_core]) for t in range(n)]
        w = a.lanes_per_core
        if engine.mode == "single_core":
            return [(np.arange(s, min(s + w, n)), block.cores[0]) for s in range(0, n, w)]
        return [(np.arange(s, s + w), block.cores[i]) for i, s in enumerate(range(0, n, w))]

    def dma(self, core: int, direction: str, global_offset: int, local_offset: int, length: int,
            local: Optional[np.ndarray] = None, space: str = "global", memory: Optional[np.ndarray] = None):
        """Synchronous copy between a global-side region and core-local memory."""
        ctx = self.cores[core]
        local = ctx.scratchpad if local is None else local
        memory = self.mem if memory is None else memory
        if global_offset < 0 or global_offset + length > len(memory):
            raise FaultError(f"DMA {direction} out of range at {global_offset:#x} on core {core}",
                             thread=core, address=global_offset)
        if local_offset < 0 or local_offset + length > len(local):
            raise FaultError(f"DMA {direction} exceeds local memory at {local_offset:#x} on core {core}",
                             thread=core, address=local_offset)
        if direction == "READ":
            local[local_offset:local_offset + length] = memory[global_offset:global_offset + length]
        elif direction == "WRITE":
            memory[global_offset:global_offset + length] = local[local_offset:local_offset + length]
        else:
            raise ValueError(f"unknown DMA direction {direction!r}")
        ctx.dma_log.append((direction, space, global_offset, length))

    def log_plan(self, group, site, gen, plan):
        self.cores[group.core].plan_log.append((group.block.linear, site, gen, plan))

    def log_exchange(self, group, direction, count):
        self.cores[group.core].dma_log.append((direction, "exchange", 0, count * 16))

    # -- launches -------------------------------------------------------------------------

    def launch(self, prog: DeviceProgram, assignment: BlockAssignment, grid, block, args, *,
               resume: Optional[ResumeState] = None, seed=None, trigger: Optional[PauseTrigger] = None,
               trace: bool = False, regions=None) -> LaunchTicket:
        if prog.target_model is not DeviceModel.MIMD:
            raise LaunchError("program was not lowered for a MIMD device")
        if prog.strategy is not assignment.mode:
            raise LaunchError(f"program lowered for {prog.strategy.value} but assignment is {assignment.mode.value}")
        if block_threads(dims3(block)) != assignment.block_size:
            raise LaunchError("block assignment was made for a different block size")
        if prog.shared_mem_bytes > self.desc.scratchpad_bytes and assignment.mode is Strategy.SINGLE_CORE:
            raise LaunchError("kernel shared memory does not fit the core scratchpad")
        self.assignment = assignment
        for c in self.cores:
            c.dma_log.clear()
            c.plan_log.clear()
        engine = Engine(self, prog, grid, block, args, assignment.waves, mode=_MODES[assignment.mode],
                        resume=resume, seed=seed, trigger=trigger, trace=trace, regions=regions)
        return self._ticket(engine, grid, block)


def resolve_divergence(any_then: list, any_else: list) -> tuple:
    """Path plan shared by all participating cores of a divergence point."""
    if len(any_then) != len(any_else):
        raise ProtocolError("every participant must report both branch bits")
    return agreement_plan(any_then, any_else)


def create_device(desc: DeviceDesc) -> MimdDevice:
    return MimdDevice(desc)


def assign_blocks(dev: MimdDevice, grid, block_size: int, cfg: LoweringConfig) -> BlockAssignment:
    return dev.assign_blocks(grid, block_size, cfg)


def launch(dev: MimdDevice, prog: DeviceProgram, assignment: BlockAssignment, grid, block, args, **kw) -> LaunchTicket:
    return dev.launch(prog, assignment, grid, block, args, **kw)


def dma(dev: MimdDevice, core: int, direction: str, global_offset: int, local_offset: int, length: int):
    dev.dma(core, direction, global_offset, local_offset, length)


def run_until_quiescent(dev: MimdDevice, ticket: LaunchTicket, budget: Optional[int] = None) -> str:
    return dev.run_until_quiescent(ticket, budget)


def collect_block_dumps(dev: MimdDevice, ticket: LaunchTicket) -> list:
    return dev.collect_block_dumps(ticket)


def read_global(dev: MimdDevice, offset: int, length: int) -> bytes:
    return dev.read_global(offset, length)


def write_global(dev: MimdDevice, offset: int, data) -> None:
    dev.write_global(offset, data)


def set_pause_flag(dev: MimdDevice) -> None:
    dev.set_pause_flag()
