"""Random, structurally valid state blobs for wire-format tests."""

import random

import numpy as np

from hetgpu.engine import BlockDump
from hetgpu.ir import PTR_TAG, TYPE_TAGS
from hetgpu.snapshot import ARG_POINTER, ARG_SCALAR, StateBlob

TAGS = sorted(set(TYPE_TAGS.values()) | {PTR_TAG})


def _bytes(rng: random.Random, n: int) -> bytes:
    return bytes(rng.getrandbits(8) for _ in range(n))


def random_blob(rng: random.Random) -> StateBlob:
    grid = (rng.randint(1, 4), rng.randint(1, 3), 1)
    block = (rng.choice([1, 3, 8, 32]), rng.randint(1, 2), 1)
    nblocks, nthreads = grid[0] * grid[1], block[0] * block[1]
    completed = np.array([rng.random() < 0.4 for _ in range(nblocks)], dtype=bool)
    args = []
    for _ in range(rng.randint(0, 5)):
        if rng.random() < 0.5:
            args.append((ARG_POINTER, PTR_TAG, rng.randint(1, 9)))
        else:
            args.append((ARG_SCALAR, rng.choice(TAGS[:-1]), rng.getrandbits(64)))
    dumps = []
    for lin in range(nblocks):
        if completed[lin] or rng.random() < 0.3:
            continue
        nregs = rng.randint(0, 6)
        regs = sorted(rng.sample(range(1, 64), nregs))
        exited = np.array([rng.random() < 0.25 for _ in range(nthreads)], dtype=bool)
        values = np.array([[rng.getrandbits(64) for _ in range(nregs)] for _ in range(nthreads)],
                          dtype=np.uint64).reshape(nthreads, nregs)
        values[exited] = 0
        dumps.append(BlockDump(
            block_index=(lin % grid[0], lin // grid[0], 0), resume_point_id=rng.randint(0, 5),
            thread_count=nthreads, reg_ids=tuple(regs), tags=tuple(rng.choice(TAGS) for _ in regs),
            values=values, exited=exited, shared_mem=_bytes(rng, rng.choice([0, 0, 16, 40])),
            local_mem=_bytes(rng, rng.choice([0, 0, 8 * nthreads])),
        ))
    memory = [(vp, n, _bytes(rng, n)) for vp, n in
              zip(sorted(rng.sample(range(1, 20), rng.randint(0, 3))), (rng.randint(0, 64) for _ in range(3)))]
    return StateBlob(
        module_id="".join(rng.choice("0123456789abcdef") for _ in range(64)),
        kernel_name=rng.choice(["k", "reduce_sum", "ядро", "x" * 40]),
        grid=grid, block=block, segment_interval=rng.randint(1, 1000), args=args,
        completed=completed, dumps=dumps, memory=memory,
    )
