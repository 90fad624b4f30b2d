"""Reference kernels with deterministic inputs.

Each :class:`Case` bundles hetIR source, a launch shape, initial buffers and
the kernel arguments (a buffer index for pointer parameters, a scalar value
otherwise). The same cases drive the oracle, every device model and the
migration tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import asm
from .ir import Kernel

VECADD = """
.version 1
// C[i] = A[i] + B[i]
.func vecadd(.u64<1> %rd0, .u64<1> %rd1, .u64<1> %rd2, .u32 %r3)
{
    .reg .u32 %r4;
    .reg .u64 %rd5;
    .reg .u64<1> %rd6, %rd7, %rd8;
    .reg .f32 %r9, %r10, %r11;
    .reg .pred %p12;
    GET_GLOBAL_ID %r4, 0;
    SETP.LT.U32 %p12, %r4, %r3;
    @PRED(%p12) {
        CVT.U64.U32 %rd5, %r4;
        SHL.U64 %rd5, %rd5, 2;
        ADD.U64 %rd6, %rd0, %rd5;
        ADD.U64 %rd7, %rd1, %rd5;
        ADD.U64 %rd8, %rd2, %rd5;
        LD_GLOBAL.F32 %r9, [%rd6];
        LD_GLOBAL.F32 %r10, [%rd7];
        ADD.F32 %r11, %r9, %r10;
        ST_GLOBAL.F32 [%rd8], %r11;
    }
    RETURN;
}
"""

SAXPY = """
.version 1
// Y[i] = a * X[i] + Y[i]
.func saxpy(.u32 %r0, .f32 %r1, .u64<1> %rd2, .u64<1> %rd3)
{
    .reg .u32 %r4;
    .reg .u64 %rd5;
    .reg .u64<1> %rd6, %rd7;
    .reg .f32 %r8, %r9, %r10;
    .reg .pred %p11;
    GET_GLOBAL_ID %r4, 0;
    SETP.GE.U32 %p11, %r4, %r0;
    @PRED(%p11) {
        RETURN;
    }
    CVT.U64.U32 %rd5, %r4;
    SHL.U64 %rd5, %rd5, 2;
    ADD.U64 %rd6, %rd2, %rd5;
    ADD.U64 %rd7, %rd3, %rd5;
    LD_GLOBAL.F32 %r8, [%rd6];
    LD_GLOBAL.F32 %r9, [%rd7];
    FMA.F32 %r10, %r1, %r8, %r9;
    ST_GLOBAL.F32 [%rd7], %r10;
    RETURN;
}
"""

MATMUL = """
.version 1
// C = A x B for square n x n matrices (n a multiple of 16), 16x16 tiles in shared memory
.func matmul(.u64<1> %rd0, .u64<1> %rd1, .u64<1> %rd2, .u32 %r3)
{
    .shared 2048;
    .reg .u32 %r4, %r5, %r6, %r7, %r8, %r9, %r11, %r12, %r13, %r14, %r18, %r19, %r23, %r24, %r25, %r30, %r31;
    .reg .f32 %r10, %r17, %r22, %r26, %r27;
    .reg .u64 %rd15, %rd20, %rd32;
    .reg .u64<1> %rd16, %rd21, %rd33;
    .reg .pred %p28, %p29;
    GET_LOCAL_ID %r4, 0;
    GET_LOCAL_ID %r5, 1;
    GET_BLOCK_ID %r6, 0;
    GET_BLOCK_ID %r7, 1;
    MUL.U32 %r8, %r7, 16;
    ADD.U32 %r8, %r8, %r5;
    MUL.U32 %r9, %r6, 16;
    ADD.U32 %r9, %r9, %r4;
    MOV.F32 %r10, 0.0;
    MOV.U32 %r11, 0;
    MUL.U32 %r12, %r5, 16;
    ADD.U32 %r12, %r12, %r4;
    SHL.U32 %r12, %r12, 2;
    SHR.U32 %r30, %r3, 4;
    @LOOP {
        MUL.U32 %r13, %r11, 16;
        ADD.U32 %r13, %r13, %r4;
        MUL.U32 %r14, %r8, %r3;
        ADD.U32 %r14, %r14, %r13;
        CVT.U64.U32 %rd15, %r14;
        SHL.U64 %rd15, %rd15, 2;
        ADD.U64 %rd16, %rd0, %rd15;
        LD_GLOBAL.F32 %r17, [%rd16];
        ST_SHARED.F32 [%r12], %r17;
        MUL.U32 %r18, %r11, 16;
        ADD.U32 %r18, %r18, %r5;
        MUL.U32 %r19, %r18, %r3;
        ADD.U32 %r19, %r19, %r9;
        CVT.U64.U32 %rd20, %r19;
        SHL.U64 %rd20, %rd20, 2;
        ADD.U64 %rd21, %rd1, %rd20;
        LD_GLOBAL.F32 %r22, [%rd21];
        ST_SHARED.F32 [%r12+1024], %r22;
        BAR_SHARED;
        MOV.U32 %r23, 0;
        @LOOP {
            MUL.U32 %r24, %r5, 16;
            ADD.U32 %r24, %r24, %r23;
            SHL.U32 %r24, %r24, 2;
            MUL.U32 %r25, %r23, 16;
            ADD.U32 %r25, %r25, %r4;
            SHL.U32 %r25, %r25, 2;
            LD_SHARED.F32 %r26, [%r24];
            LD_SHARED.F32 %r27, [%r25+1024];
            FMA.F32 %r10, %r26, %r27, %r10;
            ADD.U32 %r23, %r23, 1;
            SETP.GE.U32 %p28, %r23, 16;
        } @BREAK(%p28);
        BAR_SHARED;
        ADD.U32 %r11, %r11, 1;
        SETP.GE.U32 %p29, %r11, %r30;
    } @BREAK(%p29);
    MUL.U32 %r31, %r8, %r3;
    ADD.U32 %r31, %r31, %r9;
    CVT.U64.U32 %rd32, %r31;
    SHL.U64 %rd32, %rd32, 2;
    ADD.U64 %rd33, %rd2, %rd32;
    ST_GLOBAL.F32 [%rd33], %r10;
    RETURN;
}
"""

REDUCTION = """
.version 1
// per-block tree sum of X into OUT[block]; block size 64
.func reduce_sum(.u64<1> %rd0, .u64<1> %rd1, .u32 %r2)
{
    .shared 256;
    .reg .u32 %r3, %r4, %r5, %r6, %r11, %r12, %r17;
    .reg .f32 %r7, %r13, %r14;
    .reg .u64 %rd8, %rd18;
    .reg .u64<1> %rd9, %rd19;
    .reg .pred %p10, %p15, %p16, %p20;
    GET_GLOBAL_ID %r3, 0;
    GET_LOCAL_ID %r4, 0;
    SHL.U32 %r5, %r4, 2;
    MOV.F32 %r7, 0.0;
    SETP.LT.U32 %p10, %r3, %r2;
    @PRED(%p10) {
        CVT.U64.U32 %rd8, %r3;
        SHL.U64 %rd8, %rd8, 2;
        ADD.U64 %rd9, %rd0, %rd8;
        LD_GLOBAL.F32 %r7, [%rd9];
    }
    ST_SHARED.F32 [%r5], %r7;
    BAR_SHARED;
    MOV.U32 %r6, 32;
    @LOOP {
        SETP.LT.U32 %p15, %r4, %r6;
        @PRED(%p15) {
            ADD.U32 %r11, %r4, %r6;
            SHL.U32 %r12, %r11, 2;
            LD_SHARED.F32 %r13, [%r5];
            LD_SHARED.F32 %r14, [%r12];
            ADD.F32 %r13, %r13, %r14;
            ST_SHARED.F32 [%r5], %r13;
        }
        BAR_SHARED;
        SHR.U32 %r6, %r6, 1;
        SETP.EQ.U32 %p16, %r6, 0;
    } @BREAK(%p16);
    SETP.EQ.U32 %p20, %r4, 0;
    @PRED(%p20) {
        GET_BLOCK_ID %r17, 0;
        LD_SHARED.F32 %r13, [0];
        CVT.U64.U32 %rd18, %r17;
        SHL.U64 %rd18, %rd18, 2;
        ADD.U64 %rd19, %rd1, %rd18;
        ST_GLOBAL.F32 [%rd19], %r13;
    }
    RETURN;
}
"""

SCAN = """
.version 1
// per-block inclusive prefix sum (Hillis-Steele); block size 64
.func inclusive_scan(.u64<1> %rd0, .u64<1> %rd1, .u32 %r2)
{
    .shared 256;
    .reg .u32 %r3, %r4, %r5, %r6, %r11, %r12;
    .reg .f32 %r7, %r13;
    .reg .u64 %rd8;
    .reg .u64<1> %rd9, %rd14;
    .reg .pred %p10, %p15, %p16;
    GET_GLOBAL_ID %r3, 0;
    GET_LOCAL_ID %r4, 0;
    SHL.U32 %r5, %r4, 2;
    CVT.U64.U32 %rd8, %r3;
    SHL.U64 %rd8, %rd8, 2;
    MOV.F32 %r7, 0.0;
    SETP.LT.U32 %p10, %r3, %r2;
    @PRED(%p10) {
        ADD.U64 %rd9, %rd0, %rd8;
        LD_GLOBAL.F32 %r7, [%rd9];
    }
    ST_SHARED.F32 [%r5], %r7;
    BAR_SHARED;
    MOV.U32 %r6, 1;
    @LOOP {
        SETP.GE.U32 %p15, %r4, %r6;
        @PRED(%p15) {
            SUB.U32 %r11, %r4, %r6;
            SHL.U32 %r12, %r11, 2;
            LD_SHARED.F32 %r13, [%r12];
            ADD.F32 %r7, %r7, %r13;
        }
        BAR_SHARED;
        ST_SHARED.F32 [%r5], %r7;
        BAR_SHARED;
        SHL.U32 %r6, %r6, 1;
        SETP.GE.U32 %p16, %r6, 64;
    } @BREAK(%p16);
    @PRED(%p10) {
        ADD.U64 %rd14, %rd1, %rd8;
        ST_GLOBAL.F32 [%rd14], %r7;
    }
    RETURN;
}
"""

BITCOUNT = """
.version 1
// OUT[i] = popcount(X[i]); thread 0 of each block stores the ballot of odd counts
.func bitcount(.u64<1> %rd0, .u64<1> %rd1, .u64<1> %rd2, .u32 %r3)
{
    .reg .u32 %r4, %r5, %r6, %r7, %r8, %r9, %r19;
    .reg .u64 %rd10, %rd17, %rd20;
    .reg .u64<1> %rd11, %rd12, %rd21;
    .reg .pred %p13, %p14, %p15, %p16, %p18, %p22, %p23;
    GET_GLOBAL_ID %r4, 0;
    MOV.U32 %r5, 0;
    MOV.U32 %r6, 0;
    CVT.U64.U32 %rd10, %r4;
    SHL.U64 %rd10, %rd10, 2;
    SETP.LT.U32 %p13, %r4, %r3;
    @PRED(%p13) {
        ADD.U64 %rd11, %rd0, %rd10;
        LD_GLOBAL.U32 %r5, [%rd11];
    }
    MOV.U32 %r7, 0;
    @LOOP {
        SHR.U32 %r8, %r5, %r7;
        AND.U32 %r8, %r8, 1;
        SETP.NE.U32 %p14, %r8, 0;
        VOTE_ANY %p15, %p14;
        @PRED(%p15) {
            ADD.U32 %r6, %r6, %r8;
        }
        ADD.U32 %r7, %r7, 1;
        SETP.EQ.U32 %p16, %r7, 32;
    } @BREAK(%p16);
    AND.U32 %r9, %r6, 1;
    SETP.NE.U32 %p18, %r9, 0;
    BALLOT %rd17, %p18;
    @PRED(%p13) {
        ADD.U64 %rd12, %rd1, %rd10;
        ST_GLOBAL.U32 [%rd12], %r6;
    }
    GET_LOCAL_ID %r19, 0;
    SETP.EQ.U32 %p22, %r19, 0;
    VOTE_ALL %p23, %p13;
    @PRED(%p22) {
        GET_BLOCK_ID %r19, 0;
        CVT.U64.U32 %rd20, %r19;
        SHL.U64 %rd20, %rd20, 3;
        ADD.U64 %rd21, %rd2, %rd20;
        ST_GLOBAL.U64 [%rd21], %rd17;
    }
    RETURN;
}
"""

MONTE_CARLO = """
.version 1
// each thread draws ITERS points from its own LCG stream; HITS[0] += points inside the unit circle
.func monte_carlo(.u64<1> %rd0, .u64<1> %rd1, .u32 %r2, .u32 %r3)
{
    .reg .u32 %r4, %r5, %r6, %r7, %r8, %r20;
    .reg .f32 %r9, %r10, %r11;
    .reg .u64 %rd12;
    .reg .u64<1> %rd13;
    .reg .pred %p14, %p15;
    GET_GLOBAL_ID %r4, 0;
    MUL.U32 %r5, %r4, 2654435761;
    XOR.U32 %r5, %r5, %r3;
    MOV.U32 %r6, 0;
    MOV.U32 %r7, 0;
    @LOOP {
        MUL.U32 %r5, %r5, 1664525;
        ADD.U32 %r5, %r5, 1013904223;
        SHR.U32 %r8, %r5, 8;
        CVT.F32.U32 %r9, %r8;
        MUL.F32 %r9, %r9, 0x1p-24;
        MUL.U32 %r5, %r5, 1664525;
        ADD.U32 %r5, %r5, 1013904223;
        SHR.U32 %r8, %r5, 8;
        CVT.F32.U32 %r10, %r8;
        MUL.F32 %r10, %r10, 0x1p-24;
        MUL.F32 %r11, %r9, %r9;
        FMA.F32 %r11, %r10, %r10, %r11;
        SETP.LE.F32 %p14, %r11, 1.0;
        @PRED(%p14) {
            ADD.U32 %r6, %r6, 1;
        }
        ADD.U32 %r7, %r7, 1;
        SETP.GE.U32 %p15, %r7, %r2;
    } @BREAK(%p15);
    ATOM_ADD.U32 %r20, [%rd0], %r6;
    CVT.U64.U32 %rd12, %r4;
    SHL.U64 %rd12, %rd12, 2;
    ADD.U64 %rd13, %rd1, %rd12;
    ST_GLOBAL.U32 [%rd13], %r6;
    RETURN;
}
"""

MATVEC_RELU = """
.version 1
// Y[row] = relu(sum_j A[row, j] * X[j]); A is rows x cols, row-major
.func matvec_relu(.u64<1> %rd0, .u64<1> %rd1, .u64<1> %rd2, .u32 %r3, .u32 %r4)
{
    .reg .u32 %r5, %r6, %r7;
    .reg .f32 %r8, %r9, %r10;
    .reg .u64 %rd11, %rd12, %rd18;
    .reg .u64<1> %rd13, %rd14, %rd19;
    .reg .pred %p15, %p16, %p17;
    GET_GLOBAL_ID %r5, 0;
    SETP.GE.U32 %p15, %r5, %r3;
    @PRED(%p15) {
        RETURN;
    }
    MOV.F32 %r8, 0.0;
    MOV.U32 %r6, 0;
    MUL.U32 %r7, %r5, %r4;
    @LOOP {
        CVT.U64.U32 %rd11, %r7;
        SHL.U64 %rd11, %rd11, 2;
        ADD.U64 %rd13, %rd0, %rd11;
        LD_GLOBAL.F32 %r9, [%rd13];
        CVT.U64.U32 %rd12, %r6;
        SHL.U64 %rd12, %rd12, 2;
        ADD.U64 %rd14, %rd1, %rd12;
        LD_GLOBAL.F32 %r10, [%rd14];
        FMA.F32 %r8, %r9, %r10, %r8;
        ADD.U32 %r7, %r7, 1;
        ADD.U32 %r6, %r6, 1;
        SETP.GE.U32 %p16, %r6, %r4;
    } @BREAK(%p16);
    CVT.U64.U32 %rd18, %r5;
    SHL.U64 %rd18, %rd18, 2;
    ADD.U64 %rd19, %rd2, %rd18;
    SETP.GT.F32 %p17, %r8, 0.0;
    @PRED(%p17) {
        ST_GLOBAL.F32 [%rd19], %r8;
    } @ELSE {
        ST_GLOBAL.F32 [%rd19], 0.0;
    }
    RETURN;
}
"""

# -- kernels used by individual tests ------------------------------------------

HALF_RETURN = """
.version 1
// the upper half of each block returns before the barrier loop
.func half_return(.u64<1> %rd0, .u32 %r1)
{
    .reg .u32 %r2, %r3, %r4, %r5, %r6;
    .reg .u64 %rd7;
    .reg .u64<1> %rd8;
    .reg .pred %p9, %p10;
    GET_GLOBAL_ID %r2, 0;
    GET_LOCAL_ID %r3, 0;
    CVT.U64.U32 %rd7, %r2;
    SHL.U64 %rd7, %rd7, 2;
    ADD.U64 %rd8, %rd0, %rd7;
    MUL.U32 %r4, %r2, 3;
    GET_BLOCK_DIM %r6, 0;
    SHR.U32 %r6, %r6, 1;
    SETP.GE.U32 %p9, %r3, %r6;
    @PRED(%p9) {
        ST_GLOBAL.U32 [%rd8], %r4;
        RETURN;
    }
    MOV.U32 %r5, 0;
    @LOOP {
        MUL.U32 %r4, %r4, 5;
        ADD.U32 %r4, %r4, %r5;
        BAR_SHARED;
        ADD.U32 %r5, %r5, 1;
        SETP.GE.U32 %p10, %r5, %r1;
    } @BREAK(%p10);
    ST_GLOBAL.U32 [%rd8], %r4;
    RETURN;
}
"""

ATOMIC_COUNTER = """
.version 1
// every thread adds 1 to COUNTER[0]
.func atomic_counter(.u64<1> %rd0)
{
    .reg .u32 %r1;
    ATOM_ADD.U32 %r1, [%rd0], 1;
    RETURN;
}
"""

SHUFFLE_ROTATE = """
.version 1
// OUT[i] = X[block_base + (lid + 1) % block_size] via SHUFFLE
.func shuffle_rotate(.u64<1> %rd0, .u64<1> %rd1)
{
    .reg .u32 %r2, %r3, %r4, %r5;
    .reg .f32 %r6, %r7;
    .reg .u64 %rd8;
    .reg .u64<1> %rd9, %rd10;
    GET_GLOBAL_ID %r2, 0;
    GET_LOCAL_ID %r3, 0;
    GET_BLOCK_DIM %r4, 0;
    CVT.U64.U32 %rd8, %r2;
    SHL.U64 %rd8, %rd8, 2;
    ADD.U64 %rd9, %rd0, %rd8;
    LD_GLOBAL.F32 %r6, [%rd9];
    ADD.U32 %r5, %r3, 1;
    REM.U32 %r5, %r5, %r4;
    SHUFFLE.F32 %r7, %r5, %r6;
    ADD.U64 %rd10, %rd1, %rd8;
    ST_GLOBAL.F32 [%rd10], %r7;
    RETURN;
}
"""


@dataclass
class Case:
    """A kernel plus one concrete launch."""

    name: str
    source: str
    grid: tuple
    block: tuple
    buffers: list  # numpy arrays
    args: list  # buffer index for pointer params, scalar otherwise
    outputs: tuple  # indices of buffers the kernel writes
    segment_interval: int = 64
    notes: dict = field(default_factory=dict)

    @cached_property
    def module(self):
        return asm.parse(self.source)

    @property
    def kernel(self) -> Kernel:
        return self.module.kernels[0]

    def buffer_bytes(self) -> list:
        return [np.ascontiguousarray(b).tobytes() for b in self.buffers]


def _rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def vecadd_case(n: int = 1000, block: int = 128) -> Case:
    r = _rng(1)
    a = r.standard_normal(n).astype(np.float32)
    b = r.standard_normal(n).astype(np.float32)
    return Case("vecadd", VECADD, (-(-n // block),), (block,), [a, b, np.zeros(n, np.float32)], [0, 1, 2, n], (2,))


def saxpy_case(n: int = 1000, block: int = 64) -> Case:
    r = _rng(2)
    x = r.standard_normal(n).astype(np.float32)
    y = r.standard_normal(n).astype(np.float32)
    return Case("saxpy", SAXPY, (-(-n // block),), (block,), [x, y], [n, 2.5, 0, 1], (1,))


def matmul_case(n: int = 32) -> Case:
    r = _rng(3)
    a = r.standard_normal((n, n)).astype(np.float32)
    b = r.standard_normal((n, n)).astype(np.float32)
    return Case("matmul", MATMUL, (n // 16, n // 16), (16, 16), [a, b, np.zeros((n, n), np.float32)],
                [0, 1, 2, n], (2,), segment_interval=1)


def reduction_case(n: int = 500) -> Case:
    r = _rng(4)
    x = r.standard_normal(n).astype(np.float32)
    blocks = -(-n // 64)
    return Case("reduction", REDUCTION, (blocks,), (64,), [x, np.zeros(blocks, np.float32)], [0, 1, n], (1,),
                segment_interval=2)


def scan_case(n: int = 300) -> Case:
    r = _rng(5)
    x = r.standard_normal(n).astype(np.float32)
    return Case("scan", SCAN, (-(-n // 64),), (64,), [x, np.zeros(n, np.float32)], [0, 1, n], (1,),
                segment_interval=2)


def bitcount_case(n: int = 200) -> Case:
    r = _rng(6)
    x = r.integers(0, 2**32, n, dtype=np.uint64).astype(np.uint32)
    blocks = -(-n // 64)
    return Case("bitcount", BITCOUNT, (blocks,), (64,), [x, np.zeros(n, np.uint32), np.zeros(blocks, np.uint64)],
                [0, 1, 2, n], (1, 2), segment_interval=8)


def monte_carlo_case(threads: int = 256, iters: int = 24, block: int = 64) -> Case:
    return Case("monte_carlo", MONTE_CARLO, (threads // block,), (block,),
                [np.zeros(1, np.uint32), np.zeros(threads, np.uint32)], [0, 1, iters, 12345], (0, 1),
                segment_interval=8)


def matvec_relu_case(rows: int = 96, cols: int = 40) -> Case:
    r = _rng(8)
    a = r.standard_normal((rows, cols)).astype(np.float32)
    x = r.standard_normal(cols).astype(np.float32)
    return Case("matvec_relu", MATVEC_RELU, (-(-rows // 32),), (32,), [a, x, np.zeros(rows, np.float32)],
                [0, 1, 2, rows, cols], (2,), segment_interval=16)


CORPUS = {
    "vecadd": vecadd_case,
    "saxpy": saxpy_case,
    "matmul": matmul_case,
    "reduction": reduction_case,
    "scan": scan_case,
    "bitcount": bitcount_case,
    "monte_carlo": monte_carlo_case,
    "matvec_relu": matvec_relu_case,
}


def corpus() -> list:
    return [make() for make in CORPUS.values()]


def half_return_case(threads: int = 64, rounds: int = 3) -> Case:
    return Case("half_return", HALF_RETURN, (threads // 32,), (32,), [np.zeros(threads, np.uint32)], [0, rounds], (0,),
                segment_interval=64)


def atomic_counter_case(threads: int = 256, block: int = 64) -> Case:
    return Case("atomic_counter", ATOMIC_COUNTER, (threads // block,), (block,), [np.zeros(1, np.uint32)], [0], (0,))


def shuffle_case(n: int = 128, block: int = 64) -> Case:
    r = _rng(9)
    x = r.standard_normal(n).astype(np.float32)
    return Case("shuffle_rotate", SHUFFLE_ROTATE, (n // block,), (block,), [x, np.zeros(n, np.float32)], [0, 1], (1,))
