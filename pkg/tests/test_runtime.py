import threading

import numpy as np
import pytest

from hetgpu import corpus, oracle, runtime
from hetgpu.engine import COMPLETED, PAUSED, RUNNING
from hetgpu.errors import LaunchError, LoweringError, StateError, ValidationError
from hetgpu.ir import DeviceDesc, DeviceModel
from hetgpu.lowering import Strategy
from hetgpu.runtime import Runtime, default_segment_interval, default_strategy

SIMT = DeviceDesc(DeviceModel.SIMT)
MIMD = DeviceDesc(DeviceModel.MIMD, core_count=16)


@pytest.fixture
def rt():
    r = Runtime()
    r.register_device(SIMT)
    r.register_device(MIMD)
    return r


def _upload(rt, case, stream):
    vps = []
    for b in case.buffer_bytes():
        vp = rt.het_malloc(len(b), stream)
        rt.write(vp, b)
        vps.append(vp)
    args = [vps[a] if r.ptr else a for r, a in zip(case.kernel.params, case.args)]
    return vps, args


def _expected(case):
    return [bytes(b) for b in oracle.run_oracle(case.kernel, case.grid, case.block, case.args,
                                                case.buffer_bytes()).buffers]


def test_memcpy_round_trips(rt):
    vp = rt.het_malloc(16)
    rt.het_memcpy(vp, np.arange(4, dtype=np.uint32))
    out = np.zeros(4, dtype=np.uint32)
    rt.het_memcpy(out, vp)
    assert out.tolist() == [0, 1, 2, 3]
    other = rt.het_malloc(16)
    rt.het_memcpy(other, vp, 8)
    assert rt.read(other) == np.arange(2, dtype=np.uint32).tobytes() + bytes(8)


def test_memcpy_validation(rt):
    vp = rt.het_malloc(8)
    with pytest.raises(ValidationError):
        rt.het_memcpy(vp, bytes(16), 16)
    with pytest.raises(ValidationError):
        rt.het_memcpy(b"\0" * 8, vp)
    with pytest.raises(ValidationError):
        rt.het_memcpy(vp, vp)
    with pytest.raises(ValidationError):
        rt.het_memcpy(vp, bytes(8), -1)
    with pytest.raises(ValidationError):
        rt.het_malloc(0)
    rt.het_free(vp)
    with pytest.raises(StateError):
        rt.het_memcpy(vp, bytes(8))


@pytest.mark.parametrize("device_id", [0, 1])
def test_launch_through_the_runtime(rt, device_id):
    case = corpus.saxpy_case()
    s = rt.create_stream(device_id)
    vps, args = _upload(rt, case, s)
    op = rt.launch_kernel(rt.load_module(case.source), "saxpy", case.grid, case.block, args, s)
    assert op.status == "QUEUED"
    rt.synchronize(s)
    assert op.status == COMPLETED and op.instructions > 0
    assert [rt.read(v) for v in vps] == _expected(case)


def test_stream_order_and_async_copies(rt):
    case = corpus.vecadd_case(200, 64)
    s = rt.create_stream(1)
    vps, args = _upload(rt, case, s)
    m = rt.load_module(case.source)
    first = bytearray(800)
    rt.launch_kernel(m, "vecadd", case.grid, case.block, args, s)
    rt.het_memcpy(first, vps[2], stream=s)
    rt.het_memcpy(vps[0], bytes(800), stream=s)  # zero a, then recompute
    rt.launch_kernel(m, "vecadd", case.grid, case.block, args, s)
    rt.synchronize(s)
    assert bytes(first) == _expected(case)[2]
    assert rt.read(vps[2]) == case.buffers[1].tobytes()
    kinds = [type(op).__name__ for op in s.log]
    assert kinds == ["LaunchOp", "CopyOp", "CopyOp", "LaunchOp"]


def test_data_follows_the_stream_between_devices(rt):
    case = corpus.saxpy_case()
    s0, s1 = rt.create_stream(0), rt.create_stream(1)
    vps, args = _upload(rt, case, s0)
    m = rt.load_module(case.source)
    rt.launch_kernel(m, "saxpy", case.grid, case.block, args, s0)
    rt.synchronize(s0)
    rt.launch_kernel(m, "saxpy", case.grid, case.block, args, s1)
    rt.synchronize(s1)
    once = _expected(case)
    x = np.frombuffer(case.buffer_bytes()[0], dtype=np.float32)
    y = np.frombuffer(once[1], dtype=np.float32)
    twice = oracle.run_oracle(case.kernel, case.grid, case.block, case.args, [x.tobytes(), y.tobytes()])
    assert rt.read(vps[1]) == bytes(twice.buffers[1])
    assert set(vps[1].backing) == {0, 1}


def test_translation_cache(rt):
    case = corpus.saxpy_case()
    s = rt.create_stream(1)
    _, args = _upload(rt, case, s)
    m = rt.load_module(case.source)
    for _ in range(3):
        rt.launch_kernel(m, "saxpy", case.grid, case.block, args, s)
    assert (rt.cache.stats.misses, rt.cache.stats.hits) == (1, 2)
    rt.launch_kernel(m, "saxpy", case.grid, (32,), args, s)
    rt.launch_kernel(m, "saxpy", case.grid, case.block, args, s, migration_mode=False)
    rt.launch_kernel(m, "saxpy", case.grid, case.block, args, rt.create_stream(0))
    assert rt.cache.stats.misses == 4 and len(rt.cache) == 4
    rt.synchronize(s)


def test_launch_errors(rt):
    case = corpus.saxpy_case()
    s = rt.create_stream(0)
    vps, args = _upload(rt, case, s)
    m = rt.load_module(case.source)
    with pytest.raises(LaunchError):
        rt.launch_kernel(m, "nope", case.grid, case.block, args, s)
    with pytest.raises(LaunchError):
        rt.launch_kernel(m, "saxpy", case.grid, case.block, args[:-1], s)
    with pytest.raises(LaunchError):
        rt.launch_kernel(m, "saxpy", case.grid, case.block, [args[0], args[1], 5, args[3]], s)
    with pytest.raises(LoweringError):
        rt.launch_kernel(m, "saxpy", case.grid, (2048,), args, s)
    with pytest.raises(StateError):
        rt.create_stream(7)
    with pytest.raises(ValidationError):
        rt.load_module(corpus.SAXPY.replace("RETURN;\n}", "ADD.U32 %r99, %r99, 1;\n    RETURN;\n}"))
    with pytest.raises(StateError):
        Runtime().het_malloc(8)


def test_ballot_launch_shape_is_checked(rt):
    case = corpus.bitcount_case()
    s = rt.create_stream(0)
    _, args = _upload(rt, case, s)
    m = rt.load_module(case.source)
    # bitcount uses BALLOT, whose 64-bit result limits blocks to 64 threads
    with pytest.raises(LaunchError):
        rt.launch_kernel(m, "bitcount", (1,), (128,), args, s)


def test_default_strategy_rule(monkeypatch):
    monkeypatch.delenv(runtime.ENV_STRATEGY, raising=False)
    d = DeviceDesc(DeviceModel.MIMD, core_count=4, lane_count=32)
    assert default_strategy(d, (32,)) is Strategy.SINGLE_CORE
    assert default_strategy(d, (128,)) is Strategy.MULTI_CORE
    assert default_strategy(d, (96, 2)) is Strategy.SINGLE_CORE  # six cores needed, four present
    assert default_strategy(d, (48,)) is Strategy.SINGLE_CORE
    monkeypatch.setenv(runtime.ENV_STRATEGY, "Independent")
    assert default_strategy(d, (32,)) is Strategy.INDEPENDENT_THREAD
    monkeypatch.setenv(runtime.ENV_STRATEGY, "warp")
    with pytest.raises(ValidationError):
        default_strategy(d, (32,))


def test_segment_interval_from_environment(monkeypatch, rt):
    monkeypatch.delenv(runtime.ENV_SEGMENT_X, raising=False)
    assert default_segment_interval() == 64
    monkeypatch.setenv(runtime.ENV_SEGMENT_X, "5")
    assert rt.config_for(SIMT, (32,)).segment_interval_X == 5
    assert rt.config_for(SIMT, (32,), segment_interval=9).segment_interval_X == 9
    for bad in ("0", "x"):
        monkeypatch.setenv(runtime.ENV_SEGMENT_X, bad)
        with pytest.raises(ValidationError):
            default_segment_interval()


def test_config_defaults_per_device(rt):
    assert rt.config_for(SIMT, (64,)).migration_mode is True
    cfg = rt.config_for(MIMD, (64,))
    assert cfg.mimd_strategy is Strategy.MULTI_CORE and cfg.partition_width == 32
    assert Runtime(migration_mode=False).config_for(SIMT, (64,)).migration_mode is False


def test_budgeted_advance_and_pause_request(rt):
    case = corpus.reduction_case()
    s = rt.create_stream(0)
    vps, args = _upload(rt, case, s)
    rt.launch_kernel(rt.load_module(case.source), "reduce_sum", case.grid, case.block, args, s,
                     segment_interval=case.segment_interval)
    assert rt.advance(s, budget=200) == RUNNING
    rt.request_pause(s)
    assert rt.advance(s) == PAUSED
    with pytest.raises(StateError):
        rt.synchronize(s)


def test_independent_streams_on_separate_threads(rt):
    case = corpus.saxpy_case()
    results, errors = {}, []

    def work(dev):
        try:
            s = rt.create_stream(dev)
            vps, args = _upload(rt, case, s)
            rt.launch_kernel(rt.load_module(case.source), "saxpy", case.grid, case.block, args, s)
            rt.advance(s)
            results[dev] = vps
        except Exception as e:  # pragma: no cover - reported below
            errors.append(e)

    threads = [threading.Thread(target=work, args=(d,)) for d in (0, 1)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
    want = _expected(case)
    for vps in results.values():
        assert [rt.read(v) for v in vps] == want


def test_module_level_default_runtime():
    runtime.reset_runtime()
    dev = runtime.register_device(MIMD)
    case = corpus.vecadd_case(64, 32)
    m = runtime.load_module(case.source)
    vps = []
    for b in case.buffer_bytes():
        vp = runtime.het_malloc(len(b))
        runtime.het_memcpy(vp, b)
        vps.append(vp)
    runtime.launch_kernel(m, "vecadd", case.grid, case.block, [vps[0], vps[1], vps[2], 64])
    runtime.device_synchronize()
    out = bytearray(256)
    runtime.het_memcpy(out, vps[2])
    assert bytes(out) == _expected(case)[2] and dev == 0
    runtime.reset_runtime()
