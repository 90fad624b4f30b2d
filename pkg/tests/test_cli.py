import numpy as np
import pytest

from hetgpu import asm, cli, corpus, oracle
from hetgpu.cli import main, parse_buffer, parse_dims
from hetgpu.ir import SemType


@pytest.fixture
def files(tmp_path):
    paths = {}
    for name, src in [("saxpy", corpus.SAXPY), ("reduce", corpus.REDUCTION), ("half", corpus.HALF_RETURN)]:
        p = tmp_path / f"{name}.hir"
        p.write_text(src)
        paths[name] = str(p)
    return paths


def _report(text: str) -> dict:
    return dict(line.split("=", 1) for line in text.splitlines() if "=" in line)


def test_check_ok_and_canonical(files, capsys):
    assert main(["check", files["saxpy"]]) == 0
    assert "ok: 1 kernel(s): saxpy" in capsys.readouterr().out
    assert main(["check", files["saxpy"], "--emit", "canonical"]) == 0
    out = capsys.readouterr().out
    assert asm.parse(out) == asm.parse(corpus.SAXPY)


def test_check_reports_diagnostics(tmp_path, capsys):
    bad = tmp_path / "bad.hir"
    bad.write_text(corpus.SAXPY.replace("FMA.F32", "FMQ.F32"))
    assert main(["check", str(bad)]) == 1
    err = capsys.readouterr().err
    assert "bad.hir:" in err and "unknown mnemonic" in err
    assert main(["check", str(tmp_path / "missing.hir")]) == 1


@pytest.mark.parametrize("device", ["simt", "mimd"])
def test_run_writes_outputs(files, tmp_path, capsys, device):
    out = tmp_path / device
    rc = main(["run", files["saxpy"], "-k", "saxpy", "--grid", "4", "--block", "64", "-a", "256", "-a", "2.5",
               "-a", "iota:f32#256", "-a", "fill:f32:1#256", "--device", device, "--out", str(out)])
    rep = _report(capsys.readouterr().out)
    assert rc == 0 and rep["status"] == "COMPLETED" and rep["model"] == device
    y = np.fromfile(out / "arg1_rd3.bin", dtype=np.float32)
    assert np.array_equal(y, np.float32(2.5) * np.arange(256, dtype=np.float32) + np.float32(1))
    if device == "mimd":
        assert int(rep["dma_bytes_read"]) == 2 * 4 * 256 and int(rep["dma_bytes_written"]) == 4 * 256


def test_run_pause_and_inspect(files, tmp_path, capsys):
    blob_path = tmp_path / "r.hgpb"
    rc = main(["run", files["reduce"], "-k", "reduce_sum", "--grid", "4", "--block", "64", "-a", "iota:f32#256",
               "-a", "zero:f32#4", "-a", "256", "--pause-at-barrier", "1", "--snapshot", str(blob_path)])
    rep = _report(capsys.readouterr().out)
    assert rc == 0 and rep["status"] == "PAUSED" and int(rep["blocks_paused"]) == 4
    assert main(["blob", "inspect", str(blob_path)]) == 0
    info = _report(capsys.readouterr().out)
    assert info["kernel"] == "reduce_sum" and info["block_dumps"] == "4"
    assert int(info["bytes"]) == blob_path.stat().st_size


def test_migrate_with_verify(files, tmp_path, capsys):
    rc = main(["migrate", files["reduce"], "-k", "reduce_sum", "--grid", "4", "--block", "64",
               "-a", "iota:f32#256", "-a", "zero:f32#4", "-a", "256", "--path", "simt,mimd,simt", "--verify",
               "--segment-x", "2", "--out", str(tmp_path / "o")])
    out = capsys.readouterr().out
    rep = _report(out)
    assert rc == 0 and rep["matches_unmigrated"] == "1" and rep["path"] == "0,1,0"
    assert out.count("hop=") == 2 and "ok=1" in out
    sums = np.fromfile(tmp_path / "o" / "arg1_rd1.bin", dtype=np.float32)
    ref = oracle.run_oracle(corpus.reduction_case(256).kernel, (4,), (64,), [0, 1, 256],
                            [np.arange(256, dtype=np.float32).tobytes(), bytes(16)])
    assert sums.tobytes() == bytes(ref.buffers[1])


def test_migrate_half_return_mimd_to_simt(files, capsys):
    rc = main(["migrate", files["half"], "-k", "half_return", "--grid", "2", "--block", "32", "-a", "zero#64",
               "-a", "5", "--from", "mimd", "--to", "simt", "--pause-at-barrier", "2", "--verify",
               "--strategy", "independent"])
    assert rc == 0 and _report(capsys.readouterr().out)["matches_unmigrated"] == "1"


@pytest.mark.parametrize("argv,code,needle", [
    (["run", "{saxpy}", "-k", "saxpy", "-a", "1"], 1, "takes 4 arguments"),
    (["run", "{saxpy}", "-k", "nope", "-a", "1"], 1, "no kernel named"),
    (["run", "{saxpy}", "-k", "saxpy", "-a", "1", "-a", "x", "-a", "zero", "-a", "zero"], 1, "bad scalar"),
    (["run", "{saxpy}", "-k", "saxpy", "-a", "1", "-a", "1", "-a", "bogus:f32", "-a", "zero"], 1, "initializer"),
    (["run", "{saxpy}", "-k", "saxpy", "--device", "7", "-a", "1", "-a", "1", "-a", "zero", "-a", "zero"], 1,
     "not registered"),
    (["run", "{saxpy}", "-k", "saxpy", "--device", "gpu", "-a", "1", "-a", "1", "-a", "zero", "-a", "zero"], 1,
     "unknown device"),
    (["run", "{saxpy}", "-k", "saxpy", "--block", "0", "-a", "1", "-a", "1", "-a", "zero", "-a", "zero"], 1,
     "bad dimensions"),
    (["run", "{saxpy}", "-k", "saxpy", "--grid", "8", "--block", "64", "-a", "512", "-a", "1", "-a", "zero#4",
      "-a", "zero#4"], 2, "Fault"),
])
def test_run_errors(files, capsys, argv, code, needle):
    argv = [a.format(**files) for a in argv]
    assert main(argv) == code
    assert needle in capsys.readouterr().err


def test_usage_errors_exit_with_one(capsys):
    assert main([]) == 1
    assert main(["run"]) == 1
    assert main(["--help"]) == 0


def test_corrupt_blob_exits_with_three(files, tmp_path, capsys):
    blob_path = tmp_path / "r.hgpb"
    main(["run", files["reduce"], "-k", "reduce_sum", "--grid", "2", "--block", "64", "-a", "iota:f32#128",
          "-a", "zero:f32#2", "-a", "128", "--pause-after", "100", "--snapshot", str(blob_path)])
    data = bytearray(blob_path.read_bytes())
    data[20] ^= 4
    blob_path.write_bytes(bytes(data))
    capsys.readouterr()
    assert main(["blob", "inspect", str(blob_path)]) == 3
    assert "checksum" in capsys.readouterr().err


def test_buffer_initializers(tmp_path):
    assert parse_buffer("zero", 3).tolist() == [0, 0, 0]
    assert parse_buffer("iota:s32#4", 1).tolist() == [0, 1, 2, 3]
    assert parse_buffer("fill:u32:0x10#2", 9).tolist() == [16, 16]
    assert parse_buffer("fill:f64:-1.5", 2).dtype == np.float64
    f = tmp_path / "b.bin"
    f.write_bytes(b"\1\2\3")
    assert parse_buffer(f"file:{f}", 100).tobytes() == b"\1\2\3"
    for bad in ("fill:f32", "zero:u16", "iota#x", f"file:{tmp_path}/nope"):
        with pytest.raises(cli.UsageError):
            parse_buffer(bad, 4)


def test_dims_and_scalars():
    assert parse_dims("16x16") == (16, 16, 1)
    assert parse_dims("4") == (4, 1, 1)
    assert cli.parse_scalar("0x20", SemType.U32) == 32
    assert cli.parse_scalar("true", SemType.PRED) is True
    with pytest.raises(cli.UsageError):
        parse_dims("2x2x2x2")
