import random

import pytest
from hypothesis import given, settings, strategies as st

from hetgpu import asm
from hetgpu.asm import AsmError, Severity
from hetgpu.ir import Imm, Instruction, MemSpace, Opcode, SemType

import kernelgen

SMALL = """
.version 1
.func tiny(.u64<1> %rd0, .u32 %r1)
{
    .reg .u32 %r2;
    .reg .f32 %r3;
    .reg .pred %p4;
    GET_GLOBAL_ID %r2, 0;
    SETP.LT.U32 %p4, %r2, %r1;
    @PRED(%p4) {
        CVT.F32.U32 %r3, %r2;
        ST_GLOBAL.F32 [%rd0+8], %r3;
    } @ELSE {
        RETURN;
    }
    RETURN;
}
"""


def test_parse_small_kernel():
    m = asm.parse(SMALL)
    k = m.kernel("tiny")
    assert [r.id for r in k.params] == [0, 1]
    assert k.params[0].ptr and k.params[0].type is SemType.U64
    assert k.body.items[0] == Instruction(Opcode.GET_GLOBAL_ID, SemType.U32, k.reg_table()[2], (Imm(0),))
    st_ins = k.body.items[2].then.items[1]
    assert st_ins.opcode is Opcode.ST and st_ins.space is MemSpace.GLOBAL and st_ins.srcs[0].offset == 8


def test_print_is_canonical_and_stable():
    m = asm.parse(SMALL)
    text = asm.print_module(m)
    assert asm.print_module(asm.parse(text)) == text
    assert b"@ELSE" in text


def test_module_id_depends_on_content_only():
    a = asm.parse(SMALL)
    b = asm.parse(SMALL.replace("    ", "\t") + "\n// trailing comment\n")
    assert a.module_id == b.module_id
    c = asm.parse(SMALL.replace("[%rd0+8]", "[%rd0+4]"))
    assert a.module_id != c.module_id


def test_float_immediates_print_exactly():
    src = SMALL.replace("CVT.F32.U32 %r3, %r2;", "MOV.F32 %r3, 0.1;")
    k = asm.parse(src).kernel("tiny")
    mov = k.body.items[2].then.items[0]
    text = asm.format_instruction(mov)
    assert "0x1.99999a" in text  # f32-rounded 0.1 in hex-float form
    assert asm.parse(asm.print_module(asm.parse(src))).kernel("tiny") == k


@pytest.mark.parametrize("source,needle", [
    (SMALL.replace("SETP.LT.U32", "SETP.LT.X32"), "unknown mnemonic"),
    (SMALL.replace("GET_GLOBAL_ID %r2, 0;", "GET_GLOBAL_ID %r2;"), "arity mismatch"),
    (SMALL.replace("%r3, %r2;", "%r3, %r9;"), "undeclared register"),
    (SMALL.replace(".reg .u32 %r2;", ".reg .u32 %r2;\n    .reg .u32 %r2;"), "duplicate register"),
    (SMALL.replace("ST_GLOBAL.F32 [%rd0+8], %r3;", "ST_GLOBAL.F32 [%r2], %r3;"), "pointer register"),
    (SMALL.replace("@ELSE {\n        RETURN;\n    }", "@ELSE {\n        BAR_SHARED;\n    }"),
     "barrier under divergent control"),
    (".version 1\n", "expected .func"),
])
def test_diagnostics(source, needle):
    module, diags = asm.parse_with_diagnostics(source, "t.hir")
    assert module is None
    assert any(needle in d.message for d in diags), [str(d) for d in diags]
    assert all(d.severity is Severity.ERROR for d in diags)
    with pytest.raises(AsmError):
        asm.parse(source)


def test_diagnostic_spans_point_at_the_offender():
    bad = SMALL.replace("SETP.LT.U32", "SETP.LT.X32")
    _, diags = asm.parse_with_diagnostics(bad)
    d = diags[0]
    lines = bad.encode().split(b"\n")
    assert lines[d.span.line - 1][d.span.column - 1:].startswith(b"SETP.LT.X32")
    assert bad.encode()[d.span.byte_start:d.span.byte_end] == b"SETP.LT.X32"


def test_parser_recovers_and_reports_several_errors():
    bad = SMALL.replace("GET_GLOBAL_ID %r2, 0;", "FOO %r2;").replace("RETURN;\n}", "BAR %r1;\n    RETURN;\n}")
    _, diags = asm.parse_with_diagnostics(bad)
    assert len(diags) >= 2


def test_invalid_utf8_is_a_diagnostic():
    module, diags = asm.parse_with_diagnostics(b".func \xff\xfe()")
    assert module is None and "UTF-8" in diags[0].message


def test_generated_modules_round_trip():
    rng = random.Random(1234)
    for _ in range(100):
        m = kernelgen.random_module(rng)
        assert asm.parse(asm.print_module(m)) == m


@settings(max_examples=300, deadline=None)
@given(st.binary(max_size=400))
def test_fuzz_bytes_never_crash(data):
    module, diags = asm.parse_with_diagnostics(data)
    assert (module is None) == bool(diags)


@settings(max_examples=300, deadline=None)
@given(st.data())
def test_fuzz_mutated_source_never_crashes(data):
    text = SMALL.encode()
    pos = data.draw(st.integers(0, len(text) - 1))
    n = data.draw(st.integers(0, 8))
    junk = data.draw(st.binary(max_size=6))
    mutated = text[:pos] + junk + text[pos + n:]
    module, diags = asm.parse_with_diagnostics(mutated)
    if module is not None:
        assert asm.parse(asm.print_module(module)) == module
