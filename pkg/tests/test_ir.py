import pytest

from hetgpu import asm
from hetgpu.ir import (
    DeviceDesc, DeviceModel, Imm, Instruction, Module, Opcode, Reg, SemType, check_instruction,
    check_launch_shape, divergent_control, divergent_registers, validate,
)

U32, PRED = SemType.U32, SemType.PRED

HEAD = """
.func k(.u64<1> %rd0, .u32 %r1)
{
    .reg .u32 %r2, %r3;
    .reg .u64 %rd4;
    .reg .u64<1> %rd5;
    .reg .pred %p6, %p7;
    .shared 64;
"""


def kernel(body: str):
    module, diags = asm.parse_with_diagnostics(HEAD + body + "\n    RETURN;\n}\n")
    return module, [d.message for d in diags]


def test_valid_kernel_has_a_module_id():
    m, diags = kernel("    GET_LOCAL_ID %r2, 0;")
    assert not diags
    report = validate(m)
    assert report.ok and report.module_id == m.module_id


@pytest.mark.parametrize("body,needle", [
    ("    ADD.U32 %r2, %r3, 1;", "use before definition"),
    ("    GET_LOCAL_ID %r2, 0;\n    SETP.EQ.U32 %p6, %r2, 0;\n    @PRED(%p6) {\n        BAR_SHARED;\n    }",
     "barrier under divergent control"),
    ("    GET_LOCAL_ID %r2, 0;\n    SETP.EQ.U32 %p6, %r2, 0;\n    @PRED(%p6) {\n        VOTE_ANY %p7, %p6;\n    }",
     "collective under divergent control"),
    ("    ST_SHARED.U32 [64], %r1;", "out of bounds"),
    ("    MOV.U64 %rd4, %rd0;", "escapes"),
    ("    ADD.U64 %rd5, %rd0, %rd0;", "exactly one pointer"),
    ("    MOV.U32 %r2, %r1;\n    @LOOP {\n        ADD.U32 %r2, %r2, 1;\n    } @BREAK(%r2);", "predicate"),
    ("    ATOM_ADD.U32 %r2, [%rd0], %p6;", "type"),
])
def test_validation_errors(body, needle):
    m, diags = kernel(body)
    assert m is None
    assert any(needle in d for d in diags), diags


def test_definition_through_both_branches_and_after_return():
    body = """    SETP.EQ.U32 %p6, %r1, 0;
    @PRED(%p6) {
        MOV.U32 %r2, 1;
    } @ELSE {
        MOV.U32 %r2, 2;
    }
    ADD.U32 %r3, %r2, 1;
    @PRED(%p6) {
        RETURN;
    } @ELSE {
        MOV.U32 %r3, 0;
    }
    ADD.U32 %r3, %r3, 1;"""
    m, diags = kernel(body)
    assert not diags, diags


def test_one_armed_definition_is_not_enough():
    body = """    SETP.EQ.U32 %p6, %r1, 0;
    @PRED(%p6) {
        MOV.U32 %r2, 1;
    }
    ADD.U32 %r3, %r2, 1;"""
    _, diags = kernel(body)
    assert any("use before definition of %r2" in d for d in diags)


def test_divergence_analysis():
    body = """    GET_LOCAL_ID %r2, 0;
    SETP.EQ.U32 %p6, %r1, 0;
    @PRED(%p6) {
        BAR_SHARED;
    }
    SETP.EQ.U32 %p7, %r2, 0;
    MOV.U32 %r3, %r1;
    @PRED(%p7) {
        ADD.U32 %r3, %r3, 1;
    }"""
    m, diags = kernel(body)
    assert not diags, diags
    k = m.kernels[0]
    div = divergent_registers(k)
    assert {2, 3, 7} <= div
    assert 6 not in div and 1 not in div
    ctl = divergent_control(k)
    assert ctl[(2, 0, 0)] is False and ctl[(5, 0, 0)] is True and ctl[(5,)] is False


def test_divergence_is_flow_insensitive():
    # a register written anywhere under divergent control taints every use
    body = """    GET_LOCAL_ID %r2, 0;
    MOV.U32 %r3, %r1;
    SETP.EQ.U32 %p6, %r3, 0;
    @PRED(%p6) {
        BAR_SHARED;
    }
    SETP.EQ.U32 %p7, %r2, 0;
    @PRED(%p7) {
        ADD.U32 %r3, %r3, 1;
    }"""
    _, diags = kernel(body)
    assert any("barrier under divergent control" in d for d in diags)


def test_check_instruction_direct():
    r = Reg(1, U32)
    assert check_instruction(Instruction(Opcode.ADD, U32, r, (r, Imm(1)))) == []
    assert check_instruction(Instruction(Opcode.ADD, U32, r, (r, Imm(-1))))
    assert check_instruction(Instruction(Opcode.GET_LOCAL_ID, U32, r, (Imm(3),)))
    assert check_instruction(Instruction(Opcode.BAR_SHARED, U32))


def test_empty_module_and_duplicate_kernels():
    assert not validate(Module(())).ok
    m, _ = kernel("")
    assert not validate(Module(m.kernels * 2)).ok


def test_ballot_block_limit():
    m, diags = kernel("    SETP.EQ.U32 %p6, %r1, 0;\n    BALLOT %rd4, %p6;")
    assert not diags
    k = m.kernels[0]
    assert check_launch_shape(k, (64, 1, 1)) == []
    assert check_launch_shape(k, (65, 1, 1))


def test_device_description_checks():
    assert DeviceDesc(DeviceModel.SIMT).check() == []
    assert DeviceDesc(DeviceModel.SIMT, warp_width=24).check()
    assert DeviceDesc(DeviceModel.MIMD, lane_count=12).check()
    assert DeviceDesc(DeviceModel.MIMD, core_count=0).check()
