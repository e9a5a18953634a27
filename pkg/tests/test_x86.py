import pytest

from core.x86 import CFClass, Isa, decode_instruction, is_known_nop


@pytest.mark.parametrize("hexbytes,size,family", [
    ("55", 1, "pushpop"),
    ("4889e5", 3, "mov"),
    ("488d0500000000", 7, "misc"),
    ("e800000000", 5, "call"),
    ("c3", 1, "ret"),
    ("662e0f1f840000000000", 10, "nop"),
    ("f30f1efa", 4, "hint"),
    ("48b88877665544332211", 10, "mov_imm"),
    ("0f05", 2, "syscall"),
    ("ff24c500000000", 7, "ijmp"),
    ("f20f58c1", 4, "sse"),
    ("0fafc1", 3, "imul_rm"),
])
def test_x64_lengths(hexbytes, size, family):
    insn = decode_instruction(bytes.fromhex(hexbytes) + b"\xcc" * 4, Isa.X64)
    assert (insn.size, insn.family) == (size, family)


@pytest.mark.parametrize("hexbytes,size", [
    ("a10010000000000000", 9),
    ("67a100100000", 6),
    ("660f1f440000", 6),
])
def test_x64_operand_and_address_size(hexbytes, size):
    assert decode_instruction(bytes.fromhex(hexbytes), Isa.X64).size == size


@pytest.mark.parametrize("hexbytes,size", [
    ("a100100000", 5),
    ("66e91000", 4),
    ("e810000000", 5),
    ("8d7600", 3),
    ("8db42600000000", 7),
    ("c5f8", 2),
])
def test_x86_lengths(hexbytes, size):
    assert decode_instruction(bytes.fromhex(hexbytes), Isa.X86).size == size


def test_undecodable():
    assert decode_instruction(b"", Isa.X64) is None
    assert decode_instruction(bytes.fromhex("e800"), Isa.X64) is None
    assert decode_instruction(bytes.fromhex("c5f458c2"), Isa.X64) is None
    assert decode_instruction(bytes.fromhex("0f0f"), Isa.X64) is None


def test_control_flow_and_targets():
    jmp = decode_instruction(bytes.fromhex("eb10"), Isa.X64)
    assert jmp.cf_class is CFClass.UNCOND_DIRECT_JUMP
    assert jmp.branch_target(0x1000) == 0x1012

    loop_back = decode_instruction(bytes.fromhex("75fe"), Isa.X64)
    assert loop_back.cf_class is CFClass.COND_DIRECT_JUMP
    assert loop_back.branch_target(0x1000) == 0x1000

    jcc32 = decode_instruction(bytes.fromhex("0f84f0ffffff"), Isa.X64)
    assert jcc32.branch_target(0x2000) == 0x2000 + 6 - 16

    assert decode_instruction(bytes.fromhex("ffd0"), Isa.X64).cf_class is CFClass.CALL
    assert decode_instruction(bytes.fromhex("ffe0"), Isa.X64).cf_class is CFClass.INDIRECT_JUMP
    assert decode_instruction(bytes.fromhex("0f0b"), Isa.X64).cf_class is CFClass.OTHER_CF
    assert decode_instruction(bytes.fromhex("c3"), Isa.X64).branch_target(0) is None


@pytest.mark.parametrize("hexbytes,isa,expected", [
    ("90", Isa.X64, True),
    ("6690", Isa.X64, True),
    ("0f1f00", Isa.X64, True),
    ("0f1f840000000000", Isa.X64, True),
    ("662e0f1f840000000000", Isa.X64, True),
    ("f390", Isa.X64, False),
    ("4190", Isa.X64, False),
    ("f00f1f00", Isa.X64, False),
    ("0f1f00c3", Isa.X64, False),
    ("0f1f08", Isa.X64, False),
    ("89f6", Isa.X86, True),
    ("8d7600", Isa.X86, True),
    ("8db42600000000", Isa.X86, True),
    ("8d7601", Isa.X86, False),
    ("89f6", Isa.X64, False),
    ("c3", Isa.X64, False),
])
def test_known_nops(hexbytes, isa, expected):
    assert is_known_nop(bytes.fromhex(hexbytes), isa) is expected
