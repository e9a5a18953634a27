"""
x86/x64 encoding tables.

A small table-driven length decoder in the style of classic LDEs: it walks
legacy prefixes, REX, the opcode map and ModRM/SIB/displacement/immediate
fields and tags each instruction with the encoding family the reconciler and
the discovery oracle reason about. VEX/EVEX encodings are not covered.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Optional


class Isa(str, Enum):
    X86 = "x86"
    X64 = "x64"

    @property
    def bits(self) -> int:
        return 64 if self is Isa.X64 else 32


class CFClass(str, Enum):
    """Control-flow class of an instruction. Values are the file-format tokens."""

    NONCF = "noncf"
    COND_DIRECT_JUMP = "jcc"
    UNCOND_DIRECT_JUMP = "jmp"
    INDIRECT_JUMP = "ijmp"
    RETURN = "ret"
    CALL = "call"
    OTHER_CF = "othercf"
    UNKNOWN_CF = "unknowncf"

    @classmethod
    def from_token(cls, token: str) -> "CFClass":
        return cls(token)


MAX_INSN_LENGTH = 15

# operand-size, address-size, lock, repne, rep/repe, cs, ss, ds, es, fs, gs
LEGACY_PREFIXES = frozenset({0x66, 0x67, 0xF0, 0xF2, 0xF3, 0x2E, 0x36, 0x3E, 0x26, 0x64, 0x65})
REX_RANGE = range(0x40, 0x50)


@dataclass(frozen=True)
class X86Insn:
    """One decoded instruction."""

    size: int
    opcode: bytes
    family: str
    cf_class: CFClass
    prefixes: bytes = b""
    rex: int = 0
    modrm: Optional[int] = None
    rel: Optional[int] = None  # signed displacement of a relative branch

    @property
    def reg_field(self) -> Optional[int]:
        return None if self.modrm is None else (self.modrm >> 3) & 7

    def branch_target(self, abs_offset: int) -> Optional[int]:
        if self.rel is None:
            return None
        return abs_offset + self.size + self.rel


class _Truncated(Exception):
    pass


def modrm_length(code: bytes, pos: int, isa: Isa, addr_override: bool) -> int:
    """
    Length of the ModRM byte plus SIB and displacement starting at code[pos].

    Args:
        code: Instruction bytes
        pos: Index of the ModRM byte
        isa: Decoding mode
        addr_override: True when a 0x67 prefix is present

    Returns:
        int: Number of bytes consumed, at least 1
    """
    if pos >= len(code):
        raise _Truncated()
    modrm = code[pos]
    mod, rm = modrm >> 6, modrm & 7
    if mod == 3:
        return 1
    if isa is Isa.X86 and addr_override:
        # 16-bit addressing
        if mod == 0 and rm == 6:
            return 3
        return 1 + mod
    n = 1
    if rm == 4:
        if pos + 1 >= len(code):
            raise _Truncated()
        n += 1
        if mod == 0 and (code[pos + 1] & 7) == 5:
            n += 4
    if mod == 0 and rm == 5:
        n += 4
    elif mod == 1:
        n += 1
    elif mod == 2:
        n += 4
    return n


def _signed(data: bytes) -> int:
    return int.from_bytes(data, "little", signed=True)


_BOP_NAMES = ("add", "or", "adc", "sbb", "and", "sub", "xor", "cmp")
_X64_INVALID = frozenset({0x06, 0x07, 0x0E, 0x16, 0x17, 0x1E, 0x1F, 0x27, 0x2F, 0x37, 0x3F,
                          0x60, 0x61, 0x62, 0x82, 0x9A, 0xC4, 0xC5, 0xCE, 0xD4, 0xD5, 0xD6, 0xEA})


class _Decoder:
    def __init__(self, code: bytes, isa: Isa):
        self.code = code[:MAX_INSN_LENGTH]
        self.isa = isa
        self.pos = 0
        self.prefixes = bytearray()
        self.rex = 0

    def byte(self) -> int:
        if self.pos >= len(self.code):
            raise _Truncated()
        value = self.code[self.pos]
        self.pos += 1
        return value

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.code):
            raise _Truncated()
        data = self.code[self.pos:self.pos + n]
        self.pos += n
        return data

    @property
    def opsize16(self) -> bool:
        return 0x66 in self.prefixes and not self.rex & 8

    @property
    def imm_z(self) -> int:
        return 2 if self.opsize16 else 4

    @property
    def moffs_size(self) -> int:
        if self.isa is Isa.X64:
            return 4 if 0x67 in self.prefixes else 8
        return 2 if 0x67 in self.prefixes else 4

    def modrm(self) -> int:
        value = self.code[self.pos] if self.pos < len(self.code) else None
        if value is None:
            raise _Truncated()
        self.take(modrm_length(self.code, self.pos, self.isa, 0x67 in self.prefixes))
        return value

    def done(self, opcode: bytes, family: str, cf: CFClass = CFClass.NONCF,
             modrm: Optional[int] = None, rel: Optional[int] = None) -> X86Insn:
        return X86Insn(
            size=self.pos,
            opcode=opcode,
            family=family,
            cf_class=cf,
            prefixes=bytes(self.prefixes),
            rex=self.rex,
            modrm=modrm,
            rel=rel,
        )

    def decode(self) -> Optional[X86Insn]:
        while self.pos < len(self.code) and self.code[self.pos] in LEGACY_PREFIXES:
            self.prefixes.append(self.byte())
        if self.isa is Isa.X64 and self.pos < len(self.code) and self.code[self.pos] in REX_RANGE:
            self.rex = self.byte()
        op = self.byte()
        if self.isa is Isa.X64 and op in _X64_INVALID:
            return None
        if op == 0x0F:
            return self.decode_0f()
        return self.decode_one(op)

    def decode_one(self, op: int) -> Optional[X86Insn]:
        ob = bytes([op])
        if op < 0x40 and (op & 7) < 4:
            return self.done(ob, "alu_rm", modrm=self.modrm())
        if op < 0x40 and (op & 7) == 4:
            self.take(1)
            return self.done(ob, "bop")
        if op < 0x40 and (op & 7) == 5:
            self.take(self.imm_z)
            return self.done(ob, "bop")
        if op < 0x40:
            # bcd adjust, segment push/pop
            return self.done(ob, "misc")
        if 0x40 <= op <= 0x4F:
            return self.done(ob, "incdec")
        if 0x50 <= op <= 0x5F:
            return self.done(ob, "pushpop")
        if op in (0x60, 0x61):
            return self.done(ob, "misc")
        if op in (0x62, 0x63):
            return self.done(ob, "misc", modrm=self.modrm())
        if op == 0x68:
            self.take(self.imm_z)
            return self.done(ob, "pushpop")
        if op == 0x6A:
            self.take(1)
            return self.done(ob, "pushpop")
        if op == 0x69:
            m = self.modrm()
            self.take(self.imm_z)
            return self.done(ob, "imul", modrm=m)
        if op == 0x6B:
            m = self.modrm()
            self.take(1)
            return self.done(ob, "imul", modrm=m)
        if 0x6C <= op <= 0x6F:
            return self.done(ob, "string")
        if 0x70 <= op <= 0x7F:
            return self.done(ob, "jcc", CFClass.COND_DIRECT_JUMP, rel=_signed(self.take(1)))
        if op in (0x80, 0x82, 0x83):
            m = self.modrm()
            self.take(1)
            return self.done(ob, "bop", modrm=m)
        if op == 0x81:
            m = self.modrm()
            self.take(self.imm_z)
            return self.done(ob, "bop", modrm=m)
        if 0x84 <= op <= 0x8F:
            m = self.modrm()
            family = "mov" if 0x88 <= op <= 0x8B else "misc"
            if self.isa is Isa.X86 and _is_self_move(op, m, self.code, self.pos, self.prefixes):
                family = "nop"
            return self.done(ob, family, modrm=m)
        if op == 0x90:
            if self.rex & 1:
                return self.done(ob, "xchg")
            if 0xF3 in self.prefixes:
                return self.done(ob, "pause")
            return self.done(ob, "nop")
        if 0x91 <= op <= 0x9F and op != 0x9A:
            return self.done(ob, "misc")
        if op == 0x9A:
            self.take(self.imm_z + 2)
            return self.done(ob, "lcall", CFClass.OTHER_CF)
        if 0xA0 <= op <= 0xA3:
            self.take(self.moffs_size)
            return self.done(ob, "mov_moffs")
        if op == 0xA8:
            self.take(1)
            return self.done(ob, "test")
        if op == 0xA9:
            self.take(self.imm_z)
            return self.done(ob, "test")
        if 0xA4 <= op <= 0xAF:
            return self.done(ob, "string")
        if 0xB0 <= op <= 0xB7:
            self.take(1)
            return self.done(ob, "mov_imm")
        if 0xB8 <= op <= 0xBF:
            self.take(8 if self.rex & 8 else self.imm_z)
            return self.done(ob, "mov_imm")
        if op in (0xC0, 0xC1):
            m = self.modrm()
            self.take(1)
            return self.done(ob, "shift", modrm=m)
        if op in (0xD0, 0xD1, 0xD2, 0xD3):
            return self.done(ob, "shift", modrm=self.modrm())
        if op == 0xC2:
            self.take(2)
            return self.done(ob, "ret", CFClass.RETURN)
        if op == 0xC3:
            return self.done(ob, "ret", CFClass.RETURN)
        if op in (0xC4, 0xC5):
            # les/lds, x86 only
            return self.done(ob, "misc", modrm=self.modrm())
        if op == 0xC6:
            m = self.modrm()
            self.take(1)
            return self.done(ob, "mov_imm", modrm=m)
        if op == 0xC7:
            m = self.modrm()
            self.take(self.imm_z)
            return self.done(ob, "mov_imm", modrm=m)
        if op == 0xC8:
            self.take(3)
            return self.done(ob, "misc")
        if op == 0xC9:
            return self.done(ob, "misc")
        if op == 0xCA:
            self.take(2)
            return self.done(ob, "lret", CFClass.OTHER_CF)
        if op in (0xCB, 0xCC, 0xCE, 0xCF):
            return self.done(ob, "trap", CFClass.OTHER_CF)
        if op == 0xCD:
            self.take(1)
            return self.done(ob, "trap", CFClass.OTHER_CF)
        if op in (0xD4, 0xD5):
            self.take(1)
            return self.done(ob, "misc")
        if op in (0xD6, 0xD7):
            return self.done(ob, "misc")
        if 0xD8 <= op <= 0xDF:
            return self.done(ob, "x87", modrm=self.modrm())
        if 0xE0 <= op <= 0xE3:
            return self.done(ob, "loop", CFClass.COND_DIRECT_JUMP, rel=_signed(self.take(1)))
        if 0xE4 <= op <= 0xE7:
            self.take(1)
            return self.done(ob, "io")
        if op == 0xE8:
            rel = _signed(self.take(self._branch_size()))
            return self.done(ob, "call", CFClass.CALL, rel=rel)
        if op == 0xE9:
            rel = _signed(self.take(self._branch_size()))
            return self.done(ob, "jmp", CFClass.UNCOND_DIRECT_JUMP, rel=rel)
        if op == 0xEA:
            self.take(self.imm_z + 2)
            return self.done(ob, "ljmp", CFClass.OTHER_CF)
        if op == 0xEB:
            return self.done(ob, "jmp", CFClass.UNCOND_DIRECT_JUMP, rel=_signed(self.take(1)))
        if 0xEC <= op <= 0xEF:
            return self.done(ob, "io")
        if op == 0xF1:
            return self.done(ob, "trap", CFClass.OTHER_CF)
        if op == 0xF4:
            return self.done(ob, "hlt", CFClass.OTHER_CF)
        if op in (0xF6, 0xF7):
            m = self.modrm()
            if (m >> 3) & 7 in (0, 1):
                self.take(1 if op == 0xF6 else self.imm_z)
            return self.done(ob, "test" if (m >> 3) & 7 in (0, 1) else "muldiv", modrm=m)
        if op in (0xF5, 0xF8, 0xF9, 0xFA, 0xFB, 0xFC, 0xFD):
            return self.done(ob, "flags")
        if op == 0xFE:
            return self.done(ob, "incdec", modrm=self.modrm())
        if op == 0xFF:
            m = self.modrm()
            reg = (m >> 3) & 7
            if reg == 2:
                return self.done(ob, "icall", CFClass.CALL, modrm=m)
            if reg == 3:
                return self.done(ob, "lcall", CFClass.OTHER_CF, modrm=m)
            if reg == 4:
                return self.done(ob, "ijmp", CFClass.INDIRECT_JUMP, modrm=m)
            if reg == 5:
                return self.done(ob, "ljmp", CFClass.OTHER_CF, modrm=m)
            return self.done(ob, "incdec" if reg < 2 else "pushpop", modrm=m)
        return None

    def _branch_size(self) -> int:
        if self.isa is Isa.X64:
            return 4
        return 2 if 0x66 in self.prefixes else 4

    def decode_0f(self) -> Optional[X86Insn]:
        op = self.byte()
        ob = bytes([0x0F, op])
        if op in (0x05, 0x07, 0x34, 0x35):
            return self.done(ob, "syscall", CFClass.UNKNOWN_CF)
        if op == 0x0B:
            return self.done(ob, "ud2", CFClass.OTHER_CF)
        if op in (0x01, 0x00):
            m = self.modrm()
            return self.done(ob, "system", CFClass.UNKNOWN_CF if m in (0xD5, 0xD6) else CFClass.NONCF, modrm=m)
        if op in (0x06, 0x08, 0x09, 0x30, 0x31, 0x32, 0x33, 0x77, 0xA2):
            return self.done(ob, "system")
        if op == 0x0D or 0x18 <= op <= 0x1F:
            m = self.modrm()
            family = "nop" if op == 0x1F and (m >> 3) & 7 == 0 and 0xF0 not in self.prefixes else "hint"
            if op == 0x1F and 0xF2 in self.prefixes:
                family = "hint"
            return self.done(ob, family, modrm=m)
        if 0x10 <= op <= 0x17 or 0x28 <= op <= 0x2F or 0x50 <= op <= 0x6F or op in (0x74, 0x75, 0x76, 0x7C, 0x7D, 0x7E, 0x7F):
            return self.done(ob, "sse", modrm=self.modrm())
        if op in (0x70, 0x71, 0x72, 0x73, 0xC2, 0xC4, 0xC5, 0xC6, 0xBA, 0xA4, 0xAC):
            m = self.modrm()
            self.take(1)
            return self.done(ob, "sse" if op < 0xA0 or op >= 0xC2 else "misc", modrm=m)
        if op == 0x38:
            self.byte()
            return self.done(ob, "sse", modrm=self.modrm())
        if op == 0x3A:
            self.byte()
            m = self.modrm()
            self.take(1)
            return self.done(ob, "sse", modrm=m)
        if 0x40 <= op <= 0x4F:
            return self.done(ob, "cmov", modrm=self.modrm())
        if 0x80 <= op <= 0x8F:
            rel = _signed(self.take(self._branch_size()))
            return self.done(ob, "jcc", CFClass.COND_DIRECT_JUMP, rel=rel)
        if 0x90 <= op <= 0x9F:
            return self.done(ob, "setcc", modrm=self.modrm())
        if op in (0xA0, 0xA1, 0xA8, 0xA9):
            return self.done(ob, "pushpop")
        if op == 0xAF:
            return self.done(ob, "imul_rm", modrm=self.modrm())
        if op in (0xA3, 0xA5, 0xAB, 0xAD, 0xAE, 0xB0, 0xB1, 0xB3, 0xB6, 0xB7, 0xB8,
                  0xBB, 0xBC, 0xBD, 0xBE, 0xBF, 0xC0, 0xC1, 0xC3, 0xC7):
            return self.done(ob, "misc", modrm=self.modrm())
        if 0xC8 <= op <= 0xCF:
            return self.done(ob, "bswap")
        if 0xD0 <= op <= 0xFE:
            return self.done(ob, "sse", modrm=self.modrm())
        return None


def _is_self_move(op: int, modrm: int, code: bytes, end: int, prefixes: bytes) -> bool:
    """mov %esi,%esi and lea 0(%esi),%esi style fillers used for 32-bit alignment."""
    reg = (modrm >> 3) & 7
    mod, rm = modrm >> 6, modrm & 7
    if op in (0x89, 0x8B) and 0x66 not in prefixes:
        return mod == 3 and rm == reg
    if op != 0x8D or mod == 3 or 0x67 in prefixes:
        return False
    tail = code[:end]
    # ModRM position is recovered from the end of the consumed fields
    disp_len = {0: 0, 1: 1, 2: 4}[mod]
    sib = rm == 4
    modrm_pos = end - disp_len - (1 if sib else 0) - 1
    if disp_len and any(tail[end - disp_len:end]):
        return False
    if sib:
        sib_byte = tail[modrm_pos + 1]
        index, base = (sib_byte >> 3) & 7, sib_byte & 7
        return index == 4 and base == reg and not (mod == 0 and base == 5)
    return rm == reg and not (mod == 0 and rm == 5)


def decode_instruction(code: bytes, isa: Isa) -> Optional[X86Insn]:
    """
    Decode the instruction at the start of code.

    Args:
        code: Bytes starting at the instruction; extra trailing bytes are ignored
        isa: Decoding mode

    Returns:
        Optional[X86Insn]: The instruction, or None when the bytes are truncated
        or outside the decoder's tables
    """
    if not code:
        return None
    try:
        return _Decoder(code, isa).decode()
    except _Truncated:
        return None


def is_known_nop(data: bytes, isa: Isa) -> bool:
    """True when data is exactly one instruction of the no-operation family."""
    insn = decode_instruction(data, isa)
    return insn is not None and insn.size == len(data) and insn.family == "nop"
