"""
Multiple-encoding reconciliation.

Some instructions have more than one valid encoding and the assembler run
on the captured .s file may not pick the one the original build produced.
The reconciler finds the first record whose listing bytes disagree with the
binary, works out how long the binary's encoding is, rewrites that statement
as explicit `.byte` data and re-assembles, until the whole function agrees.
"""

import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Optional, Protocol, Sequence

from core.binfmt import BinaryImage, FuncSymbol, read_bytes, read_object_relocations
from core.errors import (
    AssemblerError,
    GtForgeError,
    NonTermination,
    OutOfRange,
    StatementNotLocatable,
    Underflow,
    UnresolvableMismatch,
)
from core.groundtruth import absolutize
from core.listing import (
    REENCODED_MARKER,
    ListedFunction,
    ListedRecord,
    RecordKind,
    classify_statement,
    parse_listing,
    split_labels,
    strip_comment,
    with_relocations,
)
from core.x86 import CFClass, Isa, MAX_INSN_LENGTH, X86Insn, decode_instruction
from utils import logger


@dataclass(frozen=True)
class EncodingRule:
    description: str
    matcher: Callable[[str, bytes], bool]
    alternate_length: Callable[[bytes, bytes], int]


class AssemblyOutput(NamedTuple):
    listing: str
    relocations: dict[str, list[tuple[int, int]]]


class AssemblerDriver(Protocol):
    def assemble_with_listing(self, asm_text: str) -> AssemblyOutput:
        ...


def _family_rule(
    description: str,
    isa: Isa,
    families: frozenset[str],
    statement_ok: Callable[[str], bool] = lambda s: True,
    same_operation: Callable[[X86Insn, X86Insn], bool] = lambda a, b: True,
) -> EncodingRule:
    def matcher(statement: str, listing_bytes: bytes) -> bool:
        insn = decode_instruction(listing_bytes, isa)
        return insn is not None and insn.family in families and statement_ok(statement)

    def alternate_length(listing_bytes: bytes, binary_bytes: bytes) -> int:
        listed = decode_instruction(listing_bytes, isa)
        actual = decode_instruction(binary_bytes, isa)
        if actual is None or actual.family not in families:
            raise ValueError(f"binary bytes {binary_bytes[:MAX_INSN_LENGTH].hex()} are not a {description} encoding")
        if listed is not None and not same_operation(listed, actual):
            raise ValueError(f"binary encodes a different operation than the listing for {description}")
        return actual.size

    return EncodingRule(description, matcher, alternate_length)


def _bop_index(insn: X86Insn) -> Optional[int]:
    """add/or/adc/sbb/and/sub/xor/cmp index of a binary-operation encoding."""
    op = insn.opcode[0]
    if op < 0x40:
        return op >> 3
    return insn.reg_field


def _is_shift_mnemonic(statement: str) -> bool:
    _, text = split_labels(statement)
    mnemonic = text.split(None, 1)[0].lower() if text else ""
    return mnemonic[:3] in ("sal", "sar", "shl", "shr")


def _is_mov_mnemonic(statement: str) -> bool:
    _, text = split_labels(statement)
    mnemonic = text.split(None, 1)[0].lower() if text else ""
    return mnemonic in ("mov", "movb", "movw", "movl", "movq", "movabs", "movabsb", "movabsw", "movabsl", "movabsq")


def default_rules(isa: Isa) -> list[EncodingRule]:
    """
    The multiple-encoding rule table, most specific first.

    Args:
        isa: Decoding mode for both listing and binary bytes

    Returns:
        list: jmp, jcc, imul, shift, mov-moffs and binary-op rules
    """
    return [
        _family_rule(
            "jmp rel8 / jmp rel32", isa, frozenset({"jmp"}),
            statement_ok=lambda s: classify_statement(s) is CFClass.UNCOND_DIRECT_JUMP,
        ),
        _family_rule(
            "jcc rel8 / jcc rel32", isa, frozenset({"jcc"}),
            statement_ok=lambda s: classify_statement(s) is CFClass.COND_DIRECT_JUMP,
            same_operation=lambda a, b: (a.opcode[-1] & 0x0F) == (b.opcode[-1] & 0x0F),
        ),
        _family_rule(
            "imul r, r/m, imm8 / imm16/32", isa, frozenset({"imul"}),
        ),
        _family_rule(
            "shift by 1 / shift by imm8", isa, frozenset({"shift"}),
            statement_ok=_is_shift_mnemonic,
            same_operation=lambda a, b: a.reg_field == b.reg_field,
        ),
        _family_rule(
            "mov accumulator moffs / mov r, r/m", isa, frozenset({"mov_moffs", "mov"}),
            statement_ok=_is_mov_mnemonic,
        ),
        _family_rule(
            "binary op accumulator / ModRM, imm8 / imm16/32", isa, frozenset({"bop"}),
            same_operation=lambda a, b: _bop_index(a) == _bop_index(b),
        ),
    ]


def decoder_rule(oracle) -> EncodingRule:
    """
    Catch-all rule backed by a full instruction decoder.

    Args:
        oracle: Anything with decode_bytes(data) -> decoded instruction or None
    """
    def alternate_length(listing_bytes: bytes, binary_bytes: bytes) -> int:
        decoded = oracle.decode_bytes(binary_bytes)
        if decoded is None:
            raise ValueError(f"decoder cannot decode {binary_bytes.hex()}")
        return decoded.size

    return EncodingRule("length from external decoder", lambda statement, data: True, alternate_length)


def _record_abs(func: ListedFunction, record: ListedRecord, abs_func: int) -> int:
    return absolutize(abs_func, func.rlt_func, record.rlt_offset)


def find_first_mismatch(func: ListedFunction, img: BinaryImage, abs_func: int) -> Optional[int]:
    """
    Index of the first INSN/DATA record whose bytes disagree with the binary.

    Relocated byte positions are not compared. ALIGN records are skipped.

    Raises:
        OutOfRange: A record maps outside the binary's sections
    """
    for idx, record in enumerate(func.records):
        if record.kind is RecordKind.ALIGN:
            continue
        binary = read_bytes(img, _record_abs(func, record, abs_func), len(record.bytes))
        if not record.matches(binary):
            return idx
    return None


def _function_names(lines: Sequence[str]) -> set[str]:
    names = set()
    for line in lines:
        text = strip_comment(line)
        if text.startswith(".type"):
            parts = [p.strip() for p in text[len(".type"):].split(",")]
            if len(parts) >= 2 and "function" in parts[1].lower():
                names.add(parts[0])
    return names


def _function_body(lines: Sequence[str], func_name: str) -> tuple[int, int]:
    """0-based [start, end) line range of a function body."""
    names = _function_names(lines) | {func_name}
    start = None
    for i, line in enumerate(lines):
        labels, _ = split_labels(line)
        if start is None and func_name in labels:
            start = i
        elif start is not None and any(label in names and label != func_name for label in labels):
            return start, i
    if start is None:
        raise StatementNotLocatable(f"function {func_name} is not defined in the assembly source")
    return start, len(lines)


def _normalize(statement: str) -> str:
    return " ".join(statement.replace(",", ", ").split())


def patch_statement(asm_text: str, func_name: str, record: ListedRecord, replacement_bytes: bytes) -> str:
    """
    Replace one statement with `.byte` data carrying the given bytes.

    The statement is found by its source line number inside the function
    body; labels on that line are kept.

    Raises:
        StatementNotLocatable: The line is outside the body or holds another statement
    """
    lines = asm_text.splitlines(keepends=True)
    start, end = _function_body(lines, func_name)
    idx = record.line - 1
    if not start <= idx < end:
        raise StatementNotLocatable(f"line {record.line} is outside the body of {func_name}")

    original = lines[idx]
    labels, statement = split_labels(original)
    # listings may truncate long source lines
    if not record.statement or not _normalize(statement).startswith(_normalize(record.statement)):
        raise StatementNotLocatable(
            f"line {record.line} of {func_name} holds {statement!r}, expected {record.statement!r}"
        )

    newline = "\n" if original.endswith("\n") else ""
    indent = original[: len(original) - len(original.lstrip())]
    label_text = "".join(f"{label}: " for label in labels)
    data = ",".join(f"{b:#04x}" for b in replacement_bytes)
    lines[idx] = f"{indent}{label_text}.byte {data}\t{REENCODED_MARKER} {record.statement}{newline}"
    return "".join(lines)


def _select(doc_functions: Sequence[ListedFunction], func_name: str, index: Optional[int]) -> ListedFunction:
    for func in doc_functions:
        if func.name == func_name and (index is None or func.index == index):
            return func
    raise StatementNotLocatable(f"re-assembled listing has no function {func_name}")


def reconcile_function(
    asm_text: str,
    func_name: str,
    img: BinaryImage,
    abs_func: int,
    driver: AssemblerDriver,
    rules: Sequence[EncodingRule],
    source_id: str = "",
    index: Optional[int] = None,
    function_names: Optional[set[str]] = None,
) -> tuple[str, ListedFunction]:
    """
    Patch a function's assembly until its listing matches the binary.

    Args:
        asm_text: Assembly source holding the function
        func_name: Function to reconcile
        img: The binary
        abs_func: Address of the function in the binary
        driver: Assembler used to re-assemble after each patch
        rules: Encoding rules, tried in order
        source_id: Identity of the assembly file for the listing
        index: Ordinal of the function within the file, when names repeat
        function_names: Symbol-table fallback names used for the original parse

    Returns:
        tuple: (final assembly text, final listed function)

    Raises:
        UnresolvableMismatch: A disagreement no rule explains, or a data directive mismatch
        NonTermination: Mismatches stop moving forward
    """
    patches = 0
    last_mismatch = -1
    while True:
        output = driver.assemble_with_listing(asm_text)
        doc = with_relocations(parse_listing(output.listing, source_id, (function_names or set()) | {func_name}), output.relocations)
        func = _select(doc.functions, func_name, index)

        idx = find_first_mismatch(func, img, abs_func)
        if idx is None:
            if patches:
                logger.debug(f"{func_name}: reconciled after {patches} patch(es)")
            return asm_text, func

        record = func.records[idx]
        abs_offset = _record_abs(func, record, abs_func)
        section = img.section_at(abs_offset)
        available = min(MAX_INSN_LENGTH, section.end - abs_offset) if section else len(record.bytes)
        binary = read_bytes(img, abs_offset, available)

        if record.kind is RecordKind.DATA:
            raise UnresolvableMismatch(
                f"{func_name}: data directive disagrees with the binary", abs_offset,
                record.statement, record.bytes, binary[:len(record.bytes)],
            )
        if abs_offset <= last_mismatch or patches >= len(func.records):
            raise NonTermination(
                f"{func_name}: mismatch at {abs_offset:#x} after {patches} patch(es) did not advance"
            )

        rule = next((r for r in rules if r.matcher(record.statement, record.bytes)), None)
        if rule is None:
            raise UnresolvableMismatch(
                f"{func_name}: no encoding rule applies", abs_offset,
                record.statement, record.bytes, binary[:len(record.bytes)],
            )
        try:
            length = rule.alternate_length(record.bytes, binary)
        except ValueError as e:
            raise UnresolvableMismatch(
                f"{func_name}: {e}", abs_offset, record.statement, record.bytes, binary[:len(record.bytes)],
            ) from e
        if not 1 <= length <= MAX_INSN_LENGTH:
            raise UnresolvableMismatch(
                f"{func_name}: rule '{rule.description}' gave length {length}", abs_offset,
                record.statement, record.bytes, binary,
            )

        logger.debug(
            f"{func_name}: {record.statement!r} at {abs_offset:#x} "
            f"{record.bytes.hex()} -> {binary[:length].hex()} ({rule.description})"
        )
        asm_text = patch_statement(asm_text, func_name, record, binary[:length])
        patches += 1
        last_mismatch = abs_offset


class AssemblerReconciler:
    """
    Reconcile capability that patches and re-assembles.

    Keeps the current assembly text per source; a successful reconciliation
    commits its patches, a failed one leaves the text untouched.
    """

    def __init__(self, img: BinaryImage, sources: dict[str, str], driver: AssemblerDriver,
                 rules: Optional[Sequence[EncodingRule]] = None, function_names: Optional[set[str]] = None):
        self.img = img
        self.sources = dict(sources)
        self.driver = driver
        self.rules = list(rules) if rules is not None else default_rules(img.isa)
        self.function_names = function_names
        self.failures: dict[str, list[str]] = {}

    def __call__(self, func: ListedFunction, symbol: FuncSymbol) -> Optional[ListedFunction]:
        asm_text = self.sources[func.source_id]
        try:
            final_text, final = reconcile_function(
                asm_text, func.name, self.img, symbol.abs_offset, self.driver, self.rules,
                source_id=func.source_id, index=func.index, function_names=self.function_names,
            )
        except (UnresolvableMismatch, NonTermination, StatementNotLocatable, Underflow, OutOfRange) as e:
            context = reconcile_error_context(e)
            self.failures.setdefault(func.name, []).append(f"{func.source_id}#{func.index}: {context}")
            logger.debug(f"{func.name} from {func.source_id} does not reconcile at {symbol.abs_offset:#x}: {context}")
            return None
        self.sources[func.source_id] = final_text
        return final


_ISA_FLAGS = {Isa.X64: "--64", Isa.X86: "--32"}


@dataclass
class GnuAssemblerDriver:
    """
    Runs the GNU assembler in a private scratch directory.

    The command template may use {in}, {lst}, {obj} and {isa_flag}.
    """

    cmd_template: str
    isa: Isa = Isa.X64
    timeout: float = 120.0
    env: Optional[dict] = field(default=None)

    def assemble_with_listing(self, asm_text: str) -> AssemblyOutput:
        with tempfile.TemporaryDirectory(prefix="gtforge-as-") as scratch:
            scratch_dir = Path(scratch)
            src = scratch_dir / "in.s"
            lst = scratch_dir / "out.lst"
            obj = scratch_dir / "out.o"
            src.write_text(asm_text, encoding="utf-8")
            cmd = self.cmd_template.format(
                **{"in": shlex.quote(str(src)), "lst": shlex.quote(str(lst)),
                   "obj": shlex.quote(str(obj)), "isa_flag": _ISA_FLAGS[self.isa]}
            )
            try:
                result = subprocess.run(
                    shlex.split(cmd), capture_output=True, text=True, timeout=self.timeout, env=self.env,
                )
            except (OSError, subprocess.TimeoutExpired) as e:
                raise AssemblerError(f"cannot run assembler: {cmd}", -1, str(e)) from e
            if result.returncode != 0:
                raise AssemblerError(f"assembler failed: {cmd}", result.returncode, result.stderr)
            if not lst.exists():
                raise AssemblerError(f"assembler wrote no listing: {cmd}", result.returncode, result.stderr)
            listing = lst.read_text(encoding="utf-8", errors="replace")
            relocations = read_object_relocations(obj) if obj.exists() else {}
        return AssemblyOutput(listing, relocations)


def reconcile_error_context(error: GtForgeError) -> str:
    """One-line description of a reconciliation failure for reports."""
    if isinstance(error, UnresolvableMismatch):
        return (f"{error.abs_offset:#x} {error.statement!r} listing={error.listing_bytes.hex()} "
                f"binary={error.binary_bytes.hex()}")
    return str(error)
