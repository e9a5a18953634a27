"""
GNU assembler listing parser.

Parses the `as -al` listing format into per-function record sequences:

    NNNN AAAA BBBBBBBB <tab><source line>     emitting line
    NNNN      BBBBBBBB                        continuation of the line above
    NNNN              <tab><source line>      non-emitting line

NNNN is the source line number, AAAA the offset within the current section
and B the emitted bytes, at most four per listing line. Page headers and
anything not starting with a line number are ignored. The accepted grammar
is documented with captured samples in docs/formats/listing.md.
"""

import bisect
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Iterable, Optional

from core.errors import MalformedListing, NonMonotonicOffsets
from core.x86 import CFClass
from utils import logger

REENCODED_MARKER = "# gtforge-reencoded:"

ALIGN_DIRECTIVES = frozenset({
    ".align", ".p2align", ".balign", ".p2alignw", ".p2alignl", ".balignw", ".balignl",
})
FUNCTION_TYPES = frozenset({"@function", "%function", "stt_func", '"function"', "function"})


class RecordKind(str, Enum):
    INSN = "insn"
    ALIGN = "align"
    DATA = "data"


@dataclass(frozen=True)
class ListedRecord:
    kind: RecordKind
    rlt_offset: int
    size: int
    bytes: bytes
    statement: str
    line: int = 0
    section: str = ".text"
    reloc_mask: frozenset[int] = frozenset()
    patched: bool = False

    @property
    def end(self) -> int:
        return self.rlt_offset + self.size

    def matches(self, binary: bytes) -> bool:
        """Compare shown bytes with binary bytes, skipping relocated positions."""
        if len(binary) < len(self.bytes):
            return False
        return all(
            i in self.reloc_mask or a == b
            for i, (a, b) in enumerate(zip(self.bytes, binary))
        )


@dataclass(frozen=True)
class ListedFunction:
    name: str
    rlt_func: int
    records: tuple[ListedRecord, ...]
    source_id: str = ""
    index: int = 0
    section: str = ".text"
    labels: dict[str, int] = field(default_factory=dict)

    @property
    def instructions(self) -> list[ListedRecord]:
        return [r for r in self.records if r.kind is RecordKind.INSN]

    @property
    def key(self) -> tuple[str, int]:
        return (self.source_id, self.index)


@dataclass(frozen=True)
class ListingDoc:
    source_id: str
    functions: tuple[ListedFunction, ...]
    unattributed: tuple[ListedRecord, ...] = ()

    def function(self, name: str) -> list[ListedFunction]:
        return [f for f in self.functions if f.name == name]


_LABEL_RE = re.compile(r"^\s*([A-Za-z_.$][\w.$@]*|\d+)\s*:(?!:)")
_JCC_RE = re.compile(r"^j(n?(o|b|c|e|z|s|p|l|g|a|ae|be|ge|le|nae|nbe|nge|nle)|pe|po|cxz|ecxz|rcxz)[wlq]?$")
_IGNORED_PREFIXES = frozenset({
    "rep", "repe", "repz", "repne", "repnz", "lock", "notrack", "bnd",
    "data16", "data32", "addr16", "addr32", "cs", "ds", "es", "ss", "fs", "gs",
    "rex", "rex64", "rex.w", "xacquire", "xrelease",
})
_RETURNS = frozenset({"ret", "retq", "retl", "retw", "retn"})
_OTHER_CF = frozenset({
    "lret", "lretq", "lretl", "lretw", "iret", "iretq", "iretl", "iretd", "iretw",
    "ljmp", "ljmpl", "ljmpq", "ljmpw", "lcall", "lcalll", "lcallq", "lcallw",
    "int", "int1", "int3", "into", "icebp", "ud0", "ud1", "ud2", "hlt",
})
_UNKNOWN_CF = frozenset({
    "syscall", "sysenter", "sysexit", "sysexitq", "sysexitl", "sysret", "sysretq", "sysretl",
    "xbegin", "xabort", "xend", "vmcall", "vmlaunch", "vmresume", "vmrun", "vmmcall", "vmexit",
})
_MNEMONIC_RE = re.compile(r"^[a-z][a-z0-9.]*$")


def strip_comment(text: str) -> str:
    """Drop a trailing '#' or '/* */' comment outside string literals."""
    out = []
    in_string = False
    i = 0
    while i < len(text):
        ch = text[i]
        if ch == '"' and (i == 0 or text[i - 1] != "\\"):
            in_string = not in_string
        elif not in_string and ch == "#":
            break
        elif not in_string and text.startswith("/*", i):
            close = text.find("*/", i + 2)
            if close < 0:
                break
            i = close + 2
            continue
        out.append(ch)
        i += 1
    return "".join(out).strip()


def split_labels(source: str) -> tuple[list[str], str]:
    """Split leading label definitions off a source line."""
    labels = []
    rest = strip_comment(source)
    while True:
        m = _LABEL_RE.match(rest)
        if not m:
            return labels, rest.strip()
        labels.append(m.group(1))
        rest = rest[m.end():]


def _mnemonic_and_operands(statement: str) -> tuple[str, str]:
    _, text = split_labels(statement)
    tokens = text.split(None, 1)
    while tokens:
        head = tokens[0].lower()
        if head in _IGNORED_PREFIXES or (head.startswith("{") and head.endswith("}")):
            tokens = tokens[1].split(None, 1) if len(tokens) > 1 else []
            continue
        return head, tokens[1] if len(tokens) > 1 else ""
    return "", ""


def classify_statement(statement: str) -> CFClass:
    """
    Classify an instruction statement by its mnemonic.

    Args:
        statement: One assembly instruction (AT&T syntax), labels allowed

    Returns:
        CFClass: Control-flow class; unrecognized mnemonics give UNKNOWN_CF
    """
    mnemonic, operands = _mnemonic_and_operands(statement)
    if not mnemonic:
        return CFClass.UNKNOWN_CF
    if mnemonic in _RETURNS:
        return CFClass.RETURN
    if mnemonic in _OTHER_CF:
        return CFClass.OTHER_CF
    if mnemonic in _UNKNOWN_CF:
        return CFClass.UNKNOWN_CF
    if mnemonic in ("jmp", "jmpq", "jmpl", "jmpw"):
        return CFClass.INDIRECT_JUMP if operands.lstrip().startswith("*") else CFClass.UNCOND_DIRECT_JUMP
    if mnemonic in ("call", "callq", "calll", "callw"):
        return CFClass.CALL
    if _JCC_RE.match(mnemonic) or mnemonic.startswith("loop"):
        return CFClass.COND_DIRECT_JUMP
    if mnemonic.startswith(("j", "sys", "vm")) or not _MNEMONIC_RE.match(mnemonic):
        return CFClass.UNKNOWN_CF
    return CFClass.NONCF


def direct_target_label(statement: str) -> Optional[str]:
    """Label operand of a direct jump or call, if it is a plain symbol."""
    mnemonic, operands = _mnemonic_and_operands(statement)
    operand = operands.strip()
    if not mnemonic or not operand or operand.startswith(("*", "$", "%")):
        return None
    if re.fullmatch(r"[A-Za-z_.$][\w.$@]*", operand):
        return operand.split("@", 1)[0]
    return None


def _directive_name(statement: str) -> str:
    head = statement.split(None, 1)[0] if statement else ""
    return head.lower() if head.startswith(".") else ""


def _parse_section_name(args: str) -> str:
    name = args.split(",", 1)[0].strip()
    return name.strip('"') or ".text"


def _parse_hex(text: str, line_no: int) -> bytes:
    try:
        return bytes.fromhex(text)
    except ValueError as e:
        raise MalformedListing(f"line {line_no}: byte column {text!r} is not hex") from e


@dataclass
class _Row:
    line: int
    address: Optional[int]
    data: bytearray
    source: str
    section: str


@dataclass
class _OpenFunction:
    name: str
    section: str
    records: list = field(default_factory=list)
    labels: dict = field(default_factory=dict)
    pending: list = field(default_factory=list)


class _SectionState:
    def __init__(self):
        self.current = ".text"
        self.previous = ".text"
        self.stack: list[tuple[str, str]] = []

    def switch(self, name: str) -> None:
        self.previous, self.current = self.current, name

    def apply(self, directive: str, args: str) -> bool:
        if directive in (".text", ".data", ".bss"):
            self.switch(directive)
        elif directive == ".section":
            self.switch(_parse_section_name(args))
        elif directive == ".pushsection":
            self.stack.append((self.current, self.previous))
            self.switch(_parse_section_name(args))
        elif directive == ".popsection":
            if self.stack:
                self.current, self.previous = self.stack.pop()
        elif directive == ".previous":
            self.current, self.previous = self.previous, self.current
        else:
            return False
        return True


def _scan_rows(text: str) -> list[_Row]:
    """Group listing lines into rows, merging continuation lines."""
    rows: list[_Row] = []
    sections = _SectionState()
    for raw in text.splitlines():
        raw = raw.lstrip("\f")
        left, tab, source = raw.partition("\t")
        tokens = left.split()
        if not tokens or not tokens[0].isdigit():
            continue
        line_no = int(tokens[0])

        if not tab:
            if len(tokens) == 2 and rows and rows[-1].line == line_no and rows[-1].address is not None:
                rows[-1].data.extend(_parse_hex(tokens[1], line_no))
                continue
            if len(tokens) == 1:
                rows.append(_Row(line_no, None, bytearray(), "", sections.current))
                continue
            raise MalformedListing(f"line {line_no}: cannot parse {raw!r}")

        address = None
        data = bytearray()
        if len(tokens) >= 2:
            try:
                address = int(tokens[1], 16)
            except ValueError as e:
                raise MalformedListing(f"line {line_no}: address column {tokens[1]!r} is not hex") from e
            if len(tokens) >= 3:
                data.extend(_parse_hex(tokens[2], line_no))
            if len(tokens) > 3:
                raise MalformedListing(f"line {line_no}: unexpected columns in {left!r}")

        _, statement = split_labels(source)
        directive = _directive_name(statement)
        if directive:
            args = statement[len(directive):].strip()
            sections.apply(directive, args)
        rows.append(_Row(line_no, address, data, source, sections.current))
    return rows


def parse_listing(
    text: str,
    source_id: str = "",
    function_names: Optional[Iterable[str]] = None,
) -> ListingDoc:
    """
    Parse one GNU assembler listing.

    Args:
        text: Listing produced by `as -al` for a single assembly file
        source_id: Identity of the originating assembly file
        function_names: Fallback function names for listings without
            `.type name,@function` directives (normally the symbol table)

    Returns:
        ListingDoc: Functions with their INSN/ALIGN/DATA records

    Raises:
        MalformedListing: Offset or byte columns cannot be parsed
        NonMonotonicOffsets: Offsets decrease within a function
    """
    rows = _scan_rows(text)
    fallback = set(function_names or ())
    typed_functions: set[str] = set()

    # First pass: raw records per section, in listing order.
    by_section: dict[str, list[ListedRecord]] = {}
    row_record: dict[int, ListedRecord] = {}
    for idx, row in enumerate(rows):
        _, statement = split_labels(row.source)
        directive = _directive_name(statement)
        if directive == ".type":
            parts = [p.strip() for p in statement[len(".type"):].split(",")]
            if len(parts) >= 2 and parts[1].lower() in FUNCTION_TYPES:
                typed_functions.add(parts[0])
            continue
        if not statement:
            continue
        record = _make_record(row, statement, directive)
        if record is None:
            continue
        by_section.setdefault(row.section, []).append(record)
        row_record[idx] = record

    # Second pass: resolve offsets and sizes that depend on the next record.
    resolved: dict[int, ListedRecord] = {}
    for records in by_section.values():
        fixed = _resolve_sizes(records)
        for before, after in zip(records, fixed):
            resolved[id(before)] = after
    row_record = {idx: resolved[id(rec)] for idx, rec in row_record.items()}

    # Third pass: attribute records to functions, per section.
    names = typed_functions | fallback
    open_fns: dict[str, _OpenFunction] = {}
    opened: list[_OpenFunction] = []
    unattributed: list[ListedRecord] = []
    next_offset = _next_offsets(rows, row_record)

    for idx, row in enumerate(rows):
        labels, _ = split_labels(row.source)
        for label in labels:
            if label in names:
                open_fns[row.section] = _OpenFunction(label, row.section)
                opened.append(open_fns[row.section])
            fn = open_fns.get(row.section)
            if fn is not None:
                fn.labels[label] = next_offset[idx]
        record = row_record.get(idx)
        if record is None:
            continue
        fn = open_fns.get(record.section)
        if fn is None:
            unattributed.append(record)
            continue
        if fn.records and record.rlt_offset < fn.records[-1].end:
            raise NonMonotonicOffsets(
                f"{source_id}: {fn.name} line {record.line} offset {record.rlt_offset:#x} "
                f"precedes end of previous record {fn.records[-1].end:#x}"
            )
        if fn.records and record.rlt_offset > fn.records[-1].end:
            logger.warning(
                f"{source_id}: {fn.name} has a {record.rlt_offset - fn.records[-1].end} byte gap "
                f"before line {record.line}"
            )
        fn.records.append(record)

    functions = []
    for fn in opened:
        rlt_func = fn.labels.get(fn.name, fn.records[0].rlt_offset if fn.records else 0)
        functions.append(
            ListedFunction(
                name=fn.name,
                rlt_func=rlt_func,
                records=tuple(fn.records),
                source_id=source_id,
                index=len(functions),
                section=fn.section,
                labels=dict(fn.labels),
            )
        )

    stray = [r for r in unattributed if r.kind is RecordKind.INSN]
    if stray:
        logger.warning(f"{source_id}: {len(stray)} instruction record(s) outside any function")
    return ListingDoc(source_id=source_id, functions=tuple(functions), unattributed=tuple(unattributed))


def _make_record(row: _Row, statement: str, directive: str) -> Optional[ListedRecord]:
    data = bytes(row.data)
    if directive in ALIGN_DIRECTIVES:
        return ListedRecord(
            kind=RecordKind.ALIGN,
            rlt_offset=row.address if row.address is not None else -1,
            size=len(data),
            bytes=data,
            statement=statement,
            line=row.line,
            section=row.section,
        )
    if row.address is None or not data:
        return None
    if directive:
        comment = row.source[row.source.find(REENCODED_MARKER):] if REENCODED_MARKER in row.source else ""
        if directive == ".byte" and comment:
            original = comment[len(REENCODED_MARKER):].strip()
            return ListedRecord(RecordKind.INSN, row.address, len(data), data, original,
                                row.line, row.section, patched=True)
        return ListedRecord(RecordKind.DATA, row.address, len(data), data, statement, row.line, row.section)
    return ListedRecord(RecordKind.INSN, row.address, len(data), data, statement, row.line, row.section)


def _resolve_sizes(records: list[ListedRecord]) -> list[ListedRecord]:
    """Fill ALIGN sizes and address-less ALIGN offsets from the following record."""
    out = list(records)
    following: Optional[int] = None
    for i in range(len(out) - 1, -1, -1):
        rec = out[i]
        if rec.kind is RecordKind.ALIGN and rec.rlt_offset < 0:
            offset = following if following is not None else _location_before(out, i)
            out[i] = replace(rec, rlt_offset=offset, size=0)
        elif rec.kind is RecordKind.ALIGN:
            size = following - rec.rlt_offset if following is not None and following >= rec.rlt_offset else len(rec.bytes)
            out[i] = replace(rec, size=size)
        elif rec.kind is RecordKind.DATA and following is not None and following - rec.rlt_offset > rec.size:
            out[i] = replace(rec, size=following - rec.rlt_offset)
        elif rec.kind is RecordKind.INSN and following is not None and following != rec.end:
            logger.debug(f"line {rec.line}: {rec.size} byte(s) listed but next record at +{following - rec.rlt_offset}")
        following = out[i].rlt_offset
    return out


def _location_before(records: list[ListedRecord], i: int) -> int:
    for rec in reversed(records[:i]):
        if rec.rlt_offset >= 0:
            return rec.rlt_offset + max(rec.size, len(rec.bytes))
    return 0


def _next_offsets(rows: list[_Row], row_record: dict[int, ListedRecord]) -> list[int]:
    """For each row, the offset of the next record in the row's section."""
    result = [0] * len(rows)
    upcoming: dict[str, int] = {}
    last_end: dict[str, int] = {}
    for idx in range(len(rows)):
        rec = row_record.get(idx)
        if rec is not None:
            last_end[rec.section] = rec.end
    for idx in range(len(rows) - 1, -1, -1):
        rec = row_record.get(idx)
        if rec is not None:
            upcoming[rec.section] = rec.rlt_offset
        section = rows[idx].section
        result[idx] = upcoming.get(section, last_end.get(section, 0))
    return result


def with_relocations(doc: ListingDoc, relocations: dict[str, list[tuple[int, int]]]) -> ListingDoc:
    """
    Attach relocation masks to every record of a listing.

    Args:
        doc: Parsed listing
        relocations: Section name -> sorted (offset, width) sites from the object file

    Returns:
        ListingDoc: Copy whose records carry reloc_mask
    """
    def masked(record: ListedRecord) -> ListedRecord:
        sites = relocations.get(record.section)
        if not sites or record.kind is RecordKind.ALIGN:
            return record
        mask = set()
        start = bisect.bisect_left(sites, (record.rlt_offset - 8, 0))
        for offset, width in sites[start:]:
            if offset >= record.rlt_offset + record.size:
                break
            for pos in range(offset, offset + width):
                if record.rlt_offset <= pos < record.rlt_offset + record.size:
                    mask.add(pos - record.rlt_offset)
        return replace(record, reloc_mask=frozenset(mask)) if mask else record

    functions = tuple(
        replace(fn, records=tuple(masked(r) for r in fn.records)) for fn in doc.functions
    )
    return replace(doc, functions=functions, unattributed=tuple(masked(r) for r in doc.unattributed))


# Registered listing dialects. An MSVC parser would register under "msvc".
LISTING_PARSERS: dict[str, Callable[..., ListingDoc]] = {
    "gas": parse_listing,
}
