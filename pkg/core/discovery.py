"""
Optional-instruction discovery.

Compilers sometimes spell instructions as data (`.byte 0x0f,0x1f,0x00`), so
they have no instruction record in the listing. Starting from the
conservative successors of every recorded instruction, a conservative
recursive traversal decodes whatever is reachable but unrecorded and adds it
to the ground truth marked optional. Code reachable only through indirect
jumps is not found.
"""

import bisect
from dataclasses import dataclass, field, replace
from typing import Optional, Protocol

from capstone import CS_ARCH_X86, CS_MODE_32, CS_MODE_64, CS_OPT_SYNTAX_ATT, Cs, CsError

from core.binfmt import BinaryImage, read_bytes
from core.errors import AllPrefixes, OutOfRange
from core.groundtruth import GroundTruthDoc, InstructionRecord, Pairing, absolutize
from core.listing import RecordKind, classify_statement, direct_target_label
from core.prefixcanon import split_prefixes
from core.x86 import CFClass, Isa, MAX_INSN_LENGTH, decode_instruction
from utils import logger

NO_SUCCESSORS = frozenset({
    CFClass.INDIRECT_JUMP, CFClass.RETURN, CFClass.CALL, CFClass.OTHER_CF,
})


@dataclass(frozen=True)
class Decoded:
    size: int
    data: bytes
    cf_class: CFClass
    target: Optional[int] = None


class DecodeOracle(Protocol):
    def decode_bytes(self, data: bytes, address: int = 0) -> Optional[Decoded]:
        ...

    def decode_at(self, img: BinaryImage, abs_offset: int) -> Optional[Decoded]:
        ...


def code_window(img: BinaryImage, abs_offset: int) -> bytes:
    """Up to one maximal instruction of bytes from an executable section."""
    section = img.section_at(abs_offset)
    if section is None or not section.executable:
        return b""
    return read_bytes(img, abs_offset, min(MAX_INSN_LENGTH, section.end - abs_offset))


class TableDecodeOracle:
    """Built-in oracle over the x86 encoding tables."""

    def __init__(self, isa: Isa):
        self.isa = isa

    def decode_bytes(self, data: bytes, address: int = 0) -> Optional[Decoded]:
        insn = decode_instruction(data, self.isa)
        if insn is None:
            return None
        return Decoded(insn.size, bytes(data[:insn.size]), insn.cf_class, insn.branch_target(address))

    def decode_at(self, img: BinaryImage, abs_offset: int) -> Optional[Decoded]:
        return self.decode_bytes(code_window(img, abs_offset), abs_offset)


class CapstoneDecodeOracle:
    """Full-coverage oracle backed by capstone."""

    def __init__(self, isa: Isa):
        self.isa = isa
        self.md = Cs(CS_ARCH_X86, CS_MODE_64 if isa is Isa.X64 else CS_MODE_32)
        self.md.syntax = CS_OPT_SYNTAX_ATT

    def decode_bytes(self, data: bytes, address: int = 0) -> Optional[Decoded]:
        try:
            insn = next(self.md.disasm(bytes(data), address, count=1), None)
        except CsError:
            return None
        if insn is None:
            return None
        statement = f"{insn.mnemonic} {insn.op_str}".strip()
        cf_class = classify_statement(statement)
        target = None
        if cf_class in (CFClass.COND_DIRECT_JUMP, CFClass.UNCOND_DIRECT_JUMP, CFClass.CALL):
            try:
                target = int(insn.op_str.strip(), 16)
            except ValueError:
                target = None
        return Decoded(insn.size, bytes(insn.bytes), cf_class, target)

    def decode_at(self, img: BinaryImage, abs_offset: int) -> Optional[Decoded]:
        return self.decode_bytes(code_window(img, abs_offset), abs_offset)


ORACLES = {
    "table": TableDecodeOracle,
    "capstone": CapstoneDecodeOracle,
}


@dataclass
class DiscoveryFindings:
    undecodable: list[tuple[int, bytes]] = field(default_factory=list)
    conflicts: list[tuple[int, int, int]] = field(default_factory=list)
    unresolved_targets: list[int] = field(default_factory=list)

    def __bool__(self) -> bool:
        return bool(self.undecodable or self.conflicts or self.unresolved_targets)

    def to_text(self) -> str:
        lines = [f"UNDECODABLE {offset:x} {data.hex() or '-'}" for offset, data in sorted(self.undecodable)]
        lines += [
            f"OVERLAP {offset:x} {size:x} conflicts-with {other:x}"
            for offset, size, other in sorted(self.conflicts)
        ]
        lines += [f"UNRESOLVED-TARGET {offset:x}" for offset in sorted(self.unresolved_targets)]
        return "\n".join(lines) + ("\n" if lines else "")


def conservative_successors(
    record: InstructionRecord,
    target: Optional[int] = None,
    isa: Isa = Isa.X64,
    findings: Optional[DiscoveryFindings] = None,
) -> set[int]:
    """
    Addresses where execution may continue after an instruction.

    Args:
        record: Classified instruction
        target: Direct-jump target resolved from the statement's label; when
            None the target is decoded from the displacement in the bytes
        isa: Decoding mode for the displacement
        findings: Collects unresolvable targets

    Returns:
        set: Fall-through and/or direct target; empty for indirect jumps,
        returns, calls and other control flow
    """
    cf = record.cf_class
    if cf in NO_SUCCESSORS:
        return set()
    if cf in (CFClass.NONCF, CFClass.UNKNOWN_CF):
        return {record.end}

    if target is None:
        insn = decode_instruction(record.bytes, isa)
        target = insn.branch_target(record.abs_offset) if insn is not None else None
    if target is None:
        if findings is not None:
            findings.unresolved_targets.append(record.abs_offset)
        logger.debug(f"Unresolvable target for jump at {record.abs_offset:#x} ({record.bytes.hex()})")
        return set()
    if cf is CFClass.COND_DIRECT_JUMP:
        return {record.end, target}
    return {target}


def statement_targets(pairs: Pairing) -> dict[int, int]:
    """
    Direct-jump targets resolved from listing labels.

    Returns:
        dict: Absolute offset of the jump -> absolute offset of its label
    """
    functions = {symbol.name: symbol.abs_offset for symbol, _ in pairs}
    targets: dict[int, int] = {}
    for symbol, func in pairs:
        for record in func.records:
            if record.kind is not RecordKind.INSN:
                continue
            if classify_statement(record.statement) not in (CFClass.COND_DIRECT_JUMP, CFClass.UNCOND_DIRECT_JUMP):
                continue
            label = direct_target_label(record.statement)
            if label is None:
                continue
            at = absolutize(symbol.abs_offset, func.rlt_func, record.rlt_offset)
            if label in func.labels:
                targets[at] = absolutize(symbol.abs_offset, func.rlt_func, func.labels[label])
            elif label in functions:
                targets[at] = functions[label]
    return targets


class _Intervals:
    """Sorted, non-overlapping [start, end) spans."""

    def __init__(self, spans):
        self.spans = sorted(spans)
        self.starts = [s for s, _ in self.spans]

    def containing(self, address: int) -> Optional[tuple[int, int]]:
        i = bisect.bisect_right(self.starts, address) - 1
        if i >= 0 and self.spans[i][0] <= address < self.spans[i][1]:
            return self.spans[i]
        return None

    def overlapping(self, start: int, end: int) -> Optional[tuple[int, int]]:
        i = bisect.bisect_right(self.starts, start) - 1
        for span in self.spans[max(i, 0):]:
            if span[0] >= end:
                break
            if span[1] > start:
                return span
        return None

    def add(self, start: int, end: int) -> None:
        i = bisect.bisect_left(self.starts, start)
        self.spans.insert(i, (start, end))
        self.starts.insert(i, start)


def discover_optional(
    doc: GroundTruthDoc,
    img: BinaryImage,
    oracle: DecodeOracle,
    findings: Optional[DiscoveryFindings] = None,
    targets: Optional[dict[int, int]] = None,
) -> GroundTruthDoc:
    """
    Add reachable but unrecorded instructions as optional records.

    Args:
        doc: Ground truth with every listed instruction present
        img: The binary
        oracle: Decoder for unrecorded addresses
        findings: Collects undecodable sites, overlaps and unresolved targets
        targets: Label-resolved direct-jump targets from statement_targets

    Returns:
        GroundTruthDoc: New document; the input is left untouched
    """
    findings = findings if findings is not None else DiscoveryFindings()
    targets = targets or {}
    records = doc.instructions()
    recorded = {r.abs_offset for r in records}
    occupied = _Intervals([(r.abs_offset, r.end) for r in records] + [(n.abs_offset, n.end) for n in doc.regions()])
    scope = _Intervals(merge_ranges(doc.function_ranges()))
    regions = _Intervals([(n.abs_offset, n.end) for n in doc.regions()])

    worklist: list[int] = []
    for record in records:
        worklist.extend(sorted(conservative_successors(record, targets.get(record.abs_offset), doc.isa, findings)))

    found: dict[int, InstructionRecord] = {}
    visited: set[int] = set()
    while worklist:
        address = worklist.pop()
        if address in recorded or address in visited:
            continue
        visited.add(address)
        if scope.containing(address) is None or regions.containing(address) is not None:
            continue
        straddled = occupied.containing(address)
        if straddled is not None:
            findings.conflicts.append((address, 0, straddled[0]))
            continue

        try:
            decoded = oracle.decode_at(img, address)
        except OutOfRange:
            decoded = None
        if decoded is None:
            findings.undecodable.append((address, code_window(img, address)[:MAX_INSN_LENGTH]))
            continue
        clash = occupied.overlapping(address, address + decoded.size)
        if clash is not None:
            findings.conflicts.append((address, decoded.size, clash[0]))
            continue

        try:
            prefixes, _ = split_prefixes(decoded.data, doc.isa)
        except AllPrefixes:
            prefixes = frozenset()
        record = InstructionRecord(
            abs_offset=address,
            size=decoded.size,
            bytes=decoded.data,
            prefixes=prefixes,
            optional=True,
            cf_class=decoded.cf_class,
        )
        found[address] = record
        occupied.add(address, record.end)
        worklist.extend(sorted(conservative_successors(record, decoded.target, doc.isa, findings)))

    if findings:
        logger.warning(
            f"Discovery findings: {len(findings.undecodable)} undecodable, "
            f"{len(findings.conflicts)} overlap(s), {len(findings.unresolved_targets)} unresolved target(s)"
        )
    if not found:
        return doc

    functions = []
    for fn in doc.functions:
        extra = [r for a, r in found.items() if fn.abs_offset <= a < fn.end]
        if extra:
            merged = sorted(fn.instructions + tuple(extra), key=lambda r: r.abs_offset)
            fn = replace(fn, instructions=tuple(merged))
        functions.append(fn)
    logger.info(f"Discovered {len(found)} optional instruction(s)")
    return replace(doc, functions=tuple(functions))


def merge_ranges(ranges: list[tuple[int, int]]) -> list[tuple[int, int]]:
    """Coalesce overlapping or touching [start, end) ranges."""
    merged: list[tuple[int, int]] = []
    for start, end in sorted(ranges):
        if merged and start <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], end))
        else:
            merged.append((start, end))
    return merged
