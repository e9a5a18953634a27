"""
Ground truth construction and the ground-truth file format.

Instruction addresses come from combining the symbol table with listing
offsets: Abs_Insn = Abs_Func + (Rlt_Insn - Rlt_Func). Instruction bytes are
always read from the binary, never copied from the listing.
"""

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from core.binfmt import BinaryImage, FuncSymbol, read_bytes
from core.errors import (
    AllPrefixes,
    FormatVersionMismatch,
    OutOfRange,
    OverlapDetected,
    ParseError,
    Underflow,
    UnmatchedSymbol,
)
from core.listing import ListedFunction, ListedRecord, ListingDoc, RecordKind, classify_statement
from core.prefixcanon import is_prefix_only, mandatory_prefix_suspect, split_prefixes
from core.x86 import CFClass, Isa, LEGACY_PREFIXES
from utils import logger
from utils.helpers import hex_bytes, parse_hex_bytes

FORMAT_VERSION = 1

# (symbol, listing) -> final listing, or None when the body does not reconcile
ReconcileCapability = Callable[[ListedFunction, FuncSymbol], Optional[ListedFunction]]
Pairing = list[tuple[FuncSymbol, ListedFunction]]


@dataclass(frozen=True)
class InstructionRecord:
    abs_offset: int
    size: int
    bytes: bytes
    prefixes: frozenset[int] = frozenset()
    optional: bool = False
    cf_class: CFClass = CFClass.NONCF

    @property
    def end(self) -> int:
        return self.abs_offset + self.size

    @property
    def core(self) -> bytes:
        return self.bytes[len(self.bytes) - self.core_length:]

    @property
    def core_length(self) -> int:
        # prefixes are a set; the run length is recovered from the bytes
        i = 0
        while i < len(self.bytes) - 1 and self.bytes[i] in self.prefixes:
            i += 1
        return len(self.bytes) - i

    @property
    def prefix_suspect(self) -> bool:
        return mandatory_prefix_suspect(self.prefixes, self.core)


@dataclass(frozen=True)
class NopRegion:
    abs_offset: int
    size: int

    @property
    def end(self) -> int:
        return self.abs_offset + self.size


@dataclass(frozen=True)
class FunctionRecord:
    name: str
    abs_offset: int
    extent: Optional[int]
    instructions: tuple[InstructionRecord, ...] = ()
    regions: tuple[NopRegion, ...] = ()

    @property
    def end(self) -> int:
        """End of everything attributed to the function, padding included."""
        ends = [self.abs_offset + (self.extent or 0)]
        ends += [i.end for i in self.instructions] + [r.end for r in self.regions]
        return max(ends)


@dataclass(frozen=True)
class Provenance:
    compiler: str = "unknown"
    optflag: str = "unknown"
    notes: tuple[str, ...] = ()

    def note(self, key: str) -> Optional[str]:
        prefix = f"{key}="
        for note in self.notes:
            if note.startswith(prefix):
                return note[len(prefix):]
        return None


@dataclass(frozen=True)
class GroundTruthDoc:
    binary_hash: str
    isa: Isa
    functions: tuple[FunctionRecord, ...] = ()
    provenance: Provenance = field(default_factory=Provenance)

    def instructions(self, optional: Optional[bool] = None) -> list[InstructionRecord]:
        result = [i for f in self.functions for i in f.instructions]
        if optional is not None:
            result = [i for i in result if i.optional == optional]
        return sorted(result, key=lambda i: i.abs_offset)

    def regions(self) -> list[NopRegion]:
        return sorted((r for f in self.functions for r in f.regions), key=lambda r: r.abs_offset)

    def function_ranges(self) -> list[tuple[int, int]]:
        return sorted((f.abs_offset, f.end) for f in self.functions)


def absolutize(abs_func: int, rlt_func: int, rlt_insn: int) -> int:
    """
    Abs_Insn = Abs_Func + (Rlt_Insn - Rlt_Func).

    Raises:
        Underflow: rlt_insn precedes rlt_func, i.e. a mismatched pairing
    """
    if rlt_insn < rlt_func:
        raise Underflow(f"relative offset {rlt_insn:#x} precedes function start {rlt_func:#x}")
    return abs_func + (rlt_insn - rlt_func)


class ByteMatchReconciler:
    """Accepts a listed body only when it already byte-matches the binary."""

    def __init__(self, img: BinaryImage):
        self.img = img

    def __call__(self, func: ListedFunction, symbol: FuncSymbol) -> Optional[ListedFunction]:
        for record in func.records:
            if record.kind is RecordKind.ALIGN:
                continue
            try:
                abs_offset = absolutize(symbol.abs_offset, func.rlt_func, record.rlt_offset)
                binary = read_bytes(self.img, abs_offset, len(record.bytes))
            except (Underflow, OutOfRange):
                return None
            if not record.matches(binary):
                return None
        return func


def match_functions(
    symbols: Sequence[FuncSymbol],
    listed: Sequence[ListedFunction],
    img: BinaryImage,
    reconciler: Optional[ReconcileCapability] = None,
) -> Pairing:
    """
    Pair binary symbols with listed function bodies.

    Listed functions are grouped by name; for each symbol the candidates of
    its class are tried in listing order and the first that reconciles
    against the binary wins and leaves the class.

    Args:
        symbols: Function symbols, in the order they should be matched
        listed: Listed functions from all listings, in listing order
        img: The binary
        reconciler: Reconcile capability; defaults to byte matching

    Returns:
        list: (symbol, final listed function) pairs

    Raises:
        UnmatchedSymbol: No candidate reconciles for a symbol
    """
    reconciler = reconciler or ByteMatchReconciler(img)
    classes: dict[str, list[ListedFunction]] = defaultdict(list)
    for func in listed:
        classes[func.name].append(func)

    pairs: Pairing = []
    for symbol in symbols:
        candidates = classes.get(symbol.name)
        if not candidates:
            raise UnmatchedSymbol(f"no listing defines {symbol.name} ({symbol.abs_offset:#x})")
        for i, candidate in enumerate(candidates):
            final = reconciler(candidate, symbol)
            if final is not None:
                pairs.append((symbol, final))
                del candidates[i]
                logger.debug(f"Paired {symbol.name}@{symbol.abs_offset:#x} with {candidate.source_id}#{candidate.index}")
                break
        else:
            raise UnmatchedSymbol(
                f"none of {len(candidates)} listed bodies of {symbol.name} reconcile at {symbol.abs_offset:#x}"
            )

    for name, leftovers in classes.items():
        for func in leftovers:
            logger.warning(f"Unconsumed listing: {name} from {func.source_id or '<listing>'} matched no symbol")
    return pairs


def refresh_pairs(pairs: Pairing, docs: Sequence[ListingDoc]) -> Pairing:
    """Re-bind pairs to the functions of the given (final) listings."""
    by_key = {fn.key: fn for doc in docs for fn in doc.functions}
    return [(symbol, by_key.get(func.key, func)) for symbol, func in pairs]


def _fold_prefix_records(records: Sequence[ListedRecord], isa: Isa) -> list[ListedRecord]:
    """Merge prefix-only INSN records into the adjacent following INSN record."""
    out: list[ListedRecord] = []
    pending: Optional[ListedRecord] = None
    for record in records:
        if record.kind is not RecordKind.INSN:
            if pending is not None:
                out.append(pending)
                pending = None
            out.append(record)
            continue
        if pending is not None and pending.end == record.rlt_offset:
            record = ListedRecord(
                kind=RecordKind.INSN,
                rlt_offset=pending.rlt_offset,
                size=pending.size + record.size,
                bytes=pending.bytes + record.bytes,
                statement=f"{pending.statement} {record.statement}",
                line=pending.line,
                section=record.section,
                reloc_mask=frozenset(pending.reloc_mask | {i + pending.size for i in record.reloc_mask}),
                patched=pending.patched or record.patched,
            )
            pending = None
        elif pending is not None:
            out.append(pending)
            pending = None
        if is_prefix_only(record.bytes, isa):
            pending = record
            continue
        out.append(record)
    if pending is not None:
        out.append(pending)
    return out


def fold_prefix_records(func: ListedFunction, isa: Isa) -> list[ListedRecord]:
    return _fold_prefix_records(func.records, isa)


def _instruction_record(img: BinaryImage, abs_offset: int, record: ListedRecord) -> InstructionRecord:
    data = read_bytes(img, abs_offset, record.size)
    try:
        prefixes, _ = split_prefixes(data, img.isa)
    except AllPrefixes:
        logger.warning(f"Prefix-only instruction at {abs_offset:#x} ({data.hex()}) has no successor to merge into")
        prefixes = frozenset()
    return InstructionRecord(
        abs_offset=abs_offset,
        size=record.size,
        bytes=data,
        prefixes=prefixes,
        optional=False,
        cf_class=classify_statement(record.statement),
    )


def build_function(img: BinaryImage, symbol: FuncSymbol, func: ListedFunction) -> FunctionRecord:
    instructions = []
    regions = []
    last_end = func.rlt_func
    for record in _fold_prefix_records(func.records, img.isa):
        abs_offset = absolutize(symbol.abs_offset, func.rlt_func, record.rlt_offset)
        last_end = max(last_end, record.end)
        if record.kind is RecordKind.INSN:
            instructions.append(_instruction_record(img, abs_offset, record))
        elif record.kind is RecordKind.ALIGN and record.size > 0:
            regions.append(NopRegion(abs_offset, record.size))

    extent = symbol.size if symbol.size is not None else last_end - func.rlt_func
    limit = symbol.abs_offset + extent
    for insn in instructions:
        if insn.end > limit:
            raise OverlapDetected(
                f"{symbol.name}: instruction at {insn.abs_offset:#x} extends past function end {limit:#x}"
            )
    for region in regions:
        # trailing inter-function padding may start at or after the symbol end
        if region.abs_offset < limit < region.end:
            raise OverlapDetected(f"{symbol.name}: padding at {region.abs_offset:#x} straddles function end {limit:#x}")

    suspects = [i for i in instructions if i.prefix_suspect]
    if suspects:
        logger.debug(f"{symbol.name}: {len(suspects)} instruction(s) with a possible mandatory prefix")

    return FunctionRecord(
        name=symbol.name,
        abs_offset=symbol.abs_offset,
        extent=extent,
        instructions=tuple(instructions),
        regions=tuple(regions),
    )


def check_overlaps(functions: Sequence[FunctionRecord]) -> None:
    """
    Raises:
        OverlapDetected: Two instructions or regions share a byte
    """
    spans = []
    for fn in functions:
        spans += [(i.abs_offset, i.end, fn.name) for i in fn.instructions]
        spans += [(r.abs_offset, r.end, fn.name) for r in fn.regions]
    spans.sort()
    for (a_start, a_end, a_name), (b_start, b_end, b_name) in zip(spans, spans[1:]):
        if b_start < a_end:
            raise OverlapDetected(
                f"[{a_start:#x},{a_end:#x}) in {a_name} overlaps [{b_start:#x},{b_end:#x}) in {b_name}"
            )


def build_ground_truth(
    img: BinaryImage,
    docs: Sequence[ListingDoc],
    pairs: Pairing,
    provenance: Optional[Provenance] = None,
) -> GroundTruthDoc:
    """
    Build the ground truth for one binary.

    Args:
        img: The binary
        docs: Final (reconciled) listings
        pairs: Symbol/listing pairing from match_functions
        provenance: Compiler, optimization flag and notes

    Returns:
        GroundTruthDoc: One FunctionRecord per pair, sorted by address

    Raises:
        OverlapDetected: Two functions map to intersecting ranges
    """
    functions = [build_function(img, symbol, func) for symbol, func in refresh_pairs(pairs, docs)]
    functions.sort(key=lambda f: (f.abs_offset, f.name))
    check_overlaps(functions)
    doc = GroundTruthDoc(
        binary_hash=img.content_hash,
        isa=img.isa,
        functions=tuple(functions),
        provenance=provenance or Provenance(),
    )
    logger.info(
        f"Built ground truth: {len(functions)} functions, {len(doc.instructions())} instructions, "
        f"{len(doc.regions())} nop regions"
    )
    return doc


def _token(value: str, what: str) -> str:
    if not value or any(ch.isspace() for ch in value):
        raise ValueError(f"{what} must be a single non-empty token, got {value!r}")
    return value


def serialize(doc: GroundTruthDoc) -> str:
    """Render a ground-truth document in the canonical line format."""
    lines = [
        f"#gtf {FORMAT_VERSION}",
        f"B {doc.binary_hash} {doc.isa.value} {_token(doc.provenance.compiler, 'compiler')} "
        f"{_token(doc.provenance.optflag, 'optflag')}",
    ]
    lines += [f"# {note}" for note in doc.provenance.notes]
    for fn in sorted(doc.functions, key=lambda f: (f.abs_offset, f.name)):
        extent = "?" if fn.extent is None else f"{fn.extent:x}"
        lines.append(f"F {fn.abs_offset:x} {extent} {fn.name}")
        entries = [(i.abs_offset, 0, _insn_line(i)) for i in fn.instructions]
        entries += [(r.abs_offset, 1, f"N {r.abs_offset:x} {r.size:x}") for r in fn.regions]
        lines += [text for _, _, text in sorted(entries)]
    return "\n".join(lines) + "\n"


def _insn_line(insn: InstructionRecord) -> str:
    prefixes = bytes(sorted(insn.prefixes))
    return (
        f"I {insn.abs_offset:x} {insn.size:x} {insn.bytes.hex()} P={hex_bytes(prefixes)} "
        f"O={int(insn.optional)} C={insn.cf_class.value}"
    )


def deserialize(text: str) -> GroundTruthDoc:
    """
    Parse a ground-truth document.

    Functions, instructions and regions come back in canonical order, so a
    file with reordered lines reads as the same document.

    Raises:
        FormatVersionMismatch: The header names another format version
        ParseError: A line is malformed (line_no is 1-based)
    """
    lines = text.splitlines()
    if not lines or not lines[0].startswith("#gtf "):
        raise ParseError("missing '#gtf' header", 1)
    version = lines[0][len("#gtf "):].strip()
    if version != str(FORMAT_VERSION):
        raise FormatVersionMismatch(f"format version {version}, expected {FORMAT_VERSION}")

    header = None
    notes: list[str] = []
    functions: list[FunctionRecord] = []
    current: Optional[dict] = None

    def close() -> None:
        if current is not None:
            functions.append(
                FunctionRecord(
                    name=current["name"],
                    abs_offset=current["offset"],
                    extent=current["extent"],
                    instructions=tuple(sorted(current["insns"], key=lambda i: i.abs_offset)),
                    regions=tuple(sorted(current["regions"], key=lambda r: r.abs_offset)),
                )
            )

    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            if line.startswith("#"):
                if header is not None and current is None and not functions:
                    notes.append(line[1:].strip())
                continue
            tag, *fields = line.split(" ")
            if tag == "B":
                if header is not None or len(fields) != 4:
                    raise ParseError("expected 'B <hash> <isa> <compiler> <optflag>'", line_no)
                if len(fields[0]) != 64:
                    raise ParseError("binary hash must be 64 hex digits", line_no)
                int(fields[0], 16)
                header = (fields[0], Isa(fields[1]), fields[2], fields[3])
            elif tag == "F":
                if header is None or len(fields) < 3:
                    raise ParseError("expected 'F <offset> <extent|?> <name>' after the B line", line_no)
                close()
                current = {
                    "name": " ".join(fields[2:]),
                    "offset": int(fields[0], 16),
                    "extent": None if fields[1] == "?" else int(fields[1], 16),
                    "insns": [],
                    "regions": [],
                }
            elif tag == "I":
                if current is None:
                    raise ParseError("instruction line before any F line", line_no)
                current["insns"].append(_parse_insn(fields, line_no))
            elif tag == "N":
                if current is None or len(fields) != 2:
                    raise ParseError("expected 'N <offset> <size>' inside a function", line_no)
                size = int(fields[1], 16)
                if size < 1:
                    raise ParseError("nop region size must be at least 1", line_no)
                current["regions"].append(NopRegion(int(fields[0], 16), size))
            else:
                raise ParseError(f"unknown line tag {tag!r}", line_no)
        except ParseError:
            raise
        except ValueError as e:
            raise ParseError(str(e), line_no) from e
    close()

    if header is None:
        raise ParseError("missing B line", len(lines))
    binary_hash, isa, compiler, optflag = header
    return GroundTruthDoc(
        binary_hash=binary_hash,
        isa=isa,
        functions=tuple(sorted(functions, key=lambda f: (f.abs_offset, f.name))),
        provenance=Provenance(compiler=compiler, optflag=optflag, notes=tuple(notes)),
    )


def _parse_insn(fields: list[str], line_no: int) -> InstructionRecord:
    if len(fields) != 6 or not (fields[3].startswith("P=") and fields[4].startswith("O=") and fields[5].startswith("C=")):
        raise ParseError("expected 'I <offset> <size> <bytes> P=.. O=.. C=..'", line_no)
    size = int(fields[1], 16)
    data = parse_hex_bytes(fields[2])
    if size < 1 or size != len(data):
        raise ParseError(f"size {size:#x} does not match {len(data)} instruction bytes", line_no)
    prefixes = frozenset(parse_hex_bytes(fields[3][2:]))
    if not prefixes <= LEGACY_PREFIXES:
        raise ParseError(f"P= holds non-prefix bytes {fields[3][2:]}", line_no)
    optional = fields[4][2:]
    if optional not in ("0", "1"):
        raise ParseError(f"O= must be 0 or 1, got {optional!r}", line_no)
    return InstructionRecord(
        abs_offset=int(fields[0], 16),
        size=size,
        bytes=data,
        prefixes=prefixes,
        optional=optional == "1",
        cf_class=CFClass.from_token(fields[5][2:]),
    )
