"""
Prefix canonicalization.

Legacy prefixes are split off the front of an instruction and kept as an
unordered set, so "66 f3 ab" and "f3 66 ab" compare equal. A claim that
consists only of prefix bytes is folded into the claim that follows it.
"""

from dataclasses import dataclass, replace
from typing import Optional, Sequence

from core.errors import AllPrefixes
from core.x86 import Isa, LEGACY_PREFIXES, REX_RANGE
from utils import logger


@dataclass(frozen=True)
class PrefixTable:
    isa: Isa
    legacy_prefixes: frozenset[int] = LEGACY_PREFIXES

    def is_prefix(self, byte: int) -> bool:
        return byte in self.legacy_prefixes

    def is_rex(self, byte: int) -> bool:
        return self.isa is Isa.X64 and byte in REX_RANGE


PREFIX_TABLES: dict[Isa, PrefixTable] = {isa: PrefixTable(isa) for isa in Isa}


def split_prefixes(data: bytes, isa: Isa) -> tuple[frozenset[int], bytes]:
    """
    Split the leading run of legacy prefixes off an instruction.

    REX bytes are not prefixes here: they stay with the core.

    Args:
        data: Instruction bytes, non-empty
        isa: ISA selecting the prefix table

    Returns:
        tuple: (prefix set, core bytes)

    Raises:
        AllPrefixes: When every byte is a legacy prefix
    """
    if not data:
        raise ValueError("cannot split an empty byte sequence")
    table = PREFIX_TABLES[isa]
    i = 0
    while i < len(data) and table.is_prefix(data[i]):
        i += 1
    if i == len(data):
        raise AllPrefixes(f"{data.hex()} consists solely of prefixes")
    return frozenset(data[:i]), bytes(data[i:])


def is_prefix_only(data: bytes, isa: Isa) -> bool:
    table = PREFIX_TABLES[isa]
    return bool(data) and all(table.is_prefix(b) for b in data)


def canonical_bytes(prefixes: frozenset[int], core: bytes) -> bytes:
    """Sorted prefixes followed by the core."""
    return bytes(sorted(prefixes)) + core


def same_instruction(a: bytes, b: bytes, isa: Isa) -> bool:
    """Byte equality under prefix-set comparison."""
    if a == b:
        return True
    if not a or not b:
        return False
    try:
        return split_prefixes(a, isa) == split_prefixes(b, isa)
    except AllPrefixes:
        return False


def mandatory_prefix_suspect(prefixes: frozenset[int], core: bytes) -> bool:
    """
    Flag instructions whose stripped prefix may be an opcode modifier.

    SSE encodings use 66/f2/f3 in front of a 0f escape as part of the opcode;
    coarse stripping keeps them in the prefix set, so such records are marked
    for review instead of special-cased.
    """
    return bool(prefixes & {0x66, 0xF2, 0xF3}) and core[:1] == b"\x0f"


@dataclass(frozen=True)
class Claim:
    """One claimed instruction: offset plus optional size and bytes."""

    offset: int
    size: Optional[int] = None
    data: Optional[bytes] = None

    @property
    def end(self) -> Optional[int]:
        return None if self.size is None else self.offset + self.size


def merge_split_claims(claims: Sequence[Claim], isa: Isa) -> tuple[list[Claim], list[Claim]]:
    """
    Fold prefix-only claims into the immediately following adjacent claim.

    Args:
        claims: Claims sorted by offset
        isa: ISA selecting the prefix table

    Returns:
        tuple: (merged claims, dangling prefix-only claims). Dangling claims
        are also present in the merged list; they are reported, not dropped.
    """
    merged: list[Claim] = []
    dangling: list[Claim] = []
    pending: Optional[Claim] = None

    for claim in claims:
        if pending is not None:
            if pending.end == claim.offset and claim.data is not None:
                claim = Claim(
                    offset=pending.offset,
                    size=pending.size + (claim.size if claim.size is not None else len(claim.data)),
                    data=pending.data + claim.data,
                )
            else:
                dangling.append(pending)
                merged.append(pending)
            pending = None

        if claim.data is not None and is_prefix_only(claim.data, isa):
            pending = replace(claim, size=len(claim.data))
            continue
        merged.append(claim)

    if pending is not None:
        dangling.append(pending)
        merged.append(pending)

    for claim in dangling:
        logger.warning(f"Dangling prefix-only claim at {claim.offset:#x}: {claim.data.hex()}")
    return merged, dangling
