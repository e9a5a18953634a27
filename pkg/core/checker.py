"""
Correspondence check between final listings and ground truth.

Every instruction record of every paired listing must map to exactly one
non-optional ground-truth instruction with the same size, the same bytes
(relocated positions excepted) and the same prefix set, and vice versa.
Alignment records with padding must map to nop regions.
"""

from dataclasses import dataclass, field
from typing import Sequence

from core.errors import AllPrefixes
from core.groundtruth import GroundTruthDoc, Pairing, absolutize, fold_prefix_records, refresh_pairs
from core.listing import ListingDoc, RecordKind
from core.prefixcanon import split_prefixes
from core.x86 import Isa
from utils import logger


@dataclass
class CheckReport:
    missing_in_gt: list[tuple[str, int]] = field(default_factory=list)
    missing_in_lst: list[tuple[str, int]] = field(default_factory=list)
    byte_mismatches: list[tuple[int, bytes, bytes]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not (self.missing_in_gt or self.missing_in_lst or self.byte_mismatches)

    @property
    def findings(self) -> int:
        return len(self.missing_in_gt) + len(self.missing_in_lst) + len(self.byte_mismatches)

    def to_text(self) -> str:
        lines = [f"MISSING-IN-GT {name} {offset:x}" for name, offset in self.missing_in_gt]
        lines += [f"MISSING-IN-LST {name} {offset:x}" for name, offset in self.missing_in_lst]
        lines += [f"BYTES {offset:x} {lst.hex() or '-'} {gt.hex() or '-'}" for offset, lst, gt in self.byte_mismatches]
        return "\n".join(lines) + ("\n" if lines else "")


def _prefix_set(data: bytes, isa: Isa) -> frozenset[int]:
    try:
        return split_prefixes(data, isa)[0]
    except (AllPrefixes, ValueError):
        return frozenset()


def check_correspondence(final_docs: Sequence[ListingDoc], gt: GroundTruthDoc, pairs: Pairing) -> CheckReport:
    """
    Check the 1-1 correspondence between listings and ground truth.

    Args:
        final_docs: Post-reconciliation listings
        gt: Ground truth built from those listings
        pairs: Symbol/listing pairing used for the build

    Returns:
        CheckReport: Empty lists when the correspondence holds
    """
    report = CheckReport()
    gt_functions = {(fn.name, fn.abs_offset): fn for fn in gt.functions}
    seen = set()

    for symbol, func in refresh_pairs(pairs, final_docs):
        key = (symbol.name, symbol.abs_offset)
        seen.add(key)
        gt_fn = gt_functions.get(key)
        insns = {i.abs_offset: i for i in gt_fn.instructions if not i.optional} if gt_fn else {}
        regions = {(r.abs_offset, r.size) for r in gt_fn.regions} if gt_fn else set()

        for record in fold_prefix_records(func, gt.isa):
            abs_offset = absolutize(symbol.abs_offset, func.rlt_func, record.rlt_offset)
            if record.kind is RecordKind.ALIGN:
                if record.size == 0:
                    continue
                if (abs_offset, record.size) in regions:
                    regions.discard((abs_offset, record.size))
                else:
                    report.missing_in_gt.append((func.name, record.rlt_offset))
                continue
            if record.kind is not RecordKind.INSN:
                continue
            insn = insns.pop(abs_offset, None)
            if insn is None:
                report.missing_in_gt.append((func.name, record.rlt_offset))
                continue
            if (
                record.size != insn.size
                or not record.matches(insn.bytes)
                or _prefix_set(record.bytes, gt.isa) != insn.prefixes
            ):
                report.byte_mismatches.append((abs_offset, record.bytes, insn.bytes))

        report.missing_in_lst += [(symbol.name, offset) for offset in insns]
        report.missing_in_lst += [(symbol.name, offset) for offset, _ in regions]

    for key, fn in gt_functions.items():
        if key in seen:
            continue
        report.missing_in_lst += [(fn.name, i.abs_offset) for i in fn.instructions if not i.optional]
        report.missing_in_lst += [(fn.name, r.abs_offset) for r in fn.regions]

    report.missing_in_gt.sort()
    report.missing_in_lst.sort()
    report.byte_mismatches.sort()
    if report.ok:
        logger.info("✓ Listing and ground truth correspond 1-1")
    else:
        logger.error(f"✗ Correspondence check failed with {report.findings} finding(s)")
    return report
