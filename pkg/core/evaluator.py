"""
Scoring disassembler output against ground truth.

A claim is an offset a tool says starts an instruction, optionally with the
size and bytes it decoded. Claims are matched against the non-optional
ground-truth records; optional records are excluded from every count and
each nop region is scored as a single unit.
"""

import bisect
import re
from collections import defaultdict
from dataclasses import dataclass, field, fields, replace
from statistics import harmonic_mean
from typing import Callable, Mapping, Optional, Sequence

from core.binfmt import BinaryImage, read_bytes
from core.discovery import DecodeOracle, code_window, merge_ranges
from core.errors import HashMismatch, MismatchedGroupSets, OracleInsufficient, OutOfRange, ParseError, ZeroDenominator
from core.groundtruth import GroundTruthDoc, InstructionRecord, NopRegion
from core.prefixcanon import Claim, merge_split_claims, same_instruction
from core.x86 import Isa, decode_instruction, is_known_nop
from utils import logger
from utils.helpers import parse_hex_bytes

REGION_MODES = ("count", "ignore")
GROUP_FIELDS = ("isa", "os", "compiler", "optflag", "project")
METRICS = ("w_precision", "w_recall", "w_f1")
METRIC_LABELS = {"w_precision": "Precision", "w_recall": "Recall", "w_f1": "F1"}


@dataclass(frozen=True)
class PredictionSet:
    binary_hash: str
    tool: str
    claims: tuple[Claim, ...] = ()
    dangling: tuple[Claim, ...] = ()


_HEADER_RE = re.compile(r"^#\s*(binary|tool)\s*:\s*(\S+)\s*$")
_OBJDUMP_RE = re.compile(r"^\s*([0-9a-fA-F]+):\t([0-9a-fA-F]{2}(?: [0-9a-fA-F]{2})*)\s*(?:\t(.*))?$")


def _parse_generic(raw: str) -> tuple[list[Claim], dict[str, str]]:
    claims: list[Claim] = []
    headers: dict[str, str] = {}
    for line_no, line in enumerate(raw.splitlines(), start=1):
        header = _HEADER_RE.match(line.strip())
        if header:
            headers[header.group(1)] = header.group(2)
            continue
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        parts = text.split()
        if len(parts) > 3:
            raise ParseError(f"expected '<offset> [<size> [<bytes>]]', got {text!r}", line_no)
        try:
            offset = int(parts[0], 16)
            size = int(parts[1], 16) if len(parts) > 1 else None
            data = parse_hex_bytes(parts[2]) if len(parts) > 2 else None
        except ValueError as e:
            raise ParseError(f"bad claim {text!r}: {e}", line_no) from e
        if offset < 0 or (size is not None and size <= 0):
            raise ParseError(f"bad claim {text!r}", line_no)
        if data is not None and len(data) != size:
            raise ParseError(f"size {size} does not match {len(data)} byte(s)", line_no)
        claims.append(Claim(offset, size, data))
    return claims, headers


def _parse_objdump(raw: str) -> tuple[list[Claim], dict[str, str]]:
    """`objdump -d` text; long encodings continue on address-only lines."""
    claims: list[Claim] = []
    for line in raw.splitlines():
        match = _OBJDUMP_RE.match(line)
        if not match:
            continue
        offset = int(match.group(1), 16)
        data = bytes.fromhex(match.group(2).replace(" ", ""))
        if match.group(3) is None and claims and claims[-1].end == offset:
            last = claims[-1]
            claims[-1] = Claim(last.offset, last.size + len(data), last.data + data)
            continue
        claims.append(Claim(offset, len(data), data))
    return claims, {}


ADAPTERS: dict[str, Callable[[str], tuple[list[Claim], dict[str, str]]]] = {
    "generic": _parse_generic,
    "objdump": _parse_objdump,
}


def normalize_output(
    raw: str,
    adapter: str = "generic",
    isa: Isa = Isa.X64,
    binary_hash: str = "",
    tool: str = "",
) -> PredictionSet:
    """
    Parse tool output into a canonical prediction set.

    Prefix-only claims are folded into the claim that follows them and
    duplicate offsets keep their first claim.

    Args:
        raw: Tool output text; empty output is a valid, empty prediction
        adapter: Key of ADAPTERS
        isa: ISA selecting the prefix table
        binary_hash: Overrides a `# binary:` header when given
        tool: Overrides a `# tool:` header when given

    Returns:
        PredictionSet: Claims sorted by offset with unique offsets

    Raises:
        ParseError: Malformed claim line
    """
    if adapter not in ADAPTERS:
        raise ParseError(f"unknown prediction adapter {adapter!r}; choose from {', '.join(ADAPTERS)}")
    claims, headers = ADAPTERS[adapter](raw)
    claims.sort(key=lambda c: c.offset)
    merged, dangling = merge_split_claims(claims, isa)

    unique: list[Claim] = []
    for claim in merged:
        if unique and unique[-1].offset == claim.offset:
            continue
        unique.append(claim)
    if len(unique) != len(merged):
        logger.debug(f"Dropped {len(merged) - len(unique)} duplicate claim(s)")

    return PredictionSet(
        binary_hash=binary_hash or headers.get("binary", ""),
        tool=tool or headers.get("tool", ""),
        claims=tuple(unique),
        dangling=tuple(dangling),
    )


@dataclass(frozen=True)
class BinaryScore:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    excluded_optional: int = 0
    region_matches: int = 0
    region_misses: int = 0
    excluded_regions: int = 0
    excluded_out_of_scope: int = 0
    missync: int = 0

    @property
    def precision_undefined(self) -> bool:
        return self.tp + self.fp == 0

    @property
    def precision(self) -> float:
        return 0.0 if self.precision_undefined else self.tp / (self.tp + self.fp)

    @property
    def recall(self) -> float:
        return 0.0 if self.tp + self.fn == 0 else self.tp / (self.tp + self.fn)

    @property
    def f1(self) -> float:
        return f1_of(self.precision, self.recall)

    @property
    def gt_instructions(self) -> int:
        return self.tp + self.fn


def f1_of(precision: float, recall: float) -> float:
    if precision <= 0 or recall <= 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


@dataclass
class _Matching:
    score: BinaryScore
    false_positives: list[Claim] = field(default_factory=list)


def _agrees(claim: Claim, record: InstructionRecord, isa: Isa) -> bool:
    if claim.size is not None and claim.size != record.size:
        return False
    if claim.data is not None and not same_instruction(claim.data, record.bytes, isa):
        return False
    return True


def _containing(spans: Sequence, starts: list[int], address: int):
    i = bisect.bisect_right(starts, address) - 1
    if i >= 0 and spans[i].abs_offset <= address < spans[i].end:
        return spans[i]
    return None


def _in_ranges(ranges: list[tuple[int, int]], starts: list[int], address: int) -> bool:
    i = bisect.bisect_right(starts, address) - 1
    return i >= 0 and ranges[i][0] <= address < ranges[i][1]


def _size_region_claims(claims: list[Claim], regions: list[NopRegion], img: BinaryImage) -> list[Claim]:
    """Give offset-only claims inside nop regions a size and the image's bytes."""
    starts = [r.abs_offset for r in regions]
    sized = list(claims)
    for i, claim in enumerate(sized):
        if claim.size is not None or claim.data is not None:
            continue
        region = _containing(regions, starts, claim.offset)
        if region is None:
            continue
        following = sized[i + 1].offset if i + 1 < len(sized) else region.end
        size = min(following, region.end) - claim.offset
        try:
            sized[i] = replace(claim, size=size, data=read_bytes(img, claim.offset, size))
        except OutOfRange:
            continue
    return sized


def _tiles(region: NopRegion, inside: list[Claim], isa: Isa, img: Optional[BinaryImage]) -> bool:
    at = region.abs_offset
    for claim in inside:
        if claim.offset != at or claim.size is None:
            return False
        data = claim.data
        if data is None and img is not None:
            try:
                data = read_bytes(img, claim.offset, claim.size)
            except OutOfRange:
                return False
        if data is None or len(data) != claim.size or not is_known_nop(data, isa):
            return False
        at += claim.size
    return bool(inside) and at == region.end


def _match(gt: GroundTruthDoc, preds: PredictionSet, img: Optional[BinaryImage], regions: str) -> _Matching:
    if preds.binary_hash != gt.binary_hash:
        raise HashMismatch(
            f"predictions from {preds.tool or '<tool>'} are for {preds.binary_hash or '<unknown>'}, "
            f"ground truth is for {gt.binary_hash}"
        )
    if regions not in REGION_MODES:
        raise ValueError(f"regions must be one of {REGION_MODES}, got {regions!r}")

    region_list = gt.regions()
    region_starts = [r.abs_offset for r in region_list]
    claims = list(preds.claims)
    if img is not None and region_list:
        claims = _size_region_claims(claims, region_list, img)

    required = {i.abs_offset: i for i in gt.instructions(optional=False)}
    optional = {i.abs_offset for i in gt.instructions(optional=True)}
    scope = merge_ranges(gt.function_ranges())
    scope_starts = [start for start, _ in scope]

    matched: set[int] = set()
    false_positives: list[Claim] = []
    in_region: dict[NopRegion, list[Claim]] = defaultdict(list)
    excluded_optional = excluded_out_of_scope = 0

    for claim in claims:
        record = required.get(claim.offset)
        if record is not None:
            if _agrees(claim, record, gt.isa):
                matched.add(claim.offset)
            else:
                false_positives.append(claim)
            continue
        if claim.offset in optional:
            excluded_optional += 1
            continue
        region = _containing(region_list, region_starts, claim.offset)
        if region is not None:
            in_region[region].append(claim)
        elif _in_ranges(scope, scope_starts, claim.offset):
            false_positives.append(claim)
        else:
            excluded_out_of_scope += 1

    region_matches = region_misses = excluded_regions = 0
    for region in region_list:
        inside = in_region.get(region, [])
        if regions == "ignore":
            excluded_regions += len(inside)
        elif _tiles(region, inside, gt.isa, img):
            region_matches += 1
        else:
            region_misses += 1
            false_positives.extend(inside)

    records = gt.instructions()
    record_starts = [r.abs_offset for r in records]
    missync = sum(
        1 for c in false_positives
        if (r := _containing(records, record_starts, c.offset)) is not None and r.abs_offset != c.offset
    )

    score = BinaryScore(
        tp=len(matched) + region_matches,
        fp=len(false_positives),
        fn=len(required) - len(matched) + region_misses,
        excluded_optional=excluded_optional,
        region_matches=region_matches,
        region_misses=region_misses,
        excluded_regions=excluded_regions,
        excluded_out_of_scope=excluded_out_of_scope,
        missync=missync,
    )
    false_positives.sort(key=lambda c: c.offset)
    return _Matching(score, false_positives)


def score(
    gt: GroundTruthDoc,
    preds: PredictionSet,
    img: Optional[BinaryImage] = None,
    regions: str = "count",
) -> BinaryScore:
    """
    Count true positives, false positives and false negatives.

    Args:
        gt: Ground truth
        preds: Normalized predictions for the same binary
        img: When given, offset-only claims inside nop regions are sized
            from the image so they can tile the region
        regions: "count" scores each nop region as one unit, "ignore"
            drops regions and the claims inside them

    Returns:
        BinaryScore: Counts and derived ratios

    Raises:
        HashMismatch: Predictions are for another binary
    """
    result = _match(gt, preds, img, regions).score
    if result.precision_undefined:
        logger.warning(f"{preds.tool or '<tool>'} made no scorable claims; precision reported as 0")
    if result.missync:
        logger.debug(f"{preds.tool or '<tool>'}: {result.missync} claim(s) inside ground-truth instructions")
    return result


def count_nop_false_positives(
    gt: GroundTruthDoc,
    preds: PredictionSet,
    img: BinaryImage,
    regions: str = "count",
) -> int:
    """Number of false-positive claims whose bytes in the binary are a nop."""
    count = 0
    for claim in _match(gt, preds, img, regions).false_positives:
        try:
            if claim.size is not None:
                data = read_bytes(img, claim.offset, claim.size)
            else:
                window = code_window(img, claim.offset)
                insn = decode_instruction(window, gt.isa)
                data = window[:insn.size] if insn is not None else b""
        except OutOfRange:
            continue
        if data and is_known_nop(data, gt.isa):
            count += 1
    return count


@dataclass(frozen=True)
class GroupKey:
    isa: Optional[str] = None
    os: Optional[str] = None
    compiler: Optional[str] = None
    optflag: Optional[str] = None
    project: Optional[str] = None

    @classmethod
    def select(cls, metadata: Mapping[str, str], by: Sequence[str]) -> "GroupKey":
        unknown = set(by) - set(GROUP_FIELDS)
        if unknown:
            raise ValueError(f"cannot group by {', '.join(sorted(unknown))}")
        return cls(**{name: str(metadata.get(name, "unknown")) for name in by})

    def as_dict(self) -> dict[str, str]:
        return {f.name: getattr(self, f.name) for f in fields(self) if getattr(self, f.name) is not None}

    @property
    def sort_key(self) -> tuple[str, ...]:
        return tuple(getattr(self, name) or "" for name in GROUP_FIELDS)

    def __str__(self) -> str:
        return "/".join(self.as_dict().values()) or "all"


@dataclass(frozen=True)
class GroupSummary:
    key: GroupKey
    n: int
    w_recall: float
    w_precision: float
    w_f1: float
    min_nonzero_f1: float
    max_f1: float
    gt_insn_weighted_mean_f1: float


def group_weights(scores: Sequence[BinaryScore]) -> tuple[list[float], list[float]]:
    """
    Per-binary recall and precision weights inside one group.

    A binary's recall weight is its share of the group's ground-truth
    instructions (TP + FN); its precision weight is its share of the group's
    claims (TP + FP).

    Returns:
        tuple: (recall weights, precision weights), each summing to 1

    Raises:
        ZeroDenominator: The group has no ground-truth instructions
    """
    if not scores:
        raise ValueError("cannot weight an empty group")
    gt_total = sum(s.tp + s.fn for s in scores)
    if gt_total == 0:
        raise ZeroDenominator("group has no ground-truth instructions")
    w_recall = [(s.tp + s.fn) / gt_total for s in scores]

    claim_total = sum(s.tp + s.fp for s in scores)
    if claim_total == 0:
        logger.warning("Group has no claims at all; using uniform precision weights")
        w_precision = [1 / len(scores)] * len(scores)
    else:
        w_precision = [(s.tp + s.fp) / claim_total for s in scores]
    return w_recall, w_precision


def summarize_group(
    scores: Sequence[BinaryScore],
    weights: tuple[Sequence[float], Sequence[float]],
    key: GroupKey = GroupKey(),
) -> GroupSummary:
    """
    Weighted precision, recall and F1 of one tool over one group.

    Args:
        scores: Per-binary scores
        weights: (recall weights, precision weights) from group_weights
        key: Group this summary describes

    Returns:
        GroupSummary: Weighted metrics plus the F1 spread of the group
    """
    w_recall_i, w_precision_i = weights
    w_recall = sum(w * s.recall for w, s in zip(w_recall_i, scores))
    w_precision = sum(w * s.precision for w, s in zip(w_precision_i, scores))

    gt_total = sum(s.gt_instructions for s in scores)
    if gt_total == 0:
        raise ZeroDenominator("group has no ground-truth instructions")
    f1s = [s.f1 for s in scores]
    nonzero = [f for f in f1s if f > 0]

    return GroupSummary(
        key=key,
        n=len(scores),
        w_recall=w_recall,
        w_precision=w_precision,
        w_f1=f1_of(w_precision, w_recall),
        min_nonzero_f1=min(nonzero) if nonzero else 0.0,
        max_f1=max(f1s),
        gt_insn_weighted_mean_f1=sum(s.gt_instructions / gt_total * s.f1 for s in scores),
    )


@dataclass(frozen=True)
class CrossGroupReport:
    tools: tuple[str, ...]
    groups: tuple[GroupKey, ...]
    hmean: dict[str, dict[str, float]]
    wins: dict[str, dict[str, int]]
    metrics: tuple[str, ...] = METRICS

    def rows(self) -> list[dict[str, object]]:
        """One row per metric: wins and harmonic mean side by side for every tool."""
        rows = []
        for metric in self.metrics:
            row: dict[str, object] = {"metric": METRIC_LABELS.get(metric, metric)}
            for tool in self.tools:
                row[f"{tool}_wins"] = self.wins[tool][metric]
                row[f"{tool}_hmean"] = f"{self.hmean[tool][metric]:.5f}"
            rows.append(row)
        return rows

    def format_row(self, metric: str) -> str:
        cells = [f"{self.wins[t][metric]} {self.hmean[t][metric]:.5f}" for t in self.tools]
        return " | ".join([METRIC_LABELS.get(metric, metric)] + cells)


def cross_group_report(
    summaries: Mapping[str, Sequence[GroupSummary]],
    metrics: Sequence[str] = METRICS,
) -> CrossGroupReport:
    """
    Harmonic means across groups and per-group wins for each tool.

    Every tool with the highest value of a metric in a group gets a win, so
    ties award all tied tools.

    Args:
        summaries: Tool name -> its group summaries
        metrics: GroupSummary attribute names to compare

    Returns:
        CrossGroupReport: Harmonic means and win counts

    Raises:
        MismatchedGroupSets: Tools were summarized over different groups
    """
    if not summaries:
        raise ValueError("no summaries to compare")
    tools = tuple(sorted(summaries))
    by_tool = {tool: {s.key: s for s in summaries[tool]} for tool in tools}
    groups = set(by_tool[tools[0]])
    for tool in tools[1:]:
        if set(by_tool[tool]) != groups:
            missing = groups.symmetric_difference(by_tool[tool])
            raise MismatchedGroupSets(
                f"{tool} and {tools[0]} differ in group(s): {', '.join(sorted(map(str, missing)))}"
            )
    ordered = tuple(sorted(groups, key=lambda k: k.sort_key))

    hmean = {
        tool: {m: harmonic_mean([getattr(by_tool[tool][g], m) for g in ordered]) for m in metrics}
        for tool in tools
    }
    wins = {tool: {m: 0 for m in metrics} for tool in tools}
    for group in ordered:
        for metric in metrics:
            values = {tool: getattr(by_tool[tool][group], metric) for tool in tools}
            best = max(values.values())
            for tool, value in values.items():
                if value == best:
                    wins[tool][metric] += 1
    return CrossGroupReport(tools, ordered, hmean, wins, tuple(metrics))


def linear_sweep_check(gt: GroundTruthDoc, img: BinaryImage, oracle: DecodeOracle) -> bool:
    """
    Whether a linear sweep over the ground-truth functions is exact.

    Raises:
        OracleInsufficient: The oracle cannot decode a swept address
    """
    claims: list[Claim] = []
    for start, end in merge_ranges(gt.function_ranges()):
        address = start
        while address < end:
            decoded = oracle.decode_at(img, address)
            if decoded is None:
                raise OracleInsufficient(f"cannot decode {code_window(img, address).hex() or '-'} at {address:#x}")
            claims.append(Claim(address, decoded.size, decoded.data))
            address += decoded.size

    merged, dangling = merge_split_claims(claims, gt.isa)
    preds = PredictionSet(gt.binary_hash, "linear-sweep", tuple(merged), tuple(dangling))
    result = _match(gt, preds, img, "count").score
    logger.debug(f"Linear sweep: tp={result.tp} fp={result.fp} fn={result.fn}")
    return result.fp == 0 and result.fn == 0 and result.tp > 0
