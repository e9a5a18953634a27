import math

import pytest
from hypothesis import given, settings, strategies as st

from core.binfmt import read_bytes
from core.discovery import TableDecodeOracle
from core.errors import HashMismatch, MismatchedGroupSets, OracleInsufficient, ParseError, ZeroDenominator
from core.evaluator import (
    BinaryScore,
    GroupKey,
    GroupSummary,
    PredictionSet,
    count_nop_false_positives,
    cross_group_report,
    f1_of,
    group_weights,
    linear_sweep_check,
    normalize_output,
    score,
    summarize_group,
)
from core.groundtruth import FunctionRecord, GroundTruthDoc, InstructionRecord, NopRegion, build_ground_truth, match_functions
from core.listing import parse_listing
from core.prefixcanon import Claim, same_instruction
from core.x86 import CFClass, Isa, is_known_nop
from tests.fakes import NOP_FILL, TEXT_BASE, make_image, nop_fill

# f: xorl; data-spelled nop (optional); ret; then four bytes of padding
CODE = "31c0" "0f1f00" "c3" "0f1f4000" "cc"


@pytest.fixture
def image():
    return make_image(CODE, [("f", 0, 6)])


@pytest.fixture
def gt(image):
    fn = FunctionRecord(
        "f", TEXT_BASE, 6,
        instructions=(
            InstructionRecord(TEXT_BASE, 2, bytes.fromhex("31c0")),
            InstructionRecord(TEXT_BASE + 2, 3, bytes.fromhex("0f1f00"), optional=True),
            InstructionRecord(TEXT_BASE + 5, 1, b"\xc3", cf_class=CFClass.RETURN),
        ),
        regions=(NopRegion(TEXT_BASE + 6, 4),),
    )
    return GroundTruthDoc(image.content_hash, Isa.X64, (fn,))


def _preds(gt, *claims):
    return PredictionSet(gt.binary_hash, "tool", tuple(sorted(claims, key=lambda c: c.offset)))


def _at(offset, hexbytes=None):
    if hexbytes is None:
        return Claim(TEXT_BASE + offset)
    data = bytes.fromhex(hexbytes)
    return Claim(TEXT_BASE + offset, len(data), data)


def test_perfect_predictions(gt, image):
    result = score(gt, _preds(gt, _at(0, "31c0"), _at(5, "c3"), _at(6, "0f1f4000")), image)

    assert (result.tp, result.fp, result.fn) == (3, 0, 0)
    assert result.region_matches == 1
    assert (result.precision, result.recall, result.f1) == (1.0, 1.0, 1.0)


def test_optional_and_out_of_scope_claims_are_excluded(gt, image):
    result = score(gt, _preds(gt, _at(0), _at(2), _at(5), _at(6), _at(10)), image)

    assert (result.tp, result.fp, result.fn) == (3, 0, 0)
    assert result.excluded_optional == 1
    assert result.excluded_out_of_scope == 1


def test_wrong_size_at_ground_truth_offset(gt, image):
    result = score(gt, _preds(gt, Claim(TEXT_BASE, 3), _at(5), _at(6)), image)
    assert (result.tp, result.fp, result.fn) == (2, 1, 1)


def test_claim_inside_an_instruction_is_a_missync(gt, image):
    result = score(gt, _preds(gt, _at(0), _at(1), _at(5), _at(6)), image)
    assert (result.tp, result.fp, result.missync) == (3, 1, 1)


def test_region_claims_that_do_not_tile(gt, image):
    result = score(gt, _preds(gt, _at(0), _at(5), _at(6, "0f1f"), _at(8, "4000")), image)

    assert result.region_misses == 1
    assert (result.tp, result.fp, result.fn) == (2, 2, 1)


def test_region_without_claims_is_missed(gt):
    result = score(gt, _preds(gt, _at(0, "31c0"), _at(5, "c3")))
    assert (result.tp, result.fn, result.region_misses) == (2, 1, 1)


def test_ignoring_regions(gt, image):
    result = score(gt, _preds(gt, _at(0), _at(5), _at(6, "0f1f"), _at(8, "4000")), image, regions="ignore")

    assert (result.tp, result.fp, result.fn) == (2, 0, 0)
    assert result.excluded_regions == 2
    with pytest.raises(ValueError):
        score(gt, _preds(gt), image, regions="sometimes")


def test_no_claims(gt):
    result = score(gt, _preds(gt))

    assert result.precision_undefined
    assert result.precision == 0.0
    assert (result.recall, result.f1) == (0.0, 0.0)


def test_hash_mismatch(gt):
    with pytest.raises(HashMismatch):
        score(gt, PredictionSet("00" * 32, "tool", (_at(0),)))


def test_prefix_order_does_not_matter():
    img = make_image("66f3abc3", [("f", 0, 4)])
    fn = FunctionRecord("f", TEXT_BASE, 4, (
        InstructionRecord(TEXT_BASE, 3, bytes.fromhex("66f3ab"), frozenset({0x66, 0xF3})),
        InstructionRecord(TEXT_BASE + 3, 1, b"\xc3", cf_class=CFClass.RETURN),
    ))
    gt = GroundTruthDoc(img.content_hash, Isa.X64, (fn,))
    raw = f"# binary: {img.content_hash}\n# tool: t\n{TEXT_BASE:x} 1 f3\n{TEXT_BASE + 1:x} 2 66ab\n{TEXT_BASE + 3:x} 1 c3\n"

    preds = normalize_output(raw)

    assert preds.tool == "t"
    assert preds.claims[0] == Claim(TEXT_BASE, 3, bytes.fromhex("f366ab"))
    assert (score(gt, preds).tp, score(gt, preds).fp) == (2, 0)


def test_generic_adapter():
    raw = "# a comment line\n401000\n401000 2\n401004 3 0f1f00  # padding\n\n401007 1 f3\n"
    preds = normalize_output(raw, binary_hash="ab" * 32, tool="mine")

    assert preds.claims == (Claim(0x401000), Claim(0x401004, 3, bytes.fromhex("0f1f00")), Claim(0x401007, 1, b"\xf3"))
    assert preds.dangling == (Claim(0x401007, 1, b"\xf3"),)
    assert normalize_output("").claims == ()


@pytest.mark.parametrize("raw,line_no", [
    ("401000 zz\n", 1),
    ("401000\n401001 2 90\n", 2),
    ("401000 1 90 extra\n", 1),
    ("401000 0\n", 1),
    ("\n\nnothex\n", 3),
])
def test_generic_adapter_errors(raw, line_no):
    with pytest.raises(ParseError) as excinfo:
        normalize_output(raw)
    assert excinfo.value.line_no == line_no


def test_unknown_adapter():
    with pytest.raises(ParseError):
        normalize_output("", adapter="ghidra")


def test_objdump_adapter():
    raw = (
        "\n"
        "demo:     file format elf64-x86-64\n"
        "\n"
        "Disassembly of section .text:\n"
        "\n"
        "0000000000401000 <main>:\n"
        "  401000:\t55                   \tpush   %rbp\n"
        "  401001:\t66 2e 0f 1f 84 00 00 \tcs nopw 0x0(%rax,%rax,1)\n"
        "  401008:\t00 00 00 \n"
        "  40100b:\tc3                   \tret\n"
    )
    preds = normalize_output(raw, adapter="objdump")

    assert preds.claims == (
        Claim(0x401000, 1, b"\x55"),
        Claim(0x401001, 10, bytes.fromhex("662e0f1f840000000000")),
        Claim(0x40100B, 1, b"\xc3"),
    )


def test_nop_false_positives():
    img = make_image("b890909090c3", [("f", 0, 6)])
    fn = FunctionRecord("f", TEXT_BASE, 6, (
        InstructionRecord(TEXT_BASE, 5, bytes.fromhex("b890909090")),
        InstructionRecord(TEXT_BASE + 5, 1, b"\xc3", cf_class=CFClass.RETURN),
    ))
    gt = GroundTruthDoc(img.content_hash, Isa.X64, (fn,))
    preds = _preds(gt, _at(0), _at(1), Claim(TEXT_BASE + 2, 1), Claim(TEXT_BASE + 3, 2), _at(5))

    assert score(gt, preds, img).fp == 3
    assert count_nop_false_positives(gt, preds, img) == 2


def test_group_weights():
    recall_w, precision_w = group_weights([BinaryScore(tp=90, fn=10, fp=10), BinaryScore(tp=200, fn=100, fp=0)])

    assert recall_w == [0.25, 0.75]
    assert precision_w == [100 / 300, 200 / 300]
    with pytest.raises(ZeroDenominator):
        group_weights([BinaryScore(), BinaryScore(fp=3)])


def test_worked_group_summary():
    scores = [BinaryScore(tp=8, fp=0, fn=2), BinaryScore(tp=6, fp=0, fn=4)]

    summary = summarize_group(scores, ([0.5, 0.5], [0.5, 0.5]))

    assert math.isclose(summary.w_recall, 0.7, abs_tol=1e-12)
    assert math.isclose(summary.w_precision, 1.0, abs_tol=1e-12)
    assert math.isclose(summary.w_f1, 2 * 0.7 / 1.7, abs_tol=1e-12)
    assert round(summary.w_f1, 4) == 0.8235
    assert summary.n == 2
    assert summary.max_f1 == pytest.approx(f1_of(1.0, 0.8))
    assert summary.min_nonzero_f1 == pytest.approx(f1_of(1.0, 0.6))


def test_f1_of_degenerate():
    assert f1_of(0.0, 1.0) == 0.0
    assert f1_of(1.0, 1.0) == 1.0


def _summary(key, f1, precision=1.0, recall=1.0):
    return GroupSummary(key, 1, recall, precision, f1, f1, f1, f1)


X64 = GroupKey(isa="x64")
X86 = GroupKey(isa="x86")


def test_cross_group_harmonic_mean_and_ties():
    report = cross_group_report({
        "a": [_summary(X64, 0.5), _summary(X86, 1.0)],
        "b": [_summary(X64, 0.5), _summary(X86, 0.9)],
    })

    assert report.groups == (X64, X86)
    assert report.hmean["a"]["w_f1"] == pytest.approx(2 / (1 / 0.5 + 1 / 1.0))
    assert round(report.hmean["a"]["w_f1"], 4) == 0.6667
    assert report.wins["a"]["w_f1"] == 2
    assert report.wins["b"]["w_f1"] == 1
    assert report.wins["a"]["w_precision"] == report.wins["b"]["w_precision"] == 2
    assert report.format_row("w_f1") == "F1 | 2 0.66667 | 1 0.64286"
    assert report.rows()[2] == {"metric": "F1", "a_wins": 2, "a_hmean": "0.66667", "b_wins": 1, "b_hmean": "0.64286"}


def test_cross_group_needs_the_same_groups():
    with pytest.raises(MismatchedGroupSets):
        cross_group_report({"a": [_summary(X64, 0.5)], "b": [_summary(X86, 0.5)]})


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.floats(0.01, 1.0), min_size=3, max_size=3), min_size=2, max_size=6))
def test_cross_group_matches_direct_recomputation(matrix):
    groups = [GroupKey(project=f"p{i}") for i in range(3)]
    summaries = {f"t{t}": [_summary(g, row[i]) for i, g in enumerate(groups)] for t, row in enumerate(matrix)}

    report = cross_group_report(summaries, metrics=("w_f1",))

    for t, row in enumerate(matrix):
        assert report.hmean[f"t{t}"]["w_f1"] == pytest.approx(len(row) / sum(1 / v for v in row))
        wins = sum(1 for i in range(3) if row[i] == max(r[i] for r in matrix))
        assert report.wins[f"t{t}"]["w_f1"] == wins


def test_group_key_select():
    key = GroupKey.select({"isa": "x64", "compiler": "gcc"}, ["compiler", "project"])
    assert key.as_dict() == {"compiler": "gcc", "project": "unknown"}
    assert str(key) == "gcc/unknown"
    assert str(GroupKey()) == "all"
    with pytest.raises(ValueError):
        GroupKey.select({}, ["color"])


def test_linear_sweep(simple_image, simple_listing):
    doc = parse_listing(simple_listing)
    gt = build_ground_truth(simple_image, [doc], match_functions(simple_image.symbols, doc.functions, simple_image))
    assert linear_sweep_check(gt, simple_image, TableDecodeOracle(Isa.X64))

    img = make_image("eb01ccc3", [("f", 0, 4)])
    fn = FunctionRecord("f", TEXT_BASE, 4, (
        InstructionRecord(TEXT_BASE, 2, bytes.fromhex("eb01"), cf_class=CFClass.UNCOND_DIRECT_JUMP),
        InstructionRecord(TEXT_BASE + 3, 1, b"\xc3", cf_class=CFClass.RETURN),
    ))
    assert not linear_sweep_check(GroundTruthDoc(img.content_hash, Isa.X64, (fn,)), img, TableDecodeOracle(Isa.X64))

    bad = make_image("0f0fc3", [("f", 0, 3)])
    fn = FunctionRecord("f", TEXT_BASE, 3, (InstructionRecord(TEXT_BASE + 2, 1, b"\xc3"),))
    with pytest.raises(OracleInsufficient):
        linear_sweep_check(GroundTruthDoc(bad.content_hash, Isa.X64, (fn,)), bad, TableDecodeOracle(Isa.X64))


# brute-force reference scorer

def _brute_score(gt, claims, img, regions):
    records = gt.instructions()
    required = [r for r in records if not r.optional]
    optional = {r.abs_offset for r in records if r.optional}
    nop_regions = gt.regions()
    scope = gt.function_ranges()

    def region_of(offset):
        return next((r for r in nop_regions if r.abs_offset <= offset < r.end), None)

    sized = []
    for i, claim in enumerate(claims):
        region = region_of(claim.offset)
        if claim.size is None and claim.data is None and region is not None:
            following = claims[i + 1].offset if i + 1 < len(claims) else region.end
            size = min(following, region.end) - claim.offset
            claim = Claim(claim.offset, size, read_bytes(img, claim.offset, size))
        sized.append(claim)

    matched, false_positives, inside = set(), [], {r: [] for r in nop_regions}
    excluded_optional = out_of_scope = 0
    for claim in sized:
        record = next((r for r in required if r.abs_offset == claim.offset), None)
        if record is not None:
            agrees = (claim.size is None or claim.size == record.size) and (
                claim.data is None or same_instruction(claim.data, record.bytes, gt.isa))
            if agrees:
                matched.add(claim.offset)
            else:
                false_positives.append(claim)
        elif claim.offset in optional:
            excluded_optional += 1
        elif region_of(claim.offset) is not None:
            inside[region_of(claim.offset)].append(claim)
        elif any(start <= claim.offset < end for start, end in scope):
            false_positives.append(claim)
        else:
            out_of_scope += 1

    hits = misses = 0
    for region, claimed in inside.items():
        if regions == "ignore":
            continue
        at = region.abs_offset
        for claim in claimed:
            if claim.offset != at or claim.size is None:
                break
            data = claim.data if claim.data is not None else read_bytes(img, claim.offset, claim.size)
            if not is_known_nop(data, gt.isa):
                break
            at += claim.size
        else:
            if claimed and at == region.end:
                hits += 1
                continue
        misses += 1
        false_positives += claimed

    missync = sum(1 for c in false_positives if any(r.abs_offset < c.offset < r.end for r in records))
    return {
        "tp": len(matched) + hits,
        "fp": len(false_positives),
        "fn": len(required) - len(matched) + misses,
        "excluded_optional": excluded_optional,
        "excluded_out_of_scope": out_of_scope,
        "region_matches": hits,
        "region_misses": misses,
        "missync": missync,
    }


LEAD = 2


@st.composite
def scenarios(draw):
    items = draw(st.lists(st.tuples(st.sampled_from(["insn", "optional", "region"]), st.integers(1, 6)),
                          min_size=1, max_size=8))
    code = b"\xcc" * LEAD
    records, regions = [], []
    for kind, size in items:
        at = TEXT_BASE + len(code)
        if kind == "region":
            regions.append(NopRegion(at, size))
            code += nop_fill(size)
            continue
        data = bytes([0x01 + len(records) % 8]) + bytes(size - 1)
        records.append(InstructionRecord(at, size, data, optional=kind == "optional"))
        code += data
    code += b"\xcc" * 2

    img = make_image(code, [("f", LEAD, len(code) - LEAD - 2)])
    fn = FunctionRecord("f", TEXT_BASE + LEAD, len(code) - LEAD - 2, tuple(records), tuple(regions))
    gt = GroundTruthDoc(img.content_hash, Isa.X64, (fn,))

    offsets = draw(st.lists(st.integers(TEXT_BASE, TEXT_BASE + len(code) - 1), unique=True, max_size=12))
    claims = []
    for offset in sorted(offsets):
        room = TEXT_BASE + len(code) - offset
        variant = draw(st.sampled_from(["offset", "sized", "bytes", "nop", "garbage"]))
        size = min(draw(st.integers(1, 6)), room)
        if variant == "offset":
            claims.append(Claim(offset))
        elif variant == "sized":
            claims.append(Claim(offset, size))
        elif variant == "bytes":
            claims.append(Claim(offset, size, read_bytes(img, offset, size)))
        elif variant == "nop":
            data = bytes.fromhex(NOP_FILL[size])
            claims.append(Claim(offset, size, data))
        else:
            claims.append(Claim(offset, size, draw(st.binary(min_size=size, max_size=size))))
    return gt, img, claims


@settings(max_examples=1000, deadline=None)
@given(scenario=scenarios(), regions=st.sampled_from(["count", "ignore"]))
def test_score_agrees_with_brute_force(scenario, regions):
    gt, img, claims = scenario
    expected = _brute_score(gt, claims, img, regions)

    result = score(gt, PredictionSet(gt.binary_hash, "t", tuple(claims)), img, regions)

    assert {name: getattr(result, name) for name in expected} == expected
