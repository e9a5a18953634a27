from dataclasses import replace

import pytest

from core.checker import check_correspondence
from core.groundtruth import InstructionRecord, build_ground_truth, match_functions
from core.listing import parse_listing
from tests.fakes import TEXT_BASE


@pytest.fixture
def built(simple_image, simple_listing):
    doc = parse_listing(simple_listing, "simple.s")
    pairs = match_functions(simple_image.symbols, doc.functions, simple_image)
    return [doc], build_ground_truth(simple_image, [doc], pairs), pairs


def _edit(gt, index, **changes):
    functions = list(gt.functions)
    functions[index] = replace(functions[index], **changes)
    return replace(gt, functions=tuple(functions))


def test_built_ground_truth_corresponds(built):
    docs, gt, pairs = built
    report = check_correspondence(docs, gt, pairs)

    assert report.ok
    assert report.findings == 0
    assert report.to_text() == ""


def test_optional_records_are_not_required(built):
    docs, gt, pairs = built
    main = gt.functions[0]
    extra = InstructionRecord(TEXT_BASE + 8, 3, bytes.fromhex("0f1f00"), optional=True)

    assert check_correspondence(docs, _edit(gt, 0, instructions=main.instructions + (extra,)), pairs).ok


def test_instruction_missing_from_ground_truth(built):
    docs, gt, pairs = built
    helper = gt.functions[1]
    dropped = _edit(gt, 1, instructions=helper.instructions[:1] + helper.instructions[2:])

    report = check_correspondence(docs, dropped, pairs)

    assert report.missing_in_gt == [("helper", 0x12)]
    assert report.missing_in_lst == []
    assert report.to_text() == "MISSING-IN-GT helper 12\n"


def test_region_missing_from_ground_truth(built):
    docs, gt, pairs = built
    report = check_correspondence(docs, _edit(gt, 0, regions=()), pairs)
    assert report.missing_in_gt == [("main", 8)]


def test_ground_truth_record_without_listing(built):
    docs, gt, pairs = built
    main = gt.functions[0]
    extra = InstructionRecord(TEXT_BASE + 0x20, 1, b"\xc3")

    report = check_correspondence(docs, _edit(gt, 0, instructions=main.instructions + (extra,)), pairs)

    assert report.missing_in_lst == [("main", TEXT_BASE + 0x20)]
    assert not report.ok


def test_byte_mismatch(built):
    docs, gt, pairs = built
    main = gt.functions[0]
    changed = list(main.instructions)
    changed[2] = replace(changed[2], bytes=bytes.fromhex("33c0"))

    report = check_correspondence(docs, _edit(gt, 0, instructions=tuple(changed)), pairs)

    assert report.byte_mismatches == [(TEXT_BASE + 4, bytes.fromhex("31c0"), bytes.fromhex("33c0"))]
    assert report.to_text() == f"BYTES {TEXT_BASE + 4:x} 31c0 33c0\n"


def test_prefix_set_is_compared(built):
    docs, gt, pairs = built
    main = gt.functions[0]
    changed = list(main.instructions)
    changed[1] = replace(changed[1], prefixes=frozenset({0x66}))

    report = check_correspondence(docs, _edit(gt, 0, instructions=tuple(changed)), pairs)

    assert [offset for offset, _, _ in report.byte_mismatches] == [TEXT_BASE + 1]


def test_unpaired_ground_truth_function(built):
    docs, gt, pairs = built
    report = check_correspondence(docs, gt, pairs[:1])

    assert report.missing_in_lst == [("helper", TEXT_BASE + 0x10), ("helper", TEXT_BASE + 0x12),
                                     ("helper", TEXT_BASE + 0x15)]
