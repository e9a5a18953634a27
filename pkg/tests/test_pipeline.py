import json

import pytest

from core.errors import ConfigError, FormatVersionMismatch, ParseError
from core.groundtruth import Provenance, deserialize, serialize
from core.listing import REENCODED_MARKER
from core.pipeline import build_many, build_project, bundle_dir_for, check_files, load_bundle, write_outputs
from core.x86 import Isa
from tests.fakes import TEXT_BASE, FakeAssembler
from tests.samples import DEMO_ENCODINGS, DEMO_GT
from utils.helpers import sha256_file
from utils.config_manager import config_manager


@pytest.fixture
def built(demo_project):
    project = config_manager.load(demo_project)
    return project, build_project(project, FakeAssembler(DEMO_ENCODINGS))


def test_build_project(built):
    _, result = built
    gt = result.gt

    assert result.report.ok
    assert [(fn.name, fn.abs_offset - TEXT_BASE) for fn in gt.functions] == [("main", 0), ("helper", 0x10), ("f", 0x20)]
    assert [i.bytes.hex() for i in gt.functions[2].instructions] == ["83c301", "c1e301", "a10010000000000000", "c3"]
    assert gt.provenance == Provenance("gcc", "-O2", ("project=demo", "os=linux"))
    assert gt.isa is Isa.X64
    assert not result.findings


def test_only_the_patched_source_changes(built):
    _, result = built
    simple, mixed = result.units

    assert REENCODED_MARKER not in simple.asm_text
    assert mixed.asm_text.count(REENCODED_MARKER) == 3
    assert mixed.listing.count("0x83,0xc3,0x01") == 1


def test_isa_must_match_the_binary(demo_project):
    with open(demo_project, "a") as f:
        f.write("isa = x86\n")
    with pytest.raises(ConfigError):
        build_project(config_manager.load(demo_project), FakeAssembler(DEMO_ENCODINGS))


def test_outputs_and_recheck(built, tmp_path):
    project, result = built
    gt_path = tmp_path / "out" / "demo.gtf"

    bundle = write_outputs(result, project, gt_path)

    assert bundle == bundle_dir_for(gt_path)
    assert deserialize(gt_path.read_text()) == result.gt
    names = sorted(p.name for p in (bundle / "asm").iterdir())
    assert names[0].startswith("0000-") and names[0].endswith("simple.s")
    assert names[1].startswith("0001-") and names[1].endswith("mixed.s")
    assert check_files(gt_path).ok

    docs, pairs, binary_hash = load_bundle(bundle)
    assert binary_hash == result.gt.binary_hash
    assert [symbol.name for symbol, _ in pairs] == [symbol.name for symbol, _ in result.pairs]
    assert len(docs) == 2


def test_recheck_catches_an_edited_ground_truth(built, tmp_path):
    project, result = built
    gt_path = tmp_path / "demo.gtf"
    write_outputs(result, project, gt_path)

    text = gt_path.read_text().replace(f"I {TEXT_BASE + 4:x} 2 31c0", f"I {TEXT_BASE + 4:x} 2 33c0")
    gt_path.write_text(text)

    report = check_files(gt_path)
    assert report.byte_mismatches == [(TEXT_BASE + 4, bytes.fromhex("31c0"), bytes.fromhex("33c0"))]


def test_bundle_errors(built, tmp_path):
    project, result = built
    gt_path = tmp_path / "demo.gtf"
    bundle = write_outputs(result, project, gt_path)

    sidecar = json.loads((bundle / "bundle.json").read_text())
    sidecar["pairs"][0]["index"] = 99
    (bundle / "bundle.json").write_text(json.dumps(sidecar))
    with pytest.raises(ParseError):
        load_bundle(bundle)

    sidecar["format"] = 2
    (bundle / "bundle.json").write_text(json.dumps(sidecar))
    with pytest.raises(FormatVersionMismatch):
        load_bundle(bundle)

    with pytest.raises(ParseError):
        load_bundle(tmp_path / "nowhere")


def test_build_many_writes_next_to_out(demo_project, tmp_path, monkeypatch):
    monkeypatch.setattr("core.pipeline.GnuAssemblerDriver", lambda cmd, isa: FakeAssembler(DEMO_ENCODINGS))
    project = config_manager.load(demo_project)

    [(path, result)] = build_many([project], tmp_path / "single.gtf")

    assert path == tmp_path / "single.gtf"
    assert path.exists() and bundle_dir_for(path).is_dir()
    assert result.report.ok


def test_demo_ground_truth_matches_golden(built, tmp_path):
    project, result = built
    expected = DEMO_GT.format(hash=sha256_file(project.binary))

    assert serialize(result.gt) == expected
    assert serialize(deserialize(expected)) == expected

    gt_path = tmp_path / "demo.gtf"
    write_outputs(result, project, gt_path)
    assert gt_path.read_text() == expected
