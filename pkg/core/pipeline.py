"""
Ground-truth build pipeline for one binary.

assemble listings -> pair symbols with listed bodies (reconciling encodings)
-> re-assemble patched sources -> build -> discover optional instructions
-> check the listing/ground-truth correspondence.

A build also leaves a bundle directory next to the ground-truth file with the
final assembly, the final listings and the symbol pairing, so the
correspondence check can be repeated without the toolchain.
"""

import json
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from core.binfmt import BinaryImage, FuncSymbol, list_functions, load_binary, require_code_symbol
from core.capture import SnapshotLedger, extract_chronological
from core.checker import CheckReport, check_correspondence
from core.discovery import ORACLES, CapstoneDecodeOracle, DiscoveryFindings, discover_optional, statement_targets
from core.errors import ConfigError, FormatVersionMismatch, ParseError, UnmatchedSymbol, UnreadableFile
from core.groundtruth import (
    ByteMatchReconciler,
    GroundTruthDoc,
    Pairing,
    Provenance,
    build_ground_truth,
    deserialize,
    match_functions,
    refresh_pairs,
    serialize,
)
from core.listing import ListingDoc, parse_listing, with_relocations
from core.reconcile import AssemblerDriver, AssemblerReconciler, GnuAssemblerDriver, decoder_rule, default_rules
from utils import logger
from utils.config_manager import ProjectConfig
from utils.helpers import format_duration, run_parallel

BUNDLE_FORMAT = 1


@dataclass
class SourceUnit:
    """One assembly file and its current listing."""

    source_id: str
    asm_text: str
    listing: str = ""
    relocations: dict[str, list[tuple[int, int]]] = field(default_factory=dict)


@dataclass
class BuildResult:
    gt: GroundTruthDoc
    units: list[SourceUnit]
    docs: list[ListingDoc]
    pairs: Pairing
    function_names: set[str]
    findings: DiscoveryFindings
    report: CheckReport


def load_sources(project: ProjectConfig) -> list[SourceUnit]:
    """
    Assembly sources of a project, in build order.

    Ledger sources keep every captured version; their id is
    "<seq>/<rel_path>" so repeated compilations of one file stay distinct.
    """
    if project.from_ledger:
        ledger = SnapshotLedger(project.ledger)
        versions = extract_chronological(ledger)
        return [
            SourceUnit(f"{entry.seq:06d}/{rel_path}", data.decode("utf-8", errors="replace"))
            for entry, (rel_path, data) in zip(ledger.entries(), versions)
        ]
    units = []
    for path in project.listing_sources:
        try:
            units.append(SourceUnit(str(path), path.read_text(encoding="utf-8", errors="replace")))
        except OSError as e:
            raise UnreadableFile(f"cannot read assembly source {path}: {e}") from e
    return units


def _assemble(unit: SourceUnit, driver: AssemblerDriver) -> SourceUnit:
    output = driver.assemble_with_listing(unit.asm_text)
    return SourceUnit(unit.source_id, unit.asm_text, output.listing, output.relocations)


def _parse(unit: SourceUnit, function_names: set[str]) -> ListingDoc:
    return with_relocations(parse_listing(unit.listing, unit.source_id, function_names), unit.relocations)


def _code_symbols(img: BinaryImage, listed_names: set[str]) -> list[FuncSymbol]:
    symbols = []
    skipped = 0
    for symbol in list_functions(img):
        if symbol.name not in listed_names:
            skipped += 1
            continue
        require_code_symbol(img, symbol)
        symbols.append(symbol)
    if skipped:
        logger.info(f"{skipped} function symbol(s) have no listed body (startup or library code) and are skipped")
    return symbols


class _FirstOf:
    """Try byte matching before paying for re-assembly."""

    def __init__(self, *reconcilers):
        self.reconcilers = reconcilers

    def __call__(self, func, symbol):
        for reconciler in self.reconcilers:
            final = reconciler(func, symbol)
            if final is not None:
                return final
        return None


def build_project(
    project: ProjectConfig,
    driver: Optional[AssemblerDriver] = None,
    jobs: int = 1,
) -> BuildResult:
    """
    Build, discover and check the ground truth of one binary.

    Args:
        project: Project settings
        driver: Assembler driver; defaults to the GNU assembler template
        jobs: Worker count for assembling sources

    Returns:
        BuildResult: Ground truth, final listings and the check report

    Raises:
        ConfigError: The configured ISA disagrees with the binary
        UnmatchedSymbol: A listed function does not reconcile with the binary
    """
    started = time.perf_counter()
    img = load_binary(project.binary)
    if project.isa is not None and project.isa is not img.isa:
        raise ConfigError(f"{project.path}: isa {project.isa.value} but {project.binary} is {img.isa.value}")
    driver = driver or GnuAssemblerDriver(project.assembler_cmd, img.isa)

    units = run_parallel(lambda u: _assemble(u, driver), load_sources(project), jobs)
    symbol_names = {s.name for s in img.symbols}
    docs = [_parse(u, symbol_names) for u in units]
    logger.info(f"Parsed {len(docs)} listing(s) with {sum(len(d.functions) for d in docs)} function(s)")

    listed = [fn for doc in docs for fn in doc.functions]
    symbols = _code_symbols(img, {fn.name for fn in listed})

    rules = default_rules(img.isa)
    if project.length_oracle == "capstone":
        rules.append(decoder_rule(CapstoneDecodeOracle(img.isa)))
    assembler = AssemblerReconciler(
        img, {u.source_id: u.asm_text for u in units}, driver, rules, function_names=symbol_names,
    )
    try:
        pairs = match_functions(symbols, listed, img, _FirstOf(ByteMatchReconciler(img), assembler))
    except UnmatchedSymbol:
        for name, failures in sorted(assembler.failures.items()):
            for failure in failures:
                logger.error(f"✗ {name}: {failure}")
        raise

    changed = [u for u in units if assembler.sources[u.source_id] != u.asm_text]
    if changed:
        logger.info(f"Re-assembling {len(changed)} patched source(s)")
        patched = run_parallel(
            lambda u: _assemble(SourceUnit(u.source_id, assembler.sources[u.source_id]), driver), changed, jobs,
        )
        by_id = {u.source_id: u for u in patched}
        units = [by_id.get(u.source_id, u) for u in units]
        docs = [_parse(u, symbol_names) for u in units]

    provenance = Provenance(project.compiler, project.optflag, project.notes)
    gt = build_ground_truth(img, docs, pairs, provenance)

    findings = DiscoveryFindings()
    oracle = ORACLES[project.discovery_oracle](img.isa)
    gt = discover_optional(gt, img, oracle, findings, statement_targets(refresh_pairs(pairs, docs)))
    report = check_correspondence(docs, gt, pairs)

    logger.info(f"Built ground truth for {project.binary.name} in {format_duration(time.perf_counter() - started)}")
    return BuildResult(gt, units, docs, refresh_pairs(pairs, docs), symbol_names, findings, report)


def bundle_dir_for(gt_path: Path) -> Path:
    return gt_path.with_name(gt_path.name + ".d")


def _file_stem(index: int, source_id: str) -> str:
    return f"{index:04d}-" + re.sub(r"[^A-Za-z0-9._-]+", "_", source_id).strip("_")[-80:]


def write_outputs(result: BuildResult, project: ProjectConfig, gt_path: Path) -> Path:
    """
    Write the ground-truth file and its bundle directory.

    Returns:
        Path: The bundle directory
    """
    gt_path.parent.mkdir(parents=True, exist_ok=True)
    gt_path.write_text(serialize(result.gt), encoding="utf-8")

    bundle = bundle_dir_for(gt_path)
    (bundle / "asm").mkdir(parents=True, exist_ok=True)
    (bundle / "lst").mkdir(parents=True, exist_ok=True)

    sources = []
    for i, unit in enumerate(result.units):
        stem = _file_stem(i, unit.source_id)
        (bundle / "asm" / f"{stem}.s").write_text(unit.asm_text, encoding="utf-8")
        (bundle / "lst" / f"{stem}.lst").write_text(unit.listing, encoding="utf-8")
        sources.append({
            "source_id": unit.source_id,
            "asm": f"asm/{stem}.s",
            "listing": f"lst/{stem}.lst",
            "relocations": {sec: [list(r) for r in relocs] for sec, relocs in sorted(unit.relocations.items())},
        })

    sidecar = {
        "format": BUNDLE_FORMAT,
        "binary": str(project.binary),
        "binary_hash": result.gt.binary_hash,
        "function_names": sorted(result.function_names),
        "sources": sources,
        "pairs": [
            {
                "name": symbol.name,
                "abs_offset": symbol.abs_offset,
                "size": symbol.size,
                "section": symbol.section_name,
                "source_id": func.source_id,
                "index": func.index,
            }
            for symbol, func in result.pairs
        ],
    }
    with open(bundle / "bundle.json", "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
        f.write("\n")
    if result.findings:
        (bundle / "findings.txt").write_text(result.findings.to_text(), encoding="utf-8")
    logger.info(f"✓ Wrote {gt_path} and bundle {bundle}")
    return bundle


def load_bundle(bundle: Path) -> tuple[list[ListingDoc], Pairing, str]:
    """
    Re-read the final listings and pairing of a build.

    Returns:
        tuple: (listings, pairs, binary hash)

    Raises:
        ParseError: The sidecar is missing fields or names unknown functions
        FormatVersionMismatch: The sidecar was written by another format
    """
    try:
        with open(bundle / "bundle.json", encoding="utf-8") as f:
            sidecar = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ParseError(f"cannot read {bundle / 'bundle.json'}: {e}") from e
    if sidecar.get("format") != BUNDLE_FORMAT:
        raise FormatVersionMismatch(f"bundle format {sidecar.get('format')!r}, expected {BUNDLE_FORMAT}")

    try:
        names = set(sidecar["function_names"])
        docs = []
        for source in sidecar["sources"]:
            listing = (bundle / source["listing"]).read_text(encoding="utf-8")
            relocations = {sec: [tuple(r) for r in rs] for sec, rs in source["relocations"].items()}
            docs.append(with_relocations(parse_listing(listing, source["source_id"], names), relocations))

        by_key = {fn.key: fn for doc in docs for fn in doc.functions}
        pairs: Pairing = []
        for entry in sidecar["pairs"]:
            func = by_key.get((entry["source_id"], entry["index"]))
            if func is None or func.name != entry["name"]:
                raise ParseError(f"bundle pairs {entry['name']} with a missing listing function")
            symbol = FuncSymbol(entry["name"], entry["abs_offset"], entry["size"], entry["section"])
            pairs.append((symbol, func))
        return docs, pairs, sidecar["binary_hash"]
    except (KeyError, TypeError, OSError) as e:
        raise ParseError(f"malformed bundle {bundle}: {e}") from e


def check_files(gt_path: Path, bundle: Optional[Path] = None) -> CheckReport:
    """Re-run the correspondence check from a ground-truth file and its bundle."""
    gt = deserialize(gt_path.read_text(encoding="utf-8"))
    docs, pairs, binary_hash = load_bundle(bundle or bundle_dir_for(gt_path))
    if binary_hash != gt.binary_hash:
        raise ParseError(f"bundle is for {binary_hash}, ground truth is for {gt.binary_hash}")
    return check_correspondence(docs, gt, pairs)


def build_many(
    projects: Sequence[ProjectConfig],
    out: Optional[Path] = None,
    jobs: int = 1,
) -> list[tuple[Path, BuildResult]]:
    """
    Build every project; binaries are independent and run concurrently.

    Each project writes to its configured `out`, else to the given out path
    (single project) or `<out>/<binary name>.gtf` (several projects), else
    next to the binary.
    """
    def target(project: ProjectConfig) -> Path:
        if project.out is not None:
            return project.out
        if out is not None:
            return out if len(projects) == 1 else out / f"{project.binary.name}.gtf"
        return project.binary.with_name(project.binary.name + ".gtf")

    def one(project: ProjectConfig) -> tuple[Path, BuildResult]:
        result = build_project(project, jobs=1 if len(projects) > 1 else jobs)
        path = target(project)
        write_outputs(result, project, path)
        return path, result

    return run_parallel(one, projects, jobs)
