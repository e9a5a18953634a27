"""
Shared fixtures.
"""

import shutil
import subprocess

import pytest

from tests.elfbuild import ElfSection, ElfSymbol, build_elf
from tests.fakes import TEXT_BASE, FakeAssembler, fake_listing, make_image
from tests.samples import (
    DEMO_TEXT,
    MIXED_ASM,
    MIXED_CODE,
    MIXED_ENCODINGS,
    SIMPLE_ASM,
    SIMPLE_CODE,
    SIMPLE_ENCODINGS,
)
from utils.config_manager import config_manager


@pytest.fixture(autouse=True)
def fresh_config_manager():
    config_manager.cache.clear()
    yield
    config_manager.cache.clear()


@pytest.fixture
def simple_asm():
    return SIMPLE_ASM


@pytest.fixture
def mixed_asm():
    return MIXED_ASM


@pytest.fixture
def simple_listing():
    return fake_listing(SIMPLE_ASM, SIMPLE_ENCODINGS)


@pytest.fixture
def simple_image():
    return make_image(SIMPLE_CODE, [("main", 0, 8), ("helper", 16, 6)])


@pytest.fixture
def mixed_image():
    return make_image(MIXED_CODE, [("f", 0, len(MIXED_CODE))])


@pytest.fixture
def simple_assembler():
    return FakeAssembler(SIMPLE_ENCODINGS)


@pytest.fixture
def mixed_assembler():
    return FakeAssembler(MIXED_ENCODINGS)


def _can_run(*cmd: str) -> bool:
    if shutil.which(cmd[0]) is None:
        return False
    try:
        return subprocess.run(list(cmd), capture_output=True, timeout=30).returncode == 0
    except (OSError, subprocess.TimeoutExpired):
        return False


@pytest.fixture(scope="session")
def gnu_toolchain():
    if not (_can_run("gcc", "--version") and _can_run("as", "--version")):
        pytest.skip("gcc and GNU as are required")
    return shutil.which("gcc")


@pytest.fixture
def demo_project(tmp_path):
    """Project file for a two-source binary: simple.s matches, mixed.s needs re-encoding."""
    elf = build_elf(
        [ElfSection(".text", TEXT_BASE, DEMO_TEXT)],
        [
            ElfSymbol("main", TEXT_BASE, 8, ".text"),
            ElfSymbol("helper", TEXT_BASE + 0x10, 6, ".text"),
            ElfSymbol("f", TEXT_BASE + 0x20, len(MIXED_CODE), ".text"),
        ],
    )
    (tmp_path / "demo").write_bytes(elf)
    (tmp_path / "simple.s").write_text(SIMPLE_ASM)
    (tmp_path / "mixed.s").write_text(MIXED_ASM)
    project = tmp_path / "demo.env"
    project.write_text(
        "binary = demo\n"
        "listing_sources = simple.s mixed.s\n"
        "compiler = gcc\n"
        "optflag = -O2\n"
        "os = linux\n"
        "project = demo\n"
    )
    return project
