"""
Binary container reading.

Loads ELF images with pyelftools into an immutable BinaryImage: allocated
sections, function symbols from the static symbol table, and raw byte
extraction by virtual address. Readers are registered by magic number so
another container format can be added next to ELF.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional
import io

from elftools.common.exceptions import ELFError
from elftools.elf.constants import SH_FLAGS
from elftools.elf.descriptions import describe_reloc_type
from elftools.elf.elffile import ELFFile
from elftools.elf.relocation import RelocationSection
from elftools.elf.sections import SymbolTableSection

from core.errors import (
    OutOfRange,
    SymbolNotInCode,
    UnreadableFile,
    UnsupportedContainer,
    UnsupportedISA,
)
from core.x86 import Isa
from utils import logger
from utils.helpers import sha256_bytes


@dataclass(frozen=True)
class SectionView:
    name: str
    file_offset: int
    virtual_address: int
    size: int
    executable: bool

    @property
    def end(self) -> int:
        return self.virtual_address + self.size

    def contains(self, address: int, length: int = 1) -> bool:
        return self.virtual_address <= address and address + length <= self.end


@dataclass(frozen=True)
class FuncSymbol:
    name: str
    abs_offset: int
    size: Optional[int]
    section_name: str


@dataclass(frozen=True)
class BinaryImage:
    """An immutable view of one binary file."""

    path: str
    content_hash: str
    isa: Isa
    sections: tuple[SectionView, ...]
    symbols: tuple[FuncSymbol, ...]
    data: bytes = field(repr=False, compare=False)

    def section_at(self, address: int, length: int = 1) -> Optional[SectionView]:
        for section in self.sections:
            if section.contains(address, max(length, 1)):
                return section
        return None

    def executable_ranges(self) -> list[tuple[int, int]]:
        return [(s.virtual_address, s.end) for s in self.sections if s.executable]


def _elf_isa(elf: ELFFile) -> Isa:
    machine = elf["e_machine"]
    if machine == "EM_X86_64" and elf.elfclass == 64:
        return Isa.X64
    if machine == "EM_386" and elf.elfclass == 32:
        return Isa.X86
    raise UnsupportedISA(f"machine {machine} (ELF class {elf.elfclass}) is not x86/x64")


def _read_elf(path: str, data: bytes) -> BinaryImage:
    try:
        elf = ELFFile(io.BytesIO(data))
        isa = _elf_isa(elf)

        sections = []
        for section in elf.iter_sections():
            flags = section["sh_flags"]
            if not flags & SH_FLAGS.SHF_ALLOC or section["sh_type"] == "SHT_NOBITS":
                continue
            if section["sh_offset"] + section["sh_size"] > len(data):
                raise UnsupportedContainer(f"section {section.name} extends past end of {path}")
            sections.append(
                SectionView(
                    name=section.name,
                    file_offset=section["sh_offset"],
                    virtual_address=section["sh_addr"],
                    size=section["sh_size"],
                    executable=bool(flags & SH_FLAGS.SHF_EXECINSTR) and section["sh_size"] > 0,
                )
            )

        symbols = []
        symtab = elf.get_section_by_name(".symtab")
        if isinstance(symtab, SymbolTableSection):
            for symbol in symtab.iter_symbols():
                if symbol["st_info"]["type"] != "STT_FUNC":
                    continue
                shndx = symbol["st_shndx"]
                if not isinstance(shndx, int):
                    continue  # SHN_UNDEF / SHN_ABS
                symbols.append(
                    FuncSymbol(
                        name=symbol.name,
                        abs_offset=symbol["st_value"],
                        size=symbol["st_size"] or None,
                        section_name=elf.get_section(shndx).name,
                    )
                )
    except ELFError as e:
        raise UnsupportedContainer(f"{path}: {e}") from e

    symbols.sort(key=lambda s: (s.abs_offset, s.name))
    return BinaryImage(
        path=path,
        content_hash=sha256_bytes(data),
        isa=isa,
        sections=tuple(sections),
        symbols=tuple(symbols),
        data=data,
    )


# Keyed by file magic. A COFF/PE reader would register under b"MZ".
CONTAINER_READERS: dict[bytes, Callable[[str, bytes], BinaryImage]] = {
    b"\x7fELF": _read_elf,
}


def load_binary(path) -> BinaryImage:
    """
    Load a binary image from disk.

    Args:
        path: Filesystem path of an ELF file

    Returns:
        BinaryImage: Sections, function symbols and ISA of the file

    Raises:
        UnreadableFile: The file cannot be read
        UnsupportedContainer: The file is empty or not a known container
        UnsupportedISA: The machine is not x86/x64
    """
    path = str(path)
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise UnreadableFile(f"cannot read {path}: {e}") from e
    if not data:
        raise UnsupportedContainer(f"{path} is empty")

    for magic, reader in CONTAINER_READERS.items():
        if data.startswith(magic):
            image = reader(path, data)
            logger.debug(
                f"Loaded {path}: {image.isa.value}, {len(image.sections)} sections, "
                f"{len(image.symbols)} function symbols"
            )
            return image
    raise UnsupportedContainer(f"{path} is not an ELF file")


def read_bytes(img: BinaryImage, abs_offset: int, length: int) -> bytes:
    """
    Read bytes at a virtual address.

    Raises:
        OutOfRange: The range is not inside a single section
    """
    if length == 0:
        return b""
    if length < 0:
        raise OutOfRange(f"negative length {length}")
    section = img.section_at(abs_offset, length)
    if section is None:
        raise OutOfRange(f"[{abs_offset:#x}, {abs_offset + length:#x}) is not inside one section")
    start = section.file_offset + (abs_offset - section.virtual_address)
    return img.data[start:start + length]


def list_functions(img: BinaryImage) -> list[FuncSymbol]:
    return list(img.symbols)


def require_code_symbol(img: BinaryImage, symbol: FuncSymbol) -> SectionView:
    """
    Return the executable section holding a symbol.

    Raises:
        SymbolNotInCode: The symbol address is outside every executable section
    """
    section = img.section_at(symbol.abs_offset)
    if section is None or not section.executable:
        raise SymbolNotInCode(f"symbol {symbol.name} at {symbol.abs_offset:#x} is not in an executable section")
    return section


# Markers that patch no bytes
_ZERO_WIDTH_RELOCS = frozenset({
    "R_X86_64_NONE", "R_X86_64_TLSDESC_CALL", "R_X86_64_GNU_VTINHERIT", "R_X86_64_GNU_VTENTRY",
    "R_386_NONE", "R_386_TLS_DESC_CALL", "R_386_GNU_VTINHERIT", "R_386_GNU_VTENTRY",
})


def _reloc_width(type_name: str) -> int:
    if type_name in _ZERO_WIDTH_RELOCS:
        return 0
    if type_name.endswith("64"):
        return 8
    if type_name.endswith("16"):
        return 2
    if type_name.endswith("8"):
        return 1
    return 4


def read_object_relocations(path) -> dict[str, list[tuple[int, int]]]:
    """
    Read relocation sites from a relocatable object.

    Args:
        path: Object file written by the assembler

    Returns:
        dict: Section name -> sorted (offset, width) relocation sites
    """
    sites: dict[str, list[tuple[int, int]]] = {}
    with open(path, "rb") as f:
        try:
            elf = ELFFile(f)
            for section in elf.iter_sections():
                if not isinstance(section, RelocationSection):
                    continue
                target = elf.get_section(section["sh_info"]).name
                for reloc in section.iter_relocations():
                    type_name = describe_reloc_type(reloc["r_info_type"], elf)
                    sites.setdefault(target, []).append((reloc["r_offset"], _reloc_width(type_name)))
        except ELFError as e:
            raise UnsupportedContainer(f"{path}: {e}") from e
    return {name: sorted(entries) for name, entries in sites.items()}
