"""
Configuration manager for per-binary project files.

A project file is a `key = value` file (dotenv syntax) describing one binary:
where it is, where its assembly comes from and what produced it.
"""

import shlex
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

from dotenv import dotenv_values

from config import config
from core.errors import ConfigError
from core.x86 import Isa

KNOWN_KEYS = frozenset({
    "binary", "listing_sources", "ledger", "assembler_cmd", "isa", "compiler", "optflag",
    "project", "os", "out", "length_oracle", "discovery_oracle",
})
LENGTH_ORACLES = ("none", "capstone")
DISCOVERY_ORACLES = ("table", "capstone")


@dataclass(frozen=True)
class ProjectConfig:
    """Settings for building the ground truth of one binary."""

    path: Path
    binary: Path
    listing_sources: tuple[Path, ...] = ()
    ledger: Optional[Path] = None
    assembler_cmd: str = config.ASSEMBLER_CMD
    isa: Optional[Isa] = None
    compiler: str = "unknown"
    optflag: str = "unknown"
    project: Optional[str] = None
    os: Optional[str] = None
    out: Optional[Path] = None
    length_oracle: str = "none"
    discovery_oracle: str = "table"
    extra: Dict[str, str] = field(default_factory=dict, compare=False)

    @property
    def from_ledger(self) -> bool:
        return self.ledger is not None

    @property
    def notes(self) -> tuple[str, ...]:
        notes = []
        if self.project:
            notes.append(f"project={self.project}")
        if self.os:
            notes.append(f"os={self.os}")
        return tuple(notes)


class ConfigManager:
    """
    Loads project files, with caching by resolved path.
    """

    def __init__(self):
        self.cache: Dict[Path, ProjectConfig] = {}

    def load(self, path: Path) -> ProjectConfig:
        """
        Load and validate a project file.

        Relative paths inside the file resolve against its directory.

        Args:
            path: Project file

        Returns:
            ProjectConfig: Parsed settings

        Raises:
            ConfigError: Missing file, unknown key or invalid value
        """
        resolved = Path(path).resolve()
        if resolved in self.cache:
            return self.cache[resolved]
        if not resolved.is_file():
            raise ConfigError(f"project file not found: {path}")

        values = {k.strip().lower(): (v or "").strip() for k, v in dotenv_values(resolved).items()}
        unknown = set(values) - KNOWN_KEYS
        if unknown:
            raise ConfigError(f"{path}: unknown key(s) {', '.join(sorted(unknown))}")

        project = self._build(resolved, values)
        self.validate(project)
        self.cache[resolved] = project
        return project

    def _build(self, path: Path, values: Dict[str, str]) -> ProjectConfig:
        base = path.parent

        def resolve(value: str) -> Path:
            p = Path(value).expanduser()
            return p if p.is_absolute() else base / p

        if not values.get("binary"):
            raise ConfigError(f"{path}: 'binary' is required")

        sources = values.get("listing_sources", "ledger" if values.get("ledger") else "")
        ledger = None
        listing_sources: tuple[Path, ...] = ()
        if sources == "ledger":
            if not values.get("ledger"):
                raise ConfigError(f"{path}: listing_sources = ledger needs a 'ledger' directory")
            ledger = resolve(values["ledger"])
        elif sources:
            listing_sources = tuple(resolve(s) for s in shlex.split(sources.replace(",", " ")))
        else:
            raise ConfigError(f"{path}: 'listing_sources' is required")

        isa = None
        if values.get("isa") and values["isa"] != "auto":
            try:
                isa = Isa(values["isa"])
            except ValueError as e:
                raise ConfigError(f"{path}: isa must be one of {', '.join(i.value for i in Isa)} or auto") from e

        return ProjectConfig(
            path=path,
            binary=resolve(values["binary"]),
            listing_sources=listing_sources,
            ledger=ledger,
            assembler_cmd=values.get("assembler_cmd") or config.ASSEMBLER_CMD,
            isa=isa,
            compiler=values.get("compiler") or "unknown",
            optflag=values.get("optflag") or "unknown",
            project=values.get("project") or None,
            os=values.get("os") or None,
            out=resolve(values["out"]) if values.get("out") else None,
            length_oracle=values.get("length_oracle") or "none",
            discovery_oracle=values.get("discovery_oracle") or "table",
            extra=values,
        )

    @staticmethod
    def validate(project: ProjectConfig) -> None:
        """
        Raises:
            ConfigError: A value is outside its allowed set
        """
        if project.os == "linux" and project.optflag not in config.LINUX_OPTFLAGS:
            raise ConfigError(
                f"{project.path}: optflag {project.optflag!r} is not one of "
                f"{', '.join(sorted(config.LINUX_OPTFLAGS))}"
            )
        if project.length_oracle not in LENGTH_ORACLES:
            raise ConfigError(f"{project.path}: length_oracle must be one of {', '.join(LENGTH_ORACLES)}")
        if project.discovery_oracle not in DISCOVERY_ORACLES:
            raise ConfigError(f"{project.path}: discovery_oracle must be one of {', '.join(DISCOVERY_ORACLES)}")
        if "{in}" not in project.assembler_cmd or "{lst}" not in project.assembler_cmd:
            raise ConfigError(f"{project.path}: assembler_cmd needs {{in}} and {{lst}} placeholders")
        for name in ("compiler", "optflag", "project", "os"):
            value = getattr(project, name)
            if value is not None and any(c.isspace() for c in value):
                raise ConfigError(f"{project.path}: {name} must not contain whitespace")


# Global manager instance
config_manager = ConfigManager()
