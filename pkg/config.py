"""
Configuration management for gtforge.

Loads environment variables and provides centralized access to the
process-wide settings. Per-binary settings live in project config files,
see utils/config_manager.py.
"""

import os
from pathlib import Path
from typing import Optional
from dotenv import load_dotenv

from core.errors import ConfigError

# Load environment variables from .env file
load_dotenv()


class Config:
    """Central configuration class for gtforge."""

    # Logging Configuration
    LOG_LEVEL: str = os.getenv("GTFORGE_LOG_LEVEL", "INFO")
    LOG_FILE: str = os.getenv("GTFORGE_LOG_FILE", "")
    LOG_NAME: str = "gtforge"
    LOG_SHOW_LOCALS: bool = os.getenv("GTFORGE_LOG_SHOW_LOCALS", "").lower() in {"1", "true", "yes"}
    LOG_FILE_FORMAT: str = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

    # Build capture
    LEDGER: Optional[str] = os.getenv("GTFORGE_LEDGER")
    REAL_CC: Optional[str] = os.getenv("GTFORGE_REAL_CC")
    BUILD_DIR: Optional[str] = os.getenv("GTFORGE_BUILD_DIR")
    SAVE_TEMPS_FLAGS: str = os.getenv("GTFORGE_SAVE_TEMPS_FLAGS", "-save-temps=obj")
    ASM_GLOB: str = os.getenv("GTFORGE_ASM_GLOB", "*.s")

    # Assembler
    ASSEMBLER_CMD: str = os.getenv(
        "GTFORGE_ASSEMBLER_CMD", "as {isa_flag} -al={lst} -o {obj} {in}"
    )

    # Batch mode (parsed by jobs())
    JOBS: str = os.getenv("GTFORGE_JOBS", "1")

    # Directory Paths
    BASE_DIR: Path = Path(__file__).parent
    COMMANDS_DIR: Path = BASE_DIR / "commands"

    # Optimization settings accepted for the linux profile
    LINUX_OPTFLAGS: frozenset[str] = frozenset(
        {"-O0", "-O1", "-O2", "-O3", "-Ofast", "-Os"}
    )

    @classmethod
    def validate(cls) -> None:
        """Validate that configuration values are usable."""
        if cls.LOG_LEVEL.upper() not in {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}:
            raise ConfigError(f"GTFORGE_LOG_LEVEL is not a log level: {cls.LOG_LEVEL}")
        cls.jobs()
        if "{in}" not in cls.ASSEMBLER_CMD or "{lst}" not in cls.ASSEMBLER_CMD:
            raise ConfigError("GTFORGE_ASSEMBLER_CMD needs {in} and {lst} placeholders")

    @classmethod
    def jobs(cls) -> int:
        """
        Parse GTFORGE_JOBS.

        Raises:
            ConfigError: When the value is not a positive integer
        """
        try:
            jobs = int(str(cls.JOBS).strip())
        except ValueError:
            raise ConfigError(f"GTFORGE_JOBS is not an integer: {cls.JOBS!r}") from None
        if jobs < 1:
            raise ConfigError(f"GTFORGE_JOBS must be at least 1, got {jobs}")
        return jobs

    @classmethod
    def ledger_root(cls) -> Path:
        """
        Resolve the capture ledger root.

        Returns:
            Path: Ledger directory taken from GTFORGE_LEDGER

        Raises:
            ConfigError: When GTFORGE_LEDGER is not set
        """
        root = os.getenv("GTFORGE_LEDGER", cls.LEDGER or "")
        if not root:
            raise ConfigError("GTFORGE_LEDGER environment variable is required")
        return Path(root)


# Create config instance
config = Config()
