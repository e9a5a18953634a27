"""
Build capture: a compiler wrapper that snapshots generated assembly.

The same source is often compiled several times in one build with different
macros, and each compilation overwrites the previous assembly file. The
wrapper therefore records every assembly file it sees after each compiler
invocation into a content-addressed, append-only ledger:

    <root>/index                 one "<seq> <sha256> <rel_path>" line per entry
    <root>/blobs/<sha[:2]>/<sha> file contents
    <root>/lock                  serializes concurrent wrappers
"""

import fcntl
import os
import shlex
import shutil
import subprocess
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping, Optional, Sequence

from config import config
from core.errors import CompilerNotFound, ConfigError, CorruptLedger
from utils import logger
from utils.helpers import sha256_bytes

SOURCE_SUFFIXES = frozenset({".c", ".cc", ".cpp", ".cxx", ".c++", ".C", ".m", ".i", ".ii"})


@dataclass(frozen=True)
class LedgerEntry:
    seq: int
    content_hash: str
    rel_path: str

    def to_line(self) -> str:
        return f"{self.seq} {self.content_hash} {self.rel_path}\n"


class SnapshotLedger:
    """Append-only, content-addressed store of assembly snapshots."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.index_path = self.root / "index"
        self.blobs_dir = self.root / "blobs"
        self.lock_path = self.root / "lock"

    def blob_path(self, content_hash: str) -> Path:
        return self.blobs_dir / content_hash[:2] / content_hash

    @contextmanager
    def locked(self) -> Iterator[None]:
        self.root.mkdir(parents=True, exist_ok=True)
        with open(self.lock_path, "a") as lock:
            fcntl.flock(lock, fcntl.LOCK_EX)
            try:
                yield
            finally:
                fcntl.flock(lock, fcntl.LOCK_UN)

    def entries(self) -> list[LedgerEntry]:
        """
        Read the index.

        A torn final line (a writer died mid-append) is ignored.

        Raises:
            CorruptLedger: A complete index line is malformed or out of order
        """
        if not self.index_path.exists():
            return []
        text = self.index_path.read_text(encoding="utf-8")
        lines = text.split("\n")
        torn = lines.pop()
        if torn:
            logger.warning(f"Ignoring torn index line in {self.index_path}: {torn!r}")

        entries: list[LedgerEntry] = []
        for line_no, line in enumerate(lines, start=1):
            parts = line.split(" ", 2)
            if len(parts) != 3 or not parts[0].isdigit() or len(parts[1]) != 64:
                raise CorruptLedger(f"{self.index_path}:{line_no}: malformed entry {line!r}")
            entry = LedgerEntry(int(parts[0]), parts[1], parts[2])
            if entries and entry.seq <= entries[-1].seq:
                raise CorruptLedger(f"{self.index_path}:{line_no}: seq {entry.seq} is not increasing")
            entries.append(entry)
        return entries

    def _store_blob(self, data: bytes, content_hash: str) -> None:
        path = self.blob_path(content_hash)
        if path.exists():
            return
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
        try:
            with os.fdopen(fd, "wb") as f:
                f.write(data)
                f.flush()
                os.fsync(f.fileno())
            os.replace(tmp, path)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise

    def _drop_torn_tail(self) -> None:
        if not self.index_path.exists():
            return
        data = self.index_path.read_bytes()
        if data and not data.endswith(b"\n"):
            with open(self.index_path, "r+b") as index:
                index.truncate(data.rfind(b"\n") + 1)

    def snapshot(self, build_dir: Path, pattern: str = "*.s") -> list[LedgerEntry]:
        """
        Record every assembly file under build_dir whose content changed.

        Args:
            build_dir: Directory tree to scan
            pattern: Glob matched against file names

        Returns:
            list: Entries added by this snapshot
        """
        build_dir = Path(build_dir).resolve()
        root = self.root.resolve()
        added: list[LedgerEntry] = []

        with self.locked():
            self._drop_torn_tail()
            existing = self.entries()
            latest = {e.rel_path: e.content_hash for e in existing}
            seq = existing[-1].seq if existing else 0

            for path in sorted(build_dir.rglob(pattern)):
                if not path.is_file() or root in path.resolve().parents:
                    continue
                rel_path = path.relative_to(build_dir).as_posix()
                data = path.read_bytes()
                content_hash = sha256_bytes(data)
                if latest.get(rel_path) == content_hash:
                    continue

                self._store_blob(data, content_hash)
                seq += 1
                entry = LedgerEntry(seq, content_hash, rel_path)
                with open(self.index_path, "a", encoding="utf-8") as index:
                    index.write(entry.to_line())
                    index.flush()
                    os.fsync(index.fileno())
                latest[rel_path] = content_hash
                added.append(entry)

        for entry in added:
            logger.debug(f"Captured #{entry.seq} {entry.rel_path} ({entry.content_hash[:12]})")
        return added


def extract_chronological(ledger: SnapshotLedger) -> list[tuple[str, bytes]]:
    """
    Every captured assembly file version, oldest first.

    Returns:
        list: (rel_path, content) per entry, superseded versions included

    Raises:
        CorruptLedger: A blob is missing or does not hash to its entry
    """
    versions = []
    for entry in ledger.entries():
        path = ledger.blob_path(entry.content_hash)
        try:
            data = path.read_bytes()
        except OSError as e:
            raise CorruptLedger(f"blob for entry {entry.seq} ({entry.rel_path}) is unreadable: {e}") from e
        if sha256_bytes(data) != entry.content_hash:
            raise CorruptLedger(f"blob for entry {entry.seq} ({entry.rel_path}) does not match its hash")
        versions.append((entry.rel_path, data))
    return versions


def write_extracted(ledger: SnapshotLedger, out_dir: Path) -> list[Path]:
    """Write every version as <out_dir>/<seq:06d>/<rel_path>."""
    written = []
    entries = ledger.entries()
    for entry, (rel_path, data) in zip(entries, extract_chronological(ledger)):
        target = Path(out_dir) / f"{entry.seq:06d}" / rel_path
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(data)
        written.append(target)
    logger.info(f"✓ Extracted {len(written)} assembly version(s) to {out_dir}")
    return written


def inject_flags(argv: Sequence[str], flags: Sequence[str]) -> list[str]:
    """Add the assembly-emitting flags to a compiling command line."""
    args = list(argv)
    if "-E" in args or not any(Path(a).suffix in SOURCE_SUFFIXES for a in args if not a.startswith("-")):
        return args
    return args + [flag for flag in flags if flag not in args]


def wrap_compiler(argv: Sequence[str], env: Optional[Mapping[str, str]] = None) -> int:
    """
    Run the real compiler with assembly output enabled, then snapshot.

    Args:
        argv: Compiler arguments, without the compiler itself
        env: Environment to read GTFORGE_* settings from; defaults to os.environ

    Returns:
        int: The real compiler's exit code

    Raises:
        CompilerNotFound: GTFORGE_REAL_CC is unset or not executable
        ConfigError: GTFORGE_LEDGER is unset
    """
    env = os.environ if env is None else env
    root = env.get("GTFORGE_LEDGER") or config.LEDGER
    if not root:
        raise ConfigError("GTFORGE_LEDGER environment variable is required")
    real_cc = env.get("GTFORGE_REAL_CC") or config.REAL_CC
    resolved = shutil.which(real_cc) if real_cc else None
    if resolved is None:
        raise CompilerNotFound(f"real compiler {real_cc or '<GTFORGE_REAL_CC unset>'} not found")

    flags = shlex.split(env.get("GTFORGE_SAVE_TEMPS_FLAGS", config.SAVE_TEMPS_FLAGS))
    command = [resolved, *inject_flags(argv, flags)]
    logger.debug(f"Running {shlex.join(command)}")
    returncode = subprocess.run(command, env=dict(env)).returncode

    build_dir = Path(env.get("GTFORGE_BUILD_DIR") or config.BUILD_DIR or os.getcwd())
    added = SnapshotLedger(Path(root)).snapshot(build_dir, env.get("GTFORGE_ASM_GLOB", config.ASM_GLOB))
    logger.debug(f"Snapshot added {len(added)} entr{'y' if len(added) == 1 else 'ies'}; compiler exited {returncode}")
    return returncode
