"""
Build capture commands: the compiler wrapper and ledger extraction.
"""

import argparse
from pathlib import Path

from commands.base_command import BaseCommand
from config import config
from core.capture import SnapshotLedger, wrap_compiler, write_extracted


class CaptureCommands(BaseCommand):
    """`gtforge capture wrap|extract`."""

    name = "capture"
    help = "Capture compiler-generated assembly during a build"

    def register(self) -> None:
        wrap = self.add_command("wrap", self.wrap, "Run the real compiler and snapshot assembly output")
        wrap.add_argument("compiler_args", nargs=argparse.REMAINDER, help="Arguments after '--'")

        extract = self.add_command("extract", self.extract, "Write every captured version in order")
        extract.add_argument("--ledger", type=Path, help="Ledger directory (default: $GTFORGE_LEDGER)")
        extract.add_argument("--out", required=True, type=Path, help="Output directory")

    def wrap(self, args: argparse.Namespace) -> int:
        argv = list(args.compiler_args)
        if argv[:1] == ["--"]:
            argv = argv[1:]
        return wrap_compiler(argv)

    def extract(self, args: argparse.Namespace) -> int:
        ledger = SnapshotLedger(args.ledger or config.ledger_root())
        for path in write_extracted(ledger, args.out):
            self.write(f"{path}\n")
        return 0


def setup(cli) -> None:
    """Setup function to add this command group to the CLI."""
    CaptureCommands(cli)
