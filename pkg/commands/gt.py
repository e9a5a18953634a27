"""
Ground-truth commands: build and check.
"""

import argparse
from pathlib import Path

from commands.base_command import BaseCommand
from config import config
from core.pipeline import build_many, check_files
from utils.config_manager import config_manager


class GroundTruthCommands(BaseCommand):
    """`gtforge gt build|check`."""

    name = "gt"
    help = "Build and check disassembly ground truth"

    def register(self) -> None:
        build = self.add_command("build", self.build, "Build ground truth for one or more binaries")
        build.add_argument("--config", nargs="+", required=True, type=Path, metavar="FILE",
                           help="Project file(s), one per binary")
        build.add_argument("--out", type=Path, help="Ground-truth file (one project) or directory (several)")
        build.add_argument("--jobs", type=int, help="Worker count (default: $GTFORGE_JOBS)")

        check = self.add_command("check", self.check, "Re-check a ground-truth file against its listings")
        check.add_argument("--gt", required=True, type=Path, help="Ground-truth file")
        check.add_argument("--bundle", type=Path, help="Bundle directory (default: <gt>.d)")

    def build(self, args: argparse.Namespace) -> int:
        """
        Build ground truth; exits 1 when any correspondence check fails.

        Args:
            args: Parsed arguments
        """
        projects = [config_manager.load(path) for path in args.config]
        jobs = config.jobs() if args.jobs is None else max(args.jobs, 1)
        results = build_many(projects, args.out, jobs)

        failed = 0
        for path, result in results:
            gt = result.gt
            self.write(
                f"{path}\t{len(gt.functions)} functions\t{len(gt.instructions(optional=False))} instructions"
                f"\t{len(gt.instructions(optional=True))} optional\t{len(gt.regions())} regions"
                f"\t{'ok' if result.report.ok else 'FAILED'}\n"
            )
            if not result.report.ok:
                failed += 1
                self.write(result.report.to_text())
        if failed:
            self.logger.error(f"✗ {failed} of {len(results)} build(s) failed the correspondence check")
            return 1
        self.logger.info(f"✓ Built {len(results)} ground-truth file(s)")
        return 0

    def check(self, args: argparse.Namespace) -> int:
        report = check_files(args.gt, args.bundle)
        self.write(report.to_text())
        return 0 if report.ok else 1


def setup(cli) -> None:
    """
    Setup function to add this command group to the CLI.

    Args:
        cli: The GtForgeCLI instance
    """
    GroundTruthCommands(cli)
