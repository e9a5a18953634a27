"""
Main gtforge entry point.

Builds the command-line interface, loads command groups and maps failures
to exit codes: 0 success, 1 findings or pipeline errors, 2 usage or
configuration errors.
"""

import argparse
import importlib
import sys
from typing import Optional, Sequence

from config import config
from core.errors import ConfigError, GtForgeError
from utils import logger

EXIT_OK = 0
EXIT_FINDINGS = 1
EXIT_USAGE = 2


class GtForgeCLI:
    """Argument parser with dynamically loaded command groups."""

    def __init__(self):
        """Initialize the CLI."""
        self.logger = logger
        self.parser = argparse.ArgumentParser(
            prog="gtforge",
            description="Disassembly ground truth from assembler listings, and disassembler evaluation.",
        )
        self.groups = self.parser.add_subparsers(dest="group", metavar="GROUP", required=True)
        self.load_commands()

    def load_commands(self) -> None:
        """Load all command groups from the commands directory."""
        for command_file in sorted(config.COMMANDS_DIR.glob("*.py")):
            # Skip base_command and __init__
            if command_file.stem in ["base_command", "__init__"]:
                continue

            module_name = f"commands.{command_file.stem}"

            try:
                module = importlib.import_module(module_name)
                module.setup(self)
                self.logger.debug(f"✓ Loaded command group: {module_name}")
            except Exception as e:
                self.logger.error(f"✗ Failed to load command group {module_name}: {e}", exc_info=e)

    def run(self, argv: Optional[Sequence[str]] = None) -> int:
        """
        Parse arguments and dispatch to the selected command.

        Args:
            argv: Arguments without the program name; defaults to sys.argv[1:]

        Returns:
            int: Process exit code
        """
        try:
            args = self.parser.parse_args(argv)
        except SystemExit as e:
            return EXIT_OK if e.code in (0, None) else EXIT_USAGE

        try:
            return args.handler(args)
        except ConfigError as e:
            self.logger.error(f"Configuration error: {e}")
            return EXIT_USAGE
        except GtForgeError as e:
            self.logger.error(f"{args.group} {args.command} failed: {e}")
            return EXIT_FINDINGS
        except OSError as e:
            self.logger.error(f"{args.group} {args.command} failed: {e}")
            return EXIT_FINDINGS


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point for gtforge."""
    try:
        config.validate()
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_USAGE

    return GtForgeCLI().run(argv)


if __name__ == "__main__":
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        logger.info("Interrupted by user")
        sys.exit(130)
