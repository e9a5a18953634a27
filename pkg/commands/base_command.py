"""
Base command group that all command modules inherit from.

Provides sub-command registration and shared output helpers.
"""

import argparse
import sys
from typing import Callable

from rich.console import Console
from rich.table import Table

from utils import logger

Handler = Callable[[argparse.Namespace], int]


class BaseCommand:
    """
    Base class for command groups (`gtforge <group> <command>`).

    Subclasses set `name` and `help` and add their commands in `register`.
    """

    name: str = ""
    help: str = ""

    def __init__(self, cli):
        """
        Initialize the command group.

        Args:
            cli: The GtForgeCLI instance the group is attached to
        """
        self.cli = cli
        self.logger = logger
        self.console = Console(file=sys.stdout, highlight=False)
        self.parser = cli.groups.add_parser(self.name, help=self.help, description=self.help)
        self.commands = self.parser.add_subparsers(dest="command", metavar="COMMAND", required=True)
        self.register()
        self.logger.debug(f"Registered command group: {self.__class__.__name__}")

    def register(self) -> None:
        raise NotImplementedError

    def add_command(self, name: str, handler: Handler, help: str) -> argparse.ArgumentParser:
        parser = self.commands.add_parser(name, help=help, description=help)
        parser.set_defaults(handler=handler)
        return parser

    def write(self, text: str) -> None:
        """Plain, parseable output on stdout."""
        sys.stdout.write(text)
        sys.stdout.flush()

    def table(self, title: str, columns: list[str], rows: list[list[object]]) -> None:
        table = Table(title=title)
        for column in columns:
            table.add_column(column)
        for row in rows:
            table.add_row(*(str(cell) for cell in row))
        self.console.print(table)
