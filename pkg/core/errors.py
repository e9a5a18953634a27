"""
Exception hierarchy for gtforge.

Every stage raises a subclass of GtForgeError so the CLI can map failures to
exit codes in one place.
"""

from typing import Optional


class GtForgeError(Exception):
    """Base class for all gtforge errors."""


class ConfigError(GtForgeError, ValueError):
    """Invalid or incomplete project configuration."""


# binfmt

class UnreadableFile(GtForgeError):
    pass


class UnsupportedContainer(GtForgeError):
    pass


class UnsupportedISA(GtForgeError):
    pass


class OutOfRange(GtForgeError, ValueError):
    pass


class SymbolNotInCode(GtForgeError):
    """A function symbol points outside every executable section."""


# listing

class MalformedListing(GtForgeError, ValueError):
    pass


class NonMonotonicOffsets(GtForgeError, ValueError):
    pass


# groundtruth

class Underflow(GtForgeError, ValueError):
    pass


class UnmatchedSymbol(GtForgeError):
    pass


class OverlapDetected(GtForgeError):
    pass


class FormatVersionMismatch(GtForgeError):
    pass


class ParseError(GtForgeError, ValueError):
    """Text input could not be parsed; line_no is 1-based when known."""

    def __init__(self, message: str, line_no: Optional[int] = None):
        self.line_no = line_no
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)


# reconcile

class StatementNotLocatable(GtForgeError):
    pass


class UnresolvableMismatch(GtForgeError):
    def __init__(
        self,
        message: str,
        abs_offset: int = 0,
        statement: str = "",
        listing_bytes: bytes = b"",
        binary_bytes: bytes = b"",
    ):
        self.abs_offset = abs_offset
        self.statement = statement
        self.listing_bytes = listing_bytes
        self.binary_bytes = binary_bytes
        super().__init__(
            f"{message} at {abs_offset:#x}: {statement!r} "
            f"listing={listing_bytes.hex() or '-'} binary={binary_bytes.hex() or '-'}"
        )


class NonTermination(GtForgeError):
    pass


class AssemblerError(GtForgeError):
    def __init__(self, message: str, returncode: int = 0, stderr: str = ""):
        self.returncode = returncode
        self.stderr = stderr
        super().__init__(f"{message} (exit {returncode}): {stderr.strip()}")


# prefixcanon

class AllPrefixes(GtForgeError, ValueError):
    pass


# evaluator

class HashMismatch(GtForgeError):
    pass


class ZeroDenominator(GtForgeError, ZeroDivisionError):
    pass


class MismatchedGroupSets(GtForgeError):
    pass


class OracleInsufficient(GtForgeError):
    pass


# capture

class CompilerNotFound(GtForgeError):
    pass


class CorruptLedger(GtForgeError):
    pass
