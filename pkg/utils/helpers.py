"""
Helper utilities shared by the pipeline stages.

Provides hex formatting, hashing, duration formatting and a bounded
worker pool for per-binary work.
"""

import hashlib
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Iterable, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def hex_bytes(data: bytes) -> str:
    """Lowercase hex without separators, '-' for an empty sequence."""
    return data.hex() if data else "-"


def parse_hex_bytes(text: str) -> bytes:
    """
    Parse a hex byte string.

    Accepts the '-' placeholder for empty and tolerates spaces between bytes.

    Args:
        text: Hex text such as "66f3ab" or "66 f3 ab"

    Returns:
        bytes: Decoded bytes

    Raises:
        ValueError: If the text is not valid hex
    """
    text = text.strip()
    if text in ("", "-"):
        return b""
    return bytes.fromhex(text.replace(" ", ""))


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def format_duration(seconds: float) -> str:
    """
    Format a duration in seconds to a human-readable string.

    Args:
        seconds: Duration in seconds

    Returns:
        str: Formatted duration (e.g., "1m 5.2s", "850ms")
    """
    if seconds < 1:
        return f"{seconds * 1000:.0f}ms"
    minutes, secs = divmod(seconds, 60)
    if minutes:
        return f"{int(minutes)}m {secs:.1f}s"
    return f"{secs:.1f}s"


def run_parallel(fn: Callable[[T], R], items: Iterable[T], jobs: int = 1) -> list[R]:
    """
    Apply fn to every item with at most `jobs` workers.

    Results come back in input order. The first exception raised by a worker
    propagates to the caller once all submitted work has finished.

    Args:
        fn: Per-item function
        items: Work items
        jobs: Worker count; 1 runs inline

    Returns:
        list: Results in the order of items
    """
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))
