"""
Utilities package for gtforge.

This package contains shared infrastructure: logging, small helpers and
project configuration loading.
"""

from .logging import logger

__all__ = [
    "logger",
]
