"""
Logging configuration using Rich for console output.

Provides a centralized logger that can be imported throughout the application.
Console output goes to stderr so command output on stdout stays parseable.
"""

import logging
from pathlib import Path
from rich.logging import RichHandler
from rich.console import Console
from rich.traceback import install as install_rich_traceback

from config import config


def setup_logging() -> logging.Logger:
    """
    Set up logging with Rich formatting.

    Returns:
        logging.Logger: Configured logger instance
    """
    install_rich_traceback(show_locals=config.LOG_SHOW_LOCALS)

    console = Console(stderr=True)

    logger = logging.getLogger(config.LOG_NAME)
    level = getattr(logging, config.LOG_LEVEL.upper(), logging.INFO)
    logger.setLevel(level)

    # Remove existing handlers to avoid duplicates
    logger.handlers.clear()

    console_handler = RichHandler(
        console=console,
        rich_tracebacks=True,
        tracebacks_show_locals=config.LOG_SHOW_LOCALS,
        markup=False,
        show_path=False,
    )
    console_handler.setLevel(level)
    console_handler.setFormatter(logging.Formatter("%(message)s", datefmt="[%X]"))
    logger.addHandler(console_handler)

    if config.LOG_FILE:
        log_path = Path(config.LOG_FILE)
        log_path.parent.mkdir(parents=True, exist_ok=True)

        file_handler = logging.FileHandler(log_path, encoding="utf-8")
        file_handler.setLevel(logging.DEBUG)  # File gets all logs
        file_handler.setFormatter(logging.Formatter(config.LOG_FILE_FORMAT, datefmt="%Y-%m-%d %H:%M:%S"))
        logger.addHandler(file_handler)

    return logger


# Global logger instance
logger = setup_logging()
