"""
Logging configuration using Loguru

Records carry a `component` field ("robot", "edge", "link", or "-" for
everything else) so interleaved robot and edge output in one process stays
readable.
"""
import sys
from pathlib import Path

from loguru import logger

from edgebot.core.config import settings

CONSOLE_FORMAT = (
    "<green>{time:HH:mm:ss.SSS}</green> | <level>{level: <8}</level> | "
    "<magenta>{extra[component]: <5}</magenta> | <cyan>{name}</cyan>:<cyan>{line}</cyan> - <level>{message}</level>"
)
FILE_FORMAT = "{time:YYYY-MM-DD HH:mm:ss.SSS} | {level: <8} | {extra[component]: <5} | {name}:{function}:{line} - {message}"

# Track if logging has been configured
_logging_configured = False


def setup_logging(force_reconfigure=False):
    """Configure logging for the application"""
    global _logging_configured

    if _logging_configured and not force_reconfigure:
        return logger

    logger.remove()
    logger.configure(extra={"component": "-"})

    # stdout carries CLI summaries and the edge status line
    logger.add(
        sys.stderr,
        format=CONSOLE_FORMAT,
        level=settings.log_level,
        colorize=sys.stderr.isatty(),
    )

    if settings.log_file_path:
        log_path = Path(settings.log_file_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)

        logger.add(
            settings.log_file_path,
            format=FILE_FORMAT,
            level=settings.log_level,
            rotation=settings.log_max_size,
            retention=settings.log_backup_count,
            compression="zip",
            enqueue=True,
        )

        logger.debug(f"Logging configured: {settings.log_file_path}")

    _logging_configured = True

    return logger


def component_logger(component: str):
    """Logger whose records are tagged with the given component"""
    return app_logger.bind(component=component)


app_logger = setup_logging()
