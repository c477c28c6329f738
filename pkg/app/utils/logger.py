import os
import sys
from typing import Optional

from loguru import logger

from app.core.config import config

CONSOLE_FORMAT = (
    "<green>{time:YYYY-MM-DD HH:mm:ss}</green> | <level>{level: <8}</level> | "
    "<cyan>{name}</cyan>:<cyan>{function}</cyan>:<cyan>{line}</cyan> - <level>{message}</level>"
)
FILE_FORMAT = "{time:YYYY-MM-DD HH:mm:ss} | {level: <8} | {name}:{function}:{line} - {message}"


def configure_logging(level: Optional[str] = None, log_dir: Optional[str] = None) -> None:
    """
    Install the console sink and, when log_dir is given, the rotating file sink.

    Args:
        level: Log level (defaults to LOG_LEVEL from the environment)
        log_dir: Directory for reflowlab.log; None disables file logging
    """
    level = (level or config.log_level).upper()

    # Remove default logger
    logger.remove()

    # Outside debug mode only our own modules reach the console
    console_filter = None if config.debug else (lambda record: record["name"].startswith("app"))

    logger.add(
        sys.stderr,
        format=CONSOLE_FORMAT,
        level=level,
        colorize=True,
        filter=console_filter,
    )

    if log_dir:
        os.makedirs(log_dir, exist_ok=True)
        logger.add(
            os.path.join(log_dir, "reflowlab.log"),
            rotation="10 MB",  # Rotate when file reaches 10MB
            retention="1 month",  # Keep logs for 1 month
            compression="zip",  # Compress rotated logs
            format=FILE_FORMAT,
            level=level,
        )
