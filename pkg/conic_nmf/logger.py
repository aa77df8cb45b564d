"""
Centralized Logging Configuration
Rotating file logs with detailed DEBUG info and a console stream whose level follows --verbose
"""

import logging
from logging.handlers import RotatingFileHandler
from pathlib import Path

import conic_nmf.config as config

CONSOLE_HANDLER_NAME = "conic_nmf.console"


def setup_logger(name: str = "conic_nmf", log_level: int = logging.DEBUG) -> logging.Logger:
    """
    Setup centralized logger with file rotation and console output

    Args:
        name: Logger name (default: "conic_nmf")
        log_level: Root log level (default: DEBUG)

    Returns:
        Configured logger instance
    """
    logger = logging.getLogger(name)
    logger.setLevel(log_level)

    # Prevent duplicate handlers (joblib workers re-import the package)
    if logger.handlers:
        return logger

    # ========================================
    # Console Handler (level from CONIC_NMF_LOG_LEVEL, simple format)
    # ========================================
    console_handler = logging.StreamHandler()
    console_handler.set_name(CONSOLE_HANDLER_NAME)
    console_handler.setLevel(getattr(logging, config.LOG_LEVEL, logging.INFO))
    console_handler.setFormatter(logging.Formatter(fmt='%(levelname)s: %(message)s', datefmt='%H:%M:%S'))
    logger.addHandler(console_handler)

    # ========================================
    # File Handler (DEBUG level, detailed format with rotation)
    # ========================================
    log_file = None
    if config.LOG_FILE_ENABLED:
        log_dir = Path(config.LOG_DIR)
        log_dir.mkdir(parents=True, exist_ok=True)
        log_file = log_dir / "conic_nmf.log"
        file_handler = RotatingFileHandler(
            filename=log_file,
            maxBytes=10 * 1024 * 1024,  # 10 MB
            backupCount=5,
            encoding='utf-8'
        )
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(logging.Formatter(
            fmt='%(asctime)s | %(levelname)-8s | %(filename)s:%(lineno)d | %(message)s',
            datefmt='%Y-%m-%d %H:%M:%S'
        ))
        logger.addHandler(file_handler)

    # ========================================
    # Silence joblib worker chatter
    # ========================================
    logging.getLogger("joblib").setLevel(logging.WARNING)

    logger.debug(f"✅ Logger initialized: {name}")
    if log_file is not None:
        logger.debug(f"Log file: {log_file.absolute()}")

    return logger


def set_verbosity(verbosity: int) -> None:
    """Map the CLI --verbose count onto the console handler level (0 warn, 1 info, 2+ debug)."""
    level = logging.WARNING if verbosity <= 0 else logging.INFO if verbosity == 1 else logging.DEBUG
    for handler in logger.handlers:
        if handler.get_name() == CONSOLE_HANDLER_NAME:
            handler.setLevel(level)


# Global logger instance
logger = setup_logger()
