import logging
import sys
from typing import Optional

from utp.core.config import Settings


def setup_logger(log_level: Optional[str] = None) -> logging.Logger:
    """Setup and configure the package logger"""
    # Level from parameter, then UTP_LOG_LEVEL, then INFO
    if log_level is None:
        log_level = Settings().UTP_LOG_LEVEL

    logger = logging.getLogger('utp')
    logger.setLevel(getattr(logging, log_level.upper(), logging.INFO))

    if not logger.handlers:
        # stderr keeps stdout free for the JSON a command prints
        handler = logging.StreamHandler(sys.stderr)
        formatter = logging.Formatter(
            '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
        )
        handler.setFormatter(formatter)
        logger.addHandler(handler)
    else:
        # sys.stderr may have been swapped since the first call
        for handler in logger.handlers:
            if isinstance(handler, logging.StreamHandler):
                handler.setStream(sys.stderr)

    return logger
