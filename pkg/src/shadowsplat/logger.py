import logging
import sys
from typing import Any

LOG_FORMAT = '[%(levelname)s]    %(message)s'


def setup_logger(args: Any) -> logging.Logger:
    """
    Configure the ``"shadowsplat"`` logger from the common CLI options.

    Module loggers (``logging.getLogger(__name__)``) are its children, so one
    handler serves the whole package: ``--logfile`` when given, otherwise
    stdout, or a ``NullHandler`` when the process has no stdout. A repeated
    call only changes the level.

    Args:
        args: Parsed arguments with ``loglevel`` and ``logfile``.

    Returns:
        logging.Logger: The package logger.
    """
    logger = logging.getLogger("shadowsplat")
    logger.setLevel(logging.getLevelName(args.loglevel.upper()))
    if logger.handlers:
        return logger

    handler: logging.Handler
    if args.logfile:
        handler = logging.FileHandler(args.logfile)
    elif sys.stdout is None:
        handler = logging.NullHandler()
    else:
        handler = logging.StreamHandler(sys.stdout)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logger.addHandler(handler)
    return logger
