"""
Logging configuration for command-line runs.

Library modules only create ``logging.getLogger(__name__)`` loggers; handlers
are installed once here by the CLI.
"""

import logging
import os
from typing import Optional

_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(level: str = "INFO", log_file: Optional[str] = None) -> None:
    """
    Install a stream handler and, optionally, a file handler on the root logger.

    Calling this again replaces the handlers installed by a previous call, so a
    CLI run that switches to a run directory can re-point the file handler.

    Args:
        level: Logging level name ("DEBUG", "INFO", ...).
        log_file: Optional path of a log file (created with its directory).
    """
    root = logging.getLogger()
    for handler in list(root.handlers):
        if getattr(handler, "_bgvc_handler", False):
            root.removeHandler(handler)
            handler.close()

    handlers = [logging.StreamHandler()]
    if log_file:
        os.makedirs(os.path.dirname(os.path.abspath(log_file)), exist_ok=True)
        handlers.append(logging.FileHandler(log_file, mode="a", encoding="utf-8"))

    formatter = logging.Formatter(_FORMAT)
    for handler in handlers:
        handler.setFormatter(formatter)
        handler._bgvc_handler = True
        root.addHandler(handler)
    root.setLevel(getattr(logging, level.upper(), logging.INFO))
