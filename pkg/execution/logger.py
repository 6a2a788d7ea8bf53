"""
Logging setup for the sculpting engine.
Call setup_logger() once at startup; all other modules use logging.getLogger(__name__).
"""

import logging
import sys
from pathlib import Path

LOG_FORMAT = "%(asctime)s  %(levelname)-8s  %(name)s  %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"


def setup_logger(level: str = "INFO", log_file: Path | None = None) -> logging.Logger:
    """Configure root logger with console output and optional file output."""
    numeric_level = getattr(logging, level.upper(), logging.INFO)

    root = logging.getLogger()
    root.setLevel(numeric_level)

    fmt = logging.Formatter(fmt=LOG_FORMAT, datefmt=DATE_FORMAT)

    # Avoid adding duplicate console handlers on repeated calls
    if not any(getattr(h, "_sculptd_console", False) for h in root.handlers):
        console = logging.StreamHandler(sys.stdout)
        console.setFormatter(fmt)
        console._sculptd_console = True
        root.addHandler(console)

    # Optional file handler, one per run directory
    if log_file is not None:
        log_file = Path(log_file)
        known = {getattr(h, "baseFilename", None) for h in root.handlers}
        if str(log_file.resolve()) not in known:
            log_file.parent.mkdir(parents=True, exist_ok=True)
            file_handler = logging.FileHandler(log_file, encoding="utf-8")
            file_handler.setFormatter(fmt)
            root.addHandler(file_handler)

    return root
