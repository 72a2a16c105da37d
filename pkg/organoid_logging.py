"""
Logging setup for the organoid pipeline
"""

import logging
import os
import sys

LOG_FORMAT = "%(asctime)s %(levelname)-7s %(name)s: %(message)s"


def setup_logging(level: str = None) -> None:
    """Configure the root logger once; ORGANOID_LOG_LEVEL wins when no level is passed"""
    level = (level or os.getenv("ORGANOID_LOG_LEVEL", "INFO")).upper()
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr, force=True)
    # matplotlib and PIL are chatty at DEBUG
    for noisy in ("matplotlib", "PIL"):
        logging.getLogger(noisy).setLevel(max(logging.INFO, logging.getLogger().level))


def progress_enabled() -> bool:
    """tqdm bars only when attached to a terminal"""
    return sys.stderr.isatty()
