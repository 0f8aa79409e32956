# core/logger.py

"""
logger.py
=========

Configures and provides the logger shared by every StringSpline module.

This module creates a dedicated logs directory, names a log file after the
current timestamp, and configures logging to write both to that file and to
the console. Fits, simulations and benchmark studies all report through the
single `logger` instance so that one run leaves one readable log.

Attributes
----------
LOG_DIR : str
    The directory path where log files are stored. Overridden by the
    ``STRINGSPLINE_LOG_DIR`` environment variable.
LOG_LEVEL : int
    Logging level, taken from ``STRINGSPLINE_LOG_LEVEL`` (default ``INFO``).
log_filepath : str or None
    Full path of the current log file, or None when file logging is disabled
    with ``STRINGSPLINE_LOG_FILE=0``.
logger : logging.Logger
    The configured logger instance used for logging messages.

Usage
-----
To use the logger in other modules, import the `logger` instance:

    from .logger import logger

    logger.info("Penalty matrix assembled.")
    logger.error("Cholesky factorization failed.")

"""

import logging
import os
from datetime import datetime

from dotenv import load_dotenv

load_dotenv()

# Create a logs directory if it doesn't exist
LOG_DIR = os.environ.get(
    "STRINGSPLINE_LOG_DIR",
    os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "logs"),
)
LOG_LEVEL = getattr(
    logging, os.environ.get("STRINGSPLINE_LOG_LEVEL", "INFO").upper(), logging.INFO
)

handlers = [logging.StreamHandler()]
log_filepath = None
if os.environ.get("STRINGSPLINE_LOG_FILE", "1") != "0":
    os.makedirs(LOG_DIR, exist_ok=True)
    # Define log file name with timestamp
    log_filename = datetime.now().strftime("stringspline_%Y%m%d_%H%M%S.log")
    log_filepath = os.path.join(LOG_DIR, log_filename)
    handlers.append(logging.FileHandler(log_filepath))

# Configure logging
logging.basicConfig(
    level=LOG_LEVEL,
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    handlers=handlers,
)

# Initialize the logger
logger = logging.getLogger("StringSpline")
logger.debug(f"Logger '{logger.name}' initialized.")
