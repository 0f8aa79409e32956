# core/settings.py

import os
from dataclasses import dataclass
from typing import Optional

from dotenv import load_dotenv

from .logger import logger


class SettingsError(Exception):
    """
    Custom exception for malformed environment settings.

    Attributes
    ----------
    message : str
        Explanation of the error.
    """

    def __init__(self, message):
        """
        Initialize the SettingsError with a message.

        Parameters
        ----------
        message : str
            Explanation of the error.
        """
        super().__init__(message)
        self.message = message


@dataclass(frozen=True)
class Settings:
    """
    Runtime defaults read from the environment (and a ``.env`` file).

    Attributes
    ----------
    seed : int
        Manifest seed used when no ``--seed`` flag is given.
    out_dir : str
        Default output directory for CLI commands.
    workers : int
        Process count for benchmark studies; 1 runs cells inline.
    burn_in, steps, thin : int
        Default Gibbs schedule.
    """

    seed: int = 0
    out_dir: str = "output"
    workers: int = 1
    burn_in: int = 2500
    steps: int = 25000
    thin: int = 5


def _read_int(key: str, default: int, minimum: int = 0) -> int:
    raw = os.environ.get(key)
    if raw is None or raw == "":
        return default
    try:
        value = int(raw)
    except ValueError as e:
        logger.error(f"Environment variable {key}={raw!r} is not an integer.")
        raise SettingsError(f"{key} must be an integer, got {raw!r}.") from e
    if value < minimum:
        logger.error(f"Environment variable {key}={value} is below {minimum}.")
        raise SettingsError(f"{key} must be >= {minimum}, got {value}.")
    return value


def load_settings(dotenv_path: Optional[str] = None) -> Settings:
    """
    Load settings from the process environment after reading ``.env``.

    Parameters
    ----------
    dotenv_path : str, optional
        Explicit path to a ``.env`` file. Defaults to python-dotenv's lookup.

    Returns
    -------
    Settings
        The populated settings.

    Raises
    ------
    SettingsError
        If any variable is malformed.
    """
    load_dotenv(dotenv_path)
    settings = Settings(
        seed=_read_int("STRINGSPLINE_SEED", 0),
        out_dir=os.environ.get("STRINGSPLINE_OUT_DIR", "output"),
        workers=_read_int("STRINGSPLINE_WORKERS", 1, minimum=1),
        burn_in=_read_int("STRINGSPLINE_BURN_IN", 2500),
        steps=_read_int("STRINGSPLINE_STEPS", 25000, minimum=1),
        thin=_read_int("STRINGSPLINE_THIN", 5, minimum=1),
    )
    logger.debug(f"Loaded settings: {settings}")
    return settings
