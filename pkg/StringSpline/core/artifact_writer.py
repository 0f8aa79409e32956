# core/artifact_writer.py

import json
import platform
import re
import shutil
import tempfile
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
import scipy

from .logger import logger
from .model import SampleSet

STRINGSPLINE_VERSION = "0.1.0"
SCALAR_COLUMNS = ["r", "y"]
PARTICLE_COLUMNS = ["frame", "id", "type", "x", "y", "z", "fx", "fy", "fz"]


class ArtifactWriterError(Exception):
    """
    Custom exception for ArtifactWriter-related errors.

    Attributes
    ----------
    message : str
        Explanation of the error.
    """

    def __init__(self, message):
        """
        Initialize the ArtifactWriterError with a message.

        Parameters
        ----------
        message : str
            Explanation of the error.
        """
        super().__init__(message)
        self.message = message


class DataFormatError(ArtifactWriterError):
    """
    Raised for malformed input tables.

    Attributes
    ----------
    message : str
        Explanation of the error.
    line : int or None
        1-based file line of the first offending row (the header is line 1).
    """

    def __init__(self, message, line=None):
        """
        Initialize the DataFormatError with a message and the offending line.

        Parameters
        ----------
        message : str
            Explanation of the error.
        line : int, optional
            1-based file line; prefixed to the message when given.
        """
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


def _to_builtin(value):
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.bool_):
        return bool(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


@dataclass
class RunManifest:
    """
    Provenance of one CLI run, written before any computation.

    Attributes
    ----------
    command : str
    config : str or None
        Path of the JSON config.
    seed : int
    out_dir : str
    arguments : dict
        Effective options after merging flags, config and environment.
    versions : dict
    started_at : str
    """

    command: str
    config: Optional[str]
    seed: int
    out_dir: str
    arguments: dict = field(default_factory=dict)
    versions: dict = field(default_factory=dict)
    started_at: str = ""

    @classmethod
    def create(cls, command: str, config: Optional[str], seed: int, out_dir: str, arguments: dict) -> "RunManifest":
        return cls(
            command=command,
            config=config,
            seed=seed,
            out_dir=str(out_dir),
            arguments=arguments,
            versions={
                "python": platform.python_version(),
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "pandas": pd.__version__,
                "StringSpline": STRINGSPLINE_VERSION,
            },
            started_at=datetime.now().isoformat(timespec="seconds"),
        )

    def to_dict(self) -> dict:
        return asdict(self)


class ArtifactWriter:
    """
    Writes run artifacts into one output directory.

    Every file is written to a temporary file in the target directory first
    and then moved into place, so readers never see a partial artifact.
    """

    def __init__(self, out_dir):
        """
        Initialize the ArtifactWriter and create the output directory.

        Parameters
        ----------
        out_dir : str or Path
            Directory receiving the artifacts.

        Raises
        ------
        ArtifactWriterError
            If the directory cannot be created.
        """
        self.out_dir = Path(out_dir)
        try:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            logger.error(f"Failed to create output directory {self.out_dir}: {e}")
            raise ArtifactWriterError(f"Failed to create output directory {self.out_dir}.") from e
        self.written = []

    def path(self, name: str) -> Path:
        return self.out_dir / name

    def write_text(self, name: str, text: str) -> Path:
        """
        Atomically write ``text`` to ``out_dir/name``.

        Raises
        ------
        ArtifactWriterError
            If the file cannot be written.
        """
        target = self.path(name)
        try:
            with tempfile.NamedTemporaryFile(
                "w", delete=False, dir=self.out_dir, prefix=f".{name}.", suffix=".tmp", newline=""
            ) as tmp_file:
                tmp_file.write(text)
                temp_path = Path(tmp_file.name)
            shutil.move(str(temp_path), target)
        except OSError as e:
            logger.error(f"Failed to write {target}: {e}")
            raise ArtifactWriterError(f"Failed to write {target}.") from e
        self.written.append(target)
        logger.info(f"Wrote {target}")
        return target

    def write_csv(self, name: str, frame: pd.DataFrame) -> Path:
        return self.write_text(name, frame.to_csv(index=False, float_format="%.17g", lineterminator="\n"))

    def write_json(self, name: str, payload: dict) -> Path:
        return self.write_text(name, json.dumps(payload, sort_keys=True, indent=2, default=_to_builtin) + "\n")

    def write_manifest(self, manifest: RunManifest) -> Path:
        return self.write_json("manifest.json", manifest.to_dict())


# --- readers ---------------------------------------------------------------------


_LINE_PATTERN = re.compile(r"line (\d+)")


def _read_table(path, required) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except FileNotFoundError as e:
        logger.error(f"Data file {path} not found.")
        raise DataFormatError(f"Data file {path} not found.") from e
    except pd.errors.EmptyDataError as e:
        raise DataFormatError(f"{path} is empty; a header row is required.", line=1) from e
    except pd.errors.ParserError as e:
        match = _LINE_PATTERN.search(str(e))
        line = int(match.group(1)) if match else None
        logger.error(f"Malformed CSV {path}: {e}")
        raise DataFormatError(f"Malformed row in {path}.", line=line) from e
    columns = [c.strip() for c in frame.columns]
    frame.columns = columns
    missing = [c for c in required if c not in columns]
    if missing:
        raise DataFormatError(f"{path} header {columns} lacks columns {missing}.", line=1)
    if frame.empty:
        raise DataFormatError(f"{path} has a header but no rows.", line=2)
    return frame


def _parse_cell(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        return np.nan


def _parse_column(cells: pd.Series) -> pd.Series:
    """Round-trip exact float parse; unparsable cells become NaN."""
    stripped = cells.str.strip()
    try:
        return stripped.astype(float)
    except ValueError:
        return stripped.map(_parse_cell).astype(float)


def _numeric(frame: pd.DataFrame, columns, path) -> pd.DataFrame:
    out = pd.DataFrame(index=frame.index)
    bad_rows = []
    for column in columns:
        values = _parse_column(frame[column])
        invalid = values.isna() | ~np.isfinite(values.to_numpy(dtype=float, na_value=np.nan))
        if invalid.any():
            bad_rows.append((int(np.flatnonzero(invalid.to_numpy())[0]), column))
        out[column] = values
    if bad_rows:
        row, column = min(bad_rows)
        raise DataFormatError(
            f"Non-numeric or non-finite value {frame[column].iloc[row]!r} in column '{column}' of {path}.",
            line=row + 2,
        )
    return out


def read_scalar_csv(path) -> SampleSet:
    """
    Read a scalar table with columns ``r`` and ``y`` (extra inputs ``r1``, ``r2``, ...).

    Raises
    ------
    DataFormatError
        With the 1-based line of the first malformed row.
    """
    frame = _read_table(path, SCALAR_COLUMNS)
    inputs = ["r"] + sorted((c for c in frame.columns if re.fullmatch(r"r\d+", c)), key=lambda c: int(c[1:]))
    numeric = _numeric(frame, inputs + ["y"], path)
    logger.info(f"Read {len(frame)} scalar samples from {path}.")
    return SampleSet(inputs=numeric[inputs].to_numpy(), targets=numeric["y"].to_numpy())


def read_particle_csv(path, box: float) -> SampleSet:
    """
    Read particle frames with columns frame, id, type, x, y, z, fx, fy, fz.

    Every frame must list the same particle ids 0..n-1 with the same types.

    Raises
    ------
    DataFormatError
        With the 1-based line of the first malformed row.
    """
    frame = _read_table(path, PARTICLE_COLUMNS)
    numeric = _numeric(frame, [c for c in PARTICLE_COLUMNS if c != "type"], path)
    for column in ("frame", "id"):
        values = numeric[column].to_numpy()
        fractional = np.flatnonzero((values != np.round(values)) | (values < 0))
        if fractional.size:
            raise DataFormatError(f"Column '{column}' must hold non-negative integers.", line=int(fractional[0]) + 2)
    numeric["type"] = frame["type"].str.strip()
    blank = np.flatnonzero(numeric["type"].to_numpy() == "")
    if blank.size:
        raise DataFormatError("Empty particle type.", line=int(blank[0]) + 2)
    numeric["line"] = np.arange(len(numeric)) + 2
    numeric = numeric.sort_values(["frame", "id"], kind="stable")
    frame_ids = np.unique(numeric["frame"].to_numpy().astype(int))
    first = numeric[numeric["frame"] == frame_ids[0]]
    n = len(first)
    types = first["type"].to_numpy()
    if not np.array_equal(first["id"].to_numpy().astype(int), np.arange(n)):
        raise DataFormatError(f"Frame {frame_ids[0]} does not list particle ids 0..{n - 1}.", line=int(first["line"].iloc[0]))
    for fid in frame_ids[1:]:
        rows = numeric[numeric["frame"] == fid]
        if len(rows) != n or not np.array_equal(rows["id"].to_numpy().astype(int), np.arange(n)):
            raise DataFormatError(f"Frame {fid} does not list particle ids 0..{n - 1}.", line=int(rows["line"].iloc[0]))
        mismatch = np.flatnonzero(rows["type"].to_numpy() != types)
        if mismatch.size:
            raise DataFormatError(
                f"Particle type changes in frame {fid}.", line=int(rows["line"].iloc[int(mismatch[0])])
            )
    m = frame_ids.size
    positions = numeric[["x", "y", "z"]].to_numpy().reshape(m, n, 3)
    forces = numeric[["fx", "fy", "fz"]].to_numpy().reshape(m, 3 * n)
    logger.info(f"Read {m} frames of {n} particles from {path}.")
    return SampleSet(inputs=positions, targets=forces, particle_types=types, box=box)
