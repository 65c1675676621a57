"""
CSV Export

Writes the tabular artifacts (branch samples, solution maps, value
functions, per-sample verification logs) as UTF-8 CSV with a header row
and round-trip exact '%.17g' floats, and reads them back.
"""

import logging
from pathlib import Path
from typing import Union

import numpy as np
import pandas as pd

from services.errors import ProblemFormatError

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"


def write_csv(frame: pd.DataFrame, path: Union[str, Path]) -> Path:
    """Write frame to path, creating parent directories"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, encoding="utf-8")
    logger.info(f"Wrote {len(frame)} row(s) to {path}")
    return path


def read_csv(path: Union[str, Path]) -> pd.DataFrame:
    """Load a CSV written by write_csv"""
    path = Path(path)
    if path.suffix != ".csv":
        raise ProblemFormatError(f"Unsupported file format: {path}")
    try:
        return pd.read_csv(path, encoding="utf-8", keep_default_na=True, float_precision="round_trip")
    except (OSError, pd.errors.ParserError) as e:
        raise ProblemFormatError(f"Cannot read {path}: {e}") from e


def artifact_path(out: Union[str, Path], stem: str) -> Path:
    """
    Resolve the CSV path of an artifact: out itself when it names a .csv
    file, otherwise out/<stem>.csv
    """
    out = Path(out)
    if out.suffix == ".csv":
        return out
    return out / f"{stem}.csv"


def jsonable(value):
    """Recursively convert numpy containers and scalars to plain Python"""
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer, np.bool_)):
        return value.item()
    if isinstance(value, dict):
        return {k: jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(v) for v in value]
    return value
