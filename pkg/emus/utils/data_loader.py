"""
Loader for one-column numeric data files (e.g. measured thicknesses).
Blank lines and lines starting with '#' are ignored; a single non-numeric
first line is treated as a header.
"""

from pathlib import Path
from typing import List, Tuple, Union
import logging

import numpy as np

from emus.errors import DataFormatError
from emus.models.mixture import Dataset

logger = logging.getLogger(__name__)

MAX_FILE_SIZE = 50 * 1024 * 1024


def parse_values(content: str, path: str = "") -> List[float]:
    """
    Parse numeric values from file content, one per line.

    Args:
        content: File content as string
        path: Optional path for error messages

    Returns:
        List of parsed values

    Raises:
        DataFormatError: if a line is not a number (carries the line number)
    """
    values = []
    header_seen = False
    for lineno, raw in enumerate(content.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith('#'):
            continue
        # Allow trailing columns separated by commas; the first is the value
        field = line.split(',')[0].strip()
        try:
            value = float(field)
        except ValueError:
            if not values and not header_seen:
                header_seen = True
                continue
            raise DataFormatError(f"non-numeric value {field!r} in {path or 'input'}", line=lineno)
        if not np.isfinite(value):
            raise DataFormatError(f"non-finite value {field!r} in {path or 'input'}", line=lineno)
        values.append(value)
    return values


def validate_data_file(filepath: Path) -> Tuple[bool, str]:
    """
    Validate that a file can be ingested.

    Returns:
        Tuple of (is_valid, error_message)
    """
    if not filepath.exists():
        return False, f"File not found: {filepath}"

    if filepath.suffix.lower() not in ('.csv', '.txt', '.dat'):
        return False, f"Invalid file type: {filepath.suffix}. Only .csv, .txt and .dat files are supported"

    if filepath.stat().st_size > MAX_FILE_SIZE:
        return False, f"File too large: {filepath.stat().st_size / 1024 / 1024:.1f}MB. Max size is 50MB"

    return True, ""


def ingest_data(path: Union[str, Path], format: str = "csv") -> Dataset:
    """
    Read a one-column numeric file into a Dataset.

    Raises:
        DataFormatError: unreadable file, non-numeric rows or no values
    """
    filepath = Path(path)
    if format != "csv":
        raise DataFormatError(f"Unsupported data format '{format}'")
    ok, message = validate_data_file(filepath)
    if not ok:
        raise DataFormatError(message)

    with open(filepath, 'r', encoding='utf-8') as f:
        content = f.read()

    values = parse_values(content, str(filepath))
    if not values:
        raise DataFormatError(f"No numeric values in {filepath}")

    data = Dataset(y=np.array(values), source=str(filepath))
    report = data.validation_report()
    logger.info(
        f"Ingested {report['n']} values from {filepath} "
        f"(range [{report['min']:g}, {report['max']:g}], {report['distinct']} distinct)"
    )
    return data
