# src/ale_flow_lab/utils.py
import os
import tempfile
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

# --- Configuration ---
CSV_FLOAT_FORMAT = "{:.17e}"  # Full precision, round-trips through float()


class LabError(Exception):
    """Base class for every error raised by the lab."""
    pass


class GridError(LabError, ValueError):
    """Exception raised when grid parameters are rejected."""
    pass


class BackgroundError(LabError, ValueError):
    """Exception raised when background metric parameters are rejected."""
    pass


class FieldError(LabError, ValueError):
    """Exception raised for non-finite or mis-shaped tensor fields."""
    pass


class MetricError(LabError):
    """Exception raised when g0 + h stops being positive definite."""

    def __init__(self, message: str, node: int):
        super().__init__(message)
        self.node = node


class AssemblyError(LabError):
    """Exception raised when an assembled operator fails its symmetry check."""

    def __init__(self, message: str, asymmetry: float):
        super().__init__(message)
        self.asymmetry = asymmetry


class ConvergenceError(LabError):
    """Exception raised when the eigensolver does not converge."""

    def __init__(self, message: str, best_residual: float):
        super().__init__(message)
        self.best_residual = best_residual


class StationarityError(LabError, ValueError):
    """Exception raised when a reference metric is not a stationary point."""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


class ConfigError(LabError, ValueError):
    """Exception raised for invalid configuration text or values."""

    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        location = []
        if key is not None:
            location.append(f"key '{key}'")
        if line is not None:
            location.append(f"line {line}")
        prefix = f"{', '.join(location)}: " if location else ""
        super().__init__(prefix + message)
        self.key = key
        self.line = line


class ReportError(LabError):
    """Exception raised when report files cannot be written."""

    def __init__(self, message: str, path: str):
        super().__init__(f"{message} ({path})")
        self.path = path


def check_finite(values: np.ndarray, what: str) -> None:
    """
    Rejects arrays holding NaN or infinite entries.

    Args:
        values: Array to inspect
        what: Name used in the error message

    Raises:
        FieldError: If any entry is not finite
    """
    values = np.asarray(values)
    if not np.all(np.isfinite(values)):
        bad = np.argwhere(~np.isfinite(values))[0]
        raise FieldError(f"{what} has a non-finite entry at index {tuple(int(i) for i in bad)}")


def read_text(filepath: str) -> str:
    """
    Reads a UTF-8 text file.

    Args:
        filepath: Path to the file to read

    Returns:
        Content of the file

    Raises:
        ConfigError: If the file cannot be read
    """
    try:
        with open(filepath, "r", encoding="utf-8") as f:
            return f.read()
    except (OSError, UnicodeDecodeError) as e:
        raise ConfigError(f"cannot read {filepath}: {e}")


def write_text_atomic(text: str, filepath: str) -> str:
    """
    Writes text next to its destination and renames it into place.

    A reader never sees a half-written file: the previous version is replaced
    in a single rename.

    Args:
        text: Content to save
        filepath: Destination path

    Returns:
        The destination path

    Raises:
        ReportError: If the directory is not writable
    """
    directory = os.path.dirname(os.path.abspath(filepath))
    tmp_path = None
    try:
        os.makedirs(directory, exist_ok=True)
        fd, tmp_path = tempfile.mkstemp(prefix=".tmp_", dir=directory)
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp_path, filepath)
        return filepath
    except OSError as e:
        if tmp_path is not None and os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise ReportError(f"cannot write file: {e}", filepath)


def format_float(value: float) -> str:
    """Formats a float for CSV/summary output in full precision."""
    return CSV_FLOAT_FORMAT.format(float(value))


def render_csv(header: Sequence[str], rows: Iterable[Sequence[object]]) -> str:
    """
    Renders a header row plus data rows as CSV text.

    Floats are written in scientific notation with 17 significant digits,
    everything else through str().
    """
    lines: List[str] = [",".join(header)]
    for row in rows:
        cells = []
        for cell in row:
            if isinstance(cell, (float, np.floating)):
                cells.append(format_float(cell))
            else:
                cells.append(str(cell))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def setup_output_directory(base_dir: str, subdirs: Sequence[str] = ()) -> Dict[str, str]:
    """
    Creates the output directory layout of a run.

    Args:
        base_dir: Output directory
        subdirs: Names of subdirectories to create below it

    Returns:
        Dictionary of directory paths keyed by name ("base" for the root)

    Raises:
        ReportError: If a directory cannot be created
    """
    dirs = {"base": base_dir}
    for name in subdirs:
        dirs[name] = os.path.join(base_dir, name)
    for dir_path in dirs.values():
        try:
            os.makedirs(dir_path, exist_ok=True)
        except OSError as e:
            raise ReportError(f"cannot create directory: {e}", dir_path)
    return dirs

