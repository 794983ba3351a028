import math
import subprocess
from typing import List, Optional, Sequence, Tuple

import numpy as np

from app.utils.errors import ParameterError


def format_float(value: float) -> str:
    """Shortest round-trip decimal, `nan` for missing values"""
    value = float(value)
    if math.isnan(value):
        return 'nan'
    return repr(value)


def parse_bool(text: str) -> bool:
    """Parse a config flag"""
    lowered = str(text).strip().lower()
    if lowered in ('true', '1', 'yes', 'on'):
        return True
    if lowered in ('false', '0', 'no', 'off', ''):
        return False
    raise ParameterError(f"not a boolean: {text!r}")


def parse_float_list(text: str) -> List[float]:
    """Parse `0.1, 0.05,0.025` into floats; empty text gives an empty list"""
    if text is None or not str(text).strip():
        return []
    try:
        return [float(item) for item in str(text).split(',') if item.strip()]
    except ValueError as exc:
        raise ParameterError(f"not a list of numbers: {text!r}") from exc


def loglog_slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Least-squares slope of log(ys) against log(xs)"""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.size != y.size:
        raise ParameterError("slope fit needs matching x and y lengths")
    if x.size < 3:
        raise ParameterError(f"slope fit needs at least 3 points, got {x.size}")
    if np.any(x <= 0) or np.any(y <= 0):
        raise ParameterError("slope fit needs strictly positive values")
    slope, _ = np.polyfit(np.log(x), np.log(y), 1)
    return float(slope)


def as_points(x, dim: int) -> Tuple[np.ndarray, Tuple[int, ...]]:
    """Flatten an input to an (n, dim) array and return the batch shape.

    For dim == 1 bare scalars and 1-D arrays are point collections; an
    explicit trailing axis of length 1 is also accepted.
    """
    arr = np.asarray(x, dtype=float)
    if dim == 1 and not (arr.ndim >= 2 and arr.shape[-1] == 1):
        batch = arr.shape
    else:
        if arr.ndim == 0 or arr.shape[-1] != dim:
            raise ParameterError(f"expected trailing axis of length {dim}, got shape {arr.shape}")
        batch = arr.shape[:-1]
    return arr.reshape(-1, dim), batch


def restore_vectors(values: np.ndarray, batch: Tuple[int, ...], dim: int, like) -> np.ndarray:
    """Reshape (n, dim) results back to the caller's layout"""
    return values.reshape(np.shape(like)) if dim == 1 else values.reshape(batch + (dim,))


def git_describe(cwd: Optional[str] = None) -> str:
    """`git describe --always --dirty`, or 'unknown' outside a checkout"""
    try:
        result = subprocess.run(
            ['git', 'describe', '--always', '--dirty'],
            cwd=cwd, capture_output=True, text=True, timeout=10, check=False,
        )
    except (OSError, subprocess.SubprocessError):
        return 'unknown'
    described = result.stdout.strip()
    return described if result.returncode == 0 and described else 'unknown'


def first_index_below(series: Sequence[float], threshold: float) -> Optional[int]:
    """Index of the first value <= threshold"""
    for index, value in enumerate(series):
        if value <= threshold:
            return index
    return None
