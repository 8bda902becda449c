import os
import shutil
import tempfile
from collections.abc import Iterator
from contextlib import contextmanager
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np

from metaknn.exceptions import NumericError


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """
    Numerically stable log-softmax with max-subtraction.

    Parameters
    ----------
    logits : np.ndarray
        Array of logits.
    axis : int, optional
        Axis over which to normalize, by default the last one.

    Returns
    -------
    np.ndarray
        Log-probabilities with the same shape as ``logits``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax with max-subtraction."""
    logits = np.asarray(logits, dtype=np.float64)
    weights = np.exp(logits - np.max(logits, axis=axis, keepdims=True))
    return weights / np.sum(weights, axis=axis, keepdims=True)


def one_hot(values: np.ndarray, vocab_size: int) -> np.ndarray:
    """Dense one-hot matrix with one row per token id."""
    values = np.asarray(values, dtype=np.int64)
    dense = np.zeros((values.shape[0], vocab_size), dtype=np.float64)
    dense[np.arange(values.shape[0]), values] = 1.0
    return dense


def ensure_finite(array, name: str) -> np.ndarray:
    """
    Raise a :class:`NumericError` when an array holds NaN or infinite entries.

    Parameters
    ----------
    array : array-like
        Values to check.
    name : str
        Name used in the error message.

    Returns
    -------
    np.ndarray
        The input as an array.
    """
    array = np.asarray(array)
    if not np.all(np.isfinite(array)):
        bad = int(np.flatnonzero(~np.isfinite(array.ravel()))[0])
        raise NumericError(f"{name} contains a non-finite value at flat index {bad}")
    return array


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1.0) -> np.ndarray:
    """
    Elementwise |a - b| / max(floor, |a|, |b|).

    With the default floor of 1 the error is absolute for entries smaller than one and relative
    above; a tiny floor gives the plain relative error.
    """
    if floor <= 0:
        raise ValueError(f"Floor {floor} must be positive")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(floor, np.maximum(np.abs(a), np.abs(b)))


@contextmanager
def atomic_path(path, copy_existing: bool = False) -> Iterator[Path]:
    """
    Yield a temporary path next to ``path`` that replaces it on a clean exit.

    Parameters
    ----------
    path : str or Path
        Final destination; parent directories are created.
    copy_existing : bool, optional
        Start the temporary file as a copy of an existing ``path``, for writers that update a
        file in place (HDF5 append mode). Otherwise the temporary path does not exist yet.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        if copy_existing and path.exists():
            shutil.copyfile(path, tmp)
        else:
            os.remove(tmp)
        yield Path(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def atomic_write_bytes(path, payload: bytes) -> None:
    """
    Write ``payload`` to ``path`` through a temporary file and a rename, so readers never
    observe a half-written file.
    """
    with atomic_path(path) as tmp:
        tmp.write_bytes(payload)


def atomic_write_text(path, text: str) -> None:
    """Text counterpart of :func:`atomic_write_bytes` (UTF-8)."""
    atomic_write_bytes(path, text.encode("utf-8"))


def tool_version() -> str:
    """Installed version of metaknn, or ``"unknown"`` when running from a source tree."""
    try:
        return version("metaknn")
    except PackageNotFoundError:
        return "unknown"
