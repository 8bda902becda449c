"""Little-endian record files shared by the datastore ("KNDS") and context-pair ("KNCP") formats.

Layout: magic (4 bytes), version u16, dim u32, vocab_size u32, count u64, then ``count`` packed
records of ``dim`` float32 values followed by a uint32 token id.
"""

__all__ = ["HEADER", "record_dtype", "encode_records", "decode_records"]

import struct

import numpy as np

from metaknn.constants import FORMAT_VERSION
from metaknn.exceptions import DatastoreFormatError

HEADER = struct.Struct("<4sHIIQ")


def record_dtype(dim: int) -> np.dtype:
    """Packed structured dtype of one record."""
    return np.dtype([("key", "<f4", (dim,)), ("value", "<u4")])


def encode_records(magic: bytes, dim: int, vocab_size: int, keys: np.ndarray, values: np.ndarray) -> bytes:
    """
    Serialize keys and token ids into the binary record layout.

    Parameters
    ----------
    magic : bytes
        Four-byte file signature.
    dim : int
        Vector dimension.
    vocab_size : int
        Vocabulary size stored in the header.
    keys : np.ndarray
        ``(count, dim)`` array, written as float32.
    values : np.ndarray
        ``(count,)`` token ids, written as uint32.

    Returns
    -------
    bytes
        The complete file content.
    """
    count = int(values.shape[0])
    records = np.empty(count, dtype=record_dtype(dim))
    if count:
        records["key"] = np.asarray(keys, dtype="<f4").reshape(count, dim)
        records["value"] = np.asarray(values, dtype="<u4")
    return HEADER.pack(magic, FORMAT_VERSION, dim, vocab_size, count) + records.tobytes()


def decode_records(payload: bytes, magic: bytes) -> tuple[int, int, np.ndarray, np.ndarray]:
    """
    Parse the binary record layout.

    Parameters
    ----------
    payload : bytes
        Complete file content.
    magic : bytes
        Expected four-byte signature.

    Returns
    -------
    tuple
        ``(dim, vocab_size, keys, values)`` with float32 keys of shape ``(count, dim)`` and
        uint32 values.

    Raises
    ------
    DatastoreFormatError
        ``bad_magic`` for a wrong signature, ``version_mismatch`` for an unknown version,
        ``truncated`` when the header or the records are incomplete, ``bad_header`` for a zero
        dimension or vocabulary size and ``trailing_bytes`` for data after the last record.
    """
    if len(payload) < 4 or payload[:4] != magic:
        raise DatastoreFormatError("bad_magic", f"bad magic: expected {magic!r}, found {payload[:4]!r}")
    if len(payload) < HEADER.size:
        raise DatastoreFormatError("truncated", f"truncated file: header needs {HEADER.size} bytes")
    _, version, dim, vocab_size, count = HEADER.unpack_from(payload)
    if version != FORMAT_VERSION:
        raise DatastoreFormatError("version_mismatch", f"version mismatch: expected {FORMAT_VERSION}, found {version}")
    if dim == 0 or vocab_size == 0:
        raise DatastoreFormatError("bad_header", f"bad header: dim={dim} and vocab_size={vocab_size} must be positive")

    dtype = record_dtype(dim)
    available = len(payload) - HEADER.size
    if count * dtype.itemsize > available:
        raise DatastoreFormatError(
            "truncated", f"truncated file: {count} records need {count * dtype.itemsize} bytes, {available} remain"
        )
    if count * dtype.itemsize < available:
        raise DatastoreFormatError(
            "trailing_bytes", f"{available - count * dtype.itemsize} bytes follow the last of {count} records"
        )
    records = np.frombuffer(payload, dtype=dtype, count=count, offset=HEADER.size)
    keys = np.array(records["key"], dtype=np.float32).reshape(count, dim)
    values = np.array(records["value"], dtype=np.uint32)
    return dim, vocab_size, keys, values
