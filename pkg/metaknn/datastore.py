"""Module containing the Datastore and NeighborSet classes, the key-value translation memory
of (context vector, next token) pairs and the result of an exact top-k search over it.
"""

__all__ = ["Metric", "Datastore", "NeighborSet"]

import logging
from collections.abc import Iterable
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from metaknn.constants import DATASTORE_MAGIC
from metaknn.exceptions import EmptyDatastoreError, MissingInputError
from metaknn.fileformat import decode_records, encode_records
from metaknn.utils import atomic_write_bytes

logger = logging.getLogger(__name__)


class Metric(str, Enum):
    """Similarity used to rank datastore keys against a query."""

    INNER_PRODUCT = "ip"
    NEGATIVE_L2 = "l2"

    @classmethod
    def parse(cls, value: "str | Metric") -> "Metric":
        """Accept a Metric or one of ``"ip"``, ``"l2"``, ``"inner-product"``, ``"negative-l2"``."""
        if isinstance(value, Metric):
            return value
        aliases = {"inner-product": cls.INNER_PRODUCT, "negative-l2": cls.NEGATIVE_L2}
        key = str(value).lower()
        if key in aliases:
            return aliases[key]
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"Unknown metric '{value}'. Expected 'ip' or 'l2'.") from None

    def score(self, keys: np.ndarray, query: np.ndarray) -> np.ndarray:
        """
        Score every key against a query in double precision.

        Parameters
        ----------
        keys : np.ndarray
            ``(n, dim)`` key matrix.
        query : np.ndarray
            ``(dim,)`` query vector.

        Returns
        -------
        np.ndarray
            ``key . query`` for the inner product, ``-||key - query||^2`` for negative L2.
        """
        keys = np.asarray(keys, dtype=np.float64)
        query = np.asarray(query, dtype=np.float64)
        if self is Metric.INNER_PRODUCT:
            return keys @ query
        diff = keys - query
        return -np.einsum("ij,ij->i", diff, diff)


@dataclass(frozen=True)
class NeighborSet:
    """
    Ordered result of a top-k search.

    Entries are sorted by non-increasing score, ties broken by ascending datastore index.

    Attributes
    ----------
    indices : np.ndarray
        Datastore indices of the neighbors.
    keys : np.ndarray
        ``(length, dim)`` keys of the neighbors (the K_m matrix, one key per row).
    values : np.ndarray
        Token ids of the neighbors (the V_m matrix in sparse form).
    scores : np.ndarray
        Similarity of each neighbor to the query.
    metric : Metric
        Metric the scores were computed with.
    query_dim : int
        Dimension of the query.
    """

    indices: np.ndarray
    keys: np.ndarray
    values: np.ndarray
    scores: np.ndarray
    metric: Metric
    query_dim: int

    def __post_init__(self):
        if not isinstance(self.metric, Metric):
            raise TypeError(f"Metric {self.metric} must be a Metric")
        n = len(self.indices)
        if not (len(self.values) == len(self.scores) == n and self.keys.shape == (n, self.query_dim)):
            raise ValueError("Neighbor indices, keys, values and scores must have matching lengths")

    def __len__(self):
        return len(self.indices)

    def __iter__(self):
        for i in range(len(self)):
            yield int(self.indices[i]), self.keys[i], int(self.values[i]), float(self.scores[i])

    def head(self, k: int) -> "NeighborSet":
        """Return the first ``k`` neighbors, which is the exact top-``k`` because of the ordering."""
        return NeighborSet(
            indices=self.indices[:k],
            keys=self.keys[:k],
            values=self.values[:k],
            scores=self.scores[:k],
            metric=self.metric,
            query_dim=self.query_dim,
        )


@dataclass(frozen=True)
class Datastore:
    """
    Key-value memory of context vectors and the token ids that followed them.

    Keys are stored as float32; scoring accumulates in float64. The datastore is immutable
    after :meth:`build`, so concurrent searches are safe.

    Attributes
    ----------
    dim : int
        Dimension of the context vectors.
    vocab_size : int
        Size of the target vocabulary; every value is smaller than it.
    keys : np.ndarray
        ``(count, dim)`` float32 keys in insertion order.
    values : np.ndarray
        ``(count,)`` uint32 token ids in insertion order.
    """

    dim: int
    vocab_size: int
    keys: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if not isinstance(self.dim, (int, np.integer)) or self.dim < 1:
            raise ValueError(f"Datastore dim {self.dim} must be a positive integer")
        if not isinstance(self.vocab_size, (int, np.integer)) or self.vocab_size < 1:
            raise ValueError(f"Datastore vocab_size {self.vocab_size} must be a positive integer")
        if self.keys.shape != (len(self.values), self.dim):
            raise ValueError(
                f"Keys of shape {self.keys.shape} do not match {len(self.values)} values of dim {self.dim}"
            )
        if not np.all(np.isfinite(self.keys)):
            raise ValueError("Datastore keys must be finite")
        if len(self.values) and int(self.values.max()) >= self.vocab_size:
            raise ValueError(f"Token id {int(self.values.max())} out of range for vocab_size {self.vocab_size}")

    @property
    def count(self) -> int:
        """Number of stored pairs."""
        return int(self.values.shape[0])

    def __len__(self):
        return self.count

    @classmethod
    def build(cls, pairs: Iterable[tuple[np.ndarray, int]], dim: int, vocab_size: int) -> "Datastore":
        """
        Build a datastore from (context vector, token id) pairs, preserving their order.

        Parameters
        ----------
        pairs : iterable of (array-like, int)
            The pairs to store. Duplicates are allowed.
        dim : int
            Dimension every context vector must have.
        vocab_size : int
            Exclusive upper bound of the token ids.

        Returns
        -------
        Datastore
            A datastore whose i-th entry is the i-th pair.

        Raises
        ------
        ValueError
            If a vector has the wrong length, is not finite, or a token id is out of range.
            The message names the offending index.
        """
        keys = []
        values = []
        for i, (vector, token) in enumerate(pairs):
            vector = np.asarray(vector, dtype=np.float64).ravel()
            if vector.shape[0] != dim:
                raise ValueError(f"Pair {i}: vector has length {vector.shape[0]}, expected dim {dim}")
            if not np.all(np.isfinite(vector)):
                raise ValueError(f"Pair {i}: vector is not finite")
            if not 0 <= int(token) < vocab_size:
                raise ValueError(f"Pair {i}: token id {token} out of range for vocab_size {vocab_size}")
            keys.append(vector)
            values.append(int(token))

        keys_array = np.asarray(keys, dtype=np.float32).reshape(len(keys), dim)
        return cls(dim=dim, vocab_size=vocab_size, keys=keys_array, values=np.asarray(values, dtype=np.uint32))

    @classmethod
    def from_arrays(cls, keys: np.ndarray, values: np.ndarray, vocab_size: int) -> "Datastore":
        """Vectorized counterpart of :meth:`build` for already stacked arrays."""
        keys = np.asarray(keys)
        if keys.ndim != 2:
            raise ValueError(f"Keys must be a 2-D array, got shape {keys.shape}")
        values = np.asarray(values)
        if len(values) and (values.min() < 0 or values.max() >= vocab_size):
            bad = int(np.flatnonzero((values < 0) | (values >= vocab_size))[0])
            raise ValueError(f"Pair {bad}: token id {values[bad]} out of range for vocab_size {vocab_size}")
        return cls(
            dim=int(keys.shape[1]),
            vocab_size=vocab_size,
            keys=keys.astype(np.float32),
            values=values.astype(np.uint32),
        )

    def search(self, query: np.ndarray, k: int, metric: "Metric | str" = Metric.INNER_PRODUCT) -> NeighborSet:
        """
        Exact top-k retrieval by full scan.

        Parameters
        ----------
        query : np.ndarray
            Context vector of length ``dim``.
        k : int
            Number of neighbors. When larger than the datastore, every entry is returned.
        metric : Metric or str, optional
            Inner product (default) or negative squared L2.

        Returns
        -------
        NeighborSet
            ``min(k, count)`` neighbors sorted by non-increasing score, ties by ascending index.

        Raises
        ------
        EmptyDatastoreError
            If the datastore has no entries.
        ValueError
            If ``k < 1`` or the query dimension differs from ``dim``.
        """
        metric = Metric.parse(metric)
        if self.count == 0:
            raise EmptyDatastoreError()
        if int(k) < 1:
            raise ValueError(f"k must be a positive integer, got {k}")
        query = np.asarray(query, dtype=np.float64).ravel()
        if query.shape[0] != self.dim:
            raise ValueError(f"Query has dim {query.shape[0]}, datastore has dim {self.dim}")

        scores = metric.score(self.keys, query)
        top = _top_k(scores, min(int(k), self.count))
        return NeighborSet(
            indices=top,
            keys=self.keys[top],
            values=self.values[top],
            scores=scores[top],
            metric=metric,
            query_dim=self.dim,
        )

    def save(self, path) -> None:
        """
        Write the datastore in the little-endian "KNDS" format.

        Parameters
        ----------
        path : str or Path
            Destination file. Written atomically.
        """
        atomic_write_bytes(path, encode_records(DATASTORE_MAGIC, self.dim, self.vocab_size, self.keys, self.values))
        logger.debug("Saved datastore with %d entries to %s", self.count, path)

    @classmethod
    def load(cls, path) -> "Datastore":
        """
        Read a datastore written by :meth:`save`.

        Raises
        ------
        MissingInputError
            If ``path`` does not exist.
        DatastoreFormatError
            On a bad magic, a version mismatch or a truncated file.
        """
        path = Path(path)
        if not path.exists():
            raise MissingInputError(f"Datastore file '{path}' not found")
        dim, vocab_size, keys, values = decode_records(path.read_bytes(), DATASTORE_MAGIC)
        return cls(dim=dim, vocab_size=vocab_size, keys=keys, values=values)


def _top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k best scores, sorted by score descending then index ascending."""
    n = scores.shape[0]
    if k < n:
        # Keep every index tied with the k-th best score so the index tie-break sees all of them.
        threshold = np.partition(scores, n - k)[n - k]
        candidates = np.flatnonzero(scores >= threshold)
    else:
        candidates = np.arange(n)
    order = np.lexsort((candidates, -scores[candidates]))
    return candidates[order][:k]
