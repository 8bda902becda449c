"""Module containing the ContextPairs class: teacher-forced (context vector, gold token) steps
grouped into sequences, with reading and writing of the "KNCP" file format.
"""

__all__ = ["ContextPairs"]

from collections.abc import Iterator
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from metaknn.constants import CONTEXT_MAGIC, SENTINEL_TOKEN
from metaknn.exceptions import MissingInputError
from metaknn.fileformat import decode_records, encode_records
from metaknn.utils import atomic_write_bytes


@dataclass(frozen=True)
class ContextPairs:
    """
    A corpus of teacher-forced decoding steps.

    Attributes
    ----------
    vectors : np.ndarray
        ``(n, dim)`` float32 context vectors, one per step.
    tokens : np.ndarray
        ``(n,)`` gold token ids.
    offsets : np.ndarray
        Sequence boundaries: sequence ``s`` spans steps ``offsets[s]:offsets[s + 1]``.
        Starts with 0 and ends with ``n``.
    vocab_size : int
        Size of the target vocabulary.
    """

    vectors: np.ndarray
    tokens: np.ndarray
    offsets: np.ndarray
    vocab_size: int

    def __post_init__(self):
        if self.vectors.ndim != 2 or self.vectors.shape[0] != self.tokens.shape[0]:
            raise ValueError(f"Vectors {self.vectors.shape} and tokens {self.tokens.shape} are inconsistent")
        if self.offsets[0] != 0 or self.offsets[-1] != len(self.tokens) or np.any(np.diff(self.offsets) < 0):
            raise ValueError("Offsets must start at 0, end at the number of steps and be non-decreasing")
        if len(self.tokens) and int(self.tokens.max()) >= self.vocab_size:
            raise ValueError(f"Token id {int(self.tokens.max())} out of range for vocab_size {self.vocab_size}")

    @property
    def dim(self) -> int:
        """Dimension of the context vectors."""
        return int(self.vectors.shape[1])

    @property
    def n_sequences(self) -> int:
        """Number of sequences."""
        return len(self.offsets) - 1

    def __len__(self):
        return int(self.tokens.shape[0])

    def sequences(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Iterate over ``(vectors, tokens)`` of every sequence."""
        for start, stop in zip(self.offsets[:-1], self.offsets[1:], strict=True):
            yield self.vectors[start:stop], self.tokens[start:stop]

    def steps(self) -> list[tuple[np.ndarray, int]]:
        """All steps as ``(vector, gold token)`` pairs, ignoring sequence boundaries."""
        return [(self.vectors[i], int(self.tokens[i])) for i in range(len(self))]

    def sequence_ids(self) -> np.ndarray:
        """Sequence number of every step."""
        return np.repeat(np.arange(self.n_sequences), np.diff(self.offsets))

    def select(self, sequence_ids) -> "ContextPairs":
        """Return a new corpus made of the given sequences, in the given order."""
        chunks = [(self.offsets[s], self.offsets[s + 1]) for s in sequence_ids]
        index = np.concatenate([np.arange(a, b) for a, b in chunks]) if chunks else np.zeros(0, dtype=np.int64)
        lengths = [b - a for a, b in chunks]
        return ContextPairs(
            vectors=self.vectors[index],
            tokens=self.tokens[index],
            offsets=np.concatenate([[0], np.cumsum(lengths, dtype=np.int64)]).astype(np.int64),
            vocab_size=self.vocab_size,
        )

    def concat(self, other: "ContextPairs") -> "ContextPairs":
        """Return the sequences of ``self`` followed by those of ``other``."""
        if other.vocab_size != self.vocab_size or other.dim != self.dim:
            raise ValueError("Cannot concatenate corpora of different vocab_size or dim")
        return ContextPairs(
            vectors=np.concatenate([self.vectors, other.vectors]),
            tokens=np.concatenate([self.tokens, other.tokens]),
            offsets=np.concatenate([self.offsets, other.offsets[1:] + self.offsets[-1]]).astype(np.int64),
            vocab_size=self.vocab_size,
        )

    @classmethod
    def from_sequences(cls, sequences, vocab_size: int, dim: int | None = None) -> "ContextPairs":
        """
        Assemble a corpus from a list of ``(vectors, tokens)`` sequences.

        Parameters
        ----------
        sequences : list of (array-like, array-like)
            Each item holds the ``(length, dim)`` vectors and ``(length,)`` tokens of one sequence.
        vocab_size : int
            Vocabulary size.
        dim : int, optional
            Vector dimension; required when ``sequences`` is empty.
        """
        vectors = [np.asarray(v, dtype=np.float32).reshape(len(t), -1) for v, t in sequences]
        tokens = [np.asarray(t, dtype=np.int64) for _, t in sequences]
        if dim is None:
            if not vectors:
                raise ValueError("dim is required for an empty corpus")
            dim = vectors[0].shape[1]
        lengths = [len(t) for t in tokens]
        return cls(
            vectors=np.concatenate(vectors) if vectors else np.zeros((0, dim), dtype=np.float32),
            tokens=np.concatenate(tokens) if tokens else np.zeros(0, dtype=np.int64),
            offsets=np.concatenate([[0], np.cumsum(lengths, dtype=np.int64)]).astype(np.int64),
            vocab_size=vocab_size,
        )

    def to_file(self, path) -> None:
        """
        Write the corpus in the "KNCP" format. Sequence boundaries are encoded as a sentinel
        record (token id 0xFFFFFFFF with a zero vector) after every sequence.
        """
        seq_ids = self.sequence_ids()
        n_records = len(self) + self.n_sequences
        vectors = np.zeros((n_records, self.dim), dtype=np.float32)
        tokens = np.full(n_records, SENTINEL_TOKEN, dtype=np.uint32)
        # Step i of sequence s lands at i + s; the sentinel of sequence s at offsets[s + 1] + s.
        positions = np.arange(len(self)) + seq_ids
        vectors[positions] = self.vectors
        tokens[positions] = self.tokens
        atomic_write_bytes(path, encode_records(CONTEXT_MAGIC, self.dim, self.vocab_size, vectors, tokens))

    @classmethod
    def from_file(cls, path) -> "ContextPairs":
        """
        Read a "KNCP" file. A trailing sequence without a closing sentinel is kept.

        Raises
        ------
        MissingInputError
            If ``path`` does not exist.
        DatastoreFormatError
            On a bad magic, version mismatch or truncated file.
        """
        path = Path(path)
        if not path.exists():
            raise MissingInputError(f"Context-pair file '{path}' not found")
        dim, vocab_size, vectors, tokens = decode_records(path.read_bytes(), CONTEXT_MAGIC)
        is_sentinel = tokens == SENTINEL_TOKEN
        keep = ~is_sentinel
        # Number of real steps before each sentinel gives the sequence ends.
        ends = np.cumsum(keep)[is_sentinel]
        offsets = np.unique(np.concatenate([[0], ends, [int(keep.sum())]])).astype(np.int64)
        return cls(
            vectors=vectors[keep],
            tokens=tokens[keep].astype(np.int64),
            offsets=offsets,
            vocab_size=vocab_size,
        )
