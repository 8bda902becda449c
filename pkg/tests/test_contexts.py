import numpy as np
import pytest

from metaknn.constants import SENTINEL_TOKEN
from metaknn.contexts import ContextPairs
from metaknn.exceptions import DatastoreFormatError, MissingInputError
from metaknn.fileformat import decode_records


@pytest.fixture
def corpus():
    """Two sequences of lengths 3 and 2 in 4 dimensions."""
    rng = np.random.default_rng(0)
    return ContextPairs.from_sequences(
        [
            (rng.normal(size=(3, 4)), [1, 2, 3]),
            (rng.normal(size=(2, 4)), [4, 0]),
        ],
        vocab_size=6,
    )


class TestContextPairs:
    def test_shapes(self, corpus):
        assert len(corpus) == 5
        assert corpus.dim == 4
        assert corpus.n_sequences == 2
        np.testing.assert_array_equal(corpus.offsets, [0, 3, 5])
        np.testing.assert_array_equal(corpus.sequence_ids(), [0, 0, 0, 1, 1])
        assert corpus.vectors.dtype == np.float32

    def test_sequences_and_steps(self, corpus):
        lengths = [len(tokens) for _, tokens in corpus.sequences()]
        assert lengths == [3, 2]
        steps = corpus.steps()
        assert [gold for _, gold in steps] == [1, 2, 3, 4, 0]

    def test_select_reorders(self, corpus):
        picked = corpus.select([1, 0])
        np.testing.assert_array_equal(picked.tokens, [4, 0, 1, 2, 3])
        np.testing.assert_array_equal(picked.offsets, [0, 2, 5])

    def test_concat(self, corpus):
        joined = corpus.select([0]).concat(corpus.select([1]))
        np.testing.assert_array_equal(joined.tokens, corpus.tokens)
        np.testing.assert_array_equal(joined.offsets, corpus.offsets)

    def test_concat_mismatch(self, corpus):
        other = ContextPairs.from_sequences([(np.zeros((1, 4)), [0])], vocab_size=7)
        with pytest.raises(ValueError, match="different vocab_size"):
            corpus.concat(other)

    def test_token_out_of_range(self):
        with pytest.raises(ValueError, match="out of range"):
            ContextPairs.from_sequences([(np.zeros((1, 2)), [5])], vocab_size=5)

    def test_empty_needs_dim(self):
        with pytest.raises(ValueError, match="dim is required"):
            ContextPairs.from_sequences([], vocab_size=3)
        assert len(ContextPairs.from_sequences([], vocab_size=3, dim=2)) == 0


class TestContextFile:
    def test_round_trip(self, corpus, tmp_path):
        path = tmp_path / "pairs.kncp"
        corpus.to_file(path)
        loaded = ContextPairs.from_file(path)
        np.testing.assert_array_equal(loaded.tokens, corpus.tokens)
        np.testing.assert_array_equal(loaded.offsets, corpus.offsets)
        assert loaded.vectors.tobytes() == corpus.vectors.tobytes()
        assert loaded.vocab_size == 6

    def test_sentinel_after_every_sequence(self, corpus, tmp_path):
        path = tmp_path / "pairs.kncp"
        corpus.to_file(path)
        _, _, vectors, tokens = decode_records(path.read_bytes(), b"KNCP")
        assert tokens.tolist() == [1, 2, 3, SENTINEL_TOKEN, 4, 0, SENTINEL_TOKEN]
        np.testing.assert_array_equal(vectors[3], np.zeros(4))

    def test_datastore_magic_rejected(self, corpus, tmp_path):
        path = tmp_path / "pairs.kncp"
        corpus.to_file(path)
        path.write_bytes(b"KNDS" + path.read_bytes()[4:])
        with pytest.raises(DatastoreFormatError, match="bad magic"):
            ContextPairs.from_file(path)

    def test_missing(self, tmp_path):
        with pytest.raises(MissingInputError):
            ContextPairs.from_file(tmp_path / "none.kncp")
