from dataclasses import FrozenInstanceError

import numpy as np
import pytest

from metaknn.constants import DATASTORE_MAGIC, FORMAT_VERSION
from metaknn.datastore import Datastore, Metric, NeighborSet
from metaknn.exceptions import DatastoreFormatError, EmptyDatastoreError, MissingInputError
from metaknn.fileformat import HEADER, decode_records, encode_records


@pytest.fixture
def small_datastore():
    """Three 2-D keys with distinct values."""
    return Datastore.build([([1, 0], 5), ([0, 1], 7), ([1, 1], 5)], dim=2, vocab_size=10)


@pytest.fixture
def random_datastore():
    rng = np.random.default_rng(3)
    return Datastore.from_arrays(rng.normal(size=(200, 8)), rng.integers(0, 20, size=200), 20)


def _oracle(ds: Datastore, query: np.ndarray, k: int, metric: Metric) -> np.ndarray:
    """Full scan with a stable sort: descending score, ascending index."""
    scores = metric.score(ds.keys, query)
    return np.array(sorted(range(ds.count), key=lambda i: (-scores[i], i))[:k])


class TestBuild:
    def test_build_preserves_order(self, small_datastore):
        assert small_datastore.count == 3
        assert len(small_datastore) == 3
        np.testing.assert_array_equal(small_datastore.values, [5, 7, 5])
        assert small_datastore.keys.dtype == np.float32

    def test_build_empty(self):
        ds = Datastore.build([], dim=4, vocab_size=3)
        assert ds.count == 0
        assert ds.keys.shape == (0, 4)

    def test_build_wrong_dim_names_index(self):
        with pytest.raises(ValueError, match="Pair 1"):
            Datastore.build([([1, 0], 0), ([1, 0, 0], 1)], dim=2, vocab_size=3)

    def test_build_token_out_of_range(self):
        with pytest.raises(ValueError, match="Pair 0: token id 3 out of range"):
            Datastore.build([([1, 0], 3)], dim=2, vocab_size=3)

    def test_build_non_finite(self):
        with pytest.raises(ValueError, match="not finite"):
            Datastore.build([([np.nan, 0], 0)], dim=2, vocab_size=3)

    def test_from_arrays_out_of_range(self):
        with pytest.raises(ValueError, match="Pair 2"):
            Datastore.from_arrays(np.zeros((3, 2)), np.array([0, 1, 9]), 5)

    def test_datastore_is_frozen(self, small_datastore):
        with pytest.raises(FrozenInstanceError):
            small_datastore.dim = 3


class TestSearch:
    def test_inner_product_order(self, small_datastore):
        nbrs = small_datastore.search(np.array([1.0, 0.5]), k=2, metric="ip")
        np.testing.assert_array_equal(nbrs.indices, [2, 0])
        np.testing.assert_allclose(nbrs.scores, [1.5, 1.0])
        np.testing.assert_array_equal(nbrs.values, [5, 5])

    def test_negative_l2_order(self, small_datastore):
        nbrs = small_datastore.search(np.array([1.0, 0.0]), k=3, metric=Metric.NEGATIVE_L2)
        np.testing.assert_array_equal(nbrs.indices, [0, 2, 1])
        np.testing.assert_allclose(nbrs.scores, [0.0, -1.0, -2.0])

    def test_ties_by_ascending_index(self):
        ds = Datastore.build([([1, 0], 0), ([1, 0], 1), ([1, 0], 2), ([0, 0], 3)], dim=2, vocab_size=4)
        nbrs = ds.search(np.array([1.0, 0.0]), k=2)
        np.testing.assert_array_equal(nbrs.indices, [0, 1])

    def test_k_larger_than_count(self, small_datastore):
        nbrs = small_datastore.search(np.array([0.0, 1.0]), k=10)
        assert len(nbrs) == 3

    def test_empty_datastore(self):
        ds = Datastore.build([], dim=2, vocab_size=3)
        with pytest.raises(EmptyDatastoreError, match="empty datastore"):
            ds.search(np.zeros(2), k=1)

    def test_zero_k(self, small_datastore):
        with pytest.raises(ValueError, match="k must be a positive integer"):
            small_datastore.search(np.zeros(2), k=0)

    def test_dim_mismatch(self, small_datastore):
        with pytest.raises(ValueError, match="Query has dim 3"):
            small_datastore.search(np.zeros(3), k=1)

    def test_unknown_metric(self, small_datastore):
        with pytest.raises(ValueError, match="Unknown metric"):
            small_datastore.search(np.zeros(2), k=1, metric="cosine")

    @pytest.mark.parametrize("metric", [Metric.INNER_PRODUCT, Metric.NEGATIVE_L2])
    def test_matches_full_scan(self, random_datastore, metric):
        rng = np.random.default_rng(11)
        for _ in range(1000):
            query = rng.normal(size=8)
            k = int(rng.integers(1, 40))
            nbrs = random_datastore.search(query, k, metric)
            np.testing.assert_array_equal(nbrs.indices, _oracle(random_datastore, query, k, metric))

    def test_equal_norm_metrics_agree(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            keys = rng.normal(size=(30, 6))
            keys /= np.linalg.norm(keys, axis=1, keepdims=True)
            ds = Datastore.from_arrays(keys, rng.integers(0, 4, size=30), 4)
            query = rng.normal(size=6)
            ip = ds.search(query, 5, Metric.INNER_PRODUCT)
            l2 = ds.search(query, 5, Metric.NEGATIVE_L2)
            assert set(ip.indices.tolist()) == set(l2.indices.tolist())

    def test_head_is_prefix(self, random_datastore):
        query = np.ones(8)
        full = random_datastore.search(query, 16)
        np.testing.assert_array_equal(full.head(4).indices, random_datastore.search(query, 4).indices)

    def test_neighbor_iteration(self, small_datastore):
        index, key, value, score = next(iter(small_datastore.search(np.array([1.0, 0.5]), k=1)))
        assert (index, value, score) == (2, 5, 1.5)
        np.testing.assert_array_equal(key, [1.0, 1.0])

    def test_neighbor_set_rejects_plain_metric(self):
        with pytest.raises(TypeError, match="must be a Metric"):
            NeighborSet(np.zeros(0), np.zeros((0, 2)), np.zeros(0), np.zeros(0), "ip", 2)


class TestPersistence:
    def test_round_trip_bit_identical(self, random_datastore, tmp_path):
        path = tmp_path / "ds.knds"
        random_datastore.save(path)
        loaded = Datastore.load(path)
        assert loaded.dim == random_datastore.dim
        assert loaded.vocab_size == random_datastore.vocab_size
        assert loaded.keys.tobytes() == random_datastore.keys.tobytes()
        np.testing.assert_array_equal(loaded.values, random_datastore.values)
        loaded.save(tmp_path / "again.knds")
        assert (tmp_path / "again.knds").read_bytes() == path.read_bytes()

    def test_header_layout(self, small_datastore, tmp_path):
        path = tmp_path / "ds.knds"
        small_datastore.save(path)
        payload = path.read_bytes()
        assert HEADER.unpack_from(payload) == (DATASTORE_MAGIC, FORMAT_VERSION, 2, 10, 3)
        assert len(payload) == HEADER.size + 3 * (2 * 4 + 4)

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingInputError):
            Datastore.load(tmp_path / "absent.knds")

    def test_bad_magic(self, small_datastore, tmp_path):
        path = tmp_path / "ds.knds"
        small_datastore.save(path)
        path.write_bytes(b"XXXX" + path.read_bytes()[4:])
        with pytest.raises(DatastoreFormatError, match="bad magic") as err:
            Datastore.load(path)
        assert err.value.code == "bad_magic"

    def test_version_mismatch(self):
        payload = HEADER.pack(DATASTORE_MAGIC, FORMAT_VERSION + 1, 2, 3, 0)
        with pytest.raises(DatastoreFormatError, match="version mismatch") as err:
            decode_records(payload, DATASTORE_MAGIC)
        assert err.value.code == "version_mismatch"

    def test_truncated_records(self, small_datastore, tmp_path):
        path = tmp_path / "ds.knds"
        small_datastore.save(path)
        path.write_bytes(path.read_bytes()[:-1])
        with pytest.raises(DatastoreFormatError, match="truncated") as err:
            Datastore.load(path)
        assert err.value.code == "truncated"

    def test_truncated_header(self):
        with pytest.raises(DatastoreFormatError) as err:
            decode_records(DATASTORE_MAGIC + b"\x01\x00", DATASTORE_MAGIC)
        assert err.value.code == "truncated"

    def test_encode_decode_empty(self):
        payload = encode_records(DATASTORE_MAGIC, 3, 5, np.zeros((0, 3)), np.zeros(0))
        dim, vocab_size, keys, values = decode_records(payload, DATASTORE_MAGIC)
        assert (dim, vocab_size) == (3, 5)
        assert keys.shape == (0, 3)
        assert values.shape == (0,)

    @pytest.mark.parametrize(("dim", "vocab_size"), [(0, 4), (3, 0)])
    def test_zero_header_field(self, dim, vocab_size):
        payload = HEADER.pack(DATASTORE_MAGIC, FORMAT_VERSION, dim, vocab_size, 0)
        with pytest.raises(DatastoreFormatError, match="bad header") as err:
            decode_records(payload, DATASTORE_MAGIC)
        assert err.value.code == "bad_header"

    def test_trailing_bytes(self, small_datastore, tmp_path):
        path = tmp_path / "ds.knds"
        small_datastore.save(path)
        path.write_bytes(path.read_bytes() + b"\x00\x00")
        with pytest.raises(DatastoreFormatError, match="2 bytes follow") as err:
            Datastore.load(path)
        assert err.value.code == "trailing_bytes"
