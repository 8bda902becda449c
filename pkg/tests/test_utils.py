import math

import numpy as np
import pytest

from metaknn.exceptions import NumericError
from metaknn.utils import (
    atomic_path,
    atomic_write_bytes,
    atomic_write_text,
    ensure_finite,
    log_softmax,
    one_hot,
    relative_error,
    softmax,
    tool_version,
)


def test_softmax_two_logits():
    np.testing.assert_allclose(softmax(np.array([math.log(3.0), 0.0])), [0.75, 0.25])


def test_softmax_large_logits():
    probs = softmax(np.array([1000.0, 999.0]))
    assert np.all(np.isfinite(probs))
    np.testing.assert_allclose(probs.sum(), 1.0)


def test_log_softmax_matches_log_of_softmax():
    logits = np.random.default_rng(0).normal(size=(5, 7))
    np.testing.assert_allclose(log_softmax(logits), np.log(softmax(logits)), atol=1e-12)


def test_log_softmax_rows():
    out = log_softmax(np.zeros((2, 4)))
    np.testing.assert_allclose(out, np.full((2, 4), -math.log(4.0)))


def test_one_hot():
    np.testing.assert_array_equal(one_hot(np.array([2, 0]), 3), [[0, 0, 1], [1, 0, 0]])


def test_ensure_finite():
    arr = ensure_finite([1.0, 2.0], "x")
    np.testing.assert_array_equal(arr, [1.0, 2.0])
    with pytest.raises(NumericError, match="weights contains a non-finite value at flat index 1"):
        ensure_finite([0.0, np.inf], "weights")


def test_relative_error_floor():
    """Errors of small values are absolute, errors of large values are relative."""
    np.testing.assert_allclose(relative_error([1e-3], [2e-3]), [1e-3])
    np.testing.assert_allclose(relative_error([100.0], [101.0]), [1.0 / 101.0])


def test_relative_error_custom_floor():
    np.testing.assert_allclose(relative_error([1e-3], [2e-3], floor=1e-12), [0.5])
    with pytest.raises(ValueError, match="Floor"):
        relative_error([1.0], [1.0], floor=0.0)


def test_atomic_write(tmp_path):
    path = tmp_path / "nested" / "out.txt"
    atomic_write_text(path, "first")
    atomic_write_bytes(path, b"second")
    assert path.read_bytes() == b"second"
    assert [p.name for p in path.parent.iterdir()] == ["out.txt"]


def test_atomic_path_copies_existing(tmp_path):
    path = tmp_path / "log.txt"
    path.write_text("a")
    with atomic_path(path, copy_existing=True) as tmp:
        assert tmp.read_text() == "a"
        tmp.write_text("ab")
        assert path.read_text() == "a"
    assert path.read_text() == "ab"


def test_atomic_path_failure_keeps_original(tmp_path):
    path = tmp_path / "out.txt"
    path.write_text("old")
    with pytest.raises(RuntimeError, match="interrupted"), atomic_path(path) as tmp:
        tmp.write_text("partial")
        raise RuntimeError("interrupted")
    assert path.read_text() == "old"
    assert [p.name for p in tmp_path.iterdir()] == ["out.txt"]


def test_tool_version():
    assert isinstance(tool_version(), str)
