"""Tests for the constants module."""

from metaknn.constants import (
    ALPHA_GRID,
    KNN_HYPER,
    OPL_LEARNING_RATES,
    default_hyper,
    default_lr_grid,
)


def test_domain_tables_share_domains():
    """Both metrics and the learning-rate table cover the same domains."""
    assert set(KNN_HYPER["ip"]) == set(KNN_HYPER["l2"]) == set(OPL_LEARNING_RATES)


def test_default_hyper_known_domain():
    assert default_hyper("ip", "it") == (8, 0.6, 20.0)
    assert default_hyper("l2", "koran") == (16, 0.8, 100.0)


def test_default_hyper_case_insensitive():
    assert default_hyper("IP", "Medical") == (4, 0.7, 20.0)


def test_default_hyper_unknown_domain_falls_back():
    assert default_hyper("l2", "news") == default_hyper("l2", "it")


def test_default_lr_grid():
    grid = default_lr_grid()
    assert len(grid) == 36
    assert len(set(grid)) == 36
    assert grid[0] == 0.1
    assert grid[8] == 0.9
    assert grid[9] == 0.01
    assert grid[-1] == 0.0009
    assert min(grid) == 1e-4


def test_alpha_grid():
    assert len(ALPHA_GRID) == 8
    assert ALPHA_GRID[0] == 0.0
    assert list(ALPHA_GRID) == sorted(ALPHA_GRID)
