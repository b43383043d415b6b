"""Tiled routing-score kernel vs. the materialized-map reference."""

import numpy as np
import pytest

from modlab.flash import (
    AllocationCapExceeded,
    TileConfig,
    _alloc,
    allocation_cap,
    equivalence_sweep,
    flash_scores,
    naive_scores,
)
from modlab.tensor import ContractError, NumericError, ShapeError

RNG = np.random.default_rng(99)


def test_tile_config_validation():
    with pytest.raises(ContractError):
        TileConfig(0, 2)


def test_zero_qk_gives_uniform_scores():
    q = np.zeros((2, 6, 4))
    scores = flash_scores(q, q, TileConfig(2, 3))
    np.testing.assert_allclose(scores.values, 1.0 / 6, atol=1e-12)


def test_small_case_matches_naive():
    q = RNG.normal(size=(2, 4, 8))
    k = RNG.normal(size=(2, 4, 8))
    tiled = flash_scores(q, k, TileConfig(2, 2)).values
    np.testing.assert_allclose(tiled, naive_scores(q, k).values, atol=1e-5)


def test_single_tile_degenerate_matches_naive_tightly():
    q = RNG.normal(size=(1, 5, 3))
    k = RNG.normal(size=(1, 5, 3))
    tiled = flash_scores(q, k, TileConfig(5, 5)).values
    np.testing.assert_allclose(tiled, naive_scores(q, k).values, atol=1e-6)


def test_scores_sum_to_one():
    q = RNG.normal(size=(3, 10, 4))
    k = RNG.normal(size=(3, 10, 4))
    total = flash_scores(q, k, TileConfig(3, 4)).values.sum()
    assert abs(total - 1.0) < 1e-5


def test_output_independent_of_tiling():
    q = RNG.normal(size=(2, 10, 4))
    k = RNG.normal(size=(2, 10, 4))
    reference = flash_scores(q, k, TileConfig(10, 10)).values
    for br in (1, 3, 7, 10):
        for bc in (1, 4, 9):
            out = flash_scores(q, k, TileConfig(br, bc)).values
            np.testing.assert_allclose(out, reference, atol=1e-5)


def test_fidelity_toggles():
    # With scaling and stabilization off, the kernel reproduces plain
    # exp(QK^T) column means; compare against an unscaled reference.
    q = RNG.normal(size=(1, 4, 2))
    k = RNG.normal(size=(1, 4, 2))
    raw = np.exp(q[0] @ k[0].T)
    maps = raw / raw.sum(axis=1, keepdims=True)
    expect = maps.mean(axis=0)  # H = 1: column mean of the row-stochastic map
    out = flash_scores(q, k, TileConfig(2, 2), scale=False, stabilize=False).values
    np.testing.assert_allclose(out.reshape(-1), expect, atol=1e-10)


def test_non_finite_input_rejected():
    q = np.zeros((1, 2, 2))
    bad = q.copy()
    bad[0, 0, 0] = np.inf
    with pytest.raises(NumericError):
        flash_scores(bad, q, TileConfig(1, 1))
    with pytest.raises(ShapeError):
        flash_scores(np.zeros((2, 2)), np.zeros((2, 2)), TileConfig(1, 1))


def test_allocation_cap_blocks_square_buffer():
    with allocation_cap(63):
        with pytest.raises(AllocationCapExceeded):
            _alloc((8, 8), np.float64)
        _alloc((7, 8), np.float64)


def test_kernel_stays_under_quadratic_memory():
    n = 64
    q = RNG.normal(size=(2, n, 8))
    k = RNG.normal(size=(2, n, 8))
    with allocation_cap(n * n - 1):
        out = flash_scores(q, k, TileConfig(4, 4)).values
    np.testing.assert_allclose(out, naive_scores(q, k).values, atol=1e-5)


def test_sweep_non_divisible_tiles():
    report = equivalence_sweep([10], [2], [3], trials=5, seed=11)
    assert report.passed
    assert report.max_abs_deviation <= 1e-5


def test_sweep_zero_trials_is_empty_success():
    report = equivalence_sweep([8], [1], [4], trials=0)
    assert report.entries == []
    assert report.passed
    assert report.max_abs_deviation == 0.0


def test_sweep_small_grid():
    report = equivalence_sweep([8, 16], [1, 3], [1, 4, 7], trials=3, seed=5)
    assert report.passed
    assert len(report.entries) == 2 * 2 * 3 * 9
