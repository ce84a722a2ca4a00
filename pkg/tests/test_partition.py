"""Selection statistics and split/restore bookkeeping."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from tokentune.partition import (SelectionError, TokenPartition,
                                 partition_rows, resolve_k, restore_order,
                                 select_positions, split_reorder)


def test_full_selection_has_empty_complement():
    p = select_positions(5, 5, "lm", rng_seed=0)
    assert np.array_equal(p.selected, np.arange(5))
    assert p.unselected.size == 0


def test_classification_always_includes_position_zero():
    for seed in range(1000):
        p = select_positions(10, 3, "classification", rng_seed=seed)
        assert 0 in p.selected


def test_lm_selection_frequencies_uniform():
    n, k, draws = 10, 3, 100_000
    counts = np.zeros(n)
    for seed in range(draws):
        counts[select_positions(n, k, "lm", rng_seed=seed).selected] += 1
    freq = counts / draws
    assert np.abs(freq - k / n).max() < 0.01
    expected = np.full(n, draws * k / n)
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    p_value = float(stats.chi2.sf(chi2, df=n - 1))
    assert p_value > 0.001


def test_selection_is_deterministic_per_seed():
    a = select_positions(12, 4, "lm", rng_seed=42)
    b = select_positions(12, 4, "lm", rng_seed=42)
    assert np.array_equal(a.selected, b.selected)
    c = select_positions(12, 4, "lm", rng_seed=43)
    assert not np.array_equal(a.selected, c.selected)


def test_clamp_reported_and_pads_never_selected():
    pad = np.array([True] * 4 + [False] * 4)
    p = select_positions(8, 6, "lm", pad_mask=pad, rng_seed=0)
    assert p.clamped
    assert p.k == 4
    assert set(p.selected.tolist()) <= {0, 1, 2, 3}


def test_selection_errors():
    with pytest.raises(SelectionError):
        select_positions(4, 0, "lm", rng_seed=0)
    with pytest.raises(SelectionError):
        select_positions(4, 2, "lm", pad_mask=np.zeros(4, dtype=bool),
                         rng_seed=0)
    with pytest.raises(SelectionError):
        select_positions(4, 2, "classification",
                         pad_mask=np.array([False, True, True, True]),
                         rng_seed=0)
    with pytest.raises(SelectionError):
        TokenPartition(selected=np.array([], dtype=np.intp),
                       unselected=np.array([0, 1]))
    with pytest.raises(SelectionError):
        TokenPartition(selected=np.array([0, 1]),
                       unselected=np.array([1, 2]))


def test_resolve_k_rounds_half_up_with_floor_one():
    assert resolve_k(None, 0.25, 10) == 3   # 2.5 rounds up
    assert resolve_k(None, 0.24, 10) == 2
    assert resolve_k(None, 0.01, 10) == 1
    assert resolve_k(7, 0.5, 10) == 7       # absolute k wins
    with pytest.raises(SelectionError):
        resolve_k(None, None, 10)


@given(st.integers(0, 2 ** 31 - 1), st.integers(2, 12))
@settings(max_examples=40, deadline=None)
def test_split_restore_round_trip_bitwise(seed, n):
    r = np.random.default_rng(seed)
    k = int(r.integers(1, n + 1))
    p = select_positions(n, k, "lm", rng_seed=seed)
    h = r.normal(size=(n, 5))
    h_g, h_gbar = split_reorder(h, p)
    assert h_g.shape == (k, 5) and h_gbar.shape == (n - k, 5)
    assert np.array_equal(restore_order(h_g, h_gbar, p), h)


def test_split_length_mismatch_errors():
    p = select_positions(4, 2, "lm", rng_seed=0)
    with pytest.raises(SelectionError):
        split_reorder(np.zeros((3, 2)), p)


def test_partition_rows_with_permuted_storage():
    p = TokenPartition(selected=np.array([0, 3]),
                       unselected=np.array([1, 2]))
    storage_positions = np.array([2, 0, 3, 1])  # storage order != original
    rows_sel, rows_unsel, restore_idx = partition_rows(p, storage_positions)
    assert rows_sel.tolist() == [1, 2]   # positions 0 and 3
    assert rows_unsel.tolist() == [3, 0]
    h = np.arange(8.0).reshape(4, 2)
    h_g, h_gbar = h[rows_sel], h[rows_unsel]
    assert np.array_equal(
        np.concatenate([h_g, h_gbar])[restore_idx], h)
