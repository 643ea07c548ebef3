"""Tube masks, nested pairs, and index-set algebra."""

import numpy as np
import pytest

from maskdistill.masking import (
    round_half_up,
    sample_asymmetric_pair,
    sample_tube_mask,
    set_diff,
    visible_tube_count,
)
from maskdistill.rng import stream
from maskdistill.tokens import TokenGrid


def test_round_half_up():
    assert round_half_up(0.5) == 1
    assert round_half_up(1.5) == 2
    assert round_half_up(2.4) == 2
    assert round_half_up(0.49) == 0


def test_visible_counts_paper_scale():
    grid = TokenGrid(8, 14, 14)
    vis = sample_tube_mask(grid, 0.75, stream(0, "m"))
    assert vis.size == 49 * 8  # round(0.25 * 196) = 49 tubes
    assert visible_tube_count(grid, 0.75) == 49


def test_ratio_zero_keeps_everything():
    grid = TokenGrid(2, 3, 3)
    vis = sample_tube_mask(grid, 0.0, stream(0, "m"))
    assert np.array_equal(vis, np.arange(grid.n))


def test_small_grid_counts():
    grid = TokenGrid(2, 2, 2)
    vis = sample_tube_mask(grid, 0.75, stream(1, "m"))
    assert vis.size == 2  # 1 tube across 2 slabs


def test_all_masked_rejected():
    grid = TokenGrid(2, 2, 2)
    with pytest.raises(ValueError, match="zero visible"):
        sample_tube_mask(grid, 0.95, stream(0, "m"))
    with pytest.raises(ValueError, match="ratio"):
        sample_tube_mask(grid, 1.0, stream(0, "m"))


def test_asymmetric_pair_paper_scale_counts():
    grid = TokenGrid(8, 14, 14)
    pair = sample_asymmetric_pair(grid, 0.9, 0.75, stream(0, "m"))
    assert pair.n_teacher == 392
    assert pair.n_student == 160  # round(0.1 * 196) = 20 tubes
    assert pair.n_diff == 232
    pair.check()


def test_equal_ratios_give_empty_diff():
    grid = TokenGrid(2, 4, 4)
    pair = sample_asymmetric_pair(grid, 0.75, 0.75, stream(3, "m"))
    assert pair.n_diff == 0
    assert np.array_equal(pair.visible_student, pair.visible_teacher)
    pair.check()


def test_teacher_ratio_above_student_rejected():
    grid = TokenGrid(2, 4, 4)
    with pytest.raises(ValueError, match="must not exceed"):
        sample_asymmetric_pair(grid, 0.5, 0.75, stream(0, "m"))


def test_pair_invariants_over_many_draws():
    grid = TokenGrid(3, 5, 4)
    for i in range(1000):
        pair = sample_asymmetric_pair(grid, 0.85, 0.6, stream(7, "draws", i))
        pair.check()
        assert pair.n_student < pair.n_teacher


def test_tube_property_explicit():
    grid = TokenGrid(4, 3, 3)
    vis = sample_tube_mask(grid, 0.6, stream(5, "m"))
    spatial = np.unique(vis % grid.tubes)
    expected = np.sort((np.arange(grid.t)[:, None] * grid.tubes + spatial[None, :]).ravel())
    assert np.array_equal(vis, expected)


def test_seeded_determinism():
    grid = TokenGrid(2, 4, 4)
    a = sample_asymmetric_pair(grid, 0.9, 0.75, stream(11, "mask", 3, 1))
    b = sample_asymmetric_pair(grid, 0.9, 0.75, stream(11, "mask", 3, 1))
    assert np.array_equal(a.visible_teacher, b.visible_teacher)
    assert np.array_equal(a.visible_student, b.visible_student)
    c = sample_asymmetric_pair(grid, 0.9, 0.75, stream(11, "mask", 3, 2))
    assert not np.array_equal(a.visible_teacher, c.visible_teacher) or not np.array_equal(
        a.visible_student, c.visible_student
    )


def test_teacher_visibility_uniformity():
    """Each tube's visibility rate over 10k draws stays within 5 sigma of
    the binomial model at p = 1 - r_teacher."""
    grid = TokenGrid(2, 4, 4)
    r_tea = 0.75
    draws = 10_000
    counts = np.zeros(grid.tubes)
    for i in range(draws):
        pair = sample_asymmetric_pair(grid, 0.9, r_tea, stream(13, "uniformity", i))
        counts[np.unique(pair.visible_teacher % grid.tubes)] += 1
    p = 1.0 - r_tea
    sigma = np.sqrt(p * (1 - p) / draws)
    freq = counts / draws
    assert np.max(np.abs(freq - p)) <= 5 * sigma


def test_set_diff_examples():
    assert np.array_equal(set_diff(np.array([1, 2, 3]), np.array([2])), [1, 3])
    assert set_diff(np.array([4, 5]), np.array([4, 5])).size == 0
    assert np.array_equal(set_diff(np.array([4, 5]), np.array([], dtype=int)), [4, 5])


def test_set_diff_rejects_non_subset():
    with pytest.raises(ValueError, match="subset"):
        set_diff(np.array([1, 2]), np.array([3]))


def test_masked_student_complement():
    grid = TokenGrid(2, 2, 2)
    pair = sample_asymmetric_pair(grid, 0.75, 0.5, stream(2, "m"))
    hidden = pair.masked_student()
    assert hidden.size + pair.n_student == grid.n
    assert np.intersect1d(hidden, pair.visible_student).size == 0
