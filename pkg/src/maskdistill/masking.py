"""Tube masks and nested student/teacher visible sets.

A tube is one spatial cell of the token grid replicated across all
temporal slabs; masking always operates on whole tubes so that no
temporal information leaks. The teacher's visible set is drawn first at
its (lower) masking ratio, and the student's tubes are sub-sampled from
the teacher's, which guarantees the nesting by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tokens import TokenGrid


def round_half_up(x: float) -> int:
    """Half-up rounding for visible-tube counts (python round() is banker's)."""
    return int(math.floor(x + 0.5))


def visible_tube_count(grid: TokenGrid, ratio: float) -> int:
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"masking ratio must lie in [0, 1), got {ratio}")
    k = round_half_up((1.0 - ratio) * grid.tubes)
    if k == 0:
        raise ValueError(
            f"masking ratio {ratio} leaves zero visible tubes on a {grid.h}x{grid.w} grid"
        )
    return k


@dataclass(frozen=True)
class MaskPair:
    """Nested visible index sets for one sample.

    visible_student is a subset of visible_teacher (strict whenever the
    rounded tube counts differ); diff is their sorted difference.
    """

    grid: TokenGrid
    visible_teacher: np.ndarray
    visible_student: np.ndarray
    diff: np.ndarray
    r_student: float
    r_teacher: float

    @property
    def n(self) -> int:
        return self.grid.n

    @property
    def n_teacher(self) -> int:
        return int(self.visible_teacher.size)

    @property
    def n_student(self) -> int:
        return int(self.visible_student.size)

    @property
    def n_diff(self) -> int:
        return int(self.diff.size)

    def masked_student(self) -> np.ndarray:
        """Complement of the student's visible set (reconstruction targets)."""
        hidden = np.ones(self.grid.n, dtype=bool)
        hidden[self.visible_student] = False
        return np.flatnonzero(hidden)

    def check(self) -> None:
        """Assert every structural invariant; raises AssertionError on violation."""
        tea, stu, diff = self.visible_teacher, self.visible_student, self.diff
        assert np.all(np.diff(tea) > 0) and np.all(np.diff(stu) > 0), "index sets must be sorted and unique"
        assert np.all(np.isin(stu, tea)), "student visible set must be nested in the teacher's"
        assert np.array_equal(diff, np.setdiff1d(tea, stu)), "diff must be the exact set difference"
        assert stu.size + diff.size == tea.size
        for name, vis in (("teacher", tea), ("student", stu)):
            tubes = np.unique(vis % self.grid.tubes)
            assert vis.size == tubes.size * self.grid.t, f"{name} set is not tube-shaped"
            full = (np.arange(self.grid.t)[:, None] * self.grid.tubes + tubes[None, :]).ravel()
            assert np.array_equal(vis, np.sort(full)), f"{name} set misses temporal copies"


def _tubes_to_tokens(grid: TokenGrid, tubes: np.ndarray) -> np.ndarray:
    tokens = (np.arange(grid.t)[:, None] * grid.tubes + np.sort(tubes)[None, :]).ravel()
    return np.sort(tokens)


def sample_tube_mask(grid: TokenGrid, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Sorted visible token indices for one tube mask at the given ratio."""
    k = visible_tube_count(grid, ratio)
    tubes = rng.choice(grid.tubes, size=k, replace=False)
    return _tubes_to_tokens(grid, tubes)


def sample_asymmetric_pair(
    grid: TokenGrid, r_student: float, r_teacher: float, rng: np.random.Generator
) -> MaskPair:
    """Draw the teacher's tubes, then sub-sample the student's from them."""
    if r_teacher > r_student:
        raise ValueError(
            f"teacher masking ratio ({r_teacher}) must not exceed the student's ({r_student})"
        )
    k_tea = visible_tube_count(grid, r_teacher)
    k_stu = visible_tube_count(grid, r_student)
    tea_tubes = rng.choice(grid.tubes, size=k_tea, replace=False)
    stu_tubes = rng.choice(np.sort(tea_tubes), size=k_stu, replace=False)
    tea = _tubes_to_tokens(grid, tea_tubes)
    stu = _tubes_to_tokens(grid, stu_tubes)
    return MaskPair(
        grid=grid,
        visible_teacher=tea,
        visible_student=stu,
        diff=set_diff(tea, stu),
        r_student=r_student,
        r_teacher=r_teacher,
    )


def set_diff(visible_teacher: np.ndarray, visible_student: np.ndarray) -> np.ndarray:
    """Sorted difference teacher \\ student; rejects non-nested inputs."""
    tea = np.asarray(visible_teacher)
    stu = np.asarray(visible_student)
    if not np.all(np.isin(stu, tea)):
        raise ValueError("student visible set is not a subset of the teacher's")
    return np.setdiff1d(tea, stu)
