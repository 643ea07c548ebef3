"""Clip-to-token conversion.

A clip of shape (T, H, W, C) is cut into non-overlapping space-time cubes
(default 2x16x16), each flattened to one token. Token order is fixed
everywhere in the codebase: index = t * (H_hat * W_hat) + h * W_hat + w,
time-major then row-major spatial. Image inputs are the T=2 degenerate
case (one temporal slab), so there is no separate 2-D path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

NORM_EPS = 1e-6


@dataclass(frozen=True)
class ClipSpec:
    """Input clip geometry. `stride` is sampling metadata only."""

    frames: int
    height: int
    width: int
    channels: int = 3
    stride: int = 1
    patch: tuple[int, int, int] = (2, 16, 16)

    @property
    def cube_dim(self) -> int:
        pt, ph, pw = self.patch
        return pt * ph * pw * self.channels

    def violations(self) -> list[str]:
        errs = []
        pt, ph, pw = self.patch
        for name, dim, p in (("frames", self.frames, pt), ("height", self.height, ph), ("width", self.width, pw)):
            if dim <= 0 or p <= 0 or dim % p != 0:
                errs.append(f"clip {name} ({dim}) not divisible by its patch extent ({p})")
        if self.channels < 1:
            errs.append(f"clip channels must be positive, got {self.channels}")
        return errs

    def validate(self) -> "ClipSpec":
        errs = self.violations()
        if errs:
            raise ValueError("; ".join(errs))
        return self

    def grid(self) -> "TokenGrid":
        self.validate()
        pt, ph, pw = self.patch
        return TokenGrid(self.frames // pt, self.height // ph, self.width // pw)


@dataclass(frozen=True)
class TokenGrid:
    """The (T_hat, H_hat, W_hat) token lattice."""

    t: int
    h: int
    w: int

    @property
    def n(self) -> int:
        return self.t * self.h * self.w

    @property
    def tubes(self) -> int:
        return self.h * self.w

    def index(self, t: int, h: int, w: int) -> int:
        return t * (self.h * self.w) + h * self.w + w

    def unravel(self, i: int) -> tuple[int, int, int]:
        hw = self.h * self.w
        return i // hw, (i % hw) // self.w, i % self.w


def patchify(clip: np.ndarray, spec: ClipSpec) -> np.ndarray:
    """Cut a (T, H, W, C) clip into (N, cube_dim) flattened cubes in grid order."""
    spec.validate()
    expected = (spec.frames, spec.height, spec.width, spec.channels)
    if clip.shape != expected:
        raise ValueError(f"clip shape {clip.shape} does not match spec {expected}")
    pt, ph, pw = spec.patch
    g = spec.grid()
    x = clip.reshape(g.t, pt, g.h, ph, g.w, pw, spec.channels)
    x = x.transpose(0, 2, 4, 1, 3, 5, 6)
    return np.ascontiguousarray(x.reshape(g.n, spec.cube_dim))


def cube_embed(clip: np.ndarray, weight: np.ndarray, bias: np.ndarray, spec: ClipSpec) -> np.ndarray:
    """Affine map of each flattened cube: (N, cube_dim) @ weight + bias."""
    cubes = patchify(clip, spec)
    if weight.shape[0] != spec.cube_dim:
        raise ValueError(f"embedding kernel expects {weight.shape[0]} inputs, cubes have {spec.cube_dim}")
    return cubes @ weight + bias


@lru_cache(maxsize=32)
def _pe_table(n: int, d: int) -> np.ndarray:
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(d // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / d)
    pe = np.empty((n, d), dtype=np.float64)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    pe.setflags(write=False)
    return pe


def sinusoidal_pe(n: int, d: int) -> np.ndarray:
    """Fixed 1-D sin/cos position table of shape (n, d). d must be even.

    The returned array is cached and read-only; copy before mutating.
    """
    if d <= 0 or d % 2 != 0:
        raise ValueError(f"position encoding width must be a positive even number, got {d}")
    if n < 1:
        raise ValueError(f"position encoding length must be positive, got {n}")
    return _pe_table(n, d)


def normalize_target(cubes: np.ndarray) -> np.ndarray:
    """Per-token normalization of flattened pixel cubes.

    Each row is shifted to mean zero and scaled by 1/sqrt(var + eps),
    population variance over the row's entries.
    """
    cubes = np.asarray(cubes, dtype=np.float64)
    mu = cubes.mean(axis=-1, keepdims=True)
    var = cubes.var(axis=-1, keepdims=True)
    return (cubes - mu) / np.sqrt(var + NORM_EPS)
