"""Work and speedup estimation for local vs global timestepping.

Levels are relative and anchored at the finest: ``alpha[0]`` is the work at
the finest refinement level, ``alpha[L]`` at the coarsest.  A level-l block
takes ``2**(L-l)`` steps per coarse round, so

    W_lts = sum_l 2**(L-l) * alpha_l        W_gts = 2**L * sum_l alpha_l

and the speedup bound is ``|W| / alpha_0``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class WorkHistogram:
    """Per-relative-level work counts, finest level first."""

    alpha: tuple[float, ...]

    def __post_init__(self):
        if not self.alpha:
            raise ValueError("histogram must have at least one level")
        if any(a < 0 for a in self.alpha):
            raise ValueError("work counts must be non-negative")
        if all(a == 0 for a in self.alpha):
            raise ValueError("histogram must have at least one nonzero level")

    @property
    def L(self) -> int:
        return len(self.alpha) - 1

    @property
    def total(self) -> float:
        return sum(self.alpha)


@dataclass(frozen=True)
class SpeedupEstimate:
    w_lts: float
    w_gts: float
    speedup: float
    bound: float

    @property
    def bound_finite(self) -> bool:
        return math.isfinite(self.bound)


def estimate(hist: WorkHistogram) -> SpeedupEstimate:
    L = hist.L
    w_lts = sum((2 ** (L - l)) * a for l, a in enumerate(hist.alpha))
    w_gts = (2**L) * hist.total
    speedup = w_gts / w_lts
    bound = hist.total / hist.alpha[0] if hist.alpha[0] > 0 else math.inf
    return SpeedupEstimate(w_lts, w_gts, speedup, bound)


def histogram_from_mesh(blocks) -> WorkHistogram:
    """Work histogram from a block decomposition; the work unit of a block is
    its interior point count."""
    if not blocks:
        raise ValueError("no blocks")
    l_max = max(b.leaf_level for b in blocks)
    l_min = min(b.leaf_level for b in blocks)
    alpha = [0.0] * (l_max - l_min + 1)
    for b in blocks:
        alpha[l_max - b.leaf_level] += float(b.interior_points)
    return WorkHistogram(tuple(alpha))
