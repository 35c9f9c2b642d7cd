"""Interpolation-residual refinement criterion.

The coefficient of an octant measures how badly a field fails to be
reconstructed from the coarser-stride subset of its sample nodes: sample on
an odd tensor grid, interpolate from the even-index nodes, and take the
max-norm of the mismatch on the remaining nodes.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable

import numpy as np

from .octree import LinearOctree, OctKey


class Flag(Enum):
    REFINE = "refine"
    KEEP = "keep"
    COARSEN = "coarsen"


@dataclass(frozen=True)
class RefinePolicy:
    tolerance: float
    coarsen_factor: float = 0.1
    min_level: int = 0
    max_level: int = 31

    def __post_init__(self):
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if not 0 < self.coarsen_factor < 1:
            raise ValueError("coarsen_factor must be in (0, 1)")
        if self.min_level > self.max_level:
            raise ValueError("min_level must not exceed max_level")


def _lagrange_matrix(src: np.ndarray, dst: np.ndarray, max_points: int = 4) -> np.ndarray:
    """Rows map values at ``src`` nodes to interpolated values at ``dst``,
    using a sliding window of at most ``max_points`` source nodes."""
    npts = min(max_points, len(src))
    out = np.zeros((len(dst), len(src)))
    for i, x in enumerate(dst):
        j0 = int(np.searchsorted(src, x) - npts // 2)
        j0 = max(0, min(j0, len(src) - npts))
        xs = src[j0 : j0 + npts]
        for a in range(npts):
            w = 1.0
            for b in range(npts):
                if a != b:
                    w *= (x - xs[b]) / (xs[a] - xs[b])
            out[i, j0 + a] = w
    return out


def octant_samples(key: OctKey, domain_lo, domain_hi, nodes_per_dim: int):
    """Physical tensor-grid coordinates covering the octant (closed box)."""
    top = float(1 << key.max_depth)
    axes = []
    for d in range(key.dim):
        lo = domain_lo[d] + (key.anchor[d] / top) * (domain_hi[d] - domain_lo[d])
        hi = domain_lo[d] + ((key.anchor[d] + key.side) / top) * (domain_hi[d] - domain_lo[d])
        axes.append(np.linspace(lo, hi, nodes_per_dim))
    return np.meshgrid(*axes, indexing="ij")


def wavelet_coefficient(
    f: Callable,
    key: OctKey,
    nodes_per_dim: int = 7,
    domain_lo=None,
    domain_hi=None,
) -> float:
    """Max interpolation residual of ``f`` on the octant's odd-index nodes.

    ``f`` takes one coordinate array per dimension and returns field values;
    ``nodes_per_dim`` must be odd and at least 3.
    """
    if nodes_per_dim < 3 or nodes_per_dim % 2 == 0:
        raise ValueError("nodes_per_dim must be odd and >= 3")
    dim = key.dim
    if domain_lo is None:
        domain_lo = (0.0,) * dim
    if domain_hi is None:
        domain_hi = (float(1 << key.max_depth),) * dim
    grids = octant_samples(key, domain_lo, domain_hi, nodes_per_dim)
    values = np.asarray(f(*grids), dtype=float)
    xs = np.linspace(0.0, 1.0, nodes_per_dim)
    interp = _lagrange_matrix(xs[::2], xs)
    coarse = values[(slice(None, None, 2),) * dim]
    recon = coarse
    for axis in range(dim):
        recon = np.tensordot(interp, recon, axes=([1], [axis]))
        recon = np.moveaxis(recon, 0, axis)
    odd = np.zeros(values.shape, dtype=bool)
    for axis in range(dim):
        sl = [slice(None)] * dim
        sl[axis] = slice(1, None, 2)
        odd[tuple(sl)] = True
    return float(np.max(np.abs(values - recon)[odd]))


def refine_flags(
    f: Callable,
    tree: LinearOctree,
    policy: RefinePolicy,
    nodes_per_dim: int = 7,
    domain_lo=None,
    domain_hi=None,
) -> list[Flag]:
    """Per-leaf refine/keep/coarsen decision against the policy thresholds."""
    flags = []
    for key in tree.leaves:
        c = wavelet_coefficient(f, key, nodes_per_dim, domain_lo, domain_hi)
        if c > policy.tolerance and key.level < policy.max_level:
            flags.append(Flag.REFINE)
        elif c < policy.coarsen_factor * policy.tolerance and key.level > policy.min_level:
            flags.append(Flag.COARSEN)
        else:
            flags.append(Flag.KEEP)
    return flags


def refinement_predicate(
    f: Callable,
    policy: RefinePolicy,
    nodes_per_dim: int = 7,
    domain_lo=None,
    domain_hi=None,
) -> Callable[[OctKey], bool]:
    """Predicate for top-down tree construction driven by the coefficient."""

    def refine(key: OctKey) -> bool:
        if key.level < policy.min_level:
            return True
        if key.level >= policy.max_level:
            return False
        c = wavelet_coefficient(f, key, nodes_per_dim, domain_lo, domain_hi)
        return c > policy.tolerance

    return refine
