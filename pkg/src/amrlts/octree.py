"""Linear octrees (quadtrees in 2D) with space-filling-curve ordering.

Conventions used throughout:

- The domain is the integer grid ``[0, 2**max_depth)**dim``.
- An octant is identified by its anchor (minimum corner, in units of the
  finest-level cell) and a refinement level.  Anchors are multiples of the
  octant side ``2**(max_depth - level)``.
- A linear octree is the SFC-sorted list of leaf octants with no explicit
  tree pointers.  Ancestors sort before descendants.
- Child index convention: bit ``d`` of the Morton child code is the offset
  of coordinate ``d`` (x is the least significant bit).
"""
from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable, Iterable, Sequence


@dataclass(frozen=True)
class OctKey:
    """Anchor + level identifier of an octant."""

    anchor: tuple[int, ...]
    level: int
    max_depth: int

    @property
    def dim(self) -> int:
        return len(self.anchor)

    @property
    def side(self) -> int:
        return 1 << (self.max_depth - self.level)

    def validate(self) -> None:
        if self.dim not in (2, 3):
            raise ValueError(f"dimension must be 2 or 3, got {self.dim}")
        if not 0 <= self.level <= self.max_depth:
            raise ValueError(f"level {self.level} outside [0, {self.max_depth}]")
        side = self.side
        for a in self.anchor:
            if a % side != 0 or not 0 <= a < (1 << self.max_depth):
                raise ValueError(f"anchor {self.anchor} invalid for level {self.level}")

    def children(self) -> list["OctKey"]:
        half = self.side >> 1
        out = []
        for code in range(1 << self.dim):
            anchor = tuple(a + (((code >> d) & 1) * half) for d, a in enumerate(self.anchor))
            out.append(OctKey(anchor, self.level + 1, self.max_depth))
        return out

    def parent(self) -> "OctKey":
        pside = self.side << 1
        return OctKey(tuple((a // pside) * pside for a in self.anchor), self.level - 1, self.max_depth)

    def ancestor_at(self, level: int) -> "OctKey":
        side = 1 << (self.max_depth - level)
        return OctKey(tuple((a // side) * side for a in self.anchor), level, self.max_depth)

    def contains(self, other: "OctKey") -> bool:
        """True if ``other`` is this octant or a descendant of it."""
        if other.level < self.level:
            return False
        return all(a <= b < a + self.side for a, b in zip(self.anchor, other.anchor))


# ---------------------------------------------------------------------------
# Space-filling-curve orderings
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def _hilbert_tables(dim: int):
    """Rotation tables for the Hilbert curve in ``dim`` dimensions.

    States are (entry, direction) pairs discovered from the canonical initial
    state; for each state and Morton child code the table yields the Hilbert
    digit (position along the curve) and the child state.
    """
    n = dim
    size = 1 << n
    mask = size - 1

    def gc(i):
        return i ^ (i >> 1)

    def gc_inv(g):
        i, j = g, 1
        while j < n:
            i ^= g >> j
            j += 1
        return i

    def tsb(i):
        c = 0
        while i & 1:
            c += 1
            i >>= 1
        return c

    def rotr(x, k):
        k %= n
        return ((x >> k) | (x << (n - k))) & mask

    def rotl(x, k):
        return rotr(x, n - (k % n))

    def entry(i):
        return 0 if i == 0 else gc(((i - 1) >> 1) << 1)

    def direction(i):
        if i == 0:
            return 0
        if i & 1:
            return tsb(i) % n
        return tsb(i - 1) % n

    states: dict[tuple[int, int], int] = {}
    rows: list[list[tuple[int, int]]] = []
    queue = deque([(0, 0)])
    pending: list[list[tuple[int, tuple[int, int]]]] = []
    while queue:
        st = queue.popleft()
        if st in states:
            continue
        states[st] = len(states)
        e, d = st
        row = []
        for child in range(size):
            t = rotr(child ^ e, d + 1)
            w = gc_inv(t)
            e2 = e ^ rotl(entry(w), d + 1)
            d2 = (d + direction(w) + 1) % n
            row.append((w, (e2, d2)))
            if (e2, d2) not in states:
                queue.append((e2, d2))
        pending.append(row)
    digit = [[0] * size for _ in pending]
    nxt = [[0] * size for _ in pending]
    for i, row in enumerate(pending):
        for child, (w, st2) in enumerate(row):
            digit[i][child] = w
            nxt[i][child] = states[st2]
    return digit, nxt


class SfcOrdering:
    """Total order on octant keys along a Morton or Hilbert curve."""

    def __init__(self, kind: str, dim: int, max_depth: int):
        if kind not in ("morton", "hilbert"):
            raise ValueError(f"unknown SFC kind {kind!r}")
        if dim not in (2, 3):
            raise ValueError("dimension must be 2 or 3")
        self.kind = kind
        self.dim = dim
        self.max_depth = max_depth
        if kind == "hilbert":
            self._digit, self._next = _hilbert_tables(dim)
        else:
            self._digit = self._next = None

    def _check(self, key: OctKey) -> None:
        if key.dim != self.dim or key.max_depth != self.max_depth:
            raise ValueError(
                f"key (dim={key.dim}, max_depth={key.max_depth}) does not match "
                f"ordering (dim={self.dim}, max_depth={self.max_depth})"
            )

    def digits(self, key: OctKey) -> tuple[int, ...]:
        """Per-level curve digits from the root down to ``key.level``.

        An ancestor's digit tuple is a prefix of its descendants', so plain
        tuple comparison realizes the ancestor-first total order.
        """
        self._check(key)
        out = []
        state = 0
        L = self.max_depth
        for depth in range(1, key.level + 1):
            shift = L - depth
            child = 0
            for d, a in enumerate(key.anchor):
                child |= ((a >> shift) & 1) << d
            if self.kind == "morton":
                out.append(child)
            else:
                out.append(self._digit[state][child])
                state = self._next[state][child]
        return tuple(out)

    def sort_key(self, key: OctKey) -> tuple[int, ...]:
        return self.digits(key)

    def compare(self, a: OctKey, b: OctKey) -> int:
        da, db = self.digits(a), self.digits(b)
        if da == db:
            if a.level == b.level:
                return 0
            return -1 if a.level < b.level else 1
        return -1 if da < db else 1


def sfc_compare(a: OctKey, b: OctKey, ordering: SfcOrdering) -> int:
    """Compare two keys under ``ordering``: -1, 0 or +1."""
    return ordering.compare(a, b)


# ---------------------------------------------------------------------------
# Linear octree
# ---------------------------------------------------------------------------


@dataclass
class LinearOctree:
    leaves: list[OctKey]
    dim: int
    max_depth: int
    ordering: SfcOrdering
    balanced: bool = False
    _index: dict[tuple[tuple[int, ...], int], int] | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.leaves)

    def index(self) -> dict[tuple[tuple[int, ...], int], int]:
        if self._index is None:
            self._index = {(k.anchor, k.level): i for i, k in enumerate(self.leaves)}
        return self._index

    def leaf_position(self, key: OctKey) -> int:
        try:
            return self.index()[(key.anchor, key.level)]
        except KeyError:
            raise ValueError(f"{key} is not a leaf of this tree") from None

    def min_level(self) -> int:
        return min(k.level for k in self.leaves)

    def max_level(self) -> int:
        return max(k.level for k in self.leaves)


def construct(
    refine: Callable[[OctKey], bool],
    dim: int,
    max_depth: int,
    ordering: SfcOrdering | None = None,
) -> LinearOctree:
    """Build a complete linear octree by top-down predicate refinement.

    Every leaf either fails the predicate or sits at ``max_depth``.
    """
    if ordering is None:
        ordering = SfcOrdering("hilbert", dim, max_depth)
    root = OctKey((0,) * dim, 0, max_depth)
    leaves: list[OctKey] = []
    stack = [root]
    while stack:
        key = stack.pop()
        if key.level < max_depth and refine(key):
            stack.extend(key.children())
        else:
            leaves.append(key)
    leaves.sort(key=ordering.sort_key)
    return LinearOctree(leaves, dim, max_depth, ordering, balanced=False)


_DIRECTIONS: dict[int, list[tuple[int, ...]]] = {
    d: [v for v in itertools.product((-1, 0, 1), repeat=d) if any(v)] for d in (2, 3)
}


def _leaf_containing_cell(leafset: set, cell: tuple[int, ...], max_depth: int):
    """Locate the leaf whose box contains the finest-level cell ``cell``."""
    for lvl in range(max_depth, -1, -1):
        shift = max_depth - lvl
        anchor = tuple((c >> shift) << shift for c in cell)
        if (anchor, lvl) in leafset:
            return anchor, lvl
    return None


def balance_2to1(tree: LinearOctree) -> LinearOctree:
    """Minimal refinement so adjacent leaves (faces, edges and corners)
    differ by at most one level.

    Ripples by splitting any coarse leaf found next to a much finer one;
    every split is forced, so the fixed point is the unique minimal
    balanced refinement of the input.
    """
    L, dim = tree.max_depth, tree.dim
    top = 1 << L
    leafset = {(k.anchor, k.level) for k in tree.leaves}
    work = deque(sorted(leafset, key=lambda al: -al[1]))
    dirs = _DIRECTIONS[dim]
    while work:
        anchor, level = work.popleft()
        if (anchor, level) not in leafset:
            continue  # split since enqueued
        side = 1 << (L - level)
        for dvec in dirs:
            cell = []
            ok = True
            for a, d in zip(anchor, dvec):
                c = a - 1 if d < 0 else (a + side if d > 0 else a)
                if not 0 <= c < top:
                    ok = False
                    break
                cell.append(c)
            if not ok:
                continue
            cell_t = tuple(cell)
            nb = _leaf_containing_cell(leafset, cell_t, L)
            while nb is not None and nb[1] < level - 1:
                leafset.discard(nb)
                nb_key = OctKey(nb[0], nb[1], L)
                for ch in nb_key.children():
                    item = (ch.anchor, ch.level)
                    leafset.add(item)
                    work.append(item)
                nb = _leaf_containing_cell(leafset, cell_t, L)
    leaves = [OctKey(a, l, L) for a, l in leafset]
    leaves.sort(key=tree.ordering.sort_key)
    return LinearOctree(leaves, dim, L, tree.ordering, balanced=True)


def adjacency_kind(a: OctKey, b: OctKey) -> int | None:
    """Number of axes along which the closed boxes touch only at a point:
    1 = face contact, 2 = edge (corner in 2D), 3 = corner.  None if the
    boxes are disjoint or overlap."""
    touch = 0
    for d in range(a.dim):
        lo = max(a.anchor[d], b.anchor[d])
        hi = min(a.anchor[d] + a.side, b.anchor[d] + b.side)
        if lo > hi:
            return None
        if lo == hi:
            touch += 1
    if touch == 0:
        return None  # overlapping boxes are not adjacent
    return touch


def neighbors(key: OctKey, tree: LinearOctree, scope: str = "face") -> list[OctKey]:
    """All leaves adjacent to ``key``; requires a 2:1 balanced tree.

    ``scope`` is ``"face"`` for face contact only or ``"all"`` to include
    edge and corner contact.
    """
    if scope not in ("face", "all"):
        raise ValueError(f"scope must be 'face' or 'all', got {scope!r}")
    tree.leaf_position(key)  # raises if not a leaf
    idx = tree.index()
    L = tree.max_depth
    top = 1 << L
    side = key.side
    found: dict[tuple, OctKey] = {}
    for dvec in _DIRECTIONS[tree.dim]:
        cand_anchor = tuple(a + d * side for a, d in zip(key.anchor, dvec))
        if any(not 0 <= c < top for c in cand_anchor):
            continue
        cand = OctKey(cand_anchor, key.level, L)
        hits = []
        if (cand.anchor, cand.level) in idx:
            hits.append(cand)
        elif key.level > 0 and ((p := cand.ancestor_at(key.level - 1)).anchor, p.level) in idx:
            hits.append(p)
        elif key.level < L:
            half = side >> 1
            offsets = []
            for d in dvec:
                if d > 0:
                    offsets.append((0,))
                elif d < 0:
                    offsets.append((half,))
                else:
                    offsets.append((0, half))
            for off in itertools.product(*offsets):
                ch = OctKey(tuple(a + o for a, o in zip(cand_anchor, off)), key.level + 1, L)
                if (ch.anchor, ch.level) in idx:
                    hits.append(ch)
        for h in hits:
            found[(h.anchor, h.level)] = h
    out = []
    for h in found.values():
        kind = adjacency_kind(key, h)
        if kind is None:
            continue
        if scope == "face" and kind != 1:
            continue
        out.append(h)
    out.sort(key=tree.ordering.sort_key)
    return out


# ---------------------------------------------------------------------------
# Generators and I/O
# ---------------------------------------------------------------------------


def uniform_tree(dim: int, max_depth: int, level: int, ordering: SfcOrdering | None = None) -> LinearOctree:
    tree = construct(lambda k: k.level < level, dim, max_depth, ordering)
    tree.balanced = True
    return tree


def random_tree(
    rng,
    dim: int,
    max_depth: int,
    n_clusters: int = 3,
    base_level: int = 1,
    balance: bool = True,
    ordering: SfcOrdering | None = None,
) -> LinearOctree:
    """Random adaptive tree: octants containing one of ``n_clusters`` seed
    cells refine to a per-cluster target depth.  Deterministic given ``rng``."""
    top = 1 << max_depth
    seeds = []
    for _ in range(n_clusters):
        cell = tuple(int(rng.integers(0, top)) for _ in range(dim))
        depth = int(rng.integers(base_level + 1, max_depth + 1))
        seeds.append((cell, depth))

    def refine(key: OctKey) -> bool:
        if key.level < base_level:
            return True
        for cell, depth in seeds:
            if key.level < depth and all(a <= c < a + key.side for a, c in zip(key.anchor, cell)):
                return True
        return False

    tree = construct(refine, dim, max_depth, ordering)
    return balance_2to1(tree) if balance else tree


def write_dump(tree: LinearOctree) -> str:
    """ASCII dump: header ``dim maxdepth count``, one ``x y [z] level`` line
    per leaf."""
    lines = [f"{tree.dim} {tree.max_depth} {len(tree.leaves)}"]
    for k in tree.leaves:
        lines.append(" ".join(str(a) for a in k.anchor) + f" {k.level}")
    return "\n".join(lines) + "\n"


def parse_dump(text: str, ordering_kind: str = "hilbert") -> LinearOctree:
    rows = [ln.split() for ln in text.strip().splitlines() if ln.strip()]
    dim, max_depth, count = (int(x) for x in rows[0])
    if len(rows) - 1 != count:
        raise ValueError(f"dump header promises {count} leaves, found {len(rows) - 1}")
    ordering = SfcOrdering(ordering_kind, dim, max_depth)
    leaves = []
    for row in rows[1:]:
        *anchor, level = (int(x) for x in row)
        key = OctKey(tuple(anchor), level, max_depth)
        key.validate()
        leaves.append(key)
    leaves.sort(key=ordering.sort_key)
    return LinearOctree(leaves, dim, max_depth, ordering)
