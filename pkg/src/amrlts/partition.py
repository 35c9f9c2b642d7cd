"""Weighted SFC partitioning and the simulated rank boundary.

Once leaves are sorted along the space-filling curve, partitioning reduces to
cutting a 1D weighted sequence: greedy prefix cuts at ideal weight multiples
bound the overweight of any rank by the largest single octant weight.

All inter-rank data flow goes through :func:`exchange`; ranks never read peer
state directly, so the same plan drives sequential and threaded execution
identically.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .octree import LinearOctree, OctKey


def octant_weight(key: OctKey, l_min: int, mode: str) -> float:
    """Partition weight of one octant: 1 for global stepping, doubling per
    refinement level above ``l_min`` for local stepping."""
    if key.level < l_min:
        raise ValueError(f"octant level {key.level} below l_min={l_min}")
    if mode == "gts":
        return 1.0
    if mode == "lts":
        return float(1 << (key.level - l_min))
    raise ValueError(f"mode must be 'gts' or 'lts', got {mode!r}")


def tree_weights(tree: LinearOctree, mode: str) -> np.ndarray:
    l_min = tree.min_level()
    return np.array([octant_weight(k, l_min, mode) for k in tree.leaves])


@dataclass
class PartitionMap:
    """Contiguous SFC ranges of leaves per rank with their weight sums."""

    rank_ranges: list[tuple[int, int]]
    weights: np.ndarray
    rank_weights: np.ndarray

    @property
    def ranks(self) -> int:
        return len(self.rank_ranges)

    @property
    def has_empty_ranks(self) -> bool:
        return any(a == b for a, b in self.rank_ranges)

    def owner_of(self, leaf_index: int) -> int:
        for r, (a, b) in enumerate(self.rank_ranges):
            if a <= leaf_index < b:
                return r
        raise IndexError(leaf_index)

    def owners(self, n_leaves: int) -> np.ndarray:
        out = np.empty(n_leaves, dtype=int)
        for r, (a, b) in enumerate(self.rank_ranges):
            out[a:b] = r
        return out


def weighted_partition(tree: LinearOctree, weights, ranks: int) -> PartitionMap:
    """Greedy prefix split of the SFC-sorted leaves at ideal weight multiples.

    Guarantees ``rank_weight <= W_total/R + max(weights)``; ranks past the
    end of a short sequence receive empty ranges.
    """
    weights = np.asarray(weights, dtype=float)
    if ranks < 1:
        raise ValueError("need at least one rank")
    if len(weights) != len(tree.leaves):
        raise ValueError("one weight per leaf required")
    if np.any(weights <= 0):
        raise ValueError("weights must be positive")
    total = float(np.sum(weights))
    prefix = np.cumsum(weights)
    cuts = [0]
    for r in range(1, ranks):
        target = total * r / ranks
        # cut right after the first leaf whose prefix sum reaches the target
        cut = int(np.searchsorted(prefix, target)) + 1
        cut = max(cut, cuts[-1])
        cuts.append(min(cut, len(weights)))
    cuts.append(len(weights))
    rank_ranges = [(cuts[r], cuts[r + 1]) for r in range(ranks)]
    rank_weights = np.array([float(np.sum(weights[a:b])) for a, b in rank_ranges])
    return PartitionMap(rank_ranges, weights, rank_weights)


# ---------------------------------------------------------------------------
# Exchange plan and simulated transport
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PlanEntry:
    """One ghost-octant shipment: the owner sends the zip-node slice of one
    leaf to one reader rank."""

    sender: int
    receiver: int
    leaf: int
    node_start: int
    node_stop: int
    sender_block: int
    receiver_blocks: tuple[int, ...]

    @property
    def node_count(self) -> int:
        return self.node_stop - self.node_start


@dataclass
class ExchangePlan:
    entries: dict[tuple[int, int], list[PlanEntry]] = field(default_factory=dict)

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return sorted(self.entries)

    def total_entries(self) -> int:
        return sum(len(v) for v in self.entries.values())

    def total_nodes(self) -> int:
        return sum(e.node_count for v in self.entries.values() for e in v)

    def restrict(self, block_set: set[int]) -> "ExchangePlan":
        """Partial plan: entries whose sender block or any receiver block is
        in ``block_set``."""
        out: dict[tuple[int, int], list[PlanEntry]] = {}
        for pair, items in self.entries.items():
            kept = [
                e
                for e in items
                if e.sender_block in block_set
                or any(b in block_set for b in e.receiver_blocks)
            ]
            if kept:
                out[pair] = kept
        return ExchangePlan(out)


def build_exchange_plan(mesh, pmap: PartitionMap) -> ExchangePlan:
    """Cross-rank ghost plan from the mesh's padding-read footprint.

    For every block whose padding reads nodes of a leaf owned by another
    rank, the owning leaf's node slice appears exactly once per rank pair,
    ordered by leaf index so send and receive sides agree.
    """
    owners = pmap.owners(len(mesh.tree.leaves))
    needed: dict[tuple[int, int, int], set[int]] = {}
    for block in mesh.blocks:
        r = block.owner_rank
        for leaf in mesh.block_read_leaves(block.index):
            s = owners[leaf]
            if s != r:
                needed.setdefault((int(s), r, leaf), set()).add(block.index)
    grouped: dict[tuple[int, int], list[PlanEntry]] = {}
    for (s, r, leaf) in sorted(needed):
        a, b = mesh.leaf_node_slice(leaf)
        entry = PlanEntry(
            sender=s,
            receiver=r,
            leaf=leaf,
            node_start=a,
            node_stop=b,
            sender_block=int(mesh.leaf_block[leaf]),
            receiver_blocks=tuple(sorted(needed[(s, r, leaf)])),
        )
        grouped.setdefault((s, r), []).append(entry)
    return ExchangePlan(grouped)


class ExchangeError(RuntimeError):
    pass


def exchange(
    plan: ExchangePlan, posted: dict[tuple[int, int], list[bytes]]
) -> dict[tuple[int, int], list[bytes]]:
    """Deliver posted byte buffers along the plan.

    ``posted[(s, r)]`` must hold exactly one buffer per plan entry for that
    pair, in plan order; the result maps ``(r, s)`` to the delivered list.
    Count mismatches (missing or oversized posts) raise with the offending
    rank pair named.
    """
    for pair in posted:
        if pair not in plan.entries:
            raise ExchangeError(f"post for rank pair {pair} not in plan")
    delivered: dict[tuple[int, int], list[bytes]] = {}
    for pair, items in plan.entries.items():
        bufs = posted.get(pair)
        if bufs is None:
            raise ExchangeError(f"missing post for rank pair {pair}")
        if len(bufs) != len(items):
            kind = "missing" if len(bufs) < len(items) else "oversized"
            raise ExchangeError(
                f"{kind} post for rank pair {pair}: got {len(bufs)} buffers, "
                f"plan prescribes {len(items)}"
            )
        delivered[(pair[1], pair[0])] = list(bufs)
    return delivered
