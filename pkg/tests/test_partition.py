from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from amrlts.mesh import Mesh
from amrlts.octree import OctKey, random_tree, uniform_tree
from amrlts.partition import (
    ExchangeError,
    ExchangePlan,
    PlanEntry,
    build_exchange_plan,
    exchange,
    octant_weight,
    tree_weights,
    weighted_partition,
)


# ---------------------------------------------------------------------------
# octant_weight
# ---------------------------------------------------------------------------


def key(level, max_depth=6):
    return OctKey((0,) * 2, level, max_depth)


def test_weight_at_lmin_is_one():
    assert octant_weight(key(2), 2, "lts") == 1.0


def test_weight_doubles_per_level():
    assert octant_weight(key(5), 2, "lts") == 8.0
    for lvl in range(2, 6):
        assert octant_weight(key(lvl), 2, "lts") == 2.0 ** (lvl - 2)


def test_weight_gts_always_one():
    for lvl in range(0, 6):
        assert octant_weight(key(lvl), 0, "gts") == 1.0


def test_weight_below_lmin_rejected():
    with pytest.raises(ValueError):
        octant_weight(key(1), 2, "lts")


# ---------------------------------------------------------------------------
# weighted_partition
# ---------------------------------------------------------------------------


def test_single_rank_covers_everything():
    tree = uniform_tree(2, 3, 2)
    pmap = weighted_partition(tree, np.ones(len(tree.leaves)), 1)
    assert pmap.rank_ranges == [(0, len(tree.leaves))]


def test_greedy_split_example():
    tree = uniform_tree(2, 3, 1)  # 4 leaves
    pmap = weighted_partition(tree, [1.0, 1.0, 2.0, 4.0], 2)
    assert pmap.rank_ranges == [(0, 3), (3, 4)]
    assert pmap.rank_weights.tolist() == [4.0, 4.0]
    # exhaustive check: this is the optimal contiguous 2-split
    weights = [1.0, 1.0, 2.0, 4.0]
    best = min(max(sum(weights[:c]), sum(weights[c:])) for c in range(5))
    assert max(pmap.rank_weights) == best


def test_uniform_weights_equal_counts():
    tree = uniform_tree(2, 4, 2)  # 16 leaves
    pmap = weighted_partition(tree, np.ones(16), 4)
    assert all(b - a == 4 for a, b in pmap.rank_ranges)


def test_contiguity_reconstructs_sequence():
    rng = np.random.default_rng(0)
    tree = random_tree(rng, 2, 5)
    w = tree_weights(tree, "lts")
    for ranks in (2, 3, 7):
        pmap = weighted_partition(tree, w, ranks)
        flat = [i for a, b in pmap.rank_ranges for i in range(a, b)]
        assert flat == list(range(len(tree.leaves)))


def test_more_ranks_than_leaves_allowed():
    tree = uniform_tree(2, 2, 1)  # 4 leaves
    pmap = weighted_partition(tree, np.ones(4), 7)
    assert pmap.ranks == 7
    assert pmap.has_empty_ranks
    flat = [i for a, b in pmap.rank_ranges for i in range(a, b)]
    assert flat == list(range(4))


def test_imbalance_bound_500_random_cases():
    rng = np.random.default_rng(17)
    cases = 0
    while cases < 500:
        n = int(rng.integers(5, 200))
        w = np.exp(rng.normal(size=n))
        ranks = int(rng.integers(2, 33))
        tree = uniform_tree(2, 4, 2)  # geometry irrelevant for the bound
        pmap = weighted_partition(tree, np.resize(w, len(tree.leaves)), ranks)
        wts = pmap.weights
        bound = float(np.sum(wts)) / ranks + float(np.max(wts))
        assert np.max(pmap.rank_weights) <= bound + 1e-9
        cases += 1


def test_invalid_inputs():
    tree = uniform_tree(2, 2, 1)
    with pytest.raises(ValueError):
        weighted_partition(tree, np.ones(4), 0)
    with pytest.raises(ValueError):
        weighted_partition(tree, np.ones(3), 2)
    with pytest.raises(ValueError):
        weighted_partition(tree, np.array([1.0, -1.0, 1.0, 1.0]), 2)


def test_lts_weights_balance_block_steps():
    # with lts weights, per-rank octant-step counts stay near the ideal
    rng = np.random.default_rng(23)
    for _ in range(20):
        tree = random_tree(rng, 2, 5)
        w = tree_weights(tree, "lts")
        ranks = int(rng.integers(2, 6))
        pmap = weighted_partition(tree, w, ranks)
        ideal = float(np.sum(w)) / ranks
        assert np.max(pmap.rank_weights) <= ideal + np.max(w) + 1e-9


# ---------------------------------------------------------------------------
# exchange
# ---------------------------------------------------------------------------


def toy_plan():
    e01 = PlanEntry(0, 1, leaf=3, node_start=0, node_stop=4, sender_block=0, receiver_blocks=(1,))
    e10 = PlanEntry(1, 0, leaf=7, node_start=4, node_stop=9, sender_block=1, receiver_blocks=(0,))
    return ExchangePlan({(0, 1): [e01], (1, 0): [e10]})


def test_exchange_empty_plan_noop():
    assert exchange(ExchangePlan({}), {}) == {}


def test_exchange_loopback_bit_exact():
    plan = toy_plan()
    a = np.arange(4.0).tobytes()
    b = np.arange(5.0).tobytes()
    out = exchange(plan, {(0, 1): [a], (1, 0): [b]})
    assert out[(1, 0)] == [a]
    assert out[(0, 1)] == [b]


def test_exchange_count_validation():
    plan = toy_plan()
    with pytest.raises(ExchangeError, match=r"missing post for rank pair \(1, 0\)"):
        exchange(plan, {(0, 1): [b"x"]})
    with pytest.raises(ExchangeError, match="oversized"):
        exchange(plan, {(0, 1): [b"x", b"y"], (1, 0): [b"z"]})
    with pytest.raises(ExchangeError, match="not in plan"):
        exchange(plan, {(0, 1): [b"x"], (1, 0): [b"z"], (2, 0): [b"w"]})


def test_exchange_randomized_matches_sequential_oracle():
    rng = np.random.default_rng(5)
    tree = random_tree(rng, 2, 4)
    w = tree_weights(tree, "lts")
    pmap = weighted_partition(tree, w, 8)
    mesh = Mesh(tree, points_per_octant=5, pad=2, pmap=pmap)
    plan = build_exchange_plan(mesh, pmap)
    posted = {
        pair: [rng.normal(size=e.node_count).tobytes() for e in items]
        for pair, items in plan.entries.items()
    }
    # oracle: naive sequential copy loop
    want = {(r, s): list(bufs) for (s, r), bufs in posted.items()}
    got = exchange(plan, posted)
    assert got == want
    # threaded posting produces identical delivery
    def post_rank(r):
        return {pair: posted[pair] for pair in plan.entries if pair[0] == r}

    with ThreadPoolExecutor(max_workers=4) as pool:
        parts = list(pool.map(post_rank, range(8)))
    merged = {}
    for p in parts:
        merged.update(p)
    assert exchange(plan, merged) == want
