"""Block decomposition and zipped/unzipped field representations.

A balanced linear octree is compressed into *blocks*: maximal sub-octrees
whose leaves share one refinement level, each treated as a uniform grid
patch with ``points_per_octant`` nodes per octant per dimension and a
padding halo for finite-difference stencils.

Node bookkeeping happens on an integer lattice: scaling octree coordinates
by ``points_per_octant - 1`` makes every grid node of every level an integer
point, and the nodes of a level-l leaf are exactly the lattice points
divisible by ``2**(max_depth - l)`` inside its box.  The zipped field stores
one value per *real* node: duplicates are merged (first leaf along the SFC
owns a shared node) and hanging nodes - points some adjacent coarser leaf
covers but does not resolve - are dropped, since their values follow from
interpolation on the coarser side.

The unzip of each block is precompiled into a sparse gather matrix over the
zip vector: same-level and finer sources are weight-one copies (injection at
coincident points), coarser sources are tensor-product cubic Lagrange rows
whose hanging dependencies are resolved recursively through the coarser
levels.  Unzipping a field is then one CSR matrix-vector product per block,
bit-exact on copy rows.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .octree import LinearOctree, OctKey, neighbors
from .partition import ExchangePlan, PartitionMap, build_exchange_plan


@dataclass(frozen=True)
class Domain:
    """Physical bounding box mapped onto the octree's integer grid."""

    lo: tuple[float, ...]
    hi: tuple[float, ...]

    def extent(self, d: int) -> float:
        return self.hi[d] - self.lo[d]


@dataclass(frozen=True)
class Block:
    """Uniform sub-grid patch: a block root octant whose descendant leaves
    all sit at ``leaf_level``."""

    index: int
    root: OctKey
    leaf_level: int
    leaf_range: tuple[int, int]
    points_per_octant: int
    pad: int
    owner_rank: int

    @property
    def dim(self) -> int:
        return self.root.dim

    @property
    def interior_n(self) -> int:
        """Interior points per dimension."""
        return (self.points_per_octant - 1) * (1 << (self.leaf_level - self.root.level)) + 1

    @property
    def interior_points(self) -> int:
        return self.interior_n**self.dim

    @property
    def padded_n(self) -> int:
        return self.interior_n + 2 * self.pad

    @property
    def padded_shape(self) -> tuple[int, ...]:
        return (self.padded_n,) * self.dim

    @property
    def interior_slices(self) -> tuple[slice, ...]:
        return (slice(self.pad, self.pad + self.interior_n),) * self.dim


def decompose_blocks(
    tree: LinearOctree,
    points_per_octant: int = 7,
    pad: int = 2,
    pmap: PartitionMap | None = None,
) -> list[Block]:
    """Maximal uniform blocks covering the tree, split at rank boundaries.

    Leaves of any octant are contiguous in SFC order, so the recursion works
    on index ranges of the sorted leaf list.
    """
    leaves = tree.leaves
    owners = pmap.owners(len(leaves)) if pmap is not None else np.zeros(len(leaves), dtype=int)
    blocks: list[Block] = []

    def emit(node: OctKey, a: int, b: int):
        blocks.append(
            Block(
                index=len(blocks),
                root=node,
                leaf_level=leaves[a].level,
                leaf_range=(a, b),
                points_per_octant=points_per_octant,
                pad=pad,
                owner_rank=int(owners[a]),
            )
        )

    def recurse(node: OctKey, a: int, b: int):
        lvl = leaves[a].level
        uniform = all(leaves[i].level == lvl for i in range(a, b))
        single_rank = owners[a] == owners[b - 1]
        if uniform and single_rank:
            emit(node, a, b)
            return
        pos = a
        for child in sorted(node.children(), key=tree.ordering.sort_key):
            end = pos
            while end < b and child.contains(leaves[end]):
                end += 1
            if end > pos:
                recurse(child, pos, end)
            pos = end
        if pos != b:
            raise RuntimeError("leaf range does not tile the octant; tree is not complete")

    root = OctKey((0,) * tree.dim, 0, tree.max_depth)
    recurse(root, 0, len(leaves))
    return blocks


def _lagrange_weights(xi: float, n_nodes: int) -> tuple[int, np.ndarray]:
    """Window start and 4-point (or fewer) Lagrange weights for position
    ``xi`` on the integer grid ``0..n_nodes-1``."""
    npts = min(4, n_nodes)
    w0 = int(np.floor(xi)) - 1
    w0 = max(0, min(w0, n_nodes - npts))
    xs = np.arange(w0, w0 + npts, dtype=float)
    weights = np.ones(npts)
    for a in range(npts):
        for b in range(npts):
            if a != b:
                weights[a] *= (xi - xs[b]) / (xs[a] - xs[b])
    return w0, weights


class Mesh:
    """Node registry, block gather/scatter plans and synchronization maps."""

    def __init__(
        self,
        tree: LinearOctree,
        points_per_octant: int = 7,
        pad: int = 2,
        pmap: PartitionMap | None = None,
        domain: Domain | None = None,
    ):
        if not tree.balanced:
            raise ValueError("mesh construction requires a 2:1 balanced tree")
        if points_per_octant < 5 or points_per_octant % 2 == 0:
            raise ValueError("points_per_octant must be odd and >= 5")
        if pad < 1 or pad > points_per_octant - 1:
            raise ValueError("pad must be in [1, points_per_octant - 1]")
        self.tree = tree
        self.dim = tree.dim
        self.L = tree.max_depth
        self.ppo = points_per_octant
        self.pad = pad
        self.scale = points_per_octant - 1
        self.top_nodes = self.scale << self.L
        if domain is None:
            domain = Domain((0.0,) * self.dim, (float(1 << self.L),) * self.dim)
        self.domain = domain
        if pmap is None:
            w = np.ones(len(tree.leaves))
            pmap = PartitionMap([(0, len(tree.leaves))], w, np.array([float(len(tree.leaves))]))
        self.pmap = pmap
        self.blocks = decompose_blocks(tree, points_per_octant, pad, pmap)
        self.leaf_block = np.empty(len(tree.leaves), dtype=int)
        for b in self.blocks:
            self.leaf_block[b.leaf_range[0] : b.leaf_range[1]] = b.index
        self._build_registry()
        self._build_gathers()
        self._plan: ExchangePlan | None = None

    # -- integer lattice helpers -------------------------------------------

    def _encode(self, pts: np.ndarray) -> np.ndarray:
        """Pack integer lattice coordinates into one int64 per point."""
        m = self.top_nodes + 1
        if m ** self.dim >= 2**62:
            raise ValueError("max_depth too large for the node lattice encoding")
        code = pts[..., 0].astype(np.int64)
        for d in range(1, self.dim):
            code = code * m + pts[..., d]
        return code

    def leaf_spacing(self, level: int) -> int:
        return 1 << (self.L - level)

    def _leaf_points(self, key: OctKey) -> np.ndarray:
        """All lattice points of a leaf's octant grid, C-ordered, (ppo^D, D)."""
        s = self.leaf_spacing(key.level)
        axes = [a * self.scale + s * np.arange(self.ppo) for a in key.anchor]
        grid = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in grid], axis=-1).astype(np.int64)

    def _build_registry(self) -> None:
        tree = self.tree
        n_leaves = len(tree.leaves)
        per_leaf = self.ppo**self.dim
        codes = np.empty(n_leaves * per_leaf, dtype=np.int64)
        hanging = np.zeros(n_leaves * per_leaf, dtype=bool)
        for i, key in enumerate(tree.leaves):
            pts = self._leaf_points(key)
            codes[i * per_leaf : (i + 1) * per_leaf] = self._encode(pts)
            coarse = [
                nb for nb in neighbors(key, tree, scope="all") if nb.level == key.level - 1
            ]
            if coarse:
                s2 = self.leaf_spacing(key.level - 1)
                off_lattice = np.any(pts % s2 != 0, axis=1)
                covered = np.zeros(per_leaf, dtype=bool)
                for nb in coarse:
                    lo = np.array(nb.anchor) * self.scale
                    hi = lo + nb.side * self.scale
                    covered |= np.all((pts >= lo) & (pts <= hi), axis=1)
                hanging[i * per_leaf : (i + 1) * per_leaf] = off_lattice & covered
        uniq, first, inverse = np.unique(codes, return_index=True, return_inverse=True)
        hang_u = np.zeros(len(uniq), dtype=bool)
        np.logical_or.at(hang_u, inverse, hanging)
        # gids in discovery order over real (non-hanging) unique points
        order = np.argsort(first, kind="stable")
        rank_by_first = np.empty(len(uniq), dtype=np.int64)
        real_in_order = ~hang_u[order]
        gid_seq = np.cumsum(real_in_order) - 1
        rank_by_first[order] = np.where(real_in_order, gid_seq, -1)
        self.n_nodes = int(real_in_order.sum())
        gid_of_unique = rank_by_first  # -1 for hanging
        point_gid = gid_of_unique[inverse]
        first_claim = np.zeros(len(codes), dtype=bool)
        first_claim[first] = True
        self.leaf_gids = point_gid.reshape(n_leaves, per_leaf)
        # owned slice per leaf: first-claimed real points, contiguous by construction
        owned_mask = first_claim & (point_gid >= 0)
        counts = owned_mask.reshape(n_leaves, per_leaf).sum(axis=1)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        self.leaf_slices = np.stack([starts, starts + counts], axis=1).astype(np.int64)
        self._owned_mask = owned_mask.reshape(n_leaves, per_leaf)
        # node coordinates (for physical mapping, norms, dumps)
        coords = np.empty((self.n_nodes, self.dim), dtype=np.int64)
        m = self.top_nodes + 1
        real_codes = uniq[~hang_u]
        real_gids = gid_of_unique[~hang_u]
        dec = real_codes.copy()
        for d in range(self.dim - 1, -1, -1):
            coords[real_gids, d] = dec % m
            dec //= m
        self.node_coords = coords
        all_codes = self._encode(coords)
        order2 = np.argsort(all_codes, kind="stable")
        self._sorted_codes = all_codes[order2]
        self._sorted_gids = order2.astype(np.int64)
        # zip scatter: per leaf, block-array flat positions of its owned nodes
        self.zip_positions: list[np.ndarray] = []
        for i, key in enumerate(tree.leaves):
            pts = self._leaf_points(key)[self._owned_mask[i]]
            b = self.blocks[self.leaf_block[i]]
            rel = (pts - self._block_org(b)) // self.leaf_spacing(b.leaf_level)
            flat = np.ravel_multi_index(rel.T, b.padded_shape)
            self.zip_positions.append(flat.astype(np.int64))

    def _block_org(self, b: Block) -> np.ndarray:
        s = self.leaf_spacing(b.leaf_level)
        return np.array(b.root.anchor, dtype=np.int64) * self.scale - b.pad * s

    def lookup_gids(self, codes: np.ndarray) -> np.ndarray:
        """Vectorized code -> gid lookup; -1 where the point is not a real node."""
        pos = np.searchsorted(self._sorted_codes, codes)
        pos = np.clip(pos, 0, len(self._sorted_codes) - 1)
        hit = self._sorted_codes[pos] == codes
        out = np.where(hit, self._sorted_gids[pos], -1)
        return out

    # -- interpolation chains ----------------------------------------------

    def _containing_leaves(self, p: tuple[int, ...]) -> list[int]:
        idx = self.tree.index()
        found = set()
        for sig in itertools.product((-1, 1), repeat=self.dim):
            cell = []
            ok = True
            for x, s in zip(p, sig):
                q = x - 1 if s < 0 else x
                if q < 0 or q >= self.top_nodes:
                    ok = False
                    break
                cell.append(q // self.scale)
            if not ok:
                continue
            for lvl in range(self.L, -1, -1):
                shift = self.L - lvl
                anchor = tuple((c >> shift) << shift for c in cell)
                j = idx.get((anchor, lvl))
                if j is not None:
                    found.add(j)
                    break
        return sorted(found)

    def _point_weights(self, p: tuple[int, ...], memo: dict) -> dict[int, float]:
        code = int(self._encode(np.array([p], dtype=np.int64))[0])
        cached = memo.get(code)
        if cached is not None:
            return cached
        gid = int(self.lookup_gids(np.array([code], dtype=np.int64))[0])
        if gid >= 0:
            memo[code] = {gid: 1.0}
            return memo[code]
        containing = self._containing_leaves(p)
        if not containing:
            raise RuntimeError(f"lattice point {p} outside the domain")
        lvl = min(self.tree.leaves[j].level for j in containing)
        leaf = self.tree.leaves[
            next(j for j in containing if self.tree.leaves[j].level == lvl)
        ]
        s = self.leaf_spacing(leaf.level)
        org = np.array(leaf.anchor, dtype=np.int64) * self.scale
        acc: dict[int, float] = {}
        dims = []
        for d in range(self.dim):
            xi = (p[d] - org[d]) / s
            dims.append(_lagrange_weights(xi, self.ppo))
        for combo in itertools.product(*[range(len(w)) for _, w in dims]):
            w = 1.0
            q = []
            for d, c in enumerate(combo):
                w0, ws = dims[d]
                w *= ws[c]
                q.append(int(org[d] + (w0 + c) * s))
            if w == 0.0:
                continue
            for g, gw in self._point_weights(tuple(q), memo).items():
                acc[g] = acc.get(g, 0.0) + w * gw
        memo[code] = acc
        return acc

    # -- gather matrices -----------------------------------------------------

    def _build_gathers(self) -> None:
        self.gathers: list[sp.csr_matrix] = []
        self._block_read: list[np.ndarray] = []
        memo: dict = {}
        starts = self.leaf_slices[:, 0]
        for b in self.blocks:
            s = self.leaf_spacing(b.leaf_level)
            org = self._block_org(b)
            n = b.padded_n
            axes = [org[d] + s * np.arange(n) for d in range(self.dim)]
            grid = np.meshgrid(*axes, indexing="ij")
            pts = np.stack([g.ravel() for g in grid], axis=-1)
            in_dom = np.all((pts >= 0) & (pts <= self.top_nodes), axis=1)
            codes = self._encode(pts)
            gids = np.full(len(pts), -1, dtype=np.int64)
            gids[in_dom] = self.lookup_gids(codes[in_dom])
            rows_i: list[np.ndarray] = []
            rows_d: list[np.ndarray] = []
            counts = np.zeros(len(pts) + 1, dtype=np.int64)
            direct = gids >= 0
            for r in np.nonzero(direct)[0]:
                counts[r + 1] = 1
            interp_rows = np.nonzero(in_dom & ~direct)[0]
            interp_entries: dict[int, dict[int, float]] = {}
            for r in interp_rows:
                wts = self._point_weights(tuple(int(x) for x in pts[r]), memo)
                interp_entries[r] = wts
                counts[r + 1] = len(wts)
            indptr = np.cumsum(counts)
            nnz = int(indptr[-1])
            indices = np.empty(nnz, dtype=np.int64)
            data = np.empty(nnz)
            for r in np.nonzero(direct)[0]:
                indices[indptr[r]] = gids[r]
                data[indptr[r]] = 1.0
            for r, wts in interp_entries.items():
                ks = sorted(wts)
                indices[indptr[r] : indptr[r + 1]] = ks
                data[indptr[r] : indptr[r + 1]] = [wts[k] for k in ks]
            G = sp.csr_matrix((data, indices, indptr), shape=(len(pts), self.n_nodes))
            self.gathers.append(G)
            support = np.unique(indices)
            leaf_of = np.searchsorted(starts, support, side="right") - 1
            self._block_read.append(np.unique(leaf_of))

    # -- public surface -----------------------------------------------------

    def leaf_node_slice(self, leaf: int) -> tuple[int, int]:
        a, b = self.leaf_slices[leaf]
        return int(a), int(b)

    def block_read_leaves(self, block_index: int) -> np.ndarray:
        """Leaves whose owned nodes the block's padded gather reads."""
        return self._block_read[block_index]

    def zeros_zip(self, nvars: int = 1) -> np.ndarray:
        return np.zeros((nvars, self.n_nodes))

    def unzip(self, zip_values: np.ndarray) -> list[np.ndarray]:
        """Padded per-block arrays gathered from the zipped field."""
        zip_values = np.atleast_2d(zip_values)
        out = []
        for b in self.blocks:
            flat = self.gathers[b.index].dot(zip_values.T).T
            out.append(np.ascontiguousarray(flat.reshape(zip_values.shape[0], *b.padded_shape)))
        return out

    def zip(self, block_arrays: Sequence[np.ndarray]) -> np.ndarray:
        """Zipped field assembled from block interiors (owners win)."""
        nvars = block_arrays[0].shape[0]
        out = np.empty((nvars, self.n_nodes))
        for i in range(len(self.tree.leaves)):
            a, b = self.leaf_slices[i]
            if b == a:
                continue
            arr = block_arrays[self.leaf_block[i]].reshape(nvars, -1)
            out[:, a:b] = arr[:, self.zip_positions[i]]
        return out

    def exchange_plan(self) -> ExchangePlan:
        if self._plan is None:
            self._plan = build_exchange_plan(self, self.pmap)
        return self._plan

    def level_blocks(self, min_level: int) -> set[int]:
        return {b.index for b in self.blocks if b.leaf_level >= min_level}

    def build_sync_maps(self) -> tuple[ExchangePlan, list[ExchangePlan]]:
        """Full ghost map plus one partial map per time level.

        The partial map for fine-step phase ``k`` keeps entries whose sender
        or receiver block is eligible at that phase (blocks of leaf level at
        least ``l_max - k``).
        """
        full = self.exchange_plan()
        l_max = max(b.leaf_level for b in self.blocks)
        l_min = min(b.leaf_level for b in self.blocks)
        partial = []
        for k in range(l_max - l_min + 1):
            partial.append(full.restrict(self.level_blocks(l_max - k)))
        return full, partial

    # -- physical coordinates ------------------------------------------------

    def node_physical(self) -> np.ndarray:
        out = np.empty((self.n_nodes, self.dim))
        for d in range(self.dim):
            out[:, d] = self.domain.lo[d] + (
                self.node_coords[:, d] / self.top_nodes
            ) * self.domain.extent(d)
        return out

    def block_axes(self, block: Block) -> list[np.ndarray]:
        """Physical coordinates along each axis of the padded block grid."""
        s = self.leaf_spacing(block.leaf_level)
        org = self._block_org(block)
        out = []
        for d in range(self.dim):
            lattice = org[d] + s * np.arange(block.padded_n)
            out.append(self.domain.lo[d] + (lattice / self.top_nodes) * self.domain.extent(d))
        return out

    def block_spacing(self, block: Block) -> float:
        return self.domain.extent(0) * self.leaf_spacing(block.leaf_level) / self.top_nodes

    def finest_spacing(self) -> float:
        return min(self.block_spacing(b) for b in self.blocks)

    def block_domain_faces(self, block: Block) -> list[tuple[int, int]]:
        """(axis, side) pairs of block faces lying on the physical boundary."""
        out = []
        side = block.root.side
        for d in range(self.dim):
            if block.root.anchor[d] == 0:
                out.append((d, 0))
            if block.root.anchor[d] + side == (1 << self.L):
                out.append((d, 1))
        return out


# ---------------------------------------------------------------------------
# field output
# ---------------------------------------------------------------------------


def write_block_vtk(mesh: Mesh, block: Block, values: np.ndarray, name: str = "field") -> str:
    """Legacy-VTK ASCII rectilinear grid of one block's interior values."""
    axes = mesh.block_axes(block)
    g = block.pad
    n = block.interior_n
    inner = [ax[g : g + n] for ax in axes]
    if mesh.dim == 2:
        inner.append(np.zeros(1))
    dims = [len(a) for a in inner]
    lines = [
        "# vtk DataFile Version 2.0",
        f"block {block.index}",
        "ASCII",
        "DATASET RECTILINEAR_GRID",
        f"DIMENSIONS {dims[0]} {dims[1]} {dims[2]}",
    ]
    for label, ax in zip(("X", "Y", "Z"), inner):
        lines.append(f"{label}_COORDINATES {len(ax)} double")
        lines.append(" ".join(f"{v:.17g}" for v in ax))
    interior = values[block.interior_slices]
    lines.append(f"POINT_DATA {interior.size}")
    lines.append(f"SCALARS {name} double")
    lines.append("LOOKUP_TABLE default")
    flat = interior.transpose(*range(mesh.dim - 1, -1, -1)).ravel()
    lines.extend(f"{v:.17g}" for v in flat)
    return "\n".join(lines) + "\n"


def field_csv_rows(mesh: Mesh, block_arrays: Sequence[np.ndarray], var: int = 0):
    """Rows ``block_id,i,j[,k],value`` over block interiors."""
    for b in mesh.blocks:
        interior = block_arrays[b.index][var][b.interior_slices]
        for idx in np.ndindex(*interior.shape):
            yield (b.index, *idx, interior[idx])
