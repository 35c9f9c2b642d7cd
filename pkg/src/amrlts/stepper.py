"""Global and local (multirate) timestepping drivers.

Both schemes share one engine.  Time is discretized in units of the finest
block step ``dt_fine = cfl * dx_finest``; in local mode a block of leaf
level l steps every ``2**(l_max - l)`` fine slices with a step matched to
its spacing, while global mode puts every block on the finest cadence.  At
a slice all eligible blocks run the explicit stage loop in lockstep; fresh
stage values are synchronized after each stage over the eligible subset
only (partial block synchronization), and updated states after the step.

Ghost data comes from per-leaf records (pre/post step state plus the stage
vector of the last step), kept per simulated rank; cross-rank flow goes
only through the byte-level exchange plan.  A reader at a different step
size or an intermediate time converts a neighbor record with the
stage-transfer conjugation from :mod:`amrlts.rkcorrect` and, for base
states, a virtual substep built from the transferred stages.  Aligned
equal-size neighbors are copied verbatim, so a uniform mesh reproduces
global stepping bit for bit.
"""
from __future__ import annotations

import time
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .mesh import Mesh
from .partition import ExchangePlan, exchange
from .rkcorrect import ButcherTableau, get_tableau, stage_transfer_matrix
from .wave import block_geometry, wave_rhs


@dataclass
class TimeLevelSchedule:
    """Eligibility of blocks over the fine-step phases of one coarse round."""

    block_levels: list[int]  # cadence level per block
    l_max: int
    l_min: int

    @property
    def delta_l(self) -> int:
        return self.l_max - min(self.block_levels)

    @property
    def slices_per_round(self) -> int:
        return 1 << self.delta_l

    def period(self, block: int) -> int:
        return 1 << (self.l_max - self.block_levels[block])

    def eligible(self, i: int) -> list[int]:
        return [b for b in range(len(self.block_levels)) if i % self.period(b) == 0]

    def phase(self, i: int) -> int:
        """Sync-phase index: trailing zero bits of the slice counter, clipped
        to the cadence span (full synchronization at round starts)."""
        if i % self.slices_per_round == 0:
            return self.delta_l
        tz = (i & -i).bit_length() - 1
        return min(tz, self.delta_l)

    def step_start(self, i: int, block: int) -> int:
        p = self.period(block)
        return (i // p) * p

    def steps_per_round(self, block: int) -> int:
        return self.slices_per_round // self.period(block)


@dataclass
class WorkCounters:
    rhs_evals: defaultdict = field(default_factory=lambda: defaultdict(int))
    rhs_by_rank: defaultdict = field(default_factory=lambda: defaultdict(int))
    point_steps: int = 0
    point_steps_by_rank: defaultdict = field(default_factory=lambda: defaultdict(int))
    steps_by_level: defaultdict = field(default_factory=lambda: defaultdict(int))
    phases: defaultdict = field(default_factory=lambda: defaultdict(float))

    def reset_work(self):
        self.point_steps = 0
        self.point_steps_by_rank = defaultdict(int)
        self.steps_by_level = defaultdict(int)


@dataclass
class LeafRecord:
    t0: int  # fine-slice index at which the current step started
    dt_units: int  # step size in fine-slice units
    u_pre: np.ndarray  # (nvars, n) at t0
    u_curr: np.ndarray  # (nvars, n) at t0 + dt_units
    K: np.ndarray  # (stages, nvars, n) of the step starting at t0


class _BlockState:
    __slots__ = ("u", "K", "geom")

    def __init__(self, u, stages, geom):
        self.u = u
        self.K = np.zeros((stages, *u.shape))
        self.geom = geom


class Engine:
    """Wave-system timestepper over a block mesh, global or local mode."""

    NVARS = 2

    def __init__(
        self,
        mesh: Mesh,
        tableau: str | ButcherTableau = "rk3",
        cfl: float = 0.25,
        mode: str = "lts",
        nonlinear: bool = False,
        k_chi: float = 1.0,
        k_phi: float = 2.0,
        threads: int = 1,
        single_stage_neighbors: bool = False,
    ):
        if mode not in ("lts", "gts"):
            raise ValueError("mode must be 'lts' or 'gts'")
        self.mesh = mesh
        self.tab = get_tableau(tableau) if isinstance(tableau, str) else tableau
        self.p = self.tab.stages
        self.cfl = cfl
        self.mode = mode
        self.nonlinear = nonlinear
        self.k_chi = k_chi
        self.k_phi = k_phi
        self.threads = threads
        self.dt_fine = cfl * mesh.finest_spacing()
        levels = [b.leaf_level for b in mesh.blocks]
        self.l_max = max(levels)
        self.l_min = min(levels)
        if single_stage_neighbors:
            if self.p != 1:
                raise ValueError(
                    "the pseudo-timestep neighbor scheme supports single-stage tableaus only"
                )
            cadence = self._promoted_cadence(levels)
        elif mode == "gts":
            cadence = [self.l_max] * len(levels)
        else:
            cadence = list(levels)
        self.cadence = cadence
        self.schedule = TimeLevelSchedule(cadence, self.l_max, self.l_min)
        self.dt_units = [1 << (self.l_max - c) for c in cadence]
        self.full_plan = mesh.exchange_plan()
        self.partial_plans = [
            self.full_plan.restrict(
                {b for b in range(len(cadence)) if cadence[b] >= self.l_max - k}
            )
            for k in range(self.schedule.delta_l + 1)
        ]
        self.states: dict[int, _BlockState] = {}
        # one record store per simulated rank: owned leaves plus received ghosts
        self.rank_records: list[dict[int, LeafRecord]] = [
            {} for _ in range(mesh.pmap.ranks)
        ]
        self._owner = mesh.pmap.owners(len(mesh.tree.leaves))
        self.counters = WorkCounters()
        self.i_fine = 0
        self._r_eps = mesh.finest_spacing()
        self._transfer_cache: dict = {}
        self._pool = None
        if threads > 1:
            from concurrent.futures import ThreadPoolExecutor

            self._pool = ThreadPoolExecutor(max_workers=threads)

    # -- setup ----------------------------------------------------------------

    def _promoted_cadence(self, levels: list[int]) -> list[int]:
        """Single-stage scheme: a block adjacent to finer blocks steps at the
        finest adjacent cadence, so its intermediate states serve the
        neighbor's substeps directly (one promoted layer suffices under 2:1
        balance)."""
        mesh = self.mesh
        boxes = []
        for b in mesh.blocks:
            lo = np.array(b.root.anchor)
            boxes.append((lo, lo + b.root.side))
        cadence = list(levels)
        for i in range(len(levels)):
            for j in range(len(levels)):
                if i == j or levels[j] <= levels[i]:
                    continue
                touching = all(
                    boxes[i][0][d] <= boxes[j][1][d] and boxes[j][0][d] <= boxes[i][1][d]
                    for d in range(mesh.dim)
                )
                if touching:
                    cadence[i] = max(cadence[i], levels[j])
        return cadence

    def initialize(self, chi0, phi0=None) -> None:
        """Evaluate initial data on the shared nodes and load all state."""
        mesh = self.mesh
        xyz = mesh.node_physical()
        coords = [xyz[:, d] for d in range(mesh.dim)]
        z = np.zeros((self.NVARS, mesh.n_nodes))
        z[0] = np.asarray(chi0(*coords), dtype=float)
        if phi0 is not None:
            z[1] = np.asarray(phi0(*coords), dtype=float)
        self.load_zip(z)

    def load_zip(self, z: np.ndarray) -> None:
        mesh = self.mesh
        arrs = mesh.unzip(z)
        for b in mesh.blocks:
            geom = block_geometry(mesh, b, self._r_eps)
            self.states[b.index] = _BlockState(arrs[b.index], self.p, geom)
        for store in self.rank_records:
            store.clear()
        for leaf in range(len(mesh.tree.leaves)):
            a, e = mesh.leaf_slices[leaf]
            vals = z[:, a:e]
            rec = LeafRecord(
                t0=0,
                dt_units=self.dt_units[int(mesh.leaf_block[leaf])],
                u_pre=vals.copy(),
                u_curr=vals.copy(),
                K=np.zeros((self.p, self.NVARS, int(e - a))),
            )
            self.rank_records[self._owner[leaf]][leaf] = rec
        # seed ghost copies along the full plan
        self._ship(self.full_plan)
        self.i_fine = 0

    @property
    def time(self) -> float:
        return self.i_fine * self.dt_fine

    # -- correction algebra -----------------------------------------------------

    def _transfer(self, delta_units: int, from_units: int, to_units: int):
        """Stage transfer matrix in fine-slice units; None means verbatim."""
        if delta_units == 0 and from_units == to_units:
            return None
        key = (delta_units, from_units, to_units)
        M = self._transfer_cache.get(key)
        if M is None:
            M = stage_transfer_matrix(
                self.tab,
                delta_units * self.dt_fine,
                from_units * self.dt_fine,
                to_units * self.dt_fine,
            )
            if delta_units == 0:
                M = np.tril(M)  # zero shift keeps the algebra lower triangular
            self._transfer_cache[key] = M
        return M

    def _virtual_state(self, rec: LeafRecord, delta_units: int) -> np.ndarray:
        """State at ``rec.t0 + delta_units`` reconstructed from the record via
        one virtual substep of the requested size."""
        if delta_units == 0:
            return rec.u_pre
        if delta_units == rec.dt_units:
            return rec.u_curr
        M = self._transfer(0, rec.dt_units, delta_units)
        Kv = rec.K if M is None else np.tensordot(M, rec.K, axes=([1], [0]))
        acc = rec.u_pre.copy()
        dt = delta_units * self.dt_fine
        for i, w in enumerate(self.tab.w):
            if w != 0.0:
                acc = acc + (dt * w) * Kv[i]
        return acc

    # -- source assembly ----------------------------------------------------------

    def _stage_source(self, rank: int, i: int, s: int, level: int, eset, leaves) -> np.ndarray:
        """Combined gather source for stage ``s`` of cadence-``level`` blocks
        of one rank: base state at the slice time plus the tableau combination
        of prior stages, expressed in the reader's step size."""
        mesh = self.mesh
        t_start = time.perf_counter()
        to_units = 1 << (self.l_max - level)
        dt_to = to_units * self.dt_fine
        src = np.zeros((self.NVARS, mesh.n_nodes))
        a_row = self.tab.a[s]
        records = self.rank_records[rank]
        interp = 0.0
        for leaf in leaves:
            rec = records[leaf]
            blk = int(mesh.leaf_block[leaf])
            sl = slice(*map(int, mesh.leaf_slices[leaf]))
            if blk in eset and rec.dt_units == to_units:
                val = src[:, sl]
                val += rec.u_curr
                for j in range(s):
                    if a_row[j] != 0.0:
                        val += (dt_to * a_row[j]) * rec.K[j]
                continue
            t1 = time.perf_counter()
            if blk in eset:
                delta = 0
                base = rec.u_curr
            else:
                delta = i - self.schedule.step_start(i, blk)
                base = self._virtual_state(rec, delta)
            M = self._transfer(delta, rec.dt_units, to_units)
            K = rec.K if M is None else np.tensordot(M, rec.K, axes=([1], [0]))
            val = base.copy()
            for j in range(s):
                if a_row[j] != 0.0:
                    val = val + (dt_to * a_row[j]) * K[j]
            src[:, sl] = val
            interp += time.perf_counter() - t1
        self.counters.phases["time_interp"] += interp
        self.counters.phases["blk_sync"] += time.perf_counter() - t_start - interp
        return src

    # -- exchange -------------------------------------------------------------------

    def _ship(self, plan: ExchangePlan) -> None:
        """Route current owner records through the byte-level exchange and
        refresh the receiving ranks' ghost copies."""
        if plan.total_entries() == 0:
            return
        t0 = time.perf_counter()
        posted = {}
        for pair, items in plan.entries.items():
            store = self.rank_records[pair[0]]
            posted[pair] = [self._pack_record(store[e.leaf]) for e in items]
        delivered = exchange(plan, posted)
        for (r, s), bufs in delivered.items():
            store = self.rank_records[r]
            for entry, buf in zip(plan.entries[(s, r)], bufs):
                self._unpack_record(store, entry.leaf, buf)
        self.counters.phases["comm"] += time.perf_counter() - t0

    def _pack_record(self, rec: LeafRecord) -> bytes:
        return b"".join(
            [
                np.array([float(rec.t0), float(rec.dt_units)]).tobytes(),
                rec.u_pre.tobytes(),
                rec.u_curr.tobytes(),
                rec.K.tobytes(),
            ]
        )

    def _unpack_record(self, store: dict, leaf: int, buf: bytes) -> None:
        arr = np.frombuffer(buf, dtype=np.float64)
        a, e = self.mesh.leaf_slices[leaf]
        n = int(e - a)
        nv = self.NVARS
        rec = store.get(leaf)
        if rec is None:
            rec = LeafRecord(0, 1, np.empty((nv, n)), np.empty((nv, n)), np.empty((self.p, nv, n)))
            store[leaf] = rec
        rec.t0 = int(arr[0])
        rec.dt_units = int(arr[1])
        o = 2
        rec.u_pre = arr[o : o + nv * n].reshape(nv, n).copy()
        o += nv * n
        rec.u_curr = arr[o : o + nv * n].reshape(nv, n).copy()
        o += nv * n
        rec.K = arr[o : o + self.p * nv * n].reshape(self.p, nv, n).copy()

    # -- the slice --------------------------------------------------------------------

    def _map_blocks(self, fn, blocks):
        if self._pool is not None and len(blocks) > 1:
            return list(self._pool.map(fn, blocks))
        return [fn(b) for b in blocks]

    def advance_slice(self) -> None:
        """Advance every block eligible at the current fine slice by one of
        its own steps, with per-stage partial synchronization."""
        i = self.i_fine
        mesh = self.mesh
        sched = self.schedule
        eligible = sched.eligible(i)
        eset = set(eligible)
        for b in eligible:
            leaf0 = mesh.blocks[b].leaf_range[0]
            rec = self.rank_records[self._owner[leaf0]][leaf0]
            if not (rec.t0 + rec.dt_units == i or (i == 0 and rec.t0 == 0)):
                raise RuntimeError(f"block {b} is not synchronized at slice {i}")
        plan = self.partial_plans[sched.phase(i)]
        # (rank, level) -> leaves the gather of that group reads
        groups: dict[tuple[int, int], list[int]] = {}
        by_group: dict[tuple[int, int], list[int]] = {}
        for b in eligible:
            block = mesh.blocks[b]
            key = (block.owner_rank, sched.block_levels[b])
            by_group.setdefault(key, []).append(b)
        for key, blks in by_group.items():
            leaves = sorted({int(l) for b in blks for l in mesh.block_read_leaves(b)})
            groups[key] = leaves

        for s in range(self.p):
            unzips = {}
            for (rank, level), blks in by_group.items():
                src = self._stage_source(rank, i, s, level, eset, groups[(rank, level)])
                t0 = time.perf_counter()
                for b in blks:
                    flat = mesh.gathers[b].dot(src.T).T
                    unzips[b] = flat.reshape(self.NVARS, *mesh.blocks[b].padded_shape)
                self.counters.phases["blk_sync"] += time.perf_counter() - t0

            t0 = time.perf_counter()

            def eval_stage(b):
                return b, wave_rhs(
                    unzips[b], self.states[b].geom, self.nonlinear, self.k_chi, self.k_phi
                )

            for b, out in self._map_blocks(eval_stage, eligible):
                block = mesh.blocks[b]
                st = self.states[b]
                if s == 0:
                    st.u = unzips[b]  # padded base state for the combine
                st.K[s][(slice(None), *block.interior_slices)] = out
                self.counters.rhs_evals[b] += 1
                self.counters.rhs_by_rank[block.owner_rank] += 1
            self.counters.phases["rhs"] += time.perf_counter() - t0

            t0 = time.perf_counter()
            for b in eligible:
                block = mesh.blocks[b]
                flatK = self.states[b].K[s].reshape(self.NVARS, -1)
                store = self.rank_records[block.owner_rank]
                for leaf in range(*block.leaf_range):
                    store[leaf].K[s] = flatK[:, mesh.zip_positions[leaf]]
            self.counters.phases["blk_sync"] += time.perf_counter() - t0
            self._ship(plan)

        t0 = time.perf_counter()
        for b in eligible:
            block = mesh.blocks[b]
            st = self.states[b]
            dt = self.dt_units[b] * self.dt_fine
            inner = (slice(None), *block.interior_slices)
            u_new = st.u[inner].copy()
            for s, w in enumerate(self.tab.w):
                if w != 0.0:
                    u_new = u_new + (dt * w) * st.K[s][inner]
            st.u[inner] = u_new
            flat = st.u.reshape(self.NVARS, -1)
            store = self.rank_records[block.owner_rank]
            for leaf in range(*block.leaf_range):
                rec = store[leaf]
                rec.u_pre = rec.u_curr
                rec.u_curr = flat[:, mesh.zip_positions[leaf]].copy()
                rec.t0 = i
                rec.dt_units = self.dt_units[b]
            self.counters.point_steps += block.interior_points
            self.counters.point_steps_by_rank[block.owner_rank] += block.interior_points
            self.counters.steps_by_level[block.leaf_level] += 1
        self.counters.phases["blk_sync"] += time.perf_counter() - t0
        self._ship(plan)
        self.i_fine += 1

    # -- public stepping -----------------------------------------------------------

    def gts_step(self, dt: float | None = None) -> None:
        """One global step at the finest step size across all blocks."""
        if self.mode != "gts":
            raise RuntimeError("engine not in global-stepping mode")
        if dt is not None and dt > self.dt_fine * (1.0 + 1e-12):
            raise ValueError(
                f"step {dt} violates the CFL bound {self.dt_fine} (= cfl * dx_finest)"
            )
        self.advance_slice()

    def lts_coarse_step(self) -> None:
        """One coarse round: all blocks reach time + 2**delta_l fine steps."""
        if self.i_fine % self.schedule.slices_per_round != 0:
            raise RuntimeError("blocks are not synchronized at a coarse time")
        for _ in range(self.schedule.slices_per_round):
            self.advance_slice()

    def run_to(self, i_fine_target: int) -> None:
        while self.i_fine < i_fine_target:
            self.advance_slice()

    def current_zip(self) -> np.ndarray:
        """Zipped field of the current state, assembled in leaf order."""
        z = np.empty((self.NVARS, self.mesh.n_nodes))
        for leaf in range(len(self.mesh.tree.leaves)):
            sl = slice(*map(int, self.mesh.leaf_slices[leaf]))
            z[:, sl] = self.rank_records[self._owner[leaf]][leaf].u_curr
        return z

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None


def lts_single_stage_engine(mesh: Mesh, **kw) -> Engine:
    """Forward-Euler local stepping with pseudo-substep neighbor layers."""
    kw.setdefault("tableau", "euler")
    tab = kw["tableau"]
    stages = get_tableau(tab).stages if isinstance(tab, str) else tab.stages
    if stages != 1:
        raise ValueError("the pseudo-timestep neighbor scheme supports single-stage tableaus only")
    return Engine(mesh, mode="lts", single_stage_neighbors=True, **kw)


def compare_round(lts: Engine, gts: Engine) -> float:
    """Advance one LTS coarse round and the matching GTS span; return the
    max-norm difference of the wave field on shared nodes."""
    n = lts.schedule.slices_per_round
    lts.lts_coarse_step()
    for _ in range(n):
        gts.gts_step()
    a = lts.current_zip()
    b = gts.current_zip()
    return float(np.max(np.abs(a[0] - b[0])))
