"""Shared vectorized walk machinery.

Two workhorses live here:

``survival_profile``
    One reverse absorbing dynamic program that yields, for every site x of
    a finite set K and every n below a horizon, the no-return probability
    P_x[walk started at x does not re-enter K within n steps].  It uses
    the reversal identity (valid because every site has the same total
    weight): the mass absorbed at x at step n of a walk started uniformly
    outside K equals P_x[no return within n].  These survival functions
    drive the rerooted samplers and the exact vacancy formulas for
    finite-length clouds.

``WindowTracer``
    Samples the trace on a finite window W of Poisson clouds of two-sided
    infinite walks.  Walks evolve freely inside a shell around W.  On first
    reaching sup-distance ``shell`` from the window's bounding box, at z,
    the walk either escapes forever or re-enters W; both the decision and
    the re-entry site come from one categorical draw over the exact
    entrance kernel

        hm(z, y) = P_z[walk hits W and first does so at y],

    which solves  g(z, y) = sum_w hm(z, w) g(w, y)  (first-entrance
    decomposition of the Green function), i.e. hm(z, .) is a linear solve
    against the Gram matrix of Green values on the window's outer boundary
    — the same matrix the equilibrium weights come from, and
    sum_y hm(z, y) = sum_w g(z, w) e_W(w) is the hitting probability.
    The excursion outside the shell is never simulated (a conditioned
    return excursion has infinite expected duration in three dimensions);
    compressing it to the re-entry draw leaves the trace law on W exact up
    to Green-table accuracy.

Every walk draws its randomness as a pure function of (seed, replicate,
trajectory index, step), so results do not depend on batching or thread
count, and runs at the same seed stay coupled across intensity levels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import rng
from .lattice import Box, WalkKernel
from .potential import EquilibriumMeasure, GreenTable, green_table


class ResourceBudgetError(RuntimeError):
    """A requested computation exceeds the configured memory/site budget."""


_MAX_GRID_CELLS = 40_000_000


def _stencil_step(kernel: WalkKernel, mu: np.ndarray, out: np.ndarray) -> None:
    """One transition step with absorbing (open) outer boundary."""
    hold = kernel.hold_probability
    q = kernel.neighbor_probability
    if hold:
        np.multiply(mu, hold, out=out)
    else:
        out.fill(0.0)
    d = mu.ndim
    full = (slice(None),) * d
    for j in range(d):
        src_lo = list(full)
        dst_lo = list(full)
        src_lo[j] = slice(1, None)
        dst_lo[j] = slice(None, -1)
        out[tuple(dst_lo)] += q * mu[tuple(src_lo)]
        out[tuple(src_lo)] += q * mu[tuple(dst_lo)]


def _interior_site_mask(sites: np.ndarray) -> np.ndarray:
    """Sites all of whose 2d lattice neighbours are also in the set."""
    site_set = {tuple(p) for p in sites}
    d = sites.shape[1]
    moves = np.eye(d, dtype=np.int64)
    out = np.zeros(len(sites), dtype=bool)
    for i, p in enumerate(sites):
        out[i] = all(tuple(p + s * moves[j]) in site_set
                     for j in range(d) for s in (1, -1))
    return out


def _reach_bound(kernel: WalkKernel, margin: int, horizon: int) -> float:
    """P[some coordinate's running maximum reaches margin within horizon],
    Bernstein-type bound, used as the DP truncation bias."""
    v = 1.0 / kernel.conductance * 2.0  # per-step variance of one coordinate
    a = float(margin)
    expo = a * a / (2.0 * (horizon * v + a / 3.0))
    return float(min(1.0, 4.0 * kernel.d * np.exp(-expo)))


@dataclass
class SurvivalData:
    """No-return probabilities for a finite set K under a kernel.

    ``s[i, n] = P_{sites[i]}[no return to K within n steps]``, n < horizon.
    """

    kernel: WalkKernel
    sites: np.ndarray
    horizon: int
    s: np.ndarray
    bias_bound: float

    def cumulative(self) -> np.ndarray:
        """C[i, n] = sum_{m <= n} s[i, m]."""
        return np.cumsum(self.s, axis=1)


def survival_profile(kernel: WalkKernel, K_sites, horizon: int,
                     margin: Optional[int] = None) -> SurvivalData:
    """Reverse absorbing DP for the survival functions of K, all sites at once."""
    sites = np.atleast_2d(np.asarray(K_sites, dtype=np.int64))
    d = sites.shape[1]
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if margin is None:
        margin = int(np.ceil(2.0 * np.sqrt(horizon))) + 2
    lo = sites.min(axis=0) - margin
    hi = sites.max(axis=0) + margin
    grid = Box(tuple(lo), tuple(hi))
    if grid.size > _MAX_GRID_CELLS:
        raise ResourceBudgetError(
            f"survival DP grid would need {grid.size} cells; "
            "reduce the horizon or the spread of K")
    k_idx = tuple((sites - lo).T)
    mu = np.ones(grid.shape)
    mu[k_idx] = 0.0
    buf = np.empty_like(mu)
    s = np.empty((len(sites), horizon))
    s[:, 0] = 1.0
    for n in range(1, horizon):
        _stencil_step(kernel, mu, buf)
        s[:, n] = buf[k_idx]
        buf[k_idx] = 0.0
        mu, buf = buf, mu
    bias = _reach_bound(kernel, margin, horizon)
    return SurvivalData(kernel=kernel, sites=sites.copy(), horizon=horizon,
                        s=s, bias_bound=bias)


def segment_intensity(surv: SurvivalData, u: float, length: int) -> float:
    """Total intensity of length-``length`` cloud trajectories that touch K.

    Equals a_x * (u/length) * sum_{x in K} sum_{n < length} s_x(n); the
    cloud's vacancy probability on K is exp(-intensity).
    """
    if length > surv.horizon:
        raise ValueError("survival horizon shorter than requested length")
    a = surv.kernel.conductance
    return float(a * u / length * surv.s[:, :length].sum())


def segment_site_rates(surv: SurvivalData, u: float, length: int) -> np.ndarray:
    """Per-site trajectory rates of the rerooted length-``length`` cloud."""
    a = surv.kernel.conductance
    return a * u / length * surv.s[:, :length].sum(axis=1)


# ---------------------------------------------------------------------
# window tracing of infinite-walk clouds
# ---------------------------------------------------------------------

@dataclass
class TraceResult:
    fields: np.ndarray                 # (n_reps, n_sites) bool
    counts: Optional[np.ndarray]       # (n_reps, n_sites) int64 visit counts
    labels: list                       # per rep: float array of levels in (0, u]
    paths: list                        # per rep: list of trajectories; each
    # trajectory is a list of (start, codes) in-shell segments — excursions
    # outside the shell are compressed to the re-entry point
    bias_notes: dict


class WindowTracer:
    """Traces Poisson clouds of infinite walks on a fixed finite window."""

    def __init__(self, eq: EquilibriumMeasure, kernel: WalkKernel,
                 table: Optional[GreenTable] = None,
                 shell: Optional[int] = None,
                 max_cached_rows: Optional[int] = None):
        self.eq = eq
        self.kernel = kernel
        sites = eq.sites
        self.win_box = Box(tuple(sites.min(axis=0)), tuple(sites.max(axis=0)))
        extent = max(self.win_box.shape)
        if shell is None:
            # A tight shell minimizes simulated steps, and is cheap as long
            # as the precomputed entrance table for the crossing surface
            # fits; otherwise fall back to a wide shell with cached rows.
            n_entry = int((~_interior_site_mask(sites)).sum())
            shape = np.asarray(self.win_box.shape, dtype=np.int64)
            surf2 = int(np.prod(shape + 4) - np.prod(shape + 2))
            shell = 2 if surf2 * n_entry <= 4_000_000 else extent + 7
        self.shell = shell
        if table is None:
            table = green_table(kernel, max(8, extent + self.shell + 2))
        self.table = table
        self.max_cached_rows = max_cached_rows
        self._build_window_masks()
        self._build_entry_solver()
        self._build_entry_table()
        if self.max_cached_rows is None:
            # budget the entrance-row cache by memory (~160 MB of floats)
            self.max_cached_rows = max(1024, int(2e7) // max(1, len(self.entry_sites)))

    def _build_window_masks(self):
        sites = self.eq.sites
        lo = np.asarray(self.win_box.lo)
        self.w_mask = np.zeros(self.win_box.shape, dtype=bool)
        self.w_index = np.full(self.win_box.shape, -1, dtype=np.int64)
        rel = tuple((sites - lo).T)
        self.w_mask[rel] = True
        self.w_index[rel] = np.arange(len(sites))
        self.start_cum = np.cumsum(self.eq.start_distribution())
        self.start_sites = sites

    def _build_entry_solver(self):
        """Factor the Green Gram matrix on the window's outer boundary; its
        solves give the exact entrance kernel rows hm(z, .)."""
        sites = self.eq.sites
        on_boundary = ~_interior_site_mask(sites)
        self.entry_sites = sites[on_boundary]
        self.entry_field_index = np.flatnonzero(on_boundary)
        diffs = self.entry_sites[:, None, :] - self.entry_sites[None, :, :]
        n_b = len(self.entry_sites)
        gram = self.table.value(diffs.reshape(-1, self.kernel.d)).reshape(n_b, n_b)
        self._entry_factor = cho_factor(gram, lower=True)
        self._row_cache: dict = {}

    def _build_entry_table(self):
        """Precompute entrance rows for every possible shell-crossing point.

        A walk started inside moves one coordinate per step, so its first
        crossing lands at sup-distance exactly ``shell`` from the window
        hull; those points form a box surface small enough to solve for in
        one batched call.  Skipped (falling back to the per-point cache)
        when the table would be too large.
        """
        self._entry_table = None
        lo = np.asarray(self.win_box.lo) - self.shell
        hi = np.asarray(self.win_box.hi) + self.shell
        ring = Box(tuple(lo), tuple(hi))
        n_entry = len(self.entry_sites)
        if ring.size > 2_000_000:
            return
        pts = ring.sites()
        surf = pts[self.win_box.sup_distance(pts) == self.shell]
        if len(surf) * n_entry > 4_000_000:
            return
        diffs = surf[:, None, :] - self.entry_sites[None, :, :]
        gz = self.table.value(diffs.reshape(-1, self.kernel.d))
        rows = cho_solve(self._entry_factor,
                         gz.reshape(len(surf), n_entry).T).T
        np.clip(rows, 0.0, None, out=rows)
        cum = np.cumsum(rows, axis=1)
        h = np.minimum(cum[:, -1], 1.0)
        index = np.full(ring.shape, -1, dtype=np.int64)
        index[tuple((surf - lo).T)] = np.arange(len(surf))
        self._entry_table = (cum, h)
        self._entry_ring_lo = lo
        self._entry_index = index

    def _entry_rows(self, zs: np.ndarray) -> tuple:
        """Entrance rows for a batch of shell-crossing points: (cums, hs)."""
        if self._entry_table is not None:
            cum, h = self._entry_table
            rows = self._entry_index[tuple((zs - self._entry_ring_lo).T)]
            return cum[rows], h[rows]
        uniq, inv = np.unique(zs, axis=0, return_inverse=True)
        cums = np.empty((len(uniq), len(self.entry_sites)))
        hs = np.empty(len(uniq))
        for i, z in enumerate(uniq):
            cums[i], hs[i] = self.entry_row(z)
        return cums[inv.reshape(-1)], hs[inv.reshape(-1)]

    def entry_row(self, z) -> tuple:
        """(cumulative entrance weights over entry_sites, hitting probability)
        for a point z outside the window."""
        key = tuple(int(c) for c in z)
        hit = self._row_cache.get(key)
        if hit is not None:
            return hit
        gz = self.table.value(np.asarray(key) - self.entry_sites)
        row = cho_solve(self._entry_factor, gz)
        np.clip(row, 0.0, None, out=row)
        cum = np.cumsum(row)
        h = float(min(cum[-1], 1.0))
        if len(self._row_cache) >= self.max_cached_rows:
            self._row_cache.clear()
        self._row_cache[key] = (cum, h)
        return cum, h

    def hitting_from(self, z) -> float:
        """P_z[walk ever visits the window] via the entrance kernel."""
        return self.entry_row(z)[1]

    def trace(self, u: float, n_reps: int, seed: int,
              want_counts: bool = False, want_paths: bool = False,
              rep_offset: int = 0, chunk: int = 4096) -> TraceResult:
        """Sample n_reps independent cloud traces at level u.

        Runs at the same seed with different u are coupled by level labels:
        the trajectories present at level u' < u are exactly those with
        label <= u', with identical paths.
        """
        n_w = len(self.eq.sites)
        fields = np.zeros((n_reps, n_w), dtype=bool)
        counts = np.zeros((n_reps, n_w), dtype=np.int64) if want_counts else None
        labels: list = []
        paths: list = [None] * n_reps
        for base in range(0, n_reps, chunk):
            hi = min(base + chunk, n_reps)
            self._trace_chunk(u, base, hi, seed, fields, counts, labels, paths,
                              want_paths, rep_offset)
        notes = {
            "green_accuracy": self.table.accuracy,
            "shell_radius": self.shell,
            "escape_resampling":
                "exact entrance-kernel draw; outside excursions compressed",
        }
        return TraceResult(fields=fields, counts=counts, labels=labels,
                           paths=paths, bias_notes=notes)

    def _trace_chunk(self, u, rep_lo, rep_hi, seed, fields, counts,
                     labels, paths, want_paths, rep_offset):
        cap = self.eq.capacity
        n_chunk = rep_hi - rep_lo
        rep_ids = np.arange(rep_lo, rep_hi) + rep_offset
        rep_keys = rng.key_array(seed, rng.TAG_REPLICATE, rep_ids)
        n_traj, arrivals, owner = rng.poisson_counts_from_keys(
            rep_keys, np.full(n_chunk, u * cap))
        for r in range(n_chunk):
            labels.append(arrivals[owner == r] / cap)
        if want_paths:
            for r in range(rep_lo, rep_hi):
                paths[r] = []
        if arrivals.size == 0:
            return
        # trajectory identity: (replicate id, index within the replicate)
        total = int(n_traj.sum())
        traj_idx = np.concatenate([np.arange(k) for k in n_traj if k]) \
            if total else np.empty(0, dtype=np.int64)
        traj_rep = np.repeat(rep_ids, n_traj)
        keys = rng.key_array(seed, rng.TAG_TRAJECTORY, traj_rep, traj_idx)
        slot = np.repeat(np.arange(rep_lo, rep_hi), n_traj)

        u_start = rng.uniform_at(keys, np.zeros(keys.size, dtype=np.int64))
        start_row = np.searchsorted(self.start_cum, u_start)
        start_row = np.minimum(start_row, len(self.start_cum) - 1)
        pos = self.start_sites[start_row].copy()

        n_w = fields.shape[1]
        f_flat = fields.reshape(-1)
        c_flat = counts.reshape(-1) if counts is not None else None
        moves = self.kernel.moves()
        rec = [[(tuple(pos[i]), [])] for i in range(keys.size)] \
            if want_paths else None

        self._mark(pos, slot, f_flat, c_flat, n_w)
        t = np.ones(keys.size, dtype=np.int64)
        alive = np.ones(keys.size, dtype=bool)
        act = np.arange(keys.size)
        guard = 0
        max_guard = 2_000_000

        def reenter(walks, t_cross):
            """Escape-or-re-enter decision at each walk's crossing step.

            Draws from a side stream keyed off the crossing step's counter,
            so block stepping and single stepping consume identical values.
            """
            ue = rng.uniform_at(keys[walks] ^ np.uint64(0xE5C4), t_cross)
            cums, hs = self._entry_rows(pos[walks])
            esc = ue >= hs
            alive[walks[esc]] = False
            if esc.all():
                return
            surv = ~esc
            w = walks[surv]
            cum = cums[surv]
            target = ue[surv] * cum[:, -1] / hs[surv]
            y = (cum < target[:, None]).sum(axis=1)
            np.minimum(y, cum.shape[1] - 1, out=y)
            pos[w] = self.entry_sites[y]
            fi = slot[w] * n_w + self.entry_field_index[y]
            f_flat[fi] = True
            if c_flat is not None:
                np.add.at(c_flat, fi, 1)
            if want_paths:
                for i in w:
                    rec[i].append((tuple(pos[i]), []))

        if want_paths:
            while act.size:
                guard += 1
                if guard > max_guard:
                    raise RuntimeError("window tracer exceeded its step guard")
                uu = rng.uniform_at(keys[act], t[act])
                codes = self.kernel.codes_from_uniforms(uu)
                pos[act] += moves[codes]
                for i, c in zip(act, codes):
                    rec[i][-1][1].append(int(c))
                self._mark(pos[act], slot[act], f_flat, c_flat, n_w)
                dist = self.win_box.sup_distance(pos[act])
                crossing = dist >= self.shell
                if crossing.any():
                    reenter(act[crossing], t[act[crossing]])
                t[act] += 1
                act = act[alive[act]]
            for i in range(keys.size):
                r = slot[i]
                paths[r].append([(np.asarray(s, dtype=np.int64),
                                  np.asarray(c, dtype=np.uint8))
                                 for s, c in rec[i]])
            return

        # Fast path: advance every live walk by a block of steps at once.
        # Streams are keyed by (walk, step counter), so drawing a full block
        # and discarding anything past the first shell crossing reproduces
        # the single-step trace bit for bit.
        block = 16
        d = self.kernel.d
        arange_block = np.arange(block, dtype=np.int64)
        cross_lo = np.asarray(self.win_box.lo) - self.shell
        cross_hi = np.asarray(self.win_box.hi) + self.shell
        while act.size:
            guard += 1
            if guard > max_guard:
                raise RuntimeError("window tracer exceeded its step guard")
            n_act = act.size
            uu = rng.uniform_at(keys[act][:, None],
                                t[act][:, None] + arange_block[None, :])
            codes = self.kernel.codes_from_uniforms(uu.reshape(-1))
            steps = moves[codes].reshape(n_act, block, d)
            np.cumsum(steps, axis=1, out=steps)
            path = pos[act][:, None, :] + steps
            crossed = ((path <= cross_lo) | (path >= cross_hi)).any(axis=2)
            any_cross = crossed.any(axis=1)
            first = np.where(any_cross, crossed.argmax(axis=1), block - 1)
            consumed = first + 1
            keep = arange_block[None, :] < consumed[:, None]
            self._mark(path[keep], np.repeat(slot[act], consumed),
                       f_flat, c_flat, n_w)
            pos[act] = path[np.arange(n_act), first]
            t_cross = t[act] + first
            t[act] += consumed
            if any_cross.any():
                reenter(act[any_cross], t_cross[any_cross])
            act = act[alive[act]]

    def _mark(self, pts, slots, f_flat, c_flat, n_w):
        inside = self.win_box.contains(pts)
        if not inside.any():
            return
        lo = np.asarray(self.win_box.lo)
        rel = pts[inside] - lo
        widx = self.w_index[tuple(rel.T)]
        ok = widx >= 0
        if not ok.any():
            return
        flat = slots[inside][ok] * n_w + widx[ok]
        f_flat[flat] = True
        if c_flat is not None:
            np.add.at(c_flat, flat, 1)
