"""Connectivity observables of vacant-set fields on boxes and tori.

Fields enter as boolean grids (True = vacant).  Clusters use
nearest-neighbour adjacency (2d neighbours).  The production labeler is
an array union-find; an independent breadth-first labeler is kept
alongside it and the two are cross-checked in the test suite and in the
self-test command.

Diameters: the default cluster diameter on a box is the sup-norm extent
of the bounding box.  Graph-distance diameter is available on demand —
exact (all-pairs BFS) for clusters up to a size cap, and a double-sweep
lower bound above the cap.  On a torus the bounding box is meaningless
under wrap, so graph distance is always used there.

Estimates are reported with Wilson score intervals at 99% coverage.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import rng
from .lattice import Box
from .torus import wilson_interval

FieldSampler = Callable[..., np.ndarray]
"""Protocol: sampler(u, n, seed, rep_offset=0) -> (n, *grid) vacant masks."""


# ---------------------------------------------------------------------------
# union-find labeling


class UnionFind:
    """Array union-find with path halving and union by size."""

    def __init__(self, n: int):
        self.parent = np.arange(n, dtype=np.int64)
        self.size = np.ones(n, dtype=np.int64)

    def find(self, i: int) -> int:
        p = self.parent
        while p[i] != i:
            p[i] = p[p[i]]
            i = p[i]
        return int(i)

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return
        if self.size[ra] < self.size[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]


def _adjacency_edges(mask: np.ndarray, torus: bool):
    """Pairs of flat indices of adjacent True cells, one array pair per axis."""
    shape = mask.shape
    flat = np.arange(mask.size, dtype=np.int64).reshape(shape)
    edges = []
    for ax in range(mask.ndim):
        sl_a = [slice(None)] * mask.ndim
        sl_b = [slice(None)] * mask.ndim
        sl_a[ax] = slice(0, -1)
        sl_b[ax] = slice(1, None)
        both = mask[tuple(sl_a)] & mask[tuple(sl_b)]
        edges.append((flat[tuple(sl_a)][both], flat[tuple(sl_b)][both]))
        if torus and shape[ax] > 1:
            sl_a[ax] = slice(-1, None)
            sl_b[ax] = slice(0, 1)
            wrap = mask[tuple(sl_a)] & mask[tuple(sl_b)]
            edges.append((flat[tuple(sl_a)][wrap], flat[tuple(sl_b)][wrap]))
    return edges


@dataclass
class ClusterLabeling:
    """Connected components of a vacant mask.

    ``labels`` holds a cluster id per grid cell (-1 where occupied); ids
    are dense, ordered by decreasing cluster size (ties by smallest flat
    index), so id 0 is always a largest cluster.
    """

    mask: np.ndarray
    torus: bool
    labels: np.ndarray
    sizes: np.ndarray
    _neighbor_table: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def n_clusters(self) -> int:
        return int(self.sizes.size)

    def largest_size(self) -> int:
        return int(self.sizes[0]) if self.sizes.size else 0

    def cluster_sites(self, cid: int) -> np.ndarray:
        return np.argwhere(self.labels == cid)

    def cluster_of(self, site) -> int:
        return int(self.labels[tuple(np.asarray(site, dtype=np.int64))])

    # -- geometry ----------------------------------------------------------

    def diameter_linf(self, cid: int) -> int:
        """Sup-norm extent of the cluster's bounding box (box topology)."""
        if self.torus:
            raise ValueError("bounding-box diameter is not defined on a torus")
        pts = self.cluster_sites(cid)
        return int((pts.max(axis=0) - pts.min(axis=0)).max())

    def _neighbors(self) -> np.ndarray:
        if self._neighbor_table is None:
            shape = self.mask.shape
            idx = np.arange(self.mask.size, dtype=np.int64).reshape(shape)
            cols = []
            for ax in range(self.mask.ndim):
                for shift in (1, -1):
                    rolled = np.roll(idx, shift, axis=ax)
                    if not self.torus:
                        sl = [slice(None)] * self.mask.ndim
                        sl[ax] = 0 if shift == 1 else -1
                        rolled = rolled.copy()
                        rolled[tuple(sl)] = -1
                    cols.append(rolled.reshape(-1))
            self._neighbor_table = np.stack(cols, axis=1)
        return self._neighbor_table

    def _bfs_dist(self, src_flat: int, member: np.ndarray) -> np.ndarray:
        nbr = self._neighbors()
        dist = np.full(self.mask.size, -1, dtype=np.int64)
        dist[src_flat] = 0
        frontier = np.array([src_flat], dtype=np.int64)
        d = 0
        while frontier.size:
            cand = nbr[frontier].reshape(-1)
            cand = cand[cand >= 0]
            cand = cand[member[cand] & (dist[cand] < 0)]
            cand = np.unique(cand)
            d += 1
            dist[cand] = d
            frontier = cand
        return dist

    def diameter_unwrapped(self, cid: int) -> int:
        """Sup-norm bounding-box diameter of the cluster lifted off the torus.

        A BFS assigns each site unwrapped integer coordinates; if the
        cluster winds around the torus the span is at least the torus
        side by construction.  On a box this equals ``diameter_linf``.
        """
        if not self.torus:
            return self.diameter_linf(cid)
        pts = self.cluster_sites(cid)
        if pts.shape[0] <= 1:
            return 0
        shape = np.asarray(self.mask.shape)
        flats = np.ravel_multi_index(tuple(pts.T), self.mask.shape)
        order = {int(f): k for k, f in enumerate(flats)}
        lift = np.zeros((pts.shape[0], self.mask.ndim), dtype=np.int64)
        seen = np.zeros(pts.shape[0], dtype=bool)
        seen[0] = True
        frontier = [0]
        lift[0] = pts[0]
        winds = False
        steps = np.vstack([np.eye(self.mask.ndim, dtype=np.int64),
                           -np.eye(self.mask.ndim, dtype=np.int64)])
        while frontier:
            nxt = []
            for k in frontier:
                for s in steps:
                    q = (lift[k] + s)
                    qf = int(np.ravel_multi_index(tuple(q % shape),
                                                  self.mask.shape))
                    j = order.get(qf)
                    if j is None:
                        continue
                    if seen[j]:
                        if (lift[j] != q).any():
                            winds = True
                        continue
                    seen[j] = True
                    lift[j] = q
                    nxt.append(j)
            frontier = nxt
        span = int((lift.max(axis=0) - lift.min(axis=0)).max())
        if winds:
            span = max(span, int(shape.max()))
        return span

    def graph_diameter(self, cid: int, exact_cap: int = 4000) -> int:
        """Graph-distance diameter within the cluster.

        Exact (max over all-pairs BFS) up to ``exact_cap`` sites; above
        the cap a double-sweep lower bound is returned, which suffices
        for "diameter at least D" assertions.
        """
        pts = self.cluster_sites(cid)
        member = (self.labels == cid).reshape(-1)
        flats = np.ravel_multi_index(tuple(pts.T), self.mask.shape)
        if pts.shape[0] <= 1:
            return 0
        if pts.shape[0] <= exact_cap:
            best = 0
            for s in flats:
                dmax = self._bfs_dist(int(s), member)[flats].max()
                best = max(best, int(dmax))
            return best
        dist0 = self._bfs_dist(int(flats[0]), member)
        far = flats[int(np.argmax(dist0[flats]))]
        dist1 = self._bfs_dist(int(far), member)
        return int(dist1[flats].max())


def connected_components(mask: np.ndarray, torus: bool = False) -> ClusterLabeling:
    """Label connected components of a boolean grid with union-find."""
    mask = np.asarray(mask, dtype=bool)
    uf = UnionFind(mask.size)
    for a, b in _adjacency_edges(mask, torus):
        for i, j in zip(a.tolist(), b.tolist()):
            uf.union(i, j)
    flat = mask.reshape(-1)
    roots = np.array([uf.find(i) for i in np.flatnonzero(flat)],
                     dtype=np.int64)
    labels = np.full(mask.size, -1, dtype=np.int64)
    if roots.size:
        uniq, inv, counts = np.unique(roots, return_inverse=True,
                                      return_counts=True)
        order = np.lexsort((uniq, -counts))
        rank = np.empty_like(order)
        rank[order] = np.arange(order.size)
        labels[np.flatnonzero(flat)] = rank[inv]
        sizes = counts[order]
    else:
        sizes = np.zeros(0, dtype=np.int64)
    return ClusterLabeling(mask=mask, torus=torus,
                           labels=labels.reshape(mask.shape), sizes=sizes)


def connected_components_bfs(mask: np.ndarray,
                             torus: bool = False) -> ClusterLabeling:
    """Reference labeler: plain breadth-first search, same output contract."""
    mask = np.asarray(mask, dtype=bool)
    shape = mask.shape
    flat = mask.reshape(-1)
    idx = np.arange(mask.size, dtype=np.int64).reshape(shape)
    cols = []
    for ax in range(mask.ndim):
        for shift in (1, -1):
            rolled = np.roll(idx, shift, axis=ax)
            if not torus:
                sl = [slice(None)] * mask.ndim
                sl[ax] = 0 if shift == 1 else -1
                rolled = rolled.copy()
                rolled[tuple(sl)] = -1
            cols.append(rolled.reshape(-1))
    nbr = np.stack(cols, axis=1)
    comp = np.full(mask.size, -1, dtype=np.int64)
    comps = []
    for s in np.flatnonzero(flat):
        if comp[s] >= 0:
            continue
        cid = len(comps)
        comp[s] = cid
        frontier = [int(s)]
        members = 1
        while frontier:
            nxt = []
            for v in frontier:
                for w in nbr[v]:
                    if w >= 0 and flat[w] and comp[w] < 0:
                        comp[w] = cid
                        nxt.append(int(w))
                        members += 1
            frontier = nxt
        comps.append(members)
    sizes = np.array(comps, dtype=np.int64)
    if sizes.size:
        firsts = np.full(sizes.size, mask.size, dtype=np.int64)
        occ = np.flatnonzero(flat)
        np.minimum.at(firsts, comp[occ], occ)
        order = np.lexsort((firsts, -sizes))
        rank = np.empty_like(order)
        rank[order] = np.arange(order.size)
        relabeled = np.full(mask.size, -1, dtype=np.int64)
        relabeled[occ] = rank[comp[occ]]
        comp = relabeled
        sizes = sizes[order]
    return ClusterLabeling(mask=mask, torus=torus, labels=comp.reshape(shape),
                           sizes=sizes)


# ---------------------------------------------------------------------------
# events on a single field


@dataclass(frozen=True)
class EventFlags:
    """Connectivity facts extracted from one field."""

    connects: bool
    largest_size: int
    n_clusters: int


def sites_connected(labeling: ClusterLabeling, A, B) -> bool:
    """True when some vacant site of A and some vacant site of B share a cluster."""
    la = _labels_at(labeling, A)
    lb = _labels_at(labeling, B)
    if la.size == 0 or lb.size == 0:
        return False
    return bool(np.isin(la, lb).any())


def _labels_at(labeling: ClusterLabeling, sites) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(sites, dtype=np.int64))
    inside = np.all((pts >= 0) & (pts < np.asarray(labeling.mask.shape)),
                    axis=1)
    lab = labeling.labels[tuple(pts[inside].T)]
    return lab[lab >= 0]


def _grid_box(mask_shape) -> Box:
    return Box(tuple(0 for _ in mask_shape),
               tuple(s - 1 for s in mask_shape))


def _boundary_shell(shape, center, radius) -> np.ndarray:
    """Sites of the grid at sup-distance exactly `radius` from center."""
    grid = np.indices(shape).reshape(len(shape), -1).T
    dist = np.abs(grid - np.asarray(center)).max(axis=1)
    return grid[dist == radius]


def _ball_sites(shape, center, radius) -> np.ndarray:
    grid = np.indices(shape).reshape(len(shape), -1).T
    dist = np.abs(grid - np.asarray(center)).max(axis=1)
    return grid[dist <= radius]


# ---------------------------------------------------------------------------
# replicated observables


def _record(observable: str, successes: int, n: int, seed: int,
            params: dict, bias_notes=()) -> dict:
    lo, hi = wilson_interval(successes, n)
    return {"observable": observable, "estimate": successes / n,
            "ci_lo": lo, "ci_hi": hi, "replicates": n, "seed": seed,
            "params": params, "bias_notes": list(bias_notes)}


def theta_r(sampler: FieldSampler, u: float, R: int, replicates: int,
            seed: int, center=None) -> dict:
    """P[center lies in a vacant cluster reaching the sup-norm sphere of radius R]."""
    masks = sampler(u, replicates, seed)
    shape = masks.shape[1:]
    c = tuple(s // 2 for s in shape) if center is None else tuple(center)
    shell = _boundary_shell(shape, c, R)
    if shell.size == 0:
        raise ValueError("radius R exceeds the sampled window")
    hits = 0
    for m in masks:
        lab = connected_components(m)
        if m[c] and sites_connected(lab, [c], shell):
            hits += 1
    return _record("theta_R", hits, replicates, seed,
                   {"u": u, "R": R}, getattr(sampler, "bias_notes", ()))


def crossing_probability(sampler: FieldSampler, u: float, R: int,
                         replicates: int, seed: int) -> dict:
    """P[vacant crossing from the ball of radius R to the sphere of radius 2R]."""
    masks = sampler(u, replicates, seed)
    shape = masks.shape[1:]
    c = tuple(s // 2 for s in shape)
    inner = _ball_sites(shape, c, R)
    outer = _boundary_shell(shape, c, 2 * R)
    if outer.size == 0:
        raise ValueError("window too small for a 2R sphere")
    hits = 0
    for m in masks:
        lab = connected_components(m)
        if sites_connected(lab, inner, outer):
            hits += 1
    return _record("crossing", hits, replicates, seed,
                   {"u": u, "R": R}, getattr(sampler, "bias_notes", ()))


def two_point(sampler: FieldSampler, u: float, x, y, replicates: int,
              seed: int) -> dict:
    """P[x and y vacant and in one vacant cluster of the sampled window]."""
    masks = sampler(u, replicates, seed)
    hits = 0
    for m in masks:
        lab = connected_components(m)
        if sites_connected(lab, [tuple(x)], [tuple(y)]):
            hits += 1
    return _record("two_point", hits, replicates, seed,
                   {"u": u, "x": tuple(x), "y": tuple(y)},
                   getattr(sampler, "bias_notes", ()))


def disconnection_statistic(sampler: FieldSampler, u: float, R: int, M: int,
                            replicates: int, seed: int) -> dict:
    """(M/R)^d-weighted probability that no vacant path joins B_R to the M-sphere."""
    if M <= R:
        raise ValueError("need M > R")
    masks = sampler(u, replicates, seed)
    shape = masks.shape[1:]
    d = len(shape)
    c = tuple(s // 2 for s in shape)
    inner = _ball_sites(shape, c, R)
    outer = _boundary_shell(shape, c, M)
    if outer.size == 0:
        raise ValueError("window too small for the M-sphere")
    hits = 0
    for m in masks:
        lab = connected_components(m)
        if not sites_connected(lab, inner, outer):
            hits += 1
    rec = _record("disconnection", hits, replicates, seed,
                  {"u": u, "R": R, "M": M},
                  getattr(sampler, "bias_notes", ()))
    scale = (M / R) ** d
    rec["estimate"] *= scale
    rec["ci_lo"] *= scale
    rec["ci_hi"] *= scale
    rec["scale"] = scale
    return rec


def exist_unique(sampler_u: FieldSampler, sampler_v: FieldSampler, u: float,
                 v: float, R: int, replicates: int, seed: int) -> dict:
    """Existence and sprinkled uniqueness of mesoscopic vacant clusters.

    Existence: the vacant set restricted to the R-ball has a cluster of
    sup-norm bounding-box diameter >= R/5.  Uniqueness: every pair of
    clusters of diameter >= R/10 in the R-ball is connected inside the
    vacant set of the *lower* level v on the 2R-ball.  Requires v <= u
    (lowering the level only adds vacant sites, so the v-field dominates).
    """
    if v > u:
        raise ValueError("uniqueness sprinkling needs v <= u")
    masks_u = sampler_u(u, replicates, seed)
    masks_v = sampler_v(v, replicates, seed)
    if masks_u.shape != masks_v.shape:
        raise ValueError("the two samplers must share a window")
    shape = masks_u.shape[1:]
    c = np.asarray([s // 2 for s in shape])
    grid_dist = np.abs(np.indices(shape) - c.reshape(-1, *([1] * len(shape)))
                       ).max(axis=0)
    in_R = grid_dist <= R
    exist_hits = 0
    unique_hits = 0
    for mu, mv in zip(masks_u, masks_v):
        if not (mv >= mu).all():
            raise ValueError("v-field does not dominate u-field; use coupled "
                             "samplers sharing seeds")
        lab_small = connected_components(mu & in_R)
        diams = [lab_small.diameter_linf(cid)
                 for cid in range(lab_small.n_clusters)]
        if any(dd >= R / 5 for dd in diams):
            exist_hits += 1
        big = [cid for cid, dd in enumerate(diams) if dd >= R / 10]
        if len(big) <= 1:
            unique_hits += 1
            continue
        lab_big = connected_components(mv)
        reps = [tuple(lab_small.cluster_sites(cid)[0]) for cid in big]
        anchor = reps[0]
        if all(sites_connected(lab_big, [anchor], [other])
               for other in reps[1:]):
            unique_hits += 1
    rec_e = _record("exist", exist_hits, replicates, seed,
                    {"u": u, "R": R}, getattr(sampler_u, "bias_notes", ()))
    rec_u = _record("unique", unique_hits, replicates, seed,
                    {"u": u, "v": v, "R": R},
                    getattr(sampler_u, "bias_notes", ()))
    return {"exist": rec_e, "unique": rec_u}


def fkg_check(sampler: FieldSampler, u: float,
              event_a: Callable[[np.ndarray], bool],
              event_b: Callable[[np.ndarray], bool],
              replicates: int, seed: int) -> dict:
    """Empirical covariance of two events of the vacant field, with its SE.

    For events that are increasing in the vacant field the covariance
    should be nonnegative (positive association of the vacant set).
    """
    masks = sampler(u, replicates, seed)
    a = np.array([bool(event_a(m)) for m in masks])
    b = np.array([bool(event_b(m)) for m in masks])
    pa, pb, pab = a.mean(), b.mean(), (a & b).mean()
    cov = pab - pa * pb
    prod = (a.astype(float) - pa) * (b.astype(float) - pb)
    se = float(prod.std(ddof=1) / np.sqrt(replicates))
    return {"observable": "fkg_cov", "estimate": float(cov), "se": se,
            "p_a": float(pa), "p_b": float(pb), "p_ab": float(pab),
            "replicates": replicates, "seed": seed, "params": {"u": u},
            "bias_notes": list(getattr(sampler, "bias_notes", ()))}


# ---------------------------------------------------------------------------
# samplers adapting the model modules to the mask protocol


def make_interlacement_sampler(window: Box,
                               convention: str = "paper_lazy",
                               truncation: Optional[int] = None) -> FieldSampler:
    """Vacant masks of the infinite-walk cloud restricted to a box window."""
    from .cloud import interlacement_window_fields

    shape = window.shape

    def sampler(u: float, n: int, seed: int, rep_offset: int = 0) -> np.ndarray:
        sample = interlacement_window_fields(
            u, window.sites(), seed, replicates=n, convention=convention,
            truncation=truncation, rep_offset=rep_offset)
        sampler.bias_notes = tuple(sample.bias_notes)
        return ~sample.fields.reshape((n,) + shape)

    sampler.bias_notes = ()
    sampler.window = window
    return sampler


def make_segment_sampler(length: int, window: Box,
                         strategy: str = "auto") -> FieldSampler:
    """Vacant masks of the finite-length homogeneous cloud on a box window."""
    from .cloud import sample_segment_cloud

    shape = window.shape

    def sampler(u: float, n: int, seed: int, rep_offset: int = 0) -> np.ndarray:
        sample = sample_segment_cloud(u, length, window.sites(), seed,
                                      replicates=n, strategy=strategy,
                                      rep_offset=rep_offset)
        sampler.bias_notes = tuple(sample.bias_notes)
        return ~sample.fields.reshape((n,) + shape)

    sampler.bias_notes = ()
    sampler.window = window
    return sampler


def make_torus_sampler(N: int, d: int = 3, lazy: bool = False) -> FieldSampler:
    """Vacant masks of the torus walk; one fresh walk per replicate."""
    from .torus import sample_torus_vacant

    def sampler(u: float, n: int, seed: int, rep_offset: int = 0) -> np.ndarray:
        out = np.empty((n,) + (N,) * d, dtype=bool)
        for r in range(n):
            run = sample_torus_vacant(
                N, d, u, rng.derive_key(seed, rng.TAG_TORUS, rep_offset + r),
                lazy=lazy)
            out[r] = run.vacant_mask()
        return out

    sampler.bias_notes = ()
    sampler.torus = True
    return sampler
