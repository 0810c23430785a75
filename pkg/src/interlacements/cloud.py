"""Poisson clouds of lattice walks and their traces on finite windows.

Three samplers cover the model families:

* ``sample_interlacement_window`` — the infinite-walk cloud observed on a
  finite window, driven by :class:`~interlacements.engine.WindowTracer`.
* ``sample_rho_model`` — the general finite-length cloud: independently
  for every (length, site), Poisson-many walks of that length from that
  site, with the given intensity.
* ``sample_segment_cloud`` — the homogeneous fixed-length cloud (rate
  4d·u/L per site at length L), with a choice of a direct route (sample
  every candidate start) or a rerooted route (sample only the walks that
  touch the window, at their first-entrance site, via the survival DP);
  both routes have the same law on the window.

Couplings: every Poisson draw comes from a per-(replicate, site) keyed
arrival stream, so calls at the same seed with pointwise-larger intensity
contain the smaller model's points as a pathwise subset, with identical
walk paths.  Monotonicity in the level u therefore holds sample by
sample, not merely in law.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional

import numpy as np

from . import rng
from .engine import (ResourceBudgetError, SurvivalData, WindowTracer,
                     segment_intensity, segment_site_rates, survival_profile)
from .lattice import Box, Trajectory, WalkKernel, trajectory_codes_batch
from .potential import EquilibriumMeasure, equilibrium_measure, green_table

_POINT_SALT = np.uint64(0xC2B2AE3D27D4EB4F)


# ---------------------------------------------------------------------
# intensity profiles
# ---------------------------------------------------------------------

@dataclass(frozen=True)
class IntensityProfile:
    """Rates of a finite-length walk cloud: (length, site) -> rate >= 0.

    Two storage kinds:

    * ``"homogeneous"`` — one active length ``L``; every site carries rate
      ``4d * level / L`` (spatially unbounded; samplers restrict starts to
      the reach of the window).
    * ``"table"`` — explicit finitely-supported rates.

    ``level`` of the homogeneous kind is the occupation density the cloud
    produces (its mean occupation time at every site).
    """

    d: int
    kind: str
    level: float = 0.0
    length: int = 0
    table: dict = dc_field(default_factory=dict, hash=False, compare=False)

    @staticmethod
    def homogeneous(level: float, length: int, d: int = 3) -> "IntensityProfile":
        if level < 0:
            raise ValueError("level must be >= 0")
        if length < 1:
            raise ValueError("length must be >= 1")
        return IntensityProfile(d=d, kind="homogeneous", level=float(level),
                                length=int(length))

    @staticmethod
    def from_table(entries: dict, d: int = 3) -> "IntensityProfile":
        table: dict = {}
        for (length, site), rate in entries.items():
            length = int(length)
            site = tuple(int(c) for c in site)
            if length < 1:
                raise ValueError("lengths must be >= 1")
            if rate < 0:
                raise ValueError("rates must be >= 0")
            if len(site) != d:
                raise ValueError("site dimension mismatch")
            if rate > 0:
                table[(length, site)] = float(rate)
        return IntensityProfile(d=d, kind="table", table=table)

    @staticmethod
    def field_segment(weights: dict, length: int, d: int = 3) -> "IntensityProfile":
        """Rate (4d/length) * weights[x] at the single active length."""
        entries = {}
        for site, w in weights.items():
            if w < 0:
                raise ValueError("weights must be >= 0")
            if w > 0:
                entries[(int(length), tuple(site))] = 4.0 * d * float(w) / length
        return IntensityProfile.from_table(entries, d=d)

    @property
    def max_length(self) -> int:
        if self.kind == "homogeneous":
            return self.length
        return max((l for l, _ in self.table), default=0)

    def lengths(self) -> list:
        if self.kind == "homogeneous":
            return [self.length]
        return sorted({l for l, _ in self.table})

    def rate(self, length: int, sites: np.ndarray) -> np.ndarray:
        sites = np.atleast_2d(np.asarray(sites, dtype=np.int64))
        if self.kind == "homogeneous":
            val = 4.0 * self.d * self.level / self.length \
                if length == self.length else 0.0
            return np.full(len(sites), val)
        out = np.zeros(len(sites))
        for i, p in enumerate(sites):
            out[i] = self.table.get((length, tuple(int(c) for c in p)), 0.0)
        return out

    def support(self, length: int, region: Box) -> np.ndarray:
        """Positive-rate sites of one length within a region, sorted."""
        if self.kind == "homogeneous":
            if length != self.length:
                return np.empty((0, self.d), dtype=np.int64)
            return region.sites()
        pts = [site for (l, site) in self.table if l == length
               and region.contains(np.asarray(site, dtype=np.int64)[None, :])[0]]
        if not pts:
            return np.empty((0, self.d), dtype=np.int64)
        arr = np.asarray(sorted(pts), dtype=np.int64)
        return arr

    def total_mass(self, region: Box) -> float:
        if self.kind == "homogeneous":
            return 4.0 * self.d * self.level / self.length * region.size
        total = 0.0
        for (l, site), r in self.table.items():
            if region.contains(np.asarray(site, dtype=np.int64)[None, :])[0]:
                total += r
        return total

    def __add__(self, other: "IntensityProfile") -> "IntensityProfile":
        if self.kind != "table" or other.kind != "table":
            raise TypeError("profile addition is defined for table profiles")
        if self.d != other.d:
            raise ValueError("dimension mismatch")
        merged = dict(self.table)
        for k, v in other.table.items():
            merged[k] = merged.get(k, 0.0) + v
        return IntensityProfile(d=self.d, kind="table", table=merged)


# ---------------------------------------------------------------------
# sample containers and serialization
# ---------------------------------------------------------------------

@dataclass
class LabeledTrajectorySet:
    """Poisson cloud points retained for one sample: (label, walk) pairs.

    ``label`` is the point's arrival position on its stream, in the
    model's own intensity units: level units in (0, u] for infinite-walk
    clouds, rate units in (0, rate(x)] for finite-length clouds.  Within
    one stream labels are strictly increasing, which is what makes
    pathwise thinning exact.

    For infinite-walk window clouds the stored path is the walk's journey
    inside the tracing shell; travel outside the shell is compressed, so
    one cloud trajectory may appear as several records sharing a label.
    """

    window: np.ndarray
    points: list                # list of (label, length, Trajectory)
    d: int = 3
    # per-point walk-stream keys, kept in memory only (not serialized):
    # they let a later pass extend a stored walk with the exact uniform
    # stream the sampler would have used, which is what the tube
    # transform needs when it re-times trajectories.
    stream_keys: Optional[np.ndarray] = None

    MAGIC = b"TRJS"
    VERSION = 1

    def to_bytes(self) -> bytes:
        win = np.ascontiguousarray(self.window, dtype="<i8")
        head = struct.pack("<4sHHQQ", self.MAGIC, self.VERSION, self.d,
                           len(win), len(self.points))
        out = [head, win.tobytes()]
        for label, length, traj in self.points:
            start = np.ascontiguousarray(traj.start, dtype="<i8")
            codes = np.ascontiguousarray(traj.codes, dtype=np.uint8)
            out.append(struct.pack("<dQ", float(label), int(length)))
            out.append(struct.pack("<Q", len(codes)))
            out.append(start.tobytes())
            out.append(codes.tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "LabeledTrajectorySet":
        magic, version, d, n_win, n_pts = struct.unpack_from("<4sHHQQ", blob, 0)
        if magic != cls.MAGIC:
            raise ValueError("not a trajectory-set blob")
        if version != cls.VERSION:
            raise ValueError(f"unsupported trajectory-set version {version}")
        off = struct.calcsize("<4sHHQQ")
        window = np.frombuffer(blob, dtype="<i8", count=n_win * d,
                               offset=off).reshape(n_win, d).copy()
        off += n_win * d * 8
        points = []
        for _ in range(n_pts):
            label, length = struct.unpack_from("<dQ", blob, off)
            off += 16
            (n_codes,) = struct.unpack_from("<Q", blob, off)
            off += 8
            start = np.frombuffer(blob, dtype="<i8", count=d, offset=off).copy()
            off += d * 8
            codes = np.frombuffer(blob, dtype=np.uint8, count=n_codes,
                                  offset=off).copy()
            off += n_codes
            points.append((label, int(length),
                           Trajectory(start=start, codes=codes, label=label)))
        return cls(window=window, points=points, d=d)


@dataclass
class OccupancyField:
    """Occupied/vacant indicator over a window, plus optional visit counts."""

    window: np.ndarray          # (n, d) sites
    occupied: np.ndarray        # (n,) bool
    counts: Optional[np.ndarray] = None   # (n,) int64 total visits
    d: int = 3

    MAGIC = b"OCCF"
    VERSION = 1

    def __post_init__(self):
        if self.counts is not None:
            if not np.array_equal(self.counts > 0, self.occupied):
                raise ValueError("counts and occupancy indicator disagree")

    def vacant(self) -> np.ndarray:
        return ~self.occupied

    def occupation_times(self, kernel: WalkKernel) -> np.ndarray:
        """Visit counts divided by the site weight a_x."""
        if self.counts is None:
            raise ValueError("this field was sampled without visit counts")
        return self.counts / kernel.conductance

    def _rle(self) -> np.ndarray:
        """Run lengths of the occupancy bits, starting with a (possibly
        empty) vacant run and alternating."""
        bits = self.occupied
        if len(bits) == 0:
            return np.empty(0, dtype=np.uint64)
        switch = np.flatnonzero(np.diff(bits)) + 1
        edges = np.concatenate(([0], switch, [len(bits)]))
        runs = np.diff(edges).astype(np.uint64)
        if bits[0]:
            runs = np.concatenate(([np.uint64(0)], runs))
        return runs

    def to_bytes(self) -> bytes:
        win = np.ascontiguousarray(self.window, dtype="<i8")
        runs = self._rle()
        flags = 1 if self.counts is not None else 0
        head = struct.pack("<4sHHIQQ", self.MAGIC, self.VERSION, flags,
                           self.d, len(win), len(runs))
        out = [head, win.tobytes(), runs.astype("<u8").tobytes()]
        if self.counts is not None:
            out.append(self.counts[self.occupied].astype("<i8").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "OccupancyField":
        magic, version, flags, d, n_win, n_runs = struct.unpack_from(
            "<4sHHIQQ", blob, 0)
        if magic != cls.MAGIC:
            raise ValueError("not an occupancy-field blob")
        if version != cls.VERSION:
            raise ValueError(f"unsupported occupancy-field version {version}")
        off = struct.calcsize("<4sHHIQQ")
        window = np.frombuffer(blob, dtype="<i8", count=n_win * d,
                               offset=off).reshape(n_win, d).copy()
        off += n_win * d * 8
        runs = np.frombuffer(blob, dtype="<u8", count=n_runs, offset=off)
        off += n_runs * 8
        occupied = np.zeros(n_win, dtype=bool)
        pos = 0
        val = False
        for r in runs:
            if val:
                occupied[pos:pos + int(r)] = True
            pos += int(r)
            val = not val
        counts = None
        if flags & 1:
            k = int(occupied.sum())
            vals = np.frombuffer(blob, dtype="<i8", count=k, offset=off)
            counts = np.zeros(n_win, dtype=np.int64)
            counts[occupied] = vals
        return cls(window=window, occupied=occupied, counts=counts, d=d)


@dataclass
class WindowSample:
    """A batch of independent cloud samples observed on one window."""

    window: np.ndarray              # (n, d) sites
    fields: np.ndarray              # (reps, n) bool occupancy
    counts: Optional[np.ndarray]    # (reps, n) int64 visit counts
    labels: list                    # per rep: arrival labels of its points
    bias_notes: dict

    def field_at(self, rep: int) -> OccupancyField:
        return OccupancyField(
            window=self.window,
            occupied=self.fields[rep].copy(),
            counts=None if self.counts is None else self.counts[rep].copy(),
            d=self.window.shape[1])

    def vacant_fraction(self) -> np.ndarray:
        """Per-site fraction of replicates in which the site is vacant."""
        return 1.0 - self.fields.mean(axis=0)


# ---------------------------------------------------------------------
# infinite-walk cloud on a window
# ---------------------------------------------------------------------

_tracer_cache: dict = {}


def _window_tracer(window_sites: np.ndarray, convention: str,
                   shell: Optional[int]) -> WindowTracer:
    key = (window_sites.tobytes(), window_sites.shape, convention, shell)
    tr = _tracer_cache.get(key)
    if tr is None:
        eq = equilibrium_measure(window_sites, convention)
        kern = WalkKernel(d=window_sites.shape[1],
                          lazy=(convention == "paper_lazy"))
        tr = WindowTracer(eq, kern, shell=shell)
        if len(_tracer_cache) > 64:
            _tracer_cache.clear()
        _tracer_cache[key] = tr
    return tr


def interlacement_window_fields(u: float, window, seed: int,
                                replicates: int = 1,
                                convention: str = "paper_lazy",
                                truncation: Optional[int] = None,
                                want_counts: bool = False,
                                rep_offset: int = 0) -> WindowSample:
    """Batched window observation of the infinite-walk cloud at level u."""
    if u < 0:
        raise ValueError("level u must be >= 0")
    sites = np.atleast_2d(np.asarray(window, dtype=np.int64))
    tracer = _window_tracer(sites, convention, truncation)
    res = tracer.trace(u, replicates, seed, want_counts=want_counts,
                       rep_offset=rep_offset)
    return WindowSample(window=tracer.eq.sites, fields=res.fields,
                        counts=res.counts, labels=res.labels,
                        bias_notes=res.bias_notes)


def sample_interlacement_window(u: float, window, seed: int,
                                convention: str = "paper_lazy",
                                eq: Optional[EquilibriumMeasure] = None,
                                truncation: Optional[int] = None,
                                want_counts: bool = True):
    """One sample of the infinite-walk cloud restricted to a window.

    Returns ``(OccupancyField, LabeledTrajectorySet)``.  The trajectory
    records keep the walks' within-shell segments; see
    :class:`LabeledTrajectorySet` for the exact semantics.
    """
    if u < 0:
        raise ValueError("level u must be >= 0")
    sites = np.atleast_2d(np.asarray(window, dtype=np.int64))
    if eq is not None:
        kern = WalkKernel(d=sites.shape[1],
                          lazy=(eq.convention == "paper_lazy"))
        tracer = WindowTracer(eq, kern, shell=truncation)
    else:
        tracer = _window_tracer(sites, convention, truncation)
    res = tracer.trace(u, 1, seed, want_counts=want_counts, want_paths=True)
    field = OccupancyField(window=tracer.eq.sites,
                           occupied=res.fields[0].copy(),
                           counts=None if res.counts is None
                           else res.counts[0].copy(),
                           d=sites.shape[1])
    points = []
    labs = res.labels[0]
    for label, segments in zip(labs, res.paths[0]):
        for start, codes in segments:
            traj = Trajectory(start=np.asarray(start, dtype=np.int64),
                              codes=codes, label=float(label))
            points.append((float(label), traj.length, traj))
    cloud = LabeledTrajectorySet(window=tracer.eq.sites, points=points,
                                 d=sites.shape[1])
    return field, cloud


def fast_forward_cloud(cloud: LabeledTrajectorySet, K,
                       kernel: Optional[WalkKernel] = None) -> OccupancyField:
    """Push a sampled cloud onto its first-entrance points of K, pathwise.

    Every stored walk is cut at its first visit to K; the remaining tail
    is kept as the pushed walk.  The resulting trace on K is surely
    contained in the original trace, and its law is that of the cloud of
    the rerooted profile — this realizes the domination coupling that
    :func:`reroot_profile` promises, sample by sample.
    """
    k_sites = np.atleast_2d(np.asarray(K, dtype=np.int64))
    d = k_sites.shape[1]
    if kernel is None:
        kernel = WalkKernel(d=d, lazy=True)
    box = Box(tuple(k_sites.min(axis=0)), tuple(k_sites.max(axis=0)))
    lo = np.asarray(box.lo)
    index = np.full(box.shape, -1, dtype=np.int64)
    index[tuple((k_sites - lo).T)] = np.arange(len(k_sites))
    occupied = np.zeros(len(k_sites), dtype=bool)
    counts = np.zeros(len(k_sites), dtype=np.int64)
    for _, _, traj in cloud.points:
        posn = traj.positions(kernel)
        inside = box.contains(posn)
        hit = np.zeros(len(posn), dtype=bool)
        if inside.any():
            rel = posn[inside] - lo
            hit[inside] = index[tuple(rel.T)] >= 0
        if not hit.any():
            continue
        first = int(np.flatnonzero(hit)[0])
        tail = posn[first:]
        t_in = box.contains(tail)
        rel = tail[t_in] - lo
        idx = index[tuple(rel.T)]
        idx = idx[idx >= 0]
        occupied[idx] = True
        np.add.at(counts, idx, 1)
    return OccupancyField(window=k_sites, occupied=occupied,
                          counts=counts, d=d)


def occupation_field(cloud: LabeledTrajectorySet,
                     kernel: WalkKernel) -> np.ndarray:
    """Occupation times on the cloud's window: visits divided by a_x."""
    sites = cloud.window
    box = Box(tuple(sites.min(axis=0)), tuple(sites.max(axis=0))) \
        if len(sites) else Box((0,) * cloud.d, (0,) * cloud.d)
    lo = np.asarray(box.lo)
    index = np.full(box.shape, -1, dtype=np.int64)
    if len(sites):
        index[tuple((sites - lo).T)] = np.arange(len(sites))
    counts = np.zeros(len(sites), dtype=np.int64)
    for _, _, traj in cloud.points:
        posn = traj.positions(kernel)
        inside = box.contains(posn)
        if not inside.any():
            continue
        rel = posn[inside] - lo
        idx = index[tuple(rel.T)]
        idx = idx[idx >= 0]
        np.add.at(counts, idx, 1)
    return counts / kernel.conductance


def pair_covariance(x, y, u: float, seed: int, walks: int = 20_000,
                    convention: str = "paper_lazy") -> dict:
    """Vacancy covariance of two sites, Rao-Blackwellized over the cloud.

    Conditionally on one trajectory of the pair's cloud, let q be the
    probability that it visits *both* sites.  Every trajectory starts on
    the pair, so it surely visits at least one, and with lam = u*cap({x,y})
    the Poisson structure gives

        P[x and y vacant] = exp(-lam)
        P[x vacant] P[y vacant] = exp(-lam*(q_x + q_y)) = exp(-lam*(1+q))
        Cov(1{x vacant}, 1{y vacant}) = exp(-lam) * (1 - exp(-lam*q)).

    Only q is estimated — from replicates conditioned to hold exactly one
    trajectory — so the returned standard error (delta method) is orders
    of magnitude below that of the raw indicator covariance.
    """
    x = np.asarray(x, dtype=np.int64).reshape(-1)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if np.array_equal(x, y):
        raise ValueError("the two sites must differ")
    pair = np.vstack([x, y])
    tracer = _window_tracer(pair, convention, None)
    cap_pair = float(tracer.eq.capacity)
    lam = u * cap_pair
    # Per-replicate intensity 0.2 keeps most non-empty clouds at a single
    # trajectory, so nearly every simulated walk lands in the estimate.
    mean_traj = 0.2
    u_one = mean_traj / cap_pair
    p_one = mean_traj * np.exp(-mean_traj)
    need = int(np.ceil(walks / p_one * 1.05)) + 64
    res = tracer.trace(u_one, need, seed)
    n_traj = np.fromiter((len(lab) for lab in res.labels),
                         count=need, dtype=np.int64)
    ones = n_traj == 1
    m = int(ones.sum())
    if m == 0:
        raise RuntimeError("no single-trajectory replicates drawn")
    hits = res.fields[ones]
    hx, hy = hits[:, 0], hits[:, 1]
    if not bool((hx | hy).all()):
        raise RuntimeError("a trajectory missed its own start pair")
    q_x, q_y = float(hx.mean()), float(hy.mean())
    q_both = float((hx & hy).mean())
    cov = float(np.exp(-lam) * (1.0 - np.exp(-lam * q_both)))
    se_q = float(np.sqrt(max(q_both * (1.0 - q_both), 0.0) / m))
    se = float(np.exp(-lam) * lam * np.exp(-lam * q_both) * se_q)
    return {"observable": "pair_cov", "estimate": cov, "se": se,
            "q_both": q_both, "q_x": q_x, "q_y": q_y, "lam": lam,
            "capacity_pair": cap_pair, "walks": m, "seed": seed,
            "params": {"u": float(u),
                       "x": [int(c) for c in x], "y": [int(c) for c in y]},
            "bias_notes": [f"green_accuracy={res.bias_notes['green_accuracy']}",
                           "covariance via per-trajectory hit frequency"]}


# ---------------------------------------------------------------------
# finite-length clouds
# ---------------------------------------------------------------------

def _mark_batch(positions: np.ndarray, slots: np.ndarray, win_box: Box,
                w_index: np.ndarray, fields: np.ndarray,
                counts: Optional[np.ndarray]) -> None:
    """Scatter walk positions (m, steps, d) into per-replicate fields."""
    n_w = fields.shape[1]
    flatpos = positions.reshape(-1, positions.shape[-1])
    rep = np.repeat(slots, positions.shape[1])
    inside = win_box.contains(flatpos)
    if not inside.any():
        return
    lo = np.asarray(win_box.lo)
    rel = flatpos[inside] - lo
    widx = w_index[tuple(rel.T)]
    ok = widx >= 0
    if not ok.any():
        return
    flat = rep[inside][ok] * n_w + widx[ok]
    fields.reshape(-1)[flat] = True
    if counts is not None:
        np.add.at(counts.reshape(-1), flat, 1)


def _window_arrays(window) -> tuple:
    sites = np.atleast_2d(np.asarray(window, dtype=np.int64))
    order = np.lexsort(sites.T[::-1])
    sites = sites[order]
    box = Box(tuple(sites.min(axis=0)), tuple(sites.max(axis=0)))
    lo = np.asarray(box.lo)
    index = np.full(box.shape, -1, dtype=np.int64)
    index[tuple((sites - lo).T)] = np.arange(len(sites))
    return sites, box, index


def sample_rho_model(profile: IntensityProfile, window, seed: int,
                     replicates: int = 1, want_counts: bool = False,
                     want_trajectories: bool = False,
                     label_floor: Optional[IntensityProfile] = None,
                     max_expected_points: float = 5e6,
                     rep_offset: int = 0, stream_salt: int = 0) -> tuple:
    """Sample the finite-length cloud of a profile, observed on a window.

    Independently for every (length, site) pair, Poisson(rate) walks of
    that length start at that site; the field is the union of their
    traces intersected with the window.  Starts are enumerated over the
    exact reach B(window, length-1).

    ``label_floor``: optional pointwise-smaller profile; points with
    arrival label at or below the floor rate are dropped.  At a fixed
    seed this realizes the exact two-sided band coupling: the sample
    contains the floor model's complement relative to the full model.

    ``stream_salt``: selects one of several mutually independent point
    processes at the same seed (0 reuses the seed directly); models
    built from more than one independent cloud pass distinct salts so
    that couplings across model variants share each constituent stream.

    Returns ``(WindowSample, clouds)`` where clouds is a per-replicate
    list of LabeledTrajectorySet (or None when not requested).
    """
    w_sites, win_box, w_index = _window_arrays(window)
    if stream_salt:
        seed = int(rng.derive_key(seed, 0x5A17, stream_salt))
    d = profile.d
    kernel = WalkKernel(d=d, lazy=True)
    n_w = len(w_sites)
    fields = np.zeros((replicates, n_w), dtype=bool)
    counts = np.zeros((replicates, n_w), dtype=np.int64) if want_counts else None
    labels: list = [[] for _ in range(replicates)]
    clouds: Optional[list] = [[] for _ in range(replicates)] \
        if want_trajectories else None
    cloud_keys: Optional[list] = [[] for _ in range(replicates)] \
        if want_trajectories else None

    expected = sum(profile.total_mass(win_box.expand(l - 1))
                   for l in profile.lengths()) * replicates
    if expected > max_expected_points:
        raise ResourceBudgetError(
            f"direct cloud sampling would draw about {expected:.2e} walks; "
            "use the rerooted route for long lengths")

    for length in profile.lengths():
        reach = win_box.expand(length - 1)
        sites = profile.support(length, reach)
        if len(sites) == 0:
            continue
        rates = profile.rate(length, sites)
        floor_rates = None
        if label_floor is not None:
            floor_rates = label_floor.rate(length, sites)
            if np.any(floor_rates > rates + 1e-12):
                raise ValueError("label_floor must be pointwise <= profile")
        # replicate chunks sized to keep (sites x reps) arrays modest
        chunk = max(1, int(4e6 // max(len(sites), 1)))
        for base in range(0, replicates, chunk):
            hi = min(base + chunk, replicates)
            _sample_length_block(
                kernel, length, sites, rates, floor_rates, seed,
                np.arange(base, hi), rep_offset, win_box, w_index,
                fields, counts, labels, clouds, cloud_keys)
    notes = {"start_enumeration": "exact reach",
             "coupling": "per-site arrival streams"}
    sample = WindowSample(window=w_sites, fields=fields, counts=counts,
                          labels=[np.asarray(sorted(l)) for l in labels],
                          bias_notes=notes)
    if want_trajectories:
        cloud_objs = [
            LabeledTrajectorySet(
                window=w_sites, points=pts, d=d,
                stream_keys=np.asarray(keys, dtype=np.uint64))
            for pts, keys in zip(clouds, cloud_keys)]
        return sample, cloud_objs
    return sample, None


def _sample_length_block(kernel, length, sites, rates, floor_rates, seed,
                         rep_ids_local, rep_offset, win_box, w_index,
                         fields, counts, labels, clouds, cloud_keys=None):
    n_site = len(sites)
    n_rep = len(rep_ids_local)
    rep_global = rep_ids_local + rep_offset
    # keys: one stream per (replicate, length, site)
    base_keys = np.empty((n_rep, n_site), dtype=np.uint64)
    for i, r in enumerate(rep_global):
        sub = rng.derive_key(seed, rng.TAG_SITE_LABELS, int(r), int(length))
        base_keys[i] = rng.site_keys(sub, 0, sites)
    caps = np.broadcast_to(rates, (n_rep, n_site)).reshape(-1)
    nums, arrivals, owner = rng.poisson_counts_from_keys(
        base_keys.reshape(-1), caps)
    if arrivals.size == 0:
        return
    point_site = owner % n_site
    point_rep = owner // n_site
    # per-point index within its stream, in arrival order
    idx_in_stream = np.concatenate([np.arange(k) for k in nums if k])
    if floor_rates is not None:
        keep = arrivals > floor_rates[point_site] + 0.0
        point_site = point_site[keep]
        point_rep = point_rep[keep]
        arrivals = arrivals[keep]
        idx_in_stream = idx_in_stream[keep]
        owner = owner[keep]
    if arrivals.size == 0:
        return
    with np.errstate(over="ignore"):
        traj_keys = rng.hash_counters(
            base_keys.reshape(-1)[owner] ^ _POINT_SALT, idx_in_stream)
    starts = sites[point_site]
    slots = rep_ids_local[point_rep]
    for r, lab in zip(slots, arrivals):
        labels[r].append(float(lab))
    moves = kernel.moves()
    # lockstep walk in manageable step x point chunks
    step_budget = 4_000_000
    pts_chunk = max(1, step_budget // max(length, 1))
    for lo in range(0, arrivals.size, pts_chunk):
        hi = min(lo + pts_chunk, arrivals.size)
        codes = trajectory_codes_batch(kernel, traj_keys[lo:hi], length - 1)
        disp = np.concatenate(
            (np.zeros((hi - lo, 1, kernel.d), dtype=np.int64),
             np.cumsum(moves[codes], axis=1)), axis=1)
        positions = starts[lo:hi, None, :] + disp
        _mark_batch(positions, slots[lo:hi], win_box, w_index, fields, counts)
        if clouds is not None:
            for j in range(lo, hi):
                traj = Trajectory(start=starts[j].copy(),
                                  codes=codes[j - lo].copy(),
                                  label=float(arrivals[j]))
                clouds[slots[j]].append(
                    (float(arrivals[j]), int(length), traj))
                if cloud_keys is not None:
                    cloud_keys[slots[j]].append(traj_keys[j])


def sample_J(f, length: int, window, seed: int, **kwargs) -> tuple:
    """Fixed-length cloud with per-site weights: rate (4d/length)*f(x).

    ``f`` is a dict site -> weight for finitely-supported weights, or a
    plain number for the homogeneous cloud.
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    w_sites = np.atleast_2d(np.asarray(window, dtype=np.int64))
    d = w_sites.shape[1]
    if isinstance(f, dict):
        profile = IntensityProfile.field_segment(f, length, d=d)
    else:
        profile = IntensityProfile.homogeneous(float(f), length, d=d)
    return sample_rho_model(profile, window, seed, **kwargs)


# ---------------------------------------------------------------------
# rerooting
# ---------------------------------------------------------------------

def reroot_profile(profile: IntensityProfile, K,
                   max_grid_cells: int = 5_000_000) -> IntensityProfile:
    """Push a finite-length profile onto its first-entrance points of K.

    The returned profile lives on K: its rate at (remaining length l,
    entry site x) collects, over every delay l', the intensity of
    profile walks that would first visit K after exactly l' steps,
    arriving at x — computed by an exact per-site dynamic program with
    K-avoidance folded into the transition step.  The pushed cloud's
    trace on K has the same law as the original cloud's, and at a shared
    seed the original sample dominates the pushed one pointwise.
    """
    k_sites = np.atleast_2d(np.asarray(K, dtype=np.int64))
    d = profile.d
    kernel = WalkKernel(d=d, lazy=True)
    L_max = profile.max_length
    if L_max == 0:
        return IntensityProfile(d=d, kind="table", table={})
    if profile.kind == "homogeneous":
        surv = survival_profile(kernel, k_sites, L_max)
        rate0 = 4.0 * d * profile.level / profile.length
        entries = {}
        for i, x in enumerate(k_sites):
            for rem in range(1, profile.length + 1):
                val = rate0 * surv.s[i, profile.length - rem]
                if val > 0:
                    entries[(rem, tuple(int(c) for c in x))] = val
        return IntensityProfile.from_table(entries, d=d)
    # table profile: forward DP from each site of K
    lengths = profile.lengths()
    sup_pts = np.asarray([s for (_, s) in profile.table], dtype=np.int64)
    lo = np.minimum(sup_pts.min(axis=0), k_sites.min(axis=0)) - 1
    hi = np.maximum(sup_pts.max(axis=0), k_sites.max(axis=0)) + 1
    grid = Box(tuple(lo), tuple(hi))
    if grid.size > max_grid_cells:
        raise ResourceBudgetError("rerooting grid too large")
    k_idx = tuple((k_sites - np.asarray(grid.lo)).T)
    rate_grids = {}
    for length in lengths:
        rg = np.zeros(grid.shape)
        sites = profile.support(length, grid)
        if len(sites):
            rel = tuple((sites - np.asarray(grid.lo)).T)
            rg[rel] = profile.rate(length, sites)
        rate_grids[length] = rg
    entries: dict = {}
    buf = np.empty(grid.shape)
    for i, x in enumerate(k_sites):
        mu = np.zeros(grid.shape)
        mu[tuple((x - np.asarray(grid.lo)))] = 1.0
        for delay in range(0, L_max):
            for length in lengths:
                if length <= delay:
                    continue
                rem = length - delay
                val = float((mu * rate_grids[length]).sum())
                if val > 0:
                    key = (rem, tuple(int(c) for c in x))
                    entries[key] = entries.get(key, 0.0) + val
            if delay < L_max - 1:
                _dp_step_absorbing(kernel, mu, buf, k_idx)
                mu, buf = buf, mu
    return IntensityProfile.from_table(entries, d=d)


def _dp_step_absorbing(kernel, mu, buf, k_idx):
    from .engine import _stencil_step
    _stencil_step(kernel, mu, buf)
    buf[k_idx] = 0.0


def mean_occupation_density(profile: IntensityProfile, x,
                            max_grid_cells: int = 5_000_000) -> float:
    """Exact mean occupation time of the profile's cloud at a site.

    Sums, over elapsed time, the free-walk expectation of the profile's
    remaining-length tail mass, normalized by the site weight 4d.
    """
    x = np.asarray(x, dtype=np.int64)
    d = profile.d
    kernel = WalkKernel(d=d, lazy=True)
    L_max = profile.max_length
    if L_max == 0:
        return 0.0
    if profile.kind == "homogeneous":
        return float(profile.level)
    lengths = profile.lengths()
    sup_pts = np.asarray([s for (_, s) in profile.table], dtype=np.int64)
    lo = np.minimum(sup_pts.min(axis=0), x) - 1
    hi = np.maximum(sup_pts.max(axis=0), x) + 1
    grid = Box(tuple(lo), tuple(hi))
    if grid.size > max_grid_cells:
        raise ResourceBudgetError("occupation-density grid too large")
    tail_grids = {}
    # tail(l, y) = sum of rates at strictly larger lengths at y
    for elapsed in range(0, L_max):
        tg = np.zeros(grid.shape)
        for length in lengths:
            if length > elapsed:
                sites = profile.support(length, grid)
                if len(sites):
                    rel = tuple((sites - np.asarray(grid.lo)).T)
                    tg[rel] += profile.rate(length, sites)
        tail_grids[elapsed] = tg
    from .engine import _stencil_step
    mu = np.zeros(grid.shape)
    mu[tuple(x - np.asarray(grid.lo))] = 1.0
    buf = np.empty(grid.shape)
    total = 0.0
    for elapsed in range(0, L_max):
        total += float((mu * tail_grids[elapsed]).sum())
        if elapsed < L_max - 1:
            _stencil_step(kernel, mu, buf)
            mu, buf = buf, mu
    return total / (4.0 * d)


# ---------------------------------------------------------------------
# homogeneous fixed-length clouds: exact vacancy and fast sampling
# ---------------------------------------------------------------------

_surv_cache: dict = {}


def _survival_for(kernel: WalkKernel, sites: np.ndarray,
                  horizon: int) -> SurvivalData:
    key = (sites.tobytes(), sites.shape, kernel.lazy, kernel.d)
    hit = _surv_cache.get(key)
    if hit is not None and hit.horizon >= horizon:
        return hit
    surv = survival_profile(kernel, sites, horizon)
    if len(_surv_cache) > 32:
        _surv_cache.clear()
    _surv_cache[key] = surv
    return surv


def segment_cloud_vacancy(u: float, length: int, K, d: int = 3) -> tuple:
    """Exact P[homogeneous length-L cloud at level u misses K].

    Returns ``(probability, bias_bound)``; the bound covers the survival
    DP's finite-grid truncation.
    """
    sites = np.atleast_2d(np.asarray(K, dtype=np.int64))
    kernel = WalkKernel(d=d, lazy=True)
    surv = _survival_for(kernel, sites, length)
    lam = segment_intensity(surv, u, length)
    p = float(np.exp(-lam))
    return p, float(surv.bias_bound * lam)


def sample_segment_cloud(u: float, length: int, window, seed: int,
                         replicates: int = 1, strategy: str = "auto",
                         want_counts: bool = False,
                         rep_offset: int = 0) -> WindowSample:
    """Homogeneous fixed-length cloud observed on a window.

    strategy "direct" enumerates every candidate start in the reach;
    "rerooted" samples only the cloud points that touch the window, from
    the pushed-forward profile on the window (same law there); "auto"
    picks by expected work.
    """
    if u < 0:
        raise ValueError("level u must be >= 0")
    if length < 1:
        raise ValueError("length must be >= 1")
    w_sites, win_box, w_index = _window_arrays(window)
    d = w_sites.shape[1]
    kernel = WalkKernel(d=d, lazy=True)
    if strategy == "auto":
        reach = win_box.expand(length - 1)
        expected = 4.0 * d * u / length * reach.size * replicates
        strategy = "direct" if expected <= 2e5 and length <= 64 \
            else "rerooted"
    if strategy == "direct":
        profile = IntensityProfile.homogeneous(u, length, d=d)
        sample, _ = sample_rho_model(profile, w_sites, seed,
                                     replicates=replicates,
                                     want_counts=want_counts,
                                     rep_offset=rep_offset)
        sample.bias_notes["strategy"] = "direct"
        return sample
    if strategy != "rerooted":
        raise ValueError(f"unknown strategy {strategy!r}")
    return _sample_segment_rerooted(u, length, w_sites, win_box, w_index,
                                    kernel, seed, replicates, want_counts,
                                    rep_offset)


def _sample_segment_rerooted(u, length, w_sites, win_box, w_index, kernel,
                             seed, replicates, want_counts, rep_offset):
    surv = _survival_for(kernel, w_sites, length)
    site_rates = segment_site_rates(surv, u, length)
    # cumulative length law per entry site: remaining length rem has
    # weight s_x(length - rem)
    weights = surv.s[:, :length][:, ::-1]          # column rem-1 = s(L-rem)
    cum_len = np.cumsum(weights, axis=1)
    cum_len /= cum_len[:, -1:]
    n_w = len(w_sites)
    fields = np.zeros((replicates, n_w), dtype=bool)
    counts = np.zeros((replicates, n_w), dtype=np.int64) if want_counts else None
    labels: list = []
    moves = kernel.moves()
    chunk = max(1, int(2e6 // max(n_w, 1)))
    for base in range(0, replicates, chunk):
        hi = min(base + chunk, replicates)
        n_rep = hi - base
        rep_global = np.arange(base, hi) + rep_offset
        keys = np.empty((n_rep, n_w), dtype=np.uint64)
        for i, r in enumerate(rep_global):
            sub = rng.derive_key(seed, rng.TAG_SITE_LABELS, int(r),
                                 int(length), 1)
            keys[i] = rng.site_keys(sub, 0, w_sites)
        caps = np.broadcast_to(site_rates, (n_rep, n_w)).reshape(-1)
        nums, arrivals, owner = rng.poisson_counts_from_keys(
            keys.reshape(-1), caps)
        for i in range(n_rep):
            labels.append(np.sort(arrivals[(owner // n_w) == i]))
        if arrivals.size == 0:
            continue
        point_site = owner % n_w
        point_rep_local = owner // n_w
        idx_in_stream = np.concatenate([np.arange(k) for k in nums if k])
        with np.errstate(over="ignore"):
            traj_keys = rng.hash_counters(
                keys.reshape(-1)[owner] ^ _POINT_SALT, idx_in_stream)
        u_len = rng.uniform_at(traj_keys ^ np.uint64(rng.TAG_LENGTH),
                               np.zeros(arrivals.size, dtype=np.int64))
        rem = np.empty(arrivals.size, dtype=np.int64)
        for s_idx in range(n_w):
            sel = point_site == s_idx
            if sel.any():
                rem[sel] = np.searchsorted(cum_len[s_idx], u_len[sel]) + 1
        np.minimum(rem, length, out=rem)
        starts = w_sites[point_site]
        slots = base + point_rep_local
        order = np.argsort(rem, kind="stable")
        step_budget = 4_000_000
        o_lo = 0
        while o_lo < order.size:
            o_hi = o_lo
            tot = 0
            while o_hi < order.size and tot < step_budget:
                tot += int(rem[order[o_hi]])
                o_hi += 1
            sel = order[o_lo:o_hi]
            max_steps = int(rem[sel].max()) - 1
            codes = trajectory_codes_batch(kernel, traj_keys[sel], max_steps)
            disp = np.concatenate(
                (np.zeros((len(sel), 1, kernel.d), dtype=np.int64),
                 np.cumsum(moves[codes], axis=1)), axis=1)
            positions = starts[sel][:, None, :] + disp
            # mask steps beyond each walk's own length: park them far
            # outside the window so marking ignores them
            step_idx = np.arange(max_steps + 1)[None, :]
            over = step_idx >= rem[sel][:, None]
            if over.any():
                positions = positions.copy()
                positions[over] = np.asarray(win_box.lo) - 10
            _mark_batch(positions, slots[sel], win_box, w_index,
                        fields, counts)
            o_lo = o_hi
    notes = {"strategy": "rerooted",
             "survival_dp_bias": surv.bias_bound,
             "law": "equal to the direct cloud on the window"}
    return WindowSample(window=w_sites, fields=fields, counts=counts,
                        labels=labels, bias_notes=notes)
