"""Random walk on the discrete torus and its vacant set.

One walk of ``floor(u * N^d)`` steps from a uniform (stationary) start
visits a set of sites; the vacant set is the complement.  The run keeps
the first-visit time of every site, so the vacant sets of *all* levels
u' <= u are nested slices of a single run — the monotonicity of the
model in u is exact and free.

``local_limit_compare`` relates torus vacancy probabilities of a small
pattern to the capacity formula exp(-u * cap(K)).  The walk convention
here is the plain simple walk, whose natural normalization is the
simple-walk capacity; a one-time empirical calibration on K={0} pins the
constant, and the calibrated formula is then checked on other patterns.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import rng
from .cloud import OccupancyField
from .engine import ResourceBudgetError
from .lattice import WalkKernel
from .potential import capacity

_MAX_TORUS_CELLS = 64_000_000


@dataclass
class TorusRun:
    """One torus walk and the first-visit record of every site."""

    N: int
    d: int
    u: float
    lazy: bool
    steps_taken: int
    seed: int
    start: np.ndarray
    first_visit: np.ndarray     # flat (N^d,), steps_taken+1 where never visited

    @property
    def never(self) -> int:
        return self.steps_taken + 1

    def steps_for(self, u: float) -> int:
        return int(np.floor(u * self.N ** self.d))

    def vacant_mask(self, u: Optional[float] = None) -> np.ndarray:
        """Vacant indicator grid at level u' <= u (defaults to the run's u)."""
        uu = self.u if u is None else u
        if uu > self.u + 1e-12:
            raise ValueError("requested level exceeds the sampled level")
        s = min(self.steps_for(uu), self.steps_taken)
        return (self.first_visit > s).reshape((self.N,) * self.d)

    def vacant_count(self, u: Optional[float] = None) -> int:
        return int(self.vacant_mask(u).sum())

    def pattern_vacant(self, sites, u: Optional[float] = None) -> bool:
        """True when every site of the pattern (taken mod N) is vacant."""
        pts = np.atleast_2d(np.asarray(sites, dtype=np.int64)) % self.N
        mask = self.vacant_mask(u)
        return bool(mask[tuple(pts.T)].all())

    def vacant_field(self, u: Optional[float] = None) -> OccupancyField:
        mask = self.vacant_mask(u)
        sites = np.indices(mask.shape).reshape(self.d, -1).T
        occupied = ~mask.reshape(-1)
        return OccupancyField(window=sites, occupied=occupied, d=self.d)


def sample_torus_vacant(N: int, d: int, u: float, seed: int,
                        lazy: bool = False) -> TorusRun:
    """Run one torus walk for floor(u * N^d) steps and record first visits."""
    if N < 2:
        raise ValueError("torus side must be >= 2")
    if u < 0:
        raise ValueError("level u must be >= 0")
    cells = N ** d
    if cells > _MAX_TORUS_CELLS:
        raise ResourceBudgetError(
            f"torus with {cells} sites exceeds the memory budget")
    kernel = WalkKernel(d=d, lazy=lazy)
    steps = int(np.floor(u * cells))
    gen = rng.generator(seed, rng.TAG_TORUS)
    start = gen.integers(0, N, size=d, dtype=np.int64)
    first = np.full(cells, steps + 1, dtype=np.int64)
    moves = kernel.moves()
    pos = start.copy()
    first[int(np.ravel_multi_index(pos, (N,) * d))] = 0
    done = 0
    chunk = 1 << 20
    while done < steps:
        n = min(chunk, steps - done)
        codes = kernel.codes_from_uniforms(gen.random(n))
        disp = np.cumsum(moves[codes], axis=0)
        posn = (pos + disp) % N
        flat = np.ravel_multi_index(tuple(posn.T), (N,) * d)
        np.minimum.at(first, flat, np.arange(done + 1, done + n + 1))
        pos = posn[-1]
        done += n
    return TorusRun(N=N, d=d, u=u, lazy=lazy, steps_taken=steps, seed=seed,
                    start=start, first_visit=first)


def wilson_interval(successes: int, n: int, z: float = 2.576) -> tuple:
    """Wilson score interval (99% by default)."""
    if n == 0:
        return 0.0, 1.0
    p = successes / n
    denom = 1.0 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = z * np.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return float(center - half), float(center + half)


def pattern_vacancy_probability(N: int, d: int, u: float, K, seed: int,
                                replicates: int,
                                lazy: bool = False) -> dict:
    """Monte Carlo P[pattern K vacant] on the torus, with a Wilson CI."""
    hits = 0
    for r in range(replicates):
        run = sample_torus_vacant(N, d, u, rng.derive_key(seed, r), lazy=lazy)
        if run.pattern_vacant(K):
            hits += 1
    lo, hi = wilson_interval(hits, replicates)
    return {"N": N, "estimate": hits / replicates, "ci_lo": lo, "ci_hi": hi,
            "replicates": replicates, "successes": hits}


def calibrate_torus_constant(N: int, d: int, u: float, seed: int,
                             replicates: int, lazy: bool = False) -> dict:
    """Fit c in P[{0} vacant] = exp(-c * u * cap_simple({0})) at one N."""
    rec = pattern_vacancy_probability(N, d, u, [(0,) * d], seed, replicates,
                                      lazy=lazy)
    cap0 = capacity([(0,) * d], "simple_lawler")
    p = max(rec["estimate"], 1e-12)
    c = -np.log(p) / (u * cap0)
    c_lo = -np.log(min(rec["ci_hi"], 1 - 1e-12)) / (u * cap0)
    c_hi = -np.log(max(rec["ci_lo"], 1e-12)) / (u * cap0)
    rec.update({"c": float(c), "c_lo": float(c_lo), "c_hi": float(c_hi),
                "capacity": float(cap0)})
    return rec


def local_limit_compare(N_list: Sequence[int], K, u: float, seed: int,
                        replicates: int, convention: str = "simple_lawler",
                        calibration: Optional[float] = None,
                        lazy: bool = False) -> list:
    """Torus vacancy of a pattern vs the capacity-formula limit, per N.

    Each row carries the Monte Carlo estimate with a Wilson CI, the raw
    limit exp(-u*cap(K)) in the requested convention, and — when a
    calibration constant is supplied — the calibrated limit
    exp(-c*u*cap(K)).
    """
    pts = np.atleast_2d(np.asarray(K, dtype=np.int64))
    d = pts.shape[1]
    diam = int((pts.max(axis=0) - pts.min(axis=0)).max())
    cap_k = capacity(pts, convention)
    rows = []
    for i, N in enumerate(N_list):
        if diam > N / 4:
            raise ValueError("pattern too large for this torus")
        rec = pattern_vacancy_probability(
            N, d, u, pts, rng.derive_key(seed, 0x7E, i), replicates, lazy=lazy)
        rec["limit"] = float(np.exp(-u * cap_k))
        rec["capacity"] = float(cap_k)
        rec["convention"] = convention
        if calibration is not None:
            rec["calibrated_limit"] = float(np.exp(-calibration * u * cap_k))
        rows.append(rec)
    return rows
