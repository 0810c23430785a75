"""Lattice geometry and nearest-neighbour walk kernels on Z^d.

The default kernel is the lazy walk attached to unit conductances plus a
self-loop of weight 2d at every site: total site weight a_x = 4d, holding
probability 1/2, probability 1/(4d) for each of the 2d neighbours.  The
plain simple walk (no self-loop, site weight 2d) is available for the
classical normalization and for torus runs.

Trajectories are stored as a start site plus packed move codes (one byte
per step), which keeps large clouds cheap to hold and serialize.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from . import rng


@dataclass(frozen=True)
class WalkKernel:
    """Nearest-neighbour random walk kernel on Z^d.

    Parameters
    ----------
    d : spatial dimension (transient regime requires d >= 3 for the
        potential-theory routines; the kernel itself works for d >= 1).
    lazy : if True, self-loop weight 2d at every site (hold probability
        1/2); if False, the plain simple random walk.
    """

    d: int = 3
    lazy: bool = True

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("dimension must be >= 1")

    @property
    def conductance(self) -> int:
        """Total site weight a_x: 4d with the self-loop, 2d without."""
        return 4 * self.d if self.lazy else 2 * self.d

    @property
    def hold_probability(self) -> float:
        return 0.5 if self.lazy else 0.0

    @property
    def neighbor_probability(self) -> float:
        return 1.0 / (4 * self.d) if self.lazy else 1.0 / (2 * self.d)

    def moves(self) -> np.ndarray:
        """Unit moves indexed by code: row 0 is the hold move (all zeros,
        present also for the simple kernel but never drawn), rows 1..2d
        are +-e_j in axis-major order (+e_0, -e_0, +e_1, ...)."""
        m = np.zeros((2 * self.d + 1, self.d), dtype=np.int64)
        for j in range(self.d):
            m[1 + 2 * j, j] = 1
            m[2 + 2 * j, j] = -1
        return m

    def codes_from_uniforms(self, u: np.ndarray) -> np.ndarray:
        """Map Uniform(0,1) draws to move codes with the kernel's law."""
        u = np.asarray(u)
        if self.lazy:
            codes = np.zeros(u.shape, dtype=np.uint8)
            moving = u >= 0.5
            idx = np.minimum(((u - 0.5) * (4 * self.d)).astype(np.int64),
                             2 * self.d - 1)
            codes[moving] = (idx[moving] + 1).astype(np.uint8)
            return codes
        idx = np.minimum((u * (2 * self.d)).astype(np.int64), 2 * self.d - 1)
        return (idx + 1).astype(np.uint8)


def step_distribution(kernel: WalkKernel):
    """Return (moves, probabilities) of a single step, hold move included.

    Probabilities sum to one exactly in floating point for d <= 8.
    """
    moves = kernel.moves()
    probs = np.full(2 * kernel.d + 1, kernel.neighbor_probability)
    probs[0] = kernel.hold_probability
    return moves, probs


@dataclass(frozen=True)
class Box:
    """Axis-aligned box of lattice sites: lo[j] <= x_j <= hi[j]."""

    lo: tuple
    hi: tuple

    @staticmethod
    def ball(radius: int, d: int = 3, center=None) -> "Box":
        """Closed sup-norm ball B(center, radius)."""
        c = np.zeros(d, dtype=np.int64) if center is None else np.asarray(center, dtype=np.int64)
        return Box(tuple(int(v) for v in c - radius), tuple(int(v) for v in c + radius))

    @property
    def d(self) -> int:
        return len(self.lo)

    @property
    def shape(self) -> tuple:
        return tuple(h - l + 1 for l, h in zip(self.lo, self.hi))

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def contains(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.int64))
        lo = np.asarray(self.lo, dtype=np.int64)
        hi = np.asarray(self.hi, dtype=np.int64)
        return np.all((pts >= lo) & (pts <= hi), axis=-1)

    def flat_index(self, points: np.ndarray) -> np.ndarray:
        """C-order flat index of points assumed inside the box."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.int64))
        lo = np.asarray(self.lo, dtype=np.int64)
        rel = pts - lo
        return np.ravel_multi_index(tuple(rel.T), self.shape)

    def sites(self) -> np.ndarray:
        """All sites of the box, C-order, as an (n, d) array."""
        axes = [np.arange(l, h + 1, dtype=np.int64) for l, h in zip(self.lo, self.hi)]
        grid = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in grid], axis=-1)

    def expand(self, margin: int) -> "Box":
        return Box(tuple(l - margin for l in self.lo), tuple(h + margin for h in self.hi))

    def sup_distance(self, points: np.ndarray) -> np.ndarray:
        """sup-norm distance from each point to the box (0 inside)."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.int64))
        lo = np.asarray(self.lo, dtype=np.int64)
        hi = np.asarray(self.hi, dtype=np.int64)
        gap = np.maximum(lo - pts, pts - hi)
        return np.maximum(gap, 0).max(axis=-1)


def sup_norm(points: np.ndarray) -> np.ndarray:
    return np.abs(np.atleast_2d(np.asarray(points, dtype=np.int64))).max(axis=-1)


@dataclass
class Trajectory:
    """A finite walk path: start site plus packed move codes.

    ``length`` in this package counts visited time-steps, so a trajectory
    of length ell holds ell positions and ell - 1 move codes.
    """

    start: np.ndarray
    codes: np.ndarray
    label: float = 0.0

    @property
    def length(self) -> int:
        return self.codes.shape[0] + 1

    def positions(self, kernel: WalkKernel) -> np.ndarray:
        moves = kernel.moves()
        steps = moves[self.codes]
        out = np.empty((self.length, kernel.d), dtype=np.int64)
        out[0] = self.start
        if self.length > 1:
            np.cumsum(steps, axis=0, out=steps)
            out[1:] = self.start + steps
        return out


def sample_trajectory(kernel: WalkKernel, start, length: int,
                      seed: int, stream: Iterable[int] = ()) -> Trajectory:
    """Sample one trajectory of ``length`` visited steps.

    The move codes are a pure function of ``(seed, stream)``, so the same
    arguments always reproduce the same path.
    """
    if length < 1:
        raise ValueError("trajectory length counts visited steps; need >= 1")
    key = rng.derive_key(seed, rng.TAG_TRAJECTORY, *stream)
    u = rng.uniform_at(key, np.arange(length - 1, dtype=np.int64))
    codes = kernel.codes_from_uniforms(u)
    return Trajectory(start=np.asarray(start, dtype=np.int64), codes=codes)


def trajectory_codes_batch(kernel: WalkKernel, keys: np.ndarray,
                           n_steps: int) -> np.ndarray:
    """Move codes for many trajectories at once, keyed per row."""
    if n_steps == 0:
        return np.zeros((len(keys), 0), dtype=np.uint8)
    counters = np.arange(n_steps, dtype=np.int64)[None, :]
    u = rng.uniform_at(np.asarray(keys, dtype=np.uint64)[:, None], counters)
    return kernel.codes_from_uniforms(u)


@dataclass
class LatticeField:
    """A real-valued function with finite support, stored on a box."""

    box: Box
    data: np.ndarray

    @staticmethod
    def indicator(box: Box) -> "LatticeField":
        return LatticeField(box, np.ones(box.shape))

    def value_at(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.int64))
        inside = self.box.contains(pts)
        out = np.zeros(pts.shape[0])
        if inside.any():
            out[inside] = self.data.ravel()[self.box.flat_index(pts[inside])]
        return out


def apply_transition(kernel: WalkKernel, fld: LatticeField, n: int = 1) -> LatticeField:
    """Exact n-step transition operator (P^n f)(x) = E_x[f(X_n)].

    Each application pads the support box by one and convolves with the
    one-step stencil in float64; mass is conserved exactly up to roundoff.
    """
    if n < 0:
        raise ValueError("need n >= 0")
    box, data = fld.box, fld.data
    hold = kernel.hold_probability
    q = kernel.neighbor_probability
    for _ in range(n):
        new_box = box.expand(1)
        out = np.zeros(new_box.shape)
        core = tuple(slice(1, 1 + s) for s in box.shape)
        out[core] += hold * data if hold else 0.0
        for j in range(kernel.d):
            for shift in (-1, 1):
                sl = list(core)
                sl[j] = slice(1 + shift, 1 + shift + box.shape[j])
                out[tuple(sl)] += q * data
        box, data = new_box, out
    return LatticeField(box, data)
