"""Noised finite-length models, box-scale interpolation, and tube surgery.

This module assembles finite-range vacant-set models out of the
finite-length clouds of :mod:`.cloud`:

* a site-resampling noise operator with forcing bands of width delta/2
  at both ends of a per-site uniform variable;
* integer sprinkling fields, constant on the boxes of a lattice tiling,
  distributed as 1 + Poisson(1) per tile, together with an exact
  decomposition into independent per-source-box Poisson contributions
  whose means sum to one;
* the noised homogeneous model at length L: noise applied to the union
  of the level-u cloud and an epsilon-thinned sprinkled cloud;
* two interpolation sequences of inhomogeneous models that convert one
  box of a tiling at a time between length scales L and 2L, the noise
  scale switching per box, with exact half-step monotone coupling
  between consecutive models at a shared seed;
* label-interval clouds retaining the points whose arrival label falls
  in a per-site band, which realize the monotone couplings pathwise;
* axis-aligned tube triples and the transform that deletes trajectories
  starting in the outer tube and re-times survivors so that their clock
  only advances outside the middle tube.

All randomness is keyed: a (seed, tag, coordinates) path determines
every uniform, so models sharing constituent streams are coupled
exactly across parameters, and independent parts get disjoint tags.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np
from scipy.special import comb, zeta

from . import rng
from .cloud import (IntensityProfile, LabeledTrajectorySet, OccupancyField,
                    WindowSample, _window_arrays, sample_rho_model)
from .engine import segment_intensity, survival_profile
from .lattice import (Box, LatticeField, Trajectory, WalkKernel,
                      apply_transition)

# derivation-path words for the randomness sources of this module
_PAIR_WORD = 0x5F17        # per (target-tile, source-tile) sprinkle parts
_REMAINDER_WORD = 0xFA12   # per-tile far-source remainder of the decomposition
_UNIFORM_RESOLUTION = 2.0 ** -54   # smallest value the site uniforms can take


# ---------------------------------------------------------------------------
# keyed Poisson draws


def _poisson_from_uniforms(u: np.ndarray, lam) -> np.ndarray:
    """Inverse-CDF Poisson draw from one uniform per entry (deterministic)."""
    u = np.asarray(u, dtype=float)
    lam = np.broadcast_to(np.asarray(lam, dtype=float), u.shape)
    out = np.zeros(u.shape, dtype=np.int64)
    pmf = np.exp(-lam)
    cdf = pmf.copy()
    k = 0
    lmax = float(lam.max(initial=0.0))
    kmax = 60 + int(10.0 * (lmax + math.sqrt(lmax + 1.0)))
    while True:
        pending = u >= cdf
        if not pending.any() or k > kmax:
            break
        out[pending] += 1
        k += 1
        pmf = pmf * lam / k
        cdf = cdf + pmf
    return out


# ---------------------------------------------------------------------------
# noise operator


@dataclass(frozen=True)
class NoiseParams:
    """Resampling strength: a direct band width or the e^(-L) scale form."""

    delta: Optional[float] = None
    scale_length: Optional[int] = None

    def __post_init__(self):
        if (self.delta is None) == (self.scale_length is None):
            raise ValueError("give exactly one of delta or scale_length")
        if self.delta is not None and not 0.0 <= self.delta <= 1.0:
            raise ValueError("delta must lie in [0, 1]")
        if self.scale_length is not None and self.scale_length < 1:
            raise ValueError("scale_length must be >= 1")

    @property
    def value(self) -> float:
        if self.delta is not None:
            return float(self.delta)
        return math.exp(-float(self.scale_length))

    @property
    def log_half_band(self) -> float:
        """log(delta/2), finite even where delta/2 underflows to zero."""
        if self.delta is not None:
            if self.delta == 0.0:
                return -math.inf
            return math.log(self.delta) - math.log(2.0)
        return -float(self.scale_length) - math.log(2.0)

    @property
    def half_band(self) -> float:
        return 0.5 * self.value

    @property
    def underflow(self) -> bool:
        """True when the forcing bands lie below the uniform-stream
        resolution and can never fire (the bands are then exactly inert).
        An explicit delta of zero is zero noise by request, not underflow.
        """
        if self.delta is not None and self.delta == 0.0:
            return False
        return self.log_half_band < math.log(_UNIFORM_RESOLUTION)


def uniform_site_field(window, seed: int) -> np.ndarray:
    """One uniform(0,1) per window site, keyed by site coordinates.

    The same (seed, site) always yields the same value, so every model
    built on one seed shares a single resampling environment.
    """
    sites = np.atleast_2d(np.asarray(window, dtype=np.int64))
    keys = rng.site_keys(rng.derive_key(seed, rng.TAG_NOISE), 0, sites)
    return rng.uniform_at(keys, 0)


def apply_noise(fld: OccupancyField, params: NoiseParams,
                U: Optional[np.ndarray] = None,
                seed: Optional[int] = None) -> OccupancyField:
    """Resample occupation variables inside the two forcing bands.

    A site with uniform value at most delta/2 becomes occupied, one with
    value at least 1 - delta/2 becomes vacant, every other site copies
    the input.  Visit counts do not survive resampling and are dropped.
    """
    if U is None:
        if seed is None:
            raise ValueError("provide the uniform field or a seed")
        U = uniform_site_field(fld.window, seed)
    U = np.asarray(U, dtype=float)
    if U.shape != fld.occupied.shape:
        raise ValueError("uniform field does not match the window")
    half = params.half_band
    occ = np.where(U <= half, True,
                   np.where(U >= 1.0 - half, False, fld.occupied))
    return OccupancyField(window=fld.window, occupied=occ, d=fld.d)


# ---------------------------------------------------------------------------
# sprinkling fields


def inverse_power_offset_sum(d: int) -> float:
    """Sum of |z|_inf^-(d+1) over nonzero integer sites, via zeta values.

    The sup-norm shell at radius r holds (2r+1)^d - (2r-1)^d sites, an
    odd polynomial in r, so the lattice sum reduces to zeta values.
    """
    total = 0.0
    for k in range(1, d + 1, 2):
        total += 2.0 * comb(d, k, exact=True) * 2.0 ** (d - k) * zeta(k + 1)
    return float(total)


def _offset_tail_mass(d: int, radius: int) -> float:
    """Exact normalized mass of sources farther than ``radius`` tiles."""
    total = 0.0
    for k in range(1, d + 1, 2):
        coeff = 2.0 * comb(d, k, exact=True) * 2.0 ** (d - k)
        s = k + 1
        head = float(np.sum(1.0 / np.arange(1, radius + 1, dtype=float) ** s))
        total += coeff * (zeta(s) - head)
    return total / inverse_power_offset_sum(d)


def tile_of(sites: np.ndarray, radius: int) -> np.ndarray:
    """Index of the radius-``radius`` tiling box containing each site.

    The tiling is by boxes B(z, radius) with z on the (2*radius+1)-spaced
    sublattice; the returned integers are the box centers divided by the
    spacing.
    """
    pts = np.atleast_2d(np.asarray(sites, dtype=np.int64))
    return np.floor_divide(pts + radius, 2 * radius + 1)


def _coord_columns(arr: np.ndarray) -> list:
    arr = np.atleast_2d(np.asarray(arr, dtype=np.int64))
    return [arr[:, j] for j in range(arr.shape[1])]


def sprinkle_totals(seed: int, radius: int, tiles: np.ndarray) -> np.ndarray:
    """Plain per-tile values 1 + Poisson(1), keyed by tile index."""
    tiles = np.atleast_2d(np.asarray(tiles, dtype=np.int64))
    keys = rng.key_array(seed, rng.TAG_SPRINKLE, radius,
                         *_coord_columns(tiles))
    u = rng.uniform_at(keys, 0)
    return 1 + _poisson_from_uniforms(u, 1.0)


def sprinkle_pair_means(offsets: np.ndarray, d: int) -> np.ndarray:
    """Poisson means of the per-source parts at given tile offsets.

    Zero at offset zero (that source contributes the constant one, not a
    Poisson part); the means over all nonzero offsets sum to one.
    """
    w = np.atleast_2d(np.asarray(offsets, dtype=np.int64))
    norms = np.abs(w).max(axis=1)
    out = np.zeros(len(w), dtype=float)
    nz = norms > 0
    out[nz] = norms[nz].astype(float) ** (-(d + 1)) \
        / inverse_power_offset_sum(d)
    return out


def sprinkle_pair_values(seed: int, radius: int, target_tile,
                         source_tiles: np.ndarray, d: int) -> np.ndarray:
    """Per-source contributions to one target tile's sprinkle value.

    The same-tile source contributes the constant one; every other
    source is an independent Poisson with mean decaying like the inverse
    (d+1)-st power of the tile distance, the means summing to one over
    all sources — so the total over all sources is 1 + Poisson(1).
    """
    target = np.asarray(target_tile, dtype=np.int64).reshape(-1)
    src = np.atleast_2d(np.asarray(source_tiles, dtype=np.int64))
    offsets = src - target
    means = sprinkle_pair_means(offsets, d)
    vals = np.zeros(len(src), dtype=np.int64)
    same = (offsets == 0).all(axis=1)
    vals[same] = 1
    others = ~same
    if others.any():
        keys = rng.key_array(seed, _PAIR_WORD, radius,
                             *[np.int64(c) for c in target],
                             *_coord_columns(src[others]))
        u = rng.uniform_at(keys, 0)
        vals[others] = _poisson_from_uniforms(u, means[others])
    return vals


_offsets_cache: dict = {}


def _ball_offsets(d: int, radius: int) -> np.ndarray:
    """All nonzero offsets with sup-norm at most ``radius``."""
    key = (d, radius)
    if key not in _offsets_cache:
        if len(_offsets_cache) > 4:
            _offsets_cache.clear()
        grid = np.indices((2 * radius + 1,) * d, dtype=np.int64)
        grid = grid.reshape(d, -1).T - radius
        _offsets_cache[key] = grid[np.abs(grid).max(axis=1) > 0]
    return _offsets_cache[key]


_decomp_cache: dict = {}


def _decomposed_tile(seed: int, radius: int, tile: tuple, d: int,
                     truncation_radius: int) -> tuple:
    """(total, nonzero parts dict) for one tile of the decomposed field."""
    cache_key = (seed, radius, tile, d, truncation_radius)
    hit = _decomp_cache.get(cache_key)
    if hit is not None:
        return hit
    offsets = _ball_offsets(d, truncation_radius)
    means = sprinkle_pair_means(offsets, d)
    remainder_mean = max(0.0, 1.0 - float(means.sum()))
    target = np.asarray(tile, dtype=np.int64)
    vals = sprinkle_pair_values(seed, radius, target, target + offsets, d)
    rem_key = np.asarray(
        rng.key_array(seed, _REMAINDER_WORD, radius,
                      *[np.int64(c) for c in tile]), dtype=np.uint64)
    rem = int(_poisson_from_uniforms(rng.uniform_at(rem_key, 0),
                                     remainder_mean)[()])
    parts = {tuple(int(c) for c in target + o): int(v)
             for o, v in zip(offsets, vals) if v}
    parts["remainder"] = rem
    total = 1 + int(vals.sum()) + rem
    if len(_decomp_cache) > 4096:
        _decomp_cache.clear()
    _decomp_cache[cache_key] = (total, parts)
    return total, parts


@dataclass
class SprinkleField:
    """Integer sprinkling values, constant on the boxes of a tiling.

    ``tiles`` indexes the materialized boxes B(z, L), z on the
    (2L+1)-spaced sublattice; ``values`` holds the per-tile integers
    (each distributed as 1 + Poisson(1), independent across tiles).  In
    decomposed mode ``decomposition`` itemizes every tile's value over
    source boxes within ``truncation_radius`` tiles plus an explicit
    ``"remainder"`` Poisson carrying the exact leftover mean
    (``remainder_mean``, reported), so the total law stays exact.
    """

    L: int
    d: int
    seed: int
    decomposed: bool
    tiles: np.ndarray                  # (m, d) tile indices
    values: np.ndarray                 # (m,) integers >= 1
    decomposition: Optional[dict] = None
    remainder_mean: float = 0.0
    truncation_radius: int = 64

    @property
    def spacing(self) -> int:
        return 2 * self.L + 1

    def tile_centers(self) -> np.ndarray:
        return self.tiles * self.spacing

    def values_at(self, sites) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(sites, dtype=np.int64))
        t = tile_of(pts, self.L)
        lookup = {tuple(int(c) for c in tt): int(v)
                  for tt, v in zip(self.tiles, self.values)}
        out = np.empty(len(pts), dtype=np.int64)
        for i, tt in enumerate(t):
            key = tuple(int(c) for c in tt)
            if key not in lookup:
                raise KeyError(f"tile {key} not materialized")
            out[i] = lookup[key]
        return out


def sample_sprinkle(L: int, window, seed: int, decomposed: bool = False,
                    truncation_radius: int = 64) -> SprinkleField:
    """Sprinkle values on every tile meeting the window.

    Plain mode draws each tile's 1 + Poisson(1) directly.  Decomposed
    mode draws an independent Poisson part per source box within
    ``truncation_radius`` tiles and one remainder Poisson per tile with
    the exact mass of all farther sources, then sums — same law, with
    the attribution itemized.  ``remainder_mean`` on the result reports
    the per-tile mass that is not individually attributed.
    """
    if L < 1:
        raise ValueError("tile radius must be >= 1")
    sites = np.atleast_2d(np.asarray(window, dtype=np.int64))
    d = sites.shape[1]
    tiles = np.unique(tile_of(sites, L), axis=0)
    if not decomposed:
        return SprinkleField(L=L, d=d, seed=seed, decomposed=False,
                             tiles=tiles,
                             values=sprinkle_totals(seed, L, tiles))
    values = np.empty(len(tiles), dtype=np.int64)
    decomposition = {}
    rem_mean = _offset_tail_mass(d, truncation_radius)
    for i, t in enumerate(tiles):
        key = tuple(int(c) for c in t)
        values[i], decomposition[key] = _decomposed_tile(
            seed, L, key, d, truncation_radius)
    return SprinkleField(L=L, d=d, seed=seed, decomposed=True, tiles=tiles,
                         values=values, decomposition=decomposition,
                         remainder_mean=rem_mean,
                         truncation_radius=truncation_radius)


# ---------------------------------------------------------------------------
# model configuration


def _epsilon(L: int, gamma: float) -> float:
    return math.log(L) ** (-(gamma + 5.0))


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _check_ell(ell) -> float:
    if ell == math.inf:
        return math.inf
    e2 = 2.0 * float(ell)
    if e2 < 0 or abs(e2 - round(e2)) > 1e-9:
        raise ValueError("the interpolation index must be a nonnegative "
                         "half-integer or infinity")
    return round(e2) / 2.0


@dataclass(frozen=True)
class MixedModelConfig:
    """Parameters of an interpolation family between length scales L and 2L.

    ``variant`` "tilde" converts boxes from length L to 2L; "bar" runs
    the opposite direction.  ``ell`` is the default conversion index: a
    half-integer (integer points are the models of the sequence, half
    points the monotone midpoints) or infinity for the fully converted
    end.  ``gamma`` sets the sprinkle thinning eps_L = (log L)^-(gamma+5);
    the per-box sprinkling budget is delta2 = delta1 / C with
    delta1 = (log L)^-4.  ``C`` defaults to 6^d, the maximum number of
    radius-6L boxes on the finer sublattice covering one site, which
    makes the fully-converted model's weight profile provably below the
    (1 + C*delta2)-level homogeneous bound.  ``decomposition_radius``
    is the per-source attribution radius of the decomposed sprinkle
    entering the fully-converted model; the summed values' law does not
    depend on it (the remainder carries the leftover mass exactly).
    """

    variant: str
    u: float
    L: int
    ell: float = 0.0
    gamma: float = 20.0
    d: int = 3
    C: Optional[float] = None
    front_window: Optional[Box] = None
    decomposition_radius: int = 64

    def __post_init__(self):
        if self.variant not in ("tilde", "bar"):
            raise ValueError("variant must be 'tilde' or 'bar'")
        if not _is_power_of_two(self.L) or self.L < 4:
            raise ValueError("L must be a power of two, at least 4")
        if self.u <= 0:
            raise ValueError("level u must be positive")
        object.__setattr__(self, "ell", _check_ell(self.ell))

    # -- derived quantities -------------------------------------------------

    @property
    def C_value(self) -> float:
        return float(self.C) if self.C is not None else float(6 ** self.d)

    @property
    def eps_L(self) -> float:
        return _epsilon(self.L, self.gamma)

    @property
    def eps_2L(self) -> float:
        return _epsilon(2 * self.L, self.gamma)

    @property
    def delta1(self) -> float:
        return math.log(self.L) ** -4.0

    @property
    def delta2(self) -> float:
        return self.delta1 / self.C_value

    @property
    def box_radius(self) -> int:
        """Radius of the boxes being converted (2L tilde, L bar)."""
        return 2 * self.L if self.variant == "tilde" else self.L

    @property
    def spacing(self) -> int:
        return 2 * self.box_radius + 1

    # -- box enumeration ----------------------------------------------------

    def enumerate_centers(self, count: int) -> list:
        """First ``count`` box centers of the conversion order, as tile
        coordinates (site coordinates are ``spacing`` times these).

        Boxes are ordered by increasing sup-norm of the tile coordinate,
        then lexicographically; boxes meeting ``front_window`` are moved
        to the front, keeping that order within both groups.
        """
        if count <= 0:
            return []
        need_front = self.front_window is not None
        front_reach = 0
        if need_front:
            fw = self.front_window
            far = max(max(abs(c) for c in fw.lo), max(abs(c) for c in fw.hi))
            front_reach = (far + self.box_radius) // self.spacing + 1
        rows: list = []
        m = 0
        while len(rows) < count or m <= front_reach:
            rows.extend(_ring_tiles(self.d, m))
            m += 1
        if need_front:
            fw = self.front_window
            r = self.box_radius
            s = self.spacing

            def hits_front(t):
                return all(c * s - r <= fw.hi[i] and c * s + r >= fw.lo[i]
                           for i, c in enumerate(t))

            rows.sort(key=lambda t: (not hits_front(t),
                                     max(abs(c) for c in t), t))
        return rows[:count]

    # -- config round-trip --------------------------------------------------

    def to_config_dict(self) -> dict:
        out = {"variant": self.variant, "u": repr(self.u),
               "L": str(self.L),
               "ell": "inf" if self.ell == math.inf else repr(self.ell),
               "gamma": repr(self.gamma), "d": str(self.d)}
        if self.C is not None:
            out["C"] = repr(self.C)
        if self.front_window is not None:
            out["front_window"] = _box_to_str(self.front_window)
        if self.decomposition_radius != 64:
            out["decomposition_radius"] = str(self.decomposition_radius)
        return out

    @classmethod
    def from_config_dict(cls, data: dict) -> "MixedModelConfig":
        known = {"variant", "u", "L", "ell", "gamma", "d", "C",
                 "front_window", "decomposition_radius"}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown mixed-model keys: {sorted(unknown)}")
        kwargs = {"variant": data["variant"], "u": float(data["u"]),
                  "L": int(data["L"])}
        if "ell" in data:
            kwargs["ell"] = math.inf if data["ell"] == "inf" \
                else float(data["ell"])
        if "gamma" in data:
            kwargs["gamma"] = float(data["gamma"])
        if "d" in data:
            kwargs["d"] = int(data["d"])
        if "C" in data:
            kwargs["C"] = float(data["C"])
        if "front_window" in data:
            kwargs["front_window"] = _str_to_box(data["front_window"])
        if "decomposition_radius" in data:
            kwargs["decomposition_radius"] = int(data["decomposition_radius"])
        return cls(**kwargs)


def _ring_tiles(d: int, m: int):
    """Tile coordinates at sup-norm exactly m, in lexicographic order."""
    if m == 0:
        yield (0,) * d
        return
    for t in np.ndindex(*((2 * m + 1,) * d)):
        p = tuple(c - m for c in t)
        if max(abs(c) for c in p) == m:
            yield p


def _box_to_str(b: Box) -> str:
    return ",".join(str(c) for c in b.lo) + ";" + \
        ",".join(str(c) for c in b.hi)


def _str_to_box(s: str) -> Box:
    lo, hi = s.split(";")
    return Box(tuple(int(c) for c in lo.split(",")),
               tuple(int(c) for c in hi.split(",")))


# ---------------------------------------------------------------------------
# deterministic profile ingredients


_smeared_cache: dict = {}


def _smeared_indicator(steps: int, radius: int, d: int) -> LatticeField:
    """The ``steps``-step transition operator applied to a radius-``radius``
    box indicator (the smoothing entering the half-smoothed profiles)."""
    key = (steps, radius, d)
    if key not in _smeared_cache:
        if len(_smeared_cache) > 8:
            _smeared_cache.clear()
        kernel = WalkKernel(d=d, lazy=True)
        box = Box.ball(radius, d)
        fld = LatticeField(box, np.ones(box.shape))
        _smeared_cache[key] = apply_transition(kernel, fld, steps)
    return _smeared_cache[key]


def _eval_field(fld: LatticeField, pts: np.ndarray) -> np.ndarray:
    lo = np.asarray(fld.box.lo)
    hi = np.asarray(fld.box.hi)
    inside = np.all((pts >= lo) & (pts <= hi), axis=1)
    out = np.zeros(len(pts), dtype=float)
    if inside.any():
        out[inside] = fld.data[tuple((pts[inside] - lo).T)]
    return out


def _half_smoothed(pts: np.ndarray, steps: int, radius: int,
                   d: int) -> np.ndarray:
    """(identity + steps-step transition)/2 applied to a box indicator."""
    ind = (np.abs(pts).max(axis=1) <= radius).astype(float)
    sm = _eval_field(_smeared_indicator(steps, radius, d), pts)
    return 0.5 * (ind + sm)


def cover_count(pts: np.ndarray, radius: int, spacing: int) -> np.ndarray:
    """How many boxes B(z, radius), z on the spacing-grid, contain each
    point — a per-axis product of the grid lines within reach."""
    pts = np.atleast_2d(np.asarray(pts, dtype=np.int64))
    lo = -np.floor_divide(radius - pts, spacing)
    hi = np.floor_divide(pts + radius, spacing)
    return np.maximum(0, hi - lo + 1).prod(axis=1)


@dataclass
class InterpolationProfiles:
    """Evaluable ingredients of one interpolation model.

    ``g``/``h`` are the deterministic start-weight profiles (already
    summed over the converted/unconverted boxes); ``r``/``s`` construct
    the random sprinkle weights from a seed.  ``g_length`` is the walk
    length of the g- and r-clouds, ``h_length`` of the h- and s-clouds.
    """

    config: MixedModelConfig
    k: Union[int, float]
    g: Callable[[np.ndarray], np.ndarray]
    h: Callable[[np.ndarray], np.ndarray]
    r: Callable[[np.ndarray, int], np.ndarray]
    s: Callable[[np.ndarray, int], np.ndarray]
    g_length: int
    h_length: int


def build_interpolation_profiles(config: MixedModelConfig,
                                 k) -> InterpolationProfiles:
    """Profiles entering the k-th interpolation model (k may be inf).

    The g-profile starts from the constant one and loses one box shape
    per converted box; the h-profile gains one per converted box; the
    r-weights carry the unconverted-region sprinkle and the s-weights
    accumulate the converted boxes' sprinkle contributions.
    """
    if k != math.inf:
        k = int(k)
        if k < 0:
            raise ValueError("k must be >= 0")
    L, d = config.L, config.d
    tilde = config.variant == "tilde"
    br = config.box_radius
    s_sp = config.spacing
    centers = config.enumerate_centers(0 if k == math.inf else k)
    center_arr = np.asarray(centers, dtype=np.int64).reshape(-1, d) * s_sp
    center_set = {tuple(t) for t in centers}

    if tilde:
        g_length, h_length = L, 2 * L
        plain_scale, pair_scale = L, 2 * L   # totals at L, pair parts at 2L
        eps_r, eps_s = config.eps_L, config.eps_2L
    else:
        g_length, h_length = 2 * L, L
        plain_scale, pair_scale = 2 * L, L
        eps_r, eps_s = config.eps_2L, config.eps_L

    def g_shape(rel):
        if tilde:
            return _half_smoothed(rel, L, br, d)
        return (np.abs(rel).max(axis=1) <= br).astype(float)

    def h_shape(rel):
        if tilde:
            base = (np.abs(rel).max(axis=1) <= br).astype(float)
        else:
            base = _half_smoothed(rel, L, br, d)
        wide = (np.abs(rel).max(axis=1) <= 6 * L).astype(float)
        return base + config.delta2 * wide

    def shifted_sum(pts, shape_fn):
        out = np.zeros(len(pts), dtype=float)
        for c in center_arr:
            out += shape_fn(pts - c)
        return out

    def g_fn(sites):
        pts = np.atleast_2d(np.asarray(sites, dtype=np.int64))
        if k == math.inf:
            return np.zeros(len(pts), dtype=float)
        return 1.0 - shifted_sum(pts, g_shape)

    def h_fn(sites):
        pts = np.atleast_2d(np.asarray(sites, dtype=np.int64))
        if k == math.inf:
            # over all boxes the base shapes tile to the constant one and
            # the wide parts add delta2 per covering radius-6L box
            wide = cover_count(pts, 6 * L, s_sp).astype(float)
            return 1.0 + config.delta2 * wide
        return shifted_sum(pts, h_shape)

    def r_fn(sites, seed):
        pts = np.atleast_2d(np.asarray(sites, dtype=np.int64))
        if k == math.inf:
            return np.zeros(len(pts), dtype=float)
        tiles = tile_of(pts, plain_scale)
        uniq, inv = np.unique(tiles, axis=0, return_inverse=True)
        vals = sprinkle_totals(seed, plain_scale, uniq)[inv]
        conv = tile_of(pts, br)
        outside = np.array([tuple(t) not in center_set for t in conv])
        return eps_r * vals * outside

    def s_fn(sites, seed):
        pts = np.atleast_2d(np.asarray(sites, dtype=np.int64))
        tiles = tile_of(pts, pair_scale)
        uniq, inv = np.unique(tiles, axis=0, return_inverse=True)
        if k == math.inf:
            vals = np.array([
                _decomposed_tile(seed, pair_scale,
                                 tuple(int(c) for c in t), d,
                                 config.decomposition_radius)[0]
                for t in uniq], dtype=np.int64)
            return eps_s * vals[inv]
        if k == 0:
            return np.zeros(len(pts), dtype=float)
        src = np.asarray(centers, dtype=np.int64)
        sums = np.array([
            sprinkle_pair_values(seed, pair_scale, t, src, d).sum()
            for t in uniq], dtype=np.int64)
        return eps_s * sums[inv]

    return InterpolationProfiles(config=config, k=k, g=g_fn, h=h_fn,
                                 r=r_fn, s=s_fn, g_length=g_length,
                                 h_length=h_length)


# ---------------------------------------------------------------------------
# model assembly


def _weights_profile(sites: np.ndarray, weights: np.ndarray,
                     length: int, d: int) -> Optional[IntensityProfile]:
    if np.any(weights < -1e-9):
        raise ValueError("negative cloud weights")
    weights = np.maximum(weights, 0.0)
    pos = weights > 0
    if not pos.any():
        return None
    table = {tuple(int(c) for c in s): float(w)
             for s, w in zip(sites[pos], weights[pos])}
    return IntensityProfile.field_segment(table, length, d=d)


def _union_cloud_fields(specs, w_sites: np.ndarray, seed: int,
                        replicates: int, rep_offset: int) -> np.ndarray:
    """Union of independent clouds given as (salt, length, weight_fn)."""
    _, win_box, _ = _window_arrays(w_sites)
    d = w_sites.shape[1]
    fields = np.zeros((replicates, len(w_sites)), dtype=bool)
    for salt, length, weight_fn in specs:
        sites = win_box.expand(length - 1).sites()
        weights = np.asarray(weight_fn(sites), dtype=float)
        profile = _weights_profile(sites, weights, length, d)
        if profile is None:
            continue
        sample, _ = sample_rho_model(profile, w_sites, seed,
                                     replicates=replicates,
                                     rep_offset=rep_offset,
                                     stream_salt=salt,
                                     max_expected_points=2e8)
        fields |= sample.fields
    return fields


def _apply_noise_fields(fields: np.ndarray, window_sites: np.ndarray,
                        seed: int, half_band) -> np.ndarray:
    U = uniform_site_field(window_sites, seed)
    out = fields.copy()
    out[:, U <= half_band] = True
    out[:, U >= 1.0 - half_band] = False
    return out


def sample_homogeneous_fields(u: float, L: int, window, seed: int,
                              gamma: float = 20.0, replicates: int = 1,
                              rep_offset: int = 0,
                              sprinkle_scale: Optional[float] = None
                              ) -> WindowSample:
    """Noised homogeneous model at length L on a window, replicated.

    The field is the noise image (band width e^-L) of the union of the
    plain level-u length-L cloud and an epsilon-thinned sprinkled cloud
    whose start weights are the per-tile sprinkle values.  The four
    randomness sources — the two clouds, the sprinkle values, and the
    noise uniforms — ride on disjoint keyed streams of the one seed.

    ``sprinkle_scale`` multiplies the sprinkled cloud's weights and
    defaults to u, which makes this model the exact index-zero member of
    both interpolation families at the same seed.
    """
    if not _is_power_of_two(L) or L < 4:
        raise ValueError("L must be a power of two, at least 4")
    if u < 0:
        raise ValueError("level u must be >= 0")
    w_sites, _, _ = _window_arrays(window)
    eps = _epsilon(L, gamma)
    scale = u if sprinkle_scale is None else sprinkle_scale

    def plain_w(sites):
        return np.full(len(sites), u)

    def sprinkle_w(sites):
        tiles = tile_of(sites, L)
        uniq, inv = np.unique(tiles, axis=0, return_inverse=True)
        vals = sprinkle_totals(seed, L, uniq)[inv]
        return scale * (eps * vals)

    fields = _union_cloud_fields(
        [(1, L, plain_w), (2, L, sprinkle_w)], w_sites, seed,
        replicates, rep_offset)
    params = NoiseParams(scale_length=L)
    noised = _apply_noise_fields(fields, w_sites, seed, params.half_band)
    notes = {"noise_underflow": params.underflow,
             "epsilon": eps, "sprinkle_scale": scale}
    return WindowSample(window=w_sites, fields=noised, counts=None,
                        labels=[np.empty(0)] * replicates, bias_notes=notes)


def sample_homogeneous(u: float, L: int, window, seed: int,
                       gamma: float = 20.0) -> OccupancyField:
    """Single draw of the noised homogeneous length-L model."""
    samp = sample_homogeneous_fields(u, L, window, seed, gamma=gamma)
    return samp.field_at(0)


def homogeneous_vacancy_probability(u: float, L: int, K, gamma: float = 20.0,
                                    d: int = 3) -> tuple:
    """Deterministic P[noised homogeneous model misses K], large-L regime.

    Valid when the noise bands underflow (L >= 38): the probability is
    then exp(-intensity of plain-cloud trajectories touching K), with
    the sprinkled cloud contributing a relative correction of at most
    2 * eps_L * intensity (its expected touching intensity), reported in
    the notes rather than resolved.  Returns ``(probability, notes)``.
    """
    if not _is_power_of_two(L) or L < 4:
        raise ValueError("L must be a power of two, at least 4")
    params = NoiseParams(scale_length=L)
    if not params.underflow:
        raise ValueError(
            "the forcing bands are live at this L; estimate the vacancy "
            "probability by Monte Carlo over sample_homogeneous_fields")
    kernel = WalkKernel(d=d, lazy=True)
    surv = survival_profile(kernel, K, L)
    lam = segment_intensity(surv, u, L)
    p = float(np.exp(-lam))
    eps = _epsilon(L, gamma)
    notes = {"dp_bias_bound": float(surv.bias_bound * lam),
             "sprinkle_correction_bound": float(2.0 * eps * lam),
             "noise_underflow": True}
    return p, notes


def _mixed_indices(ell: float) -> tuple:
    """(index driving g/r/h and the noise schedule, index driving s)."""
    if ell == math.inf:
        return math.inf, math.inf
    return int(math.ceil(ell)), int(math.floor(ell))


def sample_mixed_fields(config: MixedModelConfig, window, seed: int,
                        ell=None, replicates: int = 1,
                        rep_offset: int = 0) -> WindowSample:
    """Replicated draws of the interpolation model at index ell.

    The four constituent clouds ride on four independent point-process
    streams derived from the seed, the sprinkle variables on their own
    keyed streams, and the noise uniforms on theirs — so samples at
    different ell but one seed are coupled exactly, and each half-step
    model is pathwise contained in the next integer model.

    Integer index k uses profile index k throughout; half index k + 1/2
    advances everything except the s-weights, which stay at k.  The
    noise band per site is the target scale's on the first ceil(ell)
    boxes of the enumeration and the source scale's elsewhere.
    """
    ell = config.ell if ell is None else _check_ell(ell)
    idx_grh, idx_s = _mixed_indices(ell)
    prof_a = build_interpolation_profiles(config, idx_grh)
    prof_b = prof_a if idx_s == idx_grh \
        else build_interpolation_profiles(config, idx_s)
    u = config.u
    w_sites, _, _ = _window_arrays(window)

    specs = [
        (1, prof_a.g_length, lambda s_: u * prof_a.g(s_)),
        (2, prof_a.g_length, lambda s_: u * prof_a.r(s_, seed)),
        (3, prof_a.h_length, lambda s_: u * prof_a.h(s_)),
        (4, prof_b.h_length, lambda s_: u * prof_b.s(s_, seed)),
    ]
    fields = _union_cloud_fields(specs, w_sites, seed, replicates,
                                 rep_offset)

    if idx_grh == math.inf:
        converted = np.ones(len(w_sites), dtype=bool)
    else:
        conv_tiles = tile_of(w_sites, config.box_radius)
        converted_set = {tuple(t) for t in
                         config.enumerate_centers(idx_grh)}
        converted = np.array([tuple(t) in converted_set
                              for t in conv_tiles])
    if config.variant == "tilde":
        band_conv = NoiseParams(scale_length=2 * config.L)
        band_rest = NoiseParams(scale_length=config.L)
    else:
        band_conv = NoiseParams(scale_length=config.L)
        band_rest = NoiseParams(scale_length=2 * config.L)
    half = np.where(converted, band_conv.half_band, band_rest.half_band)
    noised = _apply_noise_fields(fields, w_sites, seed, half)
    notes = {"ell": ell, "variant": config.variant,
             "noise_underflow": band_conv.underflow or band_rest.underflow}
    return WindowSample(window=w_sites, fields=noised, counts=None,
                        labels=[np.empty(0)] * replicates, bias_notes=notes)


def sample_mixed(config: MixedModelConfig, window, seed: int,
                 ell=None) -> OccupancyField:
    """Single draw of the interpolation model at index ell."""
    samp = sample_mixed_fields(config, window, seed, ell=ell)
    return samp.field_at(0)


def sample_mixed_bound(config: MixedModelConfig, window, seed: int,
                       replicates: int = 1,
                       rep_offset: int = 0) -> WindowSample:
    """The sprinkled homogeneous model bounding the fully-converted end.

    Built from the same streams as ``sample_mixed`` at infinite index:
    the deterministic cloud's weight is the constant 1 + C*delta2, which
    dominates the infinite-index h-profile pointwise (C at its default),
    and the sprinkled cloud is identical.  The infinite-index model is
    therefore pathwise contained in this bound at equal seeds.
    """
    prof = build_interpolation_profiles(config, math.inf)
    u = config.u
    bound_level = u * (1.0 + config.C_value * config.delta2)
    w_sites, _, _ = _window_arrays(window)
    specs = [
        (3, prof.h_length, lambda s_: np.full(len(s_), bound_level)),
        (4, prof.h_length, lambda s_: u * prof.s(s_, seed)),
    ]
    fields = _union_cloud_fields(specs, w_sites, seed, replicates,
                                 rep_offset)
    scale = 2 * config.L if config.variant == "tilde" else config.L
    params = NoiseParams(scale_length=scale)
    noised = _apply_noise_fields(fields, w_sites, seed, params.half_band)
    return WindowSample(window=w_sites, fields=noised, counts=None,
                        labels=[np.empty(0)] * replicates,
                        bias_notes={"bound_level": bound_level})


# ---------------------------------------------------------------------------
# label-interval clouds


def _as_weight_profile(f, length: int, reach_sites: np.ndarray,
                       d: int) -> IntensityProfile:
    if callable(f):
        weights = np.asarray(f(reach_sites), dtype=float)
    elif isinstance(f, dict):
        weights = np.array([f.get(tuple(int(c) for c in s), 0.0)
                            for s in reach_sites], dtype=float)
    else:
        weights = np.full(len(reach_sites), float(f))
    if np.any(weights < 0):
        raise ValueError("weights must be nonnegative")
    table = {tuple(int(c) for c in s): float(w)
             for s, w in zip(reach_sites, weights) if w > 0}
    return IntensityProfile.field_segment(table, length, d=d)


def two_sided_J(f1, f2, length: int, window, seed: int,
                replicates: int = 1,
                want_trajectories: bool = False,
                rep_offset: int = 0) -> tuple:
    """Cloud of the trajectories whose arrival label lands in a band.

    ``f1`` and ``f2`` are per-site weights (numbers, dicts, or callables
    on site arrays) with f1 <= f2 pointwise; the sample keeps exactly
    the f2-cloud points whose label exceeds the f1 rate — the band
    (rate(f1), rate(f2)] of each start's arrival stream.  At a shared
    seed the band clouds partition the full cloud pathwise.

    Returns ``(WindowSample, clouds)`` like the underlying sampler.
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    w_sites, win_box, _ = _window_arrays(window)
    d = w_sites.shape[1]
    reach_sites = win_box.expand(length - 1).sites()
    prof2 = _as_weight_profile(f2, length, reach_sites, d)
    prof1 = _as_weight_profile(f1, length, reach_sites, d)
    for key, r1 in prof1.table.items():
        if r1 > prof2.table.get(key, 0.0) + 1e-12:
            raise ValueError("need f1 <= f2 pointwise")
    floor = prof1 if prof1.table else None
    return sample_rho_model(prof2, w_sites, seed, replicates=replicates,
                            want_trajectories=want_trajectories,
                            label_floor=floor, rep_offset=rep_offset)


# ---------------------------------------------------------------------------
# tubes


@dataclass(frozen=True)
class TubeSpec:
    """Axis-aligned tube triple around an anchor site.

    The inner tube T and middle tube T' are unions of sup-norm balls of
    radii r_T and r_T_prime = 2 r_T centered at z, z + e_j, ...,
    z + R_T e_j; the outer tube T_circ uses Euclidean balls of radius
    r_T_circ.  ``j`` is the 1-based axis index.
    """

    z: tuple
    j: int
    L: int
    gamma2: float = 1.05
    gamma2_bar: Optional[float] = None
    d: int = 3

    def __post_init__(self):
        if len(self.z) != self.d:
            raise ValueError("anchor dimension mismatch")
        if not 1 <= self.j <= self.d:
            raise ValueError("axis must be in 1..d")
        if self.L < 2:
            raise ValueError("need L >= 2")
        if self.gamma2 <= 1.0:
            raise ValueError("gamma2 must exceed 1")
        if self.gamma2_bar is None:
            object.__setattr__(self, "gamma2_bar", 3.0 * self.gamma2)
        elif self.gamma2_bar < 3.0 * self.gamma2:
            raise ValueError("gamma2_bar must be at least 3*gamma2")

    @property
    def R_T(self) -> int:
        return int(math.sqrt(self.L) * math.log(self.L) ** self.gamma2)

    @property
    def r_T(self) -> int:
        return 4 * math.ceil(math.sqrt(self.L)
                             * math.log(self.L) ** (-self.gamma2_bar))

    @property
    def r_T_prime(self) -> int:
        return 2 * self.r_T

    @property
    def r_T_circ(self) -> int:
        return 4 * math.ceil(math.sqrt(self.L)
                             * math.log(self.L) ** (-2.0 * self.gamma2))

    def _split(self, pts) -> tuple:
        pts = np.atleast_2d(np.asarray(pts, dtype=np.int64))
        rel = pts - np.asarray(self.z, dtype=np.int64)
        ax = self.j - 1
        return rel[:, ax], np.delete(rel, ax, axis=1)

    def _contains_sup(self, pts, r: int) -> np.ndarray:
        axial, cross = self._split(pts)
        ok_axial = (axial >= -r) & (axial <= self.R_T + r)
        return ok_axial & (np.abs(cross).max(axis=1) <= r)

    def contains_T(self, pts) -> np.ndarray:
        return self._contains_sup(pts, self.r_T)

    def contains_T_prime(self, pts) -> np.ndarray:
        return self._contains_sup(pts, self.r_T_prime)

    def contains_T_circ(self, pts) -> np.ndarray:
        axial, cross = self._split(pts)
        r = self.r_T_circ
        excess = axial - np.clip(axial, 0, self.R_T)
        return excess * excess + (cross * cross).sum(axis=1) <= r * r

    def containment_ok(self) -> bool:
        """True when the triple is provably nested: the Euclidean outer
        radius covers the farthest (corner) points of the middle tube."""
        return self.r_T_circ ** 2 >= self.d * self.r_T_prime ** 2

    @classmethod
    def containment_threshold(cls, gamma2: float = 1.05,
                              gamma2_bar: Optional[float] = None,
                              d: int = 3,
                              max_exp: int = 80) -> Optional[int]:
        """Smallest dyadic L at which the triple is provably nested."""
        for e in range(2, max_exp):
            spec = cls(z=(0,) * d, j=1, L=2 ** e, gamma2=gamma2,
                       gamma2_bar=gamma2_bar, d=d)
            if spec.containment_ok():
                return 2 ** e
        return None

    def to_config_dict(self) -> dict:
        return {"z": ",".join(str(c) for c in self.z), "j": str(self.j),
                "L": str(self.L), "gamma2": repr(self.gamma2),
                "gamma2_bar": repr(self.gamma2_bar), "d": str(self.d)}

    @classmethod
    def from_config_dict(cls, data: dict) -> "TubeSpec":
        known = {"z", "j", "L", "gamma2", "gamma2_bar", "d"}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown tube keys: {sorted(unknown)}")
        kwargs = {"z": tuple(int(c) for c in data["z"].split(",")),
                  "j": int(data["j"]), "L": int(data["L"])}
        if "gamma2" in data:
            kwargs["gamma2"] = float(data["gamma2"])
        if "gamma2_bar" in data:
            kwargs["gamma2_bar"] = float(data["gamma2_bar"])
        if "d" in data:
            kwargs["d"] = int(data["d"])
        return cls(**kwargs)


class TubeExtensionError(RuntimeError):
    """A re-timed walk failed to accrue its out-of-tube budget in time."""


def tube_transform(cloud: LabeledTrajectorySet, tube: TubeSpec,
                   counting: str = "time",
                   hard_cap_factor: int = 1000,
                   kernel: Optional[WalkKernel] = None
                   ) -> LabeledTrajectorySet:
    """Drop outer-tube starts and re-time survivors around the middle tube.

    Every trajectory starting inside the outer tube is removed.  Each
    survivor's length budget is re-read: with the default "time"
    counting its clock advances only at time steps spent outside the
    middle tube, so the walk runs until the out-of-tube step count
    reaches its original length; "sites" counting instead waits for that
    many distinct sites visited outside the middle tube.  Walks that run
    out of stored steps are extended with their own uniform stream,
    which requires the cloud to carry stream keys (samplers attach them
    when trajectories are requested).  A walk exceeding
    ``hard_cap_factor`` times its length raises
    :class:`TubeExtensionError` with diagnostics.
    """
    if counting not in ("time", "sites"):
        raise ValueError("counting must be 'time' or 'sites'")
    if kernel is None:
        kernel = WalkKernel(d=cloud.d, lazy=True)
    moves = kernel.moves()
    new_points = []
    new_keys = []
    for idx, (label, length, traj) in enumerate(cloud.points):
        if bool(tube.contains_T_circ(traj.start)[0]):
            continue
        codes = traj.codes
        positions = traj.positions(kernel)
        cap = hard_cap_factor * max(int(length), 1)
        while True:
            outside = ~tube.contains_T_prime(positions)
            if counting == "time":
                credit = np.cumsum(outside)
            else:
                fresh = np.zeros(len(positions), dtype=bool)
                seen: set = set()
                for i, site in enumerate(map(tuple, positions)):
                    if outside[i] and site not in seen:
                        seen.add(site)
                        fresh[i] = True
                credit = np.cumsum(fresh)
            reached = np.flatnonzero(credit >= length)
            if reached.size:
                tau = int(reached[0]) + 1
                break
            if len(positions) > cap:
                raise TubeExtensionError(
                    f"walk {idx} ran {len(positions)} steps but credited "
                    f"only {int(credit[-1])} of {length}; the middle tube "
                    "holds it beyond the configured budget")
            if cloud.stream_keys is None:
                raise ValueError(
                    "tube extension needs per-walk stream keys; sample the "
                    "cloud with trajectories enabled")
            n_more = max(int(length), 64)
            t0 = len(codes)
            key = np.uint64(cloud.stream_keys[idx])
            ext = kernel.codes_from_uniforms(
                rng.uniform_at(key, np.arange(t0, t0 + n_more,
                                              dtype=np.int64)))
            codes = np.concatenate((codes, ext))
            add = positions[-1] + np.cumsum(moves[ext], axis=0)
            positions = np.concatenate((positions, add))
        out_traj = Trajectory(start=traj.start.copy(),
                              codes=codes[:tau - 1].copy(), label=label)
        new_points.append((label, tau, out_traj))
        if cloud.stream_keys is not None:
            new_keys.append(cloud.stream_keys[idx])
    keys_arr = np.asarray(new_keys, dtype=np.uint64) \
        if cloud.stream_keys is not None else None
    return LabeledTrajectorySet(window=cloud.window, points=new_points,
                                d=cloud.d, stream_keys=keys_arr)


def trace_field(cloud: LabeledTrajectorySet,
                kernel: Optional[WalkKernel] = None) -> OccupancyField:
    """Occupancy of the union of the cloud's stored walks on its window."""
    if kernel is None:
        kernel = WalkKernel(d=cloud.d, lazy=True)
    w_sites, win_box, w_index = _window_arrays(cloud.window)
    occ = np.zeros(len(w_sites), dtype=bool)
    lo = np.asarray(win_box.lo)
    for _, _, traj in cloud.points:
        pos = traj.positions(kernel)
        inside = win_box.contains(pos)
        if inside.any():
            slots = w_index[tuple((pos[inside] - lo).T)]
            occ[slots[slots >= 0]] = True
    return OccupancyField(window=w_sites, occupied=occ, d=cloud.d)
