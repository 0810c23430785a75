"""Deterministic randomness utilities.

Two layers:

* keyed counter-based draws (splitmix64-style mixing): every trajectory,
  site stream, or noise cell derives its randomness as a pure function of
  ``(seed, tag, indices..., counter)``.  Results are therefore identical
  under any batching, chunking, or thread count, and clouds sampled at the
  same seed stay pathwise coupled across calls with different intensities.
* ``generator(seed, *path)``: a numpy ``Generator`` for bulk draws that do
  not need cross-call coupling (seeded through ``SeedSequence`` spawn keys).

The mixer is the standard splitmix64 finalizer; its avalanche quality is
ample for Monte Carlo stream separation.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4B9B0F)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U64 = np.uint64
_MASK = (1 << 64) - 1

# stream tags; distinct constants keep independent uses of one seed apart
TAG_TRAJECTORY = 0x1A
TAG_REPLICATE = 0x2B
TAG_SITE_LABELS = 0x3C
TAG_NOISE = 0x4D
TAG_SPRINKLE = 0x5E
TAG_ESCAPE = 0x6F
TAG_RETURN = 0x70
TAG_START = 0x81
TAG_LENGTH = 0x92
TAG_TORUS = 0xA3
TAG_FIELD = 0xB4


def mix64(x: int) -> int:
    """splitmix64 finalizer on a python int, exact 64-bit semantics."""
    z = (x + 0x9E3779B97F4B9B0F) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def derive_key(seed: int, *words: int) -> int:
    """Chain-mix integer words into one 64-bit stream key."""
    h = mix64(seed & _MASK)
    for w in words:
        h = mix64(h ^ ((w & _MASK) + 0x9E3779B97F4B9B0F) & _MASK)
    return h


def _mix_array(z: np.ndarray) -> np.ndarray:
    z = (z + _GOLDEN).astype(_U64)
    z = (z ^ (z >> _U64(30))) * _MIX1
    z = (z ^ (z >> _U64(27))) * _MIX2
    return z ^ (z >> _U64(31))


def hash_counters(key, counters) -> np.ndarray:
    """Vectorized keyed hash: uint64 draws at ``counters`` under ``key``.

    ``key`` may be a scalar or an array broadcastable against ``counters``.
    """
    key = np.asarray(key, dtype=_U64)
    counters = np.asarray(counters, dtype=_U64)
    with np.errstate(over="ignore"):
        return _mix_array(key ^ _mix_array(counters))


def uniform_at(key, counters) -> np.ndarray:
    """Uniform(0,1) float64 draws, one per counter, as a pure function."""
    bits = hash_counters(key, counters)
    return ((bits >> _U64(11)).astype(np.float64) + 0.5) * (2.0**-53)


def key_array(seed: int, tag: int, *index_arrays) -> np.ndarray:
    """Vectorized derive_key: one uint64 key per row of the index arrays."""
    base = _U64(derive_key(seed, tag))
    h = np.broadcast_arrays(*(np.asarray(a, dtype=_U64) for a in index_arrays))
    out = np.full(h[0].shape, base, dtype=_U64)
    with np.errstate(over="ignore"):
        for arr in h:
            out = _mix_array(out ^ _mix_array(arr))
    return out


def site_keys(seed: int, tag: int, points: np.ndarray) -> np.ndarray:
    """Keys for lattice sites: mixes each coordinate so that the same site
    gets the same stream in every call and window."""
    pts = np.asarray(points, dtype=np.int64)
    if pts.ndim == 1:
        pts = pts[None, :]
    base = _U64(derive_key(seed, tag))
    out = np.full(pts.shape[0], base, dtype=_U64)
    with np.errstate(over="ignore"):
        for j in range(pts.shape[1]):
            out = _mix_array(out ^ _mix_array(pts[:, j].astype(_U64)))
    return out


def poisson_counts_from_keys(keys: np.ndarray, caps: np.ndarray,
                             max_points: int = 4096):
    """Poisson(cap) counts per key via cumulative exponential gaps.

    Returns ``(counts, labels, owner)`` where ``labels`` holds the ordered
    arrival positions in (0, cap] and ``owner`` maps each label to its key
    row.  Because the gap sequence per key is fixed, the points retained
    under a smaller cap are exactly a prefix: calls at the same seed with
    pointwise-smaller intensity yield pathwise-thinned clouds.
    """
    keys = np.asarray(keys, dtype=_U64)
    caps = np.asarray(caps, dtype=np.float64)
    n = keys.shape[0]
    counts = np.zeros(n, dtype=np.int64)
    labels_acc = []
    owner_acc = []
    totals = np.zeros(n, dtype=np.float64)
    active = np.arange(n)[caps > 0]
    k = 0
    while active.size:
        if k >= max_points:
            raise RuntimeError("poisson gap sampler exceeded max_points; "
                               "intensity cap too large for this route")
        u = uniform_at(keys[active], np.full(active.size, k, dtype=np.int64))
        totals[active] -= np.log(u)
        alive = totals[active] <= caps[active]
        hit = active[alive]
        counts[hit] += 1
        labels_acc.append(totals[hit].copy())
        owner_acc.append(hit)
        active = hit
        k += 1
    if labels_acc:
        labels = np.concatenate(labels_acc)
        owner = np.concatenate(owner_acc)
        order = np.argsort(owner, kind="stable")
        labels, owner = labels[order], owner[order]
    else:
        labels = np.empty(0, dtype=np.float64)
        owner = np.empty(0, dtype=np.int64)
    return counts, labels, owner


def generator(seed: int, *path: int) -> np.random.Generator:
    """Bulk-draw generator for a (seed, path) slot; independent across paths."""
    ss = np.random.SeedSequence(seed, spawn_key=tuple(int(p) & _MASK for p in path))
    return np.random.Generator(np.random.PCG64(ss))
