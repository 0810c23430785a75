"""Survival DP, segment intensities, and the window tracer.

The survival oracle below evolves the exact step distribution as a sparse
dict of positions, independent of the array stencil implementation; within
the chosen margins no path can reach the grid boundary, so the two routes
must agree to rounding error.
"""

from collections import defaultdict

import numpy as np
import pytest
from scipy import stats

from interlacements.engine import (ResourceBudgetError, WindowTracer,
                                   segment_intensity, segment_site_rates,
                                   survival_profile)
from interlacements.lattice import Box, step_distribution
from interlacements.potential import (capacity, equilibrium_measure,
                                      hitting_probability,
                                      kernel_for_convention)


def survival_by_enumeration(kernel, sites, horizon):
    """P[no return to K within n steps], via exact sparse evolution."""
    moves, probs = step_distribution(kernel)
    k_set = {tuple(p) for p in np.atleast_2d(sites)}
    rows = []
    for x in np.atleast_2d(sites):
        dist = {tuple(x): 1.0}
        row = [1.0]
        for _ in range(1, horizon):
            new = defaultdict(float)
            for pos, p in dist.items():
                for mv, q in zip(moves, probs):
                    if q > 0.0:
                        new[tuple(int(a + b) for a, b in zip(pos, mv))] += p * q
            for k in k_set:
                new.pop(k, None)
            row.append(sum(new.values()))
            dist = new
        rows.append(row)
    return np.array(rows)


def test_survival_hand_anchors_single_site():
    lazy = kernel_for_convention("paper_lazy")
    surv = survival_profile(lazy, [(0, 0, 0)], 4)
    # hold probability 1/2; each of the six neighbor moves 1/12
    assert surv.s[0, 0] == 1.0
    assert surv.s[0, 1] == pytest.approx(0.5, rel=1e-14)
    assert surv.s[0, 2] == pytest.approx(11.0 / 24.0, rel=1e-14)
    assert surv.s[0, 3] == pytest.approx(7.0 / 16.0, rel=1e-14)

    plain = kernel_for_convention("simple_lawler")
    surv_p = survival_profile(plain, [(0, 0, 0)], 3)
    assert surv_p.s[0, 1] == pytest.approx(1.0, rel=1e-14)
    assert surv_p.s[0, 2] == pytest.approx(5.0 / 6.0, rel=1e-14)


@pytest.mark.parametrize("convention", ["simple_lawler", "paper_lazy"])
@pytest.mark.parametrize("sites", [[(0, 0, 0)], [(0, 0, 0), (1, 0, 0)]])
def test_survival_matches_sparse_enumeration(convention, sites):
    kernel = kernel_for_convention(convention)
    horizon = 8
    surv = survival_profile(kernel, sites, horizon)
    oracle = survival_by_enumeration(kernel, sites, horizon)
    assert surv.s == pytest.approx(oracle, rel=1e-12)


def test_survival_margin_does_not_matter_when_paths_cannot_reach_it():
    lazy = kernel_for_convention("paper_lazy")
    a = survival_profile(lazy, [(0, 0, 0)], 10, margin=10)
    b = survival_profile(lazy, [(0, 0, 0)], 10, margin=20)
    assert np.array_equal(a.s, b.s)
    assert b.bias_bound <= a.bias_bound


def test_survival_validation_and_budget():
    lazy = kernel_for_convention("paper_lazy")
    with pytest.raises(ValueError):
        survival_profile(lazy, [(0, 0, 0)], 0)
    with pytest.raises(ResourceBudgetError):
        survival_profile(lazy, [(0, 0, 0)], 8000)


def test_cumulative_sums_the_profile():
    lazy = kernel_for_convention("paper_lazy")
    surv = survival_profile(lazy, [(0, 0, 0), (2, 0, 0)], 6)
    assert np.allclose(surv.cumulative(), np.cumsum(surv.s, axis=1))


def test_segment_intensity_decreases_to_the_capacity():
    lazy = kernel_for_convention("paper_lazy")
    surv = survival_profile(lazy, [(0, 0, 0)], 1024)
    cap = capacity([(0, 0, 0)], "paper_lazy")
    vals = [segment_intensity(surv, 1.0, L) for L in (4, 16, 64, 256, 1024)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert all(v > cap for v in vals)
    assert vals[-1] < 1.3 * cap


def test_segment_intensity_is_linear_in_u_and_sums_site_rates():
    lazy = kernel_for_convention("paper_lazy")
    surv = survival_profile(lazy, [(0, 0, 0), (1, 0, 0)], 32)
    one = segment_intensity(surv, 1.0, 16)
    assert segment_intensity(surv, 2.0, 16) == pytest.approx(2.0 * one,
                                                             rel=1e-14)
    rates = segment_site_rates(surv, 0.7, 16)
    assert rates.shape == (2,)
    assert rates.sum() == pytest.approx(segment_intensity(surv, 0.7, 16),
                                        rel=1e-12)
    with pytest.raises(ValueError):
        segment_intensity(surv, 1.0, 64)


# ---------------------------------------------------------------------
# window tracer
# ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def lazy_kernel():
    return kernel_for_convention("paper_lazy")


@pytest.fixture(scope="module")
def b1_tracer(lazy_kernel):
    eq = equilibrium_measure(Box.ball(1, 3).sites(), "paper_lazy")
    return WindowTracer(eq, lazy_kernel)


def test_trace_is_deterministic_and_chunk_independent(b1_tracer):
    a = b1_tracer.trace(0.5, 6, seed=901, want_counts=True)
    b = b1_tracer.trace(0.5, 6, seed=901, want_counts=True, chunk=2)
    assert np.array_equal(a.fields, b.fields)
    assert np.array_equal(a.counts, b.counts)
    assert all(np.array_equal(x, y) for x, y in zip(a.labels, b.labels))


def test_trace_rep_offset_continues_the_stream(b1_tracer):
    full = b1_tracer.trace(0.5, 6, seed=902)
    tail = b1_tracer.trace(0.5, 4, seed=902, rep_offset=2)
    assert np.array_equal(full.fields[2:], tail.fields)
    assert all(np.array_equal(x, y)
               for x, y in zip(full.labels[2:], tail.labels))


@pytest.mark.parametrize("shell", [2, 5])
def test_trace_fast_path_matches_path_recording(lazy_kernel, shell):
    for sites in (Box.ball(1, 3).sites(),
                  np.array([[0, 0, 0], [3, 0, 0]])):
        eq = equilibrium_measure(sites, "paper_lazy")
        tracer = WindowTracer(eq, lazy_kernel, shell=shell)
        fast = tracer.trace(0.8, 8, seed=903, want_counts=True)
        slow = tracer.trace(0.8, 8, seed=903, want_counts=True,
                            want_paths=True)
        assert np.array_equal(fast.fields, slow.fields)
        assert np.array_equal(fast.counts, slow.counts)
        assert all(np.array_equal(x, y)
                   for x, y in zip(fast.labels, slow.labels))


def test_trace_paths_reproduce_the_marked_fields(b1_tracer, lazy_kernel):
    res = b1_tracer.trace(1.0, 10, seed=904, want_paths=True)
    moves = lazy_kernel.moves()
    window = {tuple(p): i for i, p in enumerate(b1_tracer.eq.sites)}
    for rep in range(10):
        assert len(res.paths[rep]) == len(res.labels[rep])
        hit = np.zeros(len(window), dtype=bool)
        for walk in res.paths[rep]:
            assert tuple(walk[0][0]) in window  # enters through the window
            for start, codes in walk:
                pos = np.asarray(start) + np.vstack(
                    [np.zeros(3, dtype=np.int64),
                     np.cumsum(moves[np.asarray(codes, dtype=np.int64)],
                               axis=0)]) if len(codes) else np.asarray(
                                   start)[None, :]
                for p in np.atleast_2d(pos):
                    idx = window.get(tuple(p))
                    if idx is not None:
                        hit[idx] = True
        assert np.array_equal(hit, res.fields[rep])


def test_trace_levels_couple_across_u(b1_tracer):
    hi = b1_tracer.trace(1.0, 20, seed=905, want_paths=True)
    lo = b1_tracer.trace(0.4, 20, seed=905, want_paths=True)
    for rep in range(20):
        keep = hi.labels[rep] <= 0.4
        assert np.array_equal(lo.labels[rep], hi.labels[rep][keep])
        kept_paths = [w for w, k in zip(hi.paths[rep], keep) if k]
        assert len(lo.paths[rep]) == len(kept_paths)
        for wa, wb in zip(lo.paths[rep], kept_paths):
            assert len(wa) == len(wb)
            for (sa, ca), (sb, cb) in zip(wa, wb):
                assert np.array_equal(sa, sb) and np.array_equal(ca, cb)
    assert not np.any(lo.fields & ~hi.fields)


def test_trace_label_law_is_poisson_uniform():
    eq = equilibrium_measure([(0, 0, 0)], "paper_lazy")
    tracer = WindowTracer(eq, kernel_for_convention("paper_lazy"))
    u, n = 1.0, 4000
    res = tracer.trace(u, n, seed=906)
    counts = np.array([len(lbl) for lbl in res.labels])
    lam = u * eq.capacity
    z = (counts.mean() - lam) / np.sqrt(lam / n)
    assert abs(z) < 4.0
    pooled = np.concatenate(res.labels)
    assert np.all((pooled > 0.0) & (pooled <= u))
    assert stats.kstest(pooled, "uniform", args=(0.0, u)).pvalue > 1e-3


def test_hitting_from_agrees_with_the_potential_route(b1_tracer):
    eq = b1_tracer.eq
    pts = np.array([[3, 0, 0], [0, 4, 2], [6, 6, 6]])
    want = hitting_probability(pts, eq)
    got = np.array([b1_tracer.hitting_from(z) for z in pts])
    assert got == pytest.approx(want, rel=1e-8)
    assert np.all(np.diff(got) < 0)


def test_trace_reports_bias_notes(b1_tracer):
    res = b1_tracer.trace(0.5, 2, seed=907)
    assert res.bias_notes["green_accuracy"] <= 1e-6
    assert res.bias_notes["shell_radius"] == b1_tracer.shell
