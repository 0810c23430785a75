"""Finite- and infinite-length cloud samplers, rerooting, serialization.

Statistical checks pin their seeds and compare against exact formulas
(vacancy probabilities from capacities and intensities) at four standard
errors; structural checks (couplings, containments, round-trips) are
exact and must hold sample by sample.
"""

from collections import defaultdict

import numpy as np
import pytest

from interlacements.cloud import (IntensityProfile, LabeledTrajectorySet,
                                  OccupancyField, fast_forward_cloud,
                                  interlacement_window_fields,
                                  mean_occupation_density, occupation_field,
                                  pair_covariance, reroot_profile, sample_J,
                                  sample_interlacement_window,
                                  sample_rho_model, sample_segment_cloud,
                                  segment_cloud_vacancy)
from interlacements.engine import ResourceBudgetError
from interlacements.lattice import Box, Trajectory, WalkKernel, step_distribution
from interlacements.potential import capacity

LAZY = WalkKernel(d=3, lazy=True)


# ---------------------------------------------------------------------
# profiles
# ---------------------------------------------------------------------

def test_profile_validation():
    with pytest.raises(ValueError):
        IntensityProfile.homogeneous(-0.1, 4)
    with pytest.raises(ValueError):
        IntensityProfile.homogeneous(1.0, 0)
    with pytest.raises(ValueError):
        IntensityProfile.from_table({(0, (0, 0, 0)): 1.0})
    with pytest.raises(ValueError):
        IntensityProfile.from_table({(2, (0, 0, 0)): -1.0})
    with pytest.raises(ValueError):
        IntensityProfile.from_table({(2, (0, 0)): 1.0})


def test_profile_accessors():
    hom = IntensityProfile.homogeneous(0.5, 4)
    assert hom.max_length == 4 and hom.lengths() == [4]
    sites = np.array([[0, 0, 0], [5, 0, 0]])
    assert np.allclose(hom.rate(4, sites), 12.0 * 0.5 / 4.0)
    assert np.allclose(hom.rate(3, sites), 0.0)
    region = Box((0, 0, 0), (1, 1, 1))
    assert hom.total_mass(region) == pytest.approx(8 * 1.5)

    tab = IntensityProfile.from_table({(2, (0, 0, 0)): 0.3,
                                       (5, (1, 0, 0)): 0.2,
                                       (5, (9, 9, 9)): 0.1})
    assert tab.max_length == 5 and tab.lengths() == [2, 5]
    assert tab.rate(5, [(1, 0, 0)])[0] == pytest.approx(0.2)
    assert tab.rate(5, [(0, 0, 0)])[0] == 0.0
    assert np.array_equal(tab.support(5, region), [[1, 0, 0]])
    assert tab.total_mass(region) == pytest.approx(0.5)


def test_profile_addition_merges_tables():
    a = IntensityProfile.from_table({(2, (0, 0, 0)): 0.3})
    b = IntensityProfile.from_table({(2, (0, 0, 0)): 0.1,
                                     (3, (1, 1, 1)): 0.2})
    s = a + b
    assert s.table[(2, (0, 0, 0))] == pytest.approx(0.4)
    assert s.table[(3, (1, 1, 1))] == pytest.approx(0.2)
    with pytest.raises(TypeError):
        a + IntensityProfile.homogeneous(1.0, 2)


# ---------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------

def test_occupancy_field_roundtrip():
    window = Box.ball(1, 3).sites()
    occ = np.zeros(len(window), dtype=bool)
    occ[[0, 1, 5, 6, 7, 26]] = True
    counts = np.zeros(len(window), dtype=np.int64)
    counts[occ] = [3, 1, 2, 9, 1, 4]
    fld = OccupancyField(window=window, occupied=occ, counts=counts)
    back = OccupancyField.from_bytes(fld.to_bytes())
    assert np.array_equal(back.window, window)
    assert np.array_equal(back.occupied, occ)
    assert np.array_equal(back.counts, counts)
    assert np.array_equal(back.vacant(), ~occ)
    assert back.occupation_times(LAZY) == pytest.approx(counts / 12.0)

    bare = OccupancyField(window=window, occupied=occ)
    back2 = OccupancyField.from_bytes(bare.to_bytes())
    assert back2.counts is None
    with pytest.raises(ValueError):
        back2.occupation_times(LAZY)
    with pytest.raises(ValueError):
        OccupancyField.from_bytes(b"XXXX" + bare.to_bytes()[4:])


def test_occupancy_field_rejects_inconsistent_counts():
    window = np.array([[0, 0, 0], [1, 0, 0]])
    with pytest.raises(ValueError):
        OccupancyField(window=window,
                       occupied=np.array([True, False]),
                       counts=np.array([0, 2], dtype=np.int64))


def test_trajectory_set_roundtrip():
    window = np.array([[0, 0, 0], [1, 0, 0]])
    pts = [(0.25, 3, Trajectory(start=np.array([2, 0, 0]),
                                codes=np.array([1, 0], dtype=np.uint8),
                                label=0.25)),
           (0.9, 1, Trajectory(start=np.array([0, 0, 0]),
                               codes=np.zeros(0, dtype=np.uint8),
                               label=0.9))]
    cloud = LabeledTrajectorySet(window=window, points=pts)
    back = LabeledTrajectorySet.from_bytes(cloud.to_bytes())
    assert np.array_equal(back.window, window)
    assert len(back.points) == 2
    for (la, na, ta), (lb, nb, tb) in zip(pts, back.points):
        assert la == lb and na == nb
        assert np.array_equal(ta.start, tb.start)
        assert np.array_equal(ta.codes, tb.codes)
    with pytest.raises(ValueError):
        LabeledTrajectorySet.from_bytes(b"ZZZZ" + cloud.to_bytes()[4:])


# ---------------------------------------------------------------------
# infinite-walk cloud on a window
# ---------------------------------------------------------------------

def test_window_vacancy_law_single_site():
    u, n = 0.5, 5000
    sample = interlacement_window_fields(u, [(0, 0, 0)], seed=1201,
                                         replicates=n)
    cap = capacity([(0, 0, 0)], "paper_lazy")
    want = np.exp(-u * cap)
    got = float(sample.vacant_fraction()[0])
    se = np.sqrt(want * (1.0 - want) / n)
    assert abs(got - want) <= 4.0 * se + 1e-6


def test_window_fields_rep_offset_and_determinism():
    win = Box.ball(1, 3).sites()
    a = interlacement_window_fields(0.5, win, seed=1202, replicates=6,
                                    want_counts=True)
    b = interlacement_window_fields(0.5, win, seed=1202, replicates=4,
                                    rep_offset=2, want_counts=True)
    assert np.array_equal(a.fields[2:], b.fields)
    assert np.array_equal(a.counts[2:], b.counts)
    assert all(np.array_equal(x, y) for x, y in zip(a.labels[2:], b.labels))
    fld = a.field_at(3)
    assert np.array_equal(fld.occupied, a.fields[3])
    assert np.array_equal(fld.counts, a.counts[3])


def test_single_window_sample_is_consistent_with_its_cloud():
    field, cloud = sample_interlacement_window(1.0, Box.ball(1, 3).sites(),
                                               seed=1203)
    occ = occupation_field(cloud, LAZY)
    counts = np.rint(occ * LAZY.conductance).astype(np.int64)
    assert np.array_equal(counts, field.counts)
    assert np.array_equal(counts > 0, field.occupied)
    for label, length, traj in cloud.points:
        assert 0.0 < label <= 1.0
        assert traj.length == length


def test_fast_forward_is_a_pathwise_domination():
    big = Box.ball(2, 3).sites()
    small = Box.ball(1, 3).sites()
    hit_any_before = hit_any_after = 0
    for rep in range(30):
        field, cloud = sample_interlacement_window(0.3, big,
                                                   seed=1204 + rep)
        pushed = fast_forward_cloud(cloud, small, LAZY)
        w_index = {tuple(p): i for i, p in enumerate(field.window)}
        orig_on_small = np.array([field.occupied[w_index[tuple(p)]]
                                  for p in small])
        assert not np.any(pushed.occupied & ~orig_on_small)
        assert pushed.occupied.any() == orig_on_small.any()
        hit_any_before += int(orig_on_small.any())
        hit_any_after += int(pushed.occupied.any())
    assert hit_any_before == hit_any_after


# ---------------------------------------------------------------------
# rerooting
# ---------------------------------------------------------------------

def test_reroot_table_profile_hand_oracle():
    # length-3 walks from (2,0,0): the only one-step first entry is the
    # move to (1,0,0); the only two-step first entry holds then moves
    profile = IntensityProfile.from_table({(3, (2, 0, 0)): 0.4})
    pushed = reroot_profile(profile, [(0, 0, 0), (1, 0, 0)])
    want = {(2, (1, 0, 0)): 0.4 / 12.0,
            (1, (1, 0, 0)): 0.4 / 24.0}
    assert set(pushed.table) == set(want)
    for key, val in want.items():
        assert pushed.table[key] == pytest.approx(val, rel=1e-12)


def test_reroot_homogeneous_profile_uses_no_return_probabilities():
    pushed = reroot_profile(IntensityProfile.homogeneous(0.5, 4), [(0, 0, 0)])
    rate0 = 12.0 * 0.5 / 4.0
    no_return = [1.0, 0.5, 11.0 / 24.0, 7.0 / 16.0]
    for rem in range(1, 5):
        got = pushed.table[(rem, (0, 0, 0))]
        assert got == pytest.approx(rate0 * no_return[4 - rem], rel=1e-12)


def test_pushed_cloud_containment_and_vacancy_law():
    profile = IntensityProfile.from_table({(3, (2, 0, 0)): 0.4})
    K = np.array([[0, 0, 0], [1, 0, 0]])
    # pathwise: pushing the sampled cloud can only remove occupation
    sample, clouds = sample_rho_model(profile, K, seed=1205, replicates=300,
                                      want_trajectories=True)
    for rep in range(300):
        pushed = fast_forward_cloud(clouds[rep], K, LAZY)
        assert not np.any(pushed.occupied & ~sample.fields[rep])
        assert pushed.occupied.any() == sample.fields[rep].any()
    # law: P[K untouched] = exp(-mass of walks that ever hit K)
    n = 30_000
    big, _ = sample_rho_model(profile, K, seed=1206, replicates=n)
    hit_mass = 0.4 * (1.0 / 12.0 + 1.0 / 24.0)
    want = np.exp(-hit_mass)
    got = float((~big.fields.any(axis=1)).mean())
    se = np.sqrt(want * (1.0 - want) / n)
    assert abs(got - want) <= 4.0 * se
    # the pushed profile carries exactly the hitting mass
    pushed_profile = reroot_profile(profile, K)
    assert sum(pushed_profile.table.values()) == pytest.approx(hit_mass,
                                                               rel=1e-12)


# ---------------------------------------------------------------------
# mean occupation
# ---------------------------------------------------------------------

def visit_expectation_by_enumeration(start, length, target):
    """E[# visits of a lazy-walk path of `length` positions to target]."""
    moves, probs = step_distribution(LAZY)
    dist = {tuple(start): 1.0}
    total = dist.get(tuple(target), 0.0)
    for _ in range(length - 1):
        new = defaultdict(float)
        for pos, p in dist.items():
            for mv, q in zip(moves, probs):
                if q > 0.0:
                    new[tuple(int(a + b) for a, b in zip(pos, mv))] += p * q
        dist = new
        total += dist.get(tuple(target), 0.0)
    return total


def test_mean_occupation_density_against_enumeration():
    profile = IntensityProfile.from_table({(3, (2, 0, 0)): 0.4,
                                           (2, (0, 0, 0)): 0.3})
    for x in ((2, 0, 0), (1, 0, 0), (0, 0, 0)):
        want = (0.4 * visit_expectation_by_enumeration((2, 0, 0), 3, x)
                + 0.3 * visit_expectation_by_enumeration((0, 0, 0), 2, x))
        got = mean_occupation_density(profile, x)
        assert got == pytest.approx(want / 12.0, rel=1e-12)
    assert mean_occupation_density(
        IntensityProfile.homogeneous(0.7, 5), (3, 1, 2)) == 0.7


def test_mean_occupation_density_matches_sampled_counts():
    profile = IntensityProfile.from_table({(3, (2, 0, 0)): 0.4,
                                           (2, (0, 0, 0)): 0.3})
    window = np.array([[1, 0, 0], [2, 0, 0]])
    n = 20_000
    sample, _ = sample_rho_model(profile, window, seed=1207, replicates=n,
                                 want_counts=True)
    times = sample.counts / 12.0
    for j in range(2):
        want = mean_occupation_density(profile, window[j])
        se = times[:, j].std(ddof=1) / np.sqrt(n)
        assert abs(times[:, j].mean() - want) <= 4.0 * se


def test_homogeneous_cloud_mean_occupation_is_the_level():
    u, n = 0.5, 5000
    sample = sample_segment_cloud(u, 16, [(0, 0, 0)], seed=1208,
                                  replicates=n, strategy="rerooted",
                                  want_counts=True)
    times = sample.counts[:, 0] / 12.0
    se = times.std(ddof=1) / np.sqrt(n)
    assert abs(times.mean() - u) <= 4.0 * se


def test_sample_j_accepts_weights_and_levels():
    n = 3000
    sample, _ = sample_J(0.3, 2, [(0, 0, 0)], seed=1209, replicates=n,
                         want_counts=True)
    times = sample.counts[:, 0] / 12.0
    se = times.std(ddof=1) / np.sqrt(n)
    assert abs(times.mean() - 0.3) <= 4.0 * se
    # dict weights build the same rates as the homogeneous level when the
    # weight is constant over the reach
    reach = Box.ball(1, 3).expand(1).sites()
    weighted, _ = sample_J({tuple(p): 0.3 for p in reach}, 2,
                           [(0, 0, 0)], seed=1209, replicates=5,
                           want_counts=True)
    assert np.array_equal(weighted.fields, sample.fields[:5])
    with pytest.raises(ValueError):
        sample_J(0.3, 0, [(0, 0, 0)], seed=1)


def test_direct_and_rerooted_strategies_share_the_exact_vacancy():
    K = Box.ball(1, 3).sites()
    p_exact, bias = segment_cloud_vacancy(0.8, 8, K)
    n = 4000
    rer = sample_segment_cloud(0.8, 8, K, seed=1210, replicates=n,
                               strategy="rerooted")
    got = float((~rer.fields.any(axis=1)).mean())
    se = np.sqrt(p_exact * (1.0 - p_exact) / n)
    assert abs(got - p_exact) <= 4.0 * se + bias

    p1, bias1 = segment_cloud_vacancy(0.3, 3, [(0, 0, 0)])
    m = 2000
    direct = sample_segment_cloud(0.3, 3, [(0, 0, 0)], seed=1211,
                                  replicates=m, strategy="direct")
    assert direct.bias_notes["strategy"] == "direct"
    got1 = float((~direct.fields.any(axis=1)).mean())
    se1 = np.sqrt(p1 * (1.0 - p1) / m)
    assert abs(got1 - p1) <= 4.0 * se1 + bias1
    with pytest.raises(ValueError):
        sample_segment_cloud(0.3, 3, [(0, 0, 0)], seed=1, strategy="magic")


def test_label_floor_realizes_the_band_coupling():
    window = np.array([[0, 0, 0], [1, 0, 0]])
    full_profile = IntensityProfile.homogeneous(0.6, 3)
    half_profile = IntensityProfile.homogeneous(0.3, 3)
    n = 200
    full, _ = sample_rho_model(full_profile, window, seed=1212, replicates=n)
    base, _ = sample_rho_model(half_profile, window, seed=1212, replicates=n)
    band, _ = sample_rho_model(full_profile, window, seed=1212, replicates=n,
                               label_floor=half_profile)
    assert np.array_equal(base.fields | band.fields, full.fields)
    assert not np.any(base.fields & ~full.fields)
    with pytest.raises(ValueError):
        sample_rho_model(half_profile, window, seed=1, replicates=1,
                         label_floor=full_profile)


def test_pair_covariance_matches_the_closed_form():
    u = 1.0
    res = pair_covariance((0, 0, 0), (5, 0, 0), u, seed=1213)
    cap0 = capacity([(0, 0, 0)], "paper_lazy")
    exact = np.exp(-u * res["capacity_pair"]) - np.exp(-2.0 * u * cap0)
    z = (res["estimate"] - exact) / res["se"]
    assert abs(z) <= 4.0
    assert 0.0 < res["q_both"] < 1.0
    assert res["params"]["x"] == [0, 0, 0]
    with pytest.raises(ValueError):
        pair_covariance((0, 0, 0), (0, 0, 0), u, seed=1)


def test_rho_model_budget_guard():
    profile = IntensityProfile.homogeneous(1.0, 8)
    with pytest.raises(ResourceBudgetError):
        sample_rho_model(profile, [(0, 0, 0)], seed=1, replicates=1,
                         max_expected_points=1.0)
