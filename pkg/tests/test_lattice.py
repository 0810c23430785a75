"""Lattice geometry, walk kernels, and trajectory primitives."""

import numpy as np
import pytest

from interlacements.lattice import (Box, LatticeField, Trajectory, WalkKernel,
                                    apply_transition, sample_trajectory,
                                    step_distribution, sup_norm,
                                    trajectory_codes_batch)


def test_box_ball_counts_and_contains():
    b = Box.ball(2, 3)
    sites = b.sites()
    assert sites.shape == (125, 3)
    assert b.shape == (5, 5, 5)
    assert b.size == 125
    assert bool(b.contains(np.array([[2, -2, 0]]))[0])
    assert not bool(b.contains(np.array([[3, 0, 0]]))[0])


def test_box_sites_are_c_ordered():
    b = Box((0, 0), (1, 2))
    expect = [[0, 0], [0, 1], [0, 2], [1, 0], [1, 1], [1, 2]]
    assert np.array_equal(b.sites(), np.array(expect))


def test_box_sup_distance():
    b = Box((-1, -1, -1), (1, 1, 1))
    pts = np.array([[0, 0, 0], [1, 1, 1], [3, 0, 0], [-4, 2, 0]])
    assert np.array_equal(b.sup_distance(pts), np.array([0, 0, 2, 3]))


def test_sup_norm():
    assert np.array_equal(sup_norm(np.array([[1, -5, 3], [0, 0, 0]])),
                          np.array([5, 0]))


def test_kernel_conductance_and_probabilities():
    lazy = WalkKernel(d=3, lazy=True)
    plain = WalkKernel(d=3, lazy=False)
    assert lazy.conductance == 12 and plain.conductance == 6
    for k in (lazy, plain):
        moves, probs = step_distribution(k)
        assert moves.shape == (7, 3)
        assert probs.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.array_equal(moves[0], np.zeros(3))


def test_codes_from_uniforms_hits_every_move_with_the_right_law():
    k = WalkKernel(d=3, lazy=True)
    u = np.linspace(1e-9, 1 - 1e-9, 1_200_000)
    codes = k.codes_from_uniforms(u)
    freq = np.bincount(codes, minlength=7) / len(u)
    assert freq[0] == pytest.approx(0.5, abs=1e-5)
    assert np.allclose(freq[1:], 1 / 12, atol=1e-5)
    plain = WalkKernel(d=3, lazy=False)
    codes_p = plain.codes_from_uniforms(u)
    assert np.bincount(codes_p, minlength=7)[0] == 0


def test_trajectory_positions_and_length():
    k = WalkKernel(d=2, lazy=True)
    # codes: hold, +e0, -e1
    traj = Trajectory(start=np.array([5, 5]),
                      codes=np.array([0, 1, 4], dtype=np.uint8))
    pos = traj.positions(k)
    assert traj.length == 4
    assert np.array_equal(pos, np.array([[5, 5], [5, 5], [6, 5], [6, 4]]))


def test_sample_trajectory_deterministic_and_nearest_neighbor():
    k = WalkKernel(d=3, lazy=True)
    t1 = sample_trajectory(k, (0, 0, 0), 64, seed=7, stream=(1,))
    t2 = sample_trajectory(k, (0, 0, 0), 64, seed=7, stream=(1,))
    t3 = sample_trajectory(k, (0, 0, 0), 64, seed=7, stream=(2,))
    assert np.array_equal(t1.codes, t2.codes)
    assert not np.array_equal(t1.codes, t3.codes)
    steps = np.diff(t1.positions(k), axis=0)
    assert np.abs(steps).sum(axis=1).max() <= 1


def test_trajectory_codes_batch_matches_per_key_draws():
    k = WalkKernel(d=3, lazy=True)
    keys = np.array([123, 456], dtype=np.uint64)
    batch = trajectory_codes_batch(k, keys, 16)
    from interlacements import rng
    for i, key in enumerate(keys):
        u = rng.uniform_at(key, np.arange(16))
        assert np.array_equal(batch[i], k.codes_from_uniforms(u))
    assert trajectory_codes_batch(k, keys, 0).shape == (2, 0)


def test_apply_transition_conserves_total_and_respects_reach():
    k = WalkKernel(d=2, lazy=True)
    box = Box((-3, -3), (3, 3))
    data = np.zeros(box.shape)
    data[3, 3] = 1.0  # site (0, 0)
    out = apply_transition(k, LatticeField(box, data), n=2)
    assert out.data.sum() == pytest.approx(1.0, abs=1e-12)
    assert float(out.value_at((0, 0))[0]) < 1.0
    # two steps cannot reach sup-distance 3
    assert float(out.value_at((3, 3))[0]) == 0.0
    assert float(out.value_at((2, 0))[0]) > 0.0
