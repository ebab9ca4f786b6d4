"""Fusion operators against pairwise-loop, grid, and long-run oracles."""

import numpy as np
import pytest

from volfuse import ops
from volfuse.errors import ShapeError
from volfuse.gradcheck import grad_check
from volfuse.rankpool import (
    DynamicImage,
    RankSolverConfig,
    SliceSequence,
    approx_rank_pool,
    arp_backward,
    arp_beta,
    arp_raw_coefficients,
    chunked_fuse,
    maxpool_fuse,
    minimize_rank_objective,
    rank_score,
    ranksvm_objective,
    ranksvm_solve,
    smooth_sequence,
)
from volfuse.rng import Rng
from volfuse.tensor import Tensor


def pairwise_hinge_objective(u, V, lam):
    """Independent oracle: explicit loops over all q > t pairs."""
    uf = np.asarray(u).reshape(-1)
    flat = V.stack.reshape(len(V), -1)
    total = 0.5 * float(uf @ uf)
    for t in range(len(V)):
        for q in range(t + 1, len(V)):
            total += lam * max(0.0, 1.0 - float(uf @ (flat[q] - flat[t])))
    return total


class TestSmoothing:
    def test_constant_sequence_stays_constant(self):
        seq = SliceSequence([np.full((3, 3), 0.1)] * 5)
        out = smooth_sequence(seq)
        assert np.all(out.stack == 0.1)

    def test_scalar_running_means(self):
        seq = SliceSequence([np.array([1.0]), np.array([2.0]), np.array([3.0])])
        assert smooth_sequence(seq).stack.reshape(-1).tolist() == [1.0, 1.5, 2.0]

    def test_matches_prefix_mean_oracle(self):
        rng = Rng(0)
        stack = rng.uniform(-1, 1, (4, 6))
        out = smooth_sequence(SliceSequence.from_stack(stack)).stack
        oracle = np.stack([stack[: t + 1].mean(axis=0) for t in range(4)])
        assert np.abs(out - oracle).max() <= 1e-12

    def test_empty_sequence_rejected(self):
        with pytest.raises(ShapeError):
            SliceSequence([])

    def test_mismatched_item_shapes_rejected(self):
        with pytest.raises(ShapeError):
            SliceSequence([np.zeros(3), np.zeros(4)])


class TestRankScore:
    def test_zero_u(self):
        assert rank_score(np.zeros(4), Rng(1).uniform(-1, 1, (4,))) == 0.0

    def test_hand_dot(self):
        assert rank_score(np.array([1.0, 2.0]), np.array([3.0, 4.0])) == 11.0

    def test_orthogonal(self):
        assert rank_score(np.array([1.0, 0.0]), np.array([0.0, 5.0])) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            rank_score(np.zeros(3), np.zeros(4))


class TestObjective:
    def test_zero_u_three_pairs(self):
        V = SliceSequence(Rng(2).uniform(-1, 1, (3, 4)))
        for lam in (1.0, 2.5):
            cfg = RankSolverConfig(lam=lam)
            assert ranksvm_objective(np.zeros(4), V, cfg) == pytest.approx(3 * lam)

    def test_satisfied_margins_leave_regularizer(self):
        # v_t = 2t * e1: all pairwise gaps are >= 2, u = e1 satisfies margins
        V = SliceSequence([np.array([2.0 * t, 0.0]) for t in range(1, 5)])
        u = np.array([1.0, 0.0])
        cfg = RankSolverConfig()
        assert ranksvm_objective(u, V, cfg) == pytest.approx(0.5)

    def test_matches_pairwise_loop_oracle(self):
        rng = Rng(3)
        V = SliceSequence(rng.uniform(-1, 1, (4, 5)))
        u = rng.uniform(-2, 2, (5,))
        cfg = RankSolverConfig(lam=1.7)
        got = ranksvm_objective(u, V, cfg)
        assert abs(got - pairwise_hinge_objective(u, V, 1.7)) <= 1e-12


class TestExactSolver:
    def test_single_slice_gives_zero_image(self):
        out = ranksvm_solve(SliceSequence([np.ones((2, 3))]))
        assert np.all(out.value == 0.0)
        assert out.value.shape == (2, 3)

    def test_active_margin_case_against_grid(self):
        # smoothed sequence v_t = t*e1; with lam=10 the optimum is u = (1, 0)
        V = SliceSequence([np.array([1.0, 0.0]), np.array([2.0, 0.0])])
        cfg = RankSolverConfig(lam=10.0)
        u = minimize_rank_objective(V, cfg)
        got = ranksvm_objective(u, V, cfg)
        grid = np.arange(-3.0, 3.0001, 0.01)
        best = min(
            pairwise_hinge_objective(np.array([a, bb]), V, 10.0)
            for a in grid
            for bb in grid
        )
        assert got <= best + 1e-3
        assert np.allclose(u, [1.0, 0.0], atol=1e-3)

    def test_random_instances_against_long_run_reference(self):
        # oracle: same objective, 50x more subgradient iterations
        for i in range(5):
            rng = Rng(50 + i)
            T = 2 + int(rng.uniform(0, 1, ()) * 3)
            phi = SliceSequence(rng.uniform(-1, 1, (T, 3)))
            V = smooth_sequence(phi)
            fast = ranksvm_objective(
                minimize_rank_objective(V, RankSolverConfig(max_iters=2000)),
                V, RankSolverConfig())
            slow = ranksvm_objective(
                minimize_rank_objective(V, RankSolverConfig(max_iters=100_000)),
                V, RankSolverConfig())
            assert fast <= slow + 1e-4

    def test_never_loses_to_zero_or_surrogate(self):
        cfg = RankSolverConfig()
        for i in range(10):
            rng = Rng(80 + i)
            T = 2 + int(rng.uniform(0, 1, ()) * 4)
            phi = SliceSequence(rng.uniform(-1, 1, (T, 4)))
            V = smooth_sequence(phi)
            solved = ranksvm_objective(minimize_rank_objective(V, cfg), V, cfg)
            assert solved <= ranksvm_objective(np.zeros(4), V, cfg) + 1e-12
            assert solved <= ranksvm_objective(approx_rank_pool(phi).value, V, cfg) + 1e-12

    def test_monotone_sequence_gets_increasing_scores(self):
        e = np.array([0.3, -1.0, 2.0])
        for T in (2, 3, 5):
            phi = SliceSequence([t * e for t in range(1, T + 1)])
            u = ranksvm_solve(phi).value
            V = smooth_sequence(phi)
            scores = [rank_score(u, V[t]) for t in range(T)]
            assert all(s1 < s2 for s1, s2 in zip(scores, scores[1:]))


class TestApproxRankPool:
    def test_t2_is_difference(self):
        a, b = np.array([1.0, 2.0]), np.array([5.0, 1.0])
        out = approx_rank_pool(SliceSequence([a, b]))
        # beta = (-1, +1) applied to smoothed (a, (a+b)/2): (b - a) / 2... no:
        # -1*a + 1*(a+b)/2 = (b-a)/2; the raw-coefficient identity gives the same
        assert np.allclose(out.value, (b - a) / 2.0, atol=1e-15)

    def test_beta_formula(self):
        assert arp_beta(1).tolist() == [0.0]
        assert arp_beta(2).tolist() == [-1.0, 1.0]
        assert arp_beta(5).tolist() == [-4.0, -2.0, 0.0, 2.0, 4.0]

    def test_constant_sequence_exactly_zero(self):
        for c in (3.0, 0.1, -2.7):
            out = approx_rank_pool(SliceSequence([np.full((4, 4), c)] * 6))
            assert np.all(out.value == 0.0)

    def test_equals_zero_point_subgradient_direction(self):
        # -d/du [sum_{q>t} hinge] at u=0 is sum_{q>t} (v_q - v_t); ARP must
        # match that pairwise summation exactly (up to positive scale = 1)
        rng = Rng(9)
        phi = SliceSequence(rng.uniform(-1, 1, (5, 7)))
        V = smooth_sequence(phi)
        pair_sum = np.zeros(7)
        for t in range(5):
            for q in range(t + 1, 5):
                pair_sum += V.stack[q] - V.stack[t]
        got = approx_rank_pool(phi).value
        assert np.abs(got - pair_sum).max() <= 1e-12

    def test_linearity(self):
        rng = Rng(10)
        x = rng.uniform(-1, 1, (4, 6))
        y = rng.uniform(-1, 1, (4, 6))
        lhs = approx_rank_pool(SliceSequence.from_stack(2.0 * x + 0.5 * y)).value
        rhs = (2.0 * approx_rank_pool(SliceSequence.from_stack(x)).value
               + 0.5 * approx_rank_pool(SliceSequence.from_stack(y)).value)
        assert np.abs(lhs - rhs).max() <= 1e-12


class TestArpBackward:
    def test_t1_zero_gradient(self):
        out = arp_backward(np.ones((2, 2)), 1)
        assert np.all(out == 0.0)

    def test_t2_matches_materialized_matrix(self):
        # composed map phi -> u for T=2 on scalars: u = -phi_1 + (phi_1+phi_2)/2
        upstream = np.array([1.0])
        got = arp_backward(upstream, 2).reshape(-1)
        mat = np.array([-0.5, 0.5])  # d u / d phi_tau
        assert np.allclose(got, mat * upstream, atol=1e-15)

    def test_transpose_of_forward_map(self):
        # <u(phi), g> == <phi, arp_backward(g)> for the linear pooling map
        rng = Rng(11)
        stack = rng.uniform(-1, 1, (5, 3))
        g = rng.uniform(-1, 1, (3,))
        u = approx_rank_pool(SliceSequence.from_stack(stack)).value
        lhs = float(u @ g)
        rhs = float((stack * arp_backward(g, 5)).sum())
        assert abs(lhs - rhs) <= 1e-12

    def test_full_pipeline_finite_difference(self):
        rng = Rng(12)
        x = Tensor(rng.uniform(-1, 1, (2, 5, 3, 2, 2)))
        alpha = arp_raw_coefficients(5)
        err = grad_check(
            lambda ts: ops.weighted_sum_over_axis(ts[0], alpha, axis=1), [x], rng=Rng(13)
        )
        assert err < 1e-5

    def test_tape_op_matches_oracle_function(self):
        rng = Rng(14)
        stack = rng.uniform(-1, 1, (6, 2, 3, 3))
        via_tape = ops.weighted_sum_over_axis(
            Tensor(stack[None]), arp_raw_coefficients(6), axis=1
        ).data[0]
        via_fn = approx_rank_pool(SliceSequence.from_stack(stack)).value
        assert np.abs(via_tape - via_fn).max() <= 1e-12


class TestChunkedFuse:
    def test_counts(self):
        rng = Rng(15)
        assert len(chunked_fuse(SliceSequence(rng.uniform(-1, 1, (20, 3))), 10)) == 2
        assert len(chunked_fuse(SliceSequence(rng.uniform(-1, 1, (15, 3))), 10)) == 2
        assert len(chunked_fuse(SliceSequence(rng.uniform(-1, 1, (7, 3))), 3)) == 3

    def test_constant_input_zero_images(self):
        out = chunked_fuse(SliceSequence([np.full((2, 2), 1.5)] * 15), 10)
        assert np.all(out.stack == 0.0)

    def test_k_at_least_t_equals_single_pool(self):
        rng = Rng(16)
        phi = SliceSequence(rng.uniform(-1, 1, (6, 4)))
        chunked = chunked_fuse(phi, 10)
        assert len(chunked) == 1
        assert np.array_equal(chunked.stack[0], approx_rank_pool(phi).value)

    def test_bad_k(self):
        with pytest.raises(ShapeError):
            chunked_fuse(SliceSequence([np.zeros(2)]), 0)


class TestMaxpoolFuse:
    def test_single_slice_identity(self):
        x = Rng(17).uniform(-1, 1, (3, 3))
        assert np.array_equal(maxpool_fuse(SliceSequence([x])).value, x)

    def test_constant_slices(self):
        out = maxpool_fuse(SliceSequence([
            -1.0 * np.ones((2, 2)), 3.0 * np.ones((2, 2)), 2.0 * np.ones((2, 2))
        ]))
        assert np.all(out.value == 3.0)

    def test_matches_elementwise_loop(self):
        rng = Rng(18)
        stack = rng.uniform(-1, 1, (4, 3, 2))
        got = maxpool_fuse(SliceSequence.from_stack(stack)).value
        oracle = np.empty((3, 2))
        for i in range(3):
            for j in range(2):
                oracle[i, j] = max(stack[t, i, j] for t in range(4))
        assert np.array_equal(got, oracle)


def test_dynamic_image_shape_matches_source():
    rng = Rng(19)
    phi = SliceSequence(rng.uniform(-1, 1, (5, 2, 6, 7)))
    assert approx_rank_pool(phi).value.shape == (2, 6, 7)
    assert isinstance(approx_rank_pool(phi), DynamicImage)
