import numpy as np
import pytest

from stepalign.align import (
    CostSpec,
    brute_force_align,
    brute_force_dtw,
    drop_dtw,
    dtw,
    match_cost_matrix,
    percentile_drop_cost,
    recompute_total,
)
from stepalign.core import DataError, EmbeddingSequence


def seq(rows, kind="video"):
    return EmbeddingSequence(np.asarray(rows, dtype=np.float64), kind)


class TestMatchCost:
    def test_identical_unit_vectors(self):
        costs = match_cost_matrix(seq([[1.0, 0.0]]), seq([[1.0, 0.0]], "slots"))
        assert costs.shape == (1, 1)
        assert costs[0, 0] == pytest.approx(-1.0)

    def test_orthogonal(self):
        costs = match_cost_matrix(seq([[0.0, 1.0]]), seq([[1.0, 0.0]], "slots"))
        assert costs[0, 0] == pytest.approx(0.0)

    def test_opposite(self):
        costs = match_cost_matrix(seq([[-1.0, 0.0]]), seq([[1.0, 0.0]], "slots"))
        assert costs[0, 0] == pytest.approx(1.0)

    def test_orientation(self):
        # rows follow the second argument, columns the first
        x = seq([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        z = seq([[1.0, 0.0]], "slots")
        assert match_cost_matrix(x, z).shape == (1, 3)

    def test_dim_mismatch(self):
        with pytest.raises(DataError):
            match_cost_matrix(seq([[1.0, 0.0]]), seq([[1.0, 0.0, 0.0]], "slots"))

    def test_zero_norm_row(self):
        with pytest.raises(DataError):
            match_cost_matrix(seq([[0.0, 0.0]]), seq([[1.0, 0.0]], "slots"))

    def test_bounded(self, rng):
        costs = match_cost_matrix(seq(rng.normal(size=(7, 5))), seq(rng.normal(size=(4, 5)), "slots"))
        assert (costs >= -1.0 - 1e-12).all() and (costs <= 1.0 + 1e-12).all()


class TestPercentile:
    def test_constant_matrix(self):
        for p in (0.1, 0.5, 0.8, 1.0):
            assert percentile_drop_cost(np.full((3, 4), -0.25), p) == -0.25

    def test_nearest_rank_fixture(self):
        # sort ascending, take element ceil(p*n) - 1 = the 4th of 5
        costs = np.array([-0.9, -0.5, 0.0, 0.4, 0.8]).reshape(1, 5)
        assert percentile_drop_cost(costs, 0.8) == 0.4

    def test_extremes(self):
        values = np.array([[3.0, 1.0, 2.0]])
        assert percentile_drop_cost(values, 1.0) == 3.0
        assert percentile_drop_cost(values, 1e-9) == 1.0

    def test_bad_p(self):
        with pytest.raises(DataError):
            percentile_drop_cost(np.ones((1, 1)), 0.0)
        with pytest.raises(DataError):
            percentile_drop_cost(np.ones((1, 1)), 1.5)


class TestDropDtw:
    def test_diagonal_dominates(self):
        costs = np.zeros((3, 3))
        np.fill_diagonal(costs, -1.0)
        corr = drop_dtw(CostSpec(costs, 0.5, 0.5), "one_to_one")
        assert corr.matches == [(0, 0), (1, 1), (2, 2)]
        assert corr.total_cost == pytest.approx(-3.0)
        assert not corr.dropped_rows and not corr.dropped_cols

    def test_free_drops_beat_positive_costs(self):
        costs = np.ones((2, 3))
        corr = drop_dtw(CostSpec(costs, 0.0, 0.0), "one_to_one")
        assert corr.num_matches == 0
        assert corr.total_cost == 0.0
        assert corr.dropped_rows == {0, 1}
        assert corr.dropped_cols == {0, 1, 2}

    def test_matches_oracle_on_random_instance(self, rng):
        costs = rng.uniform(-1.0, 1.0, size=(3, 4))
        drop = percentile_drop_cost(costs, 0.5)
        spec = CostSpec(costs, drop, drop)
        for mode in ("one_to_one", "many_to_one"):
            assert drop_dtw(spec, mode).total_cost == pytest.approx(
                brute_force_align(spec, mode).total_cost, abs=1e-9)

    @pytest.mark.parametrize("mode", ["one_to_one", "many_to_one"])
    def test_oracle_equivalence_sweep(self, mode, rng):
        for trial in range(60):
            K, N = rng.integers(1, 6), rng.integers(1, 7)
            costs = rng.uniform(-1.0, 1.0, size=(K, N))
            drop = percentile_drop_cost(costs, (0.3, 0.5, 0.8)[trial % 3])
            spec = CostSpec(costs, drop, drop)
            got = drop_dtw(spec, mode)
            want = brute_force_align(spec, mode)
            assert got.total_cost == pytest.approx(want.total_cost, abs=1e-9)

    def test_one_sided_drops(self, rng):
        # column side undroppable: every column must be matched
        costs = rng.uniform(-1.0, 1.0, size=(5, 3))
        spec = CostSpec(costs, row_drop_cost=0.1, col_drop_cost=None)
        got = drop_dtw(spec, "one_to_one")
        want = brute_force_align(spec, "one_to_one")
        assert got.num_matches == 3
        assert not got.dropped_cols
        assert got.total_cost == pytest.approx(want.total_cost, abs=1e-9)

    def test_infeasible_without_drops(self):
        costs = np.zeros((2, 3))
        with pytest.raises(DataError):
            drop_dtw(CostSpec(costs, row_drop_cost=0.5, col_drop_cost=None), "one_to_one")

    def test_many_to_one_gapped_row(self):
        # a row may re-match after an interior column drop when that is cheaper
        costs = np.array([[-1.0, 1.0, -1.0]])
        corr = drop_dtw(CostSpec(costs, 0.0, 0.0), "many_to_one")
        assert corr.matches == [(0, 0), (0, 2)]
        assert corr.dropped_cols == {1}
        assert corr.total_cost == pytest.approx(-2.0)

    def test_traceback_consistency(self, rng):
        for _ in range(40):
            K, N = rng.integers(1, 6), rng.integers(1, 7)
            costs = rng.uniform(-1.0, 1.0, size=(K, N))
            drop = percentile_drop_cost(costs, 0.5)
            spec = CostSpec(costs, drop, drop)
            for mode in ("one_to_one", "many_to_one"):
                corr = drop_dtw(spec, mode)
                assert recompute_total(spec, corr) == corr.total_cost

    def test_drop_monotonicity(self, rng):
        # optimal drop count never increases as the uniform drop cost grows
        for _ in range(30):
            K, N = rng.integers(2, 6), rng.integers(2, 7)
            costs = rng.uniform(-1.0, 1.0, size=(K, N))
            for mode in ("one_to_one", "many_to_one"):
                previous = None
                for c in np.linspace(-0.5, 1.0, 5):
                    corr = drop_dtw(CostSpec(costs, float(c), float(c)), mode)
                    drops = len(corr.dropped_rows) + len(corr.dropped_cols)
                    if previous is not None:
                        assert drops <= previous
                    previous = drops

    def test_scale_invariance(self, rng):
        video = seq(rng.normal(size=(6, 4)))
        slots = seq(rng.normal(size=(3, 4)), "slots")
        base_costs = match_cost_matrix(video, slots)
        scaled_costs = match_cost_matrix(video.scaled(2.0), slots.scaled(0.25))
        np.testing.assert_array_equal(base_costs, scaled_costs)
        drop = percentile_drop_cost(base_costs, 0.8)
        a = drop_dtw(CostSpec(base_costs, drop, drop), "many_to_one")
        b = drop_dtw(CostSpec(scaled_costs, percentile_drop_cost(scaled_costs, 0.8), drop), "many_to_one")
        assert a.total_cost == b.total_cost
        np.testing.assert_array_equal(a.match_matrix, b.match_matrix)

    def test_all_returned_correspondences_valid(self, rng):
        # construction runs the invariant checker; just exercise many shapes
        for _ in range(25):
            K, N = rng.integers(1, 6), rng.integers(1, 7)
            costs = rng.uniform(-1.0, 1.0, size=(K, N))
            drop = percentile_drop_cost(costs, 0.8)
            for mode in ("one_to_one", "many_to_one"):
                corr = drop_dtw(CostSpec(costs, drop, drop), mode)
                assert corr.mode == mode


class TestDtw:
    def test_single_cell(self):
        corr = dtw(np.array([[0.7]]))
        assert corr.total_cost == pytest.approx(0.7)
        assert corr.matches == [(0, 0)]

    def test_diagonal_preferred(self):
        corr = dtw(np.array([[-1.0, 0.0], [0.0, -1.0]]))
        assert corr.matches == [(0, 0), (1, 1)]
        assert corr.total_cost == pytest.approx(-2.0)

    def test_matches_brute_force(self, rng):
        for _ in range(25):
            K, N = rng.integers(1, 5), rng.integers(1, 6)
            costs = rng.uniform(-1.0, 1.0, size=(K, N))
            assert dtw(costs).total_cost == pytest.approx(brute_force_dtw(costs), abs=1e-9)

    def test_boundary_to_boundary(self, rng):
        costs = rng.uniform(size=(3, 5))
        corr = dtw(costs)
        assert corr.match_matrix[0, 0] == 1 and corr.match_matrix[-1, -1] == 1
        assert not corr.dropped_rows and not corr.dropped_cols


class TestBruteForceTieBreaks:
    def test_prefer_matches_on_tie(self):
        spec = CostSpec(np.zeros((2, 2)), 0.0, 0.0)
        corr = brute_force_align(spec, "one_to_one")
        assert corr.matches == [(0, 0), (1, 1)]
        dp = drop_dtw(spec, "one_to_one")
        assert dp.matches == [(0, 0), (1, 1)]

    def test_single_cell_negative_match_kept(self):
        spec = CostSpec(np.array([[-0.2]]), 0.0, 0.0)
        corr = brute_force_align(spec, "one_to_one")
        assert corr.matches == [(0, 0)]

    def test_size_bound(self):
        with pytest.raises(DataError):
            brute_force_align(CostSpec(np.zeros((7, 3)), 0.0, 0.0), "one_to_one")
