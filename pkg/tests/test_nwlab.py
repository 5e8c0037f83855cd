"""Kernel regression: estimator identities, convexity, bandwidth selection
and the fast variants of the statistical experiments."""

import numpy as np
import pytest

from elliptical.estimators import (
    estimate_consistent,
    linear_function,
    piecewise_step,
    separable_sinusoid,
    sparse_sinusoid,
)
from elliptical.metric import apply_scaling, identity_weights
from elliptical.numerics import ParameterError, make_rng, softmax_rows
from elliptical.nwlab import (
    EdgeConfig,
    MSEReport,
    NWDataset,
    SparseMSEConfig,
    check_lipschitz_transfer,
    cross_validate_bandwidth,
    nw_estimate,
    nw_estimate_batch,
    nw_predictor,
    run_edge_preservation_experiment,
    run_sparse_mse_experiment,
    sample_dataset,
)


def _toy_dataset(rng, n=40, dim=2, noise=0.1):
    truth = separable_sinusoid(np.ones(dim), np.ones(dim))
    return sample_dataset(truth, n, noise, rng)


class TestNWEstimate:
    def test_single_sample_returns_its_value(self):
        truth = linear_function(np.eye(2))
        data = NWDataset(np.array([[0.3, -0.4]]), np.array([[5.0, 7.0]]), truth, 0.0)
        out = nw_estimate([10.0, 10.0], data, bandwidth=0.5, w=identity_weights(2))
        np.testing.assert_array_equal(out, [5.0, 7.0])

    def test_equidistant_query_returns_midpoint(self):
        truth = linear_function(np.eye(2))
        data = NWDataset(
            np.array([[1.0, 0.0], [-1.0, 0.0]]),
            np.array([[2.0, 0.0], [4.0, 2.0]]),
            truth,
            0.0,
        )
        out = nw_estimate([0.0, 0.7], data, 0.8, identity_weights(2))
        np.testing.assert_allclose(out, [3.0, 1.0], atol=1e-12)

    def test_three_point_hand_case_matches_direct_summation(self):
        keys = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]])
        values = np.array([[1.0], [2.0], [-1.0]])
        truth = linear_function(np.zeros((1, 2)))
        data = NWDataset(keys, values, truth, 0.0)
        q = np.array([0.25, 0.5])
        got = nw_estimate(q, data, 1.0, identity_weights(2))
        weights = np.exp(-np.sum((q - keys) ** 2, axis=1) / 2.0)
        expected = (weights / weights.sum()) @ values
        np.testing.assert_allclose(got, expected, atol=1e-12)

    def test_output_is_convex_combination(self):
        rng = make_rng(0)
        data = _toy_dataset(rng)
        queries = rng.uniform(-3, 3, (50, 2))
        preds = nw_estimate_batch(queries, data, 0.4, identity_weights(2))
        lo = data.values.min(axis=0) - 1e-12
        hi = data.values.max(axis=0) + 1e-12
        assert np.all(preds >= lo) and np.all(preds <= hi)

    def test_matches_attention_softmax_on_unit_norm_keys(self):
        rng = make_rng(1)
        keys = rng.standard_normal((12, 3))
        keys /= np.linalg.norm(keys, axis=1, keepdims=True)
        values = rng.standard_normal((12, 2))
        truth = linear_function(np.zeros((2, 3)))
        data = NWDataset(keys, values, truth, 0.0)
        sigma2 = 0.9
        q = rng.standard_normal(3)
        kernel_out = nw_estimate(q, data, np.sqrt(sigma2), identity_weights(3))
        attn = softmax_rows((q @ keys.T / sigma2)[None, :])
        np.testing.assert_allclose(kernel_out, (attn @ values)[0], atol=1e-9)

    def test_empty_dataset_rejected(self):
        truth = linear_function(np.eye(2))
        empty = NWDataset(np.zeros((0, 2)), np.zeros((0, 2)), truth, 0.0)
        with pytest.raises(ParameterError):
            nw_estimate([0.0, 0.0], empty, 0.5, identity_weights(2))

    def test_bad_bandwidth_rejected(self):
        data = _toy_dataset(make_rng(2))
        with pytest.raises(ParameterError):
            nw_estimate([0.0, 0.0], data, 0.0, identity_weights(2))

    def test_predictor_wrapper_matches_batch(self):
        rng = make_rng(3)
        data = _toy_dataset(rng)
        queries = rng.uniform(-2, 2, (9, 2))
        pred = nw_predictor(data, 0.5, identity_weights(2))
        np.testing.assert_array_equal(
            pred(queries), nw_estimate_batch(queries, data, 0.5, identity_weights(2))
        )

    def test_consistent_estimator_composes_with_predictor(self):
        rng = make_rng(4)
        data = _toy_dataset(rng, n=100, noise=0.05)
        pred = nw_predictor(data, 0.3, identity_weights(2))
        est = estimate_consistent(pred, rng.uniform(-2, 2, (64, 2)), t=0.1)
        assert est.raw.shape == (2,)
        assert np.all(est.raw >= 0.0)


class TestBandwidthSelection:
    def test_picks_reasonable_bandwidth_for_smooth_truth(self):
        rng = make_rng(5)
        truth = separable_sinusoid([1.0], [1])
        data = sample_dataset(truth, 200, 0.1, rng)
        bw = cross_validate_bandwidth(data, identity_weights(1))
        assert 0.05 <= bw <= 2.0
        # far-too-small and far-too-large bandwidths must lose to the pick
        assert bw not in (0.05, 2.0)

    def test_more_data_at_fixed_bandwidth_does_not_hurt(self):
        truth = sparse_sinusoid(2, [0], [1.0], [1])
        w = identity_weights(2)
        bandwidth = 0.4
        small, big = [], []
        for s in range(8):
            rng_s = make_rng(100 + s)
            d_small = sample_dataset(truth, 100, 0.2, rng_s)
            d_big = sample_dataset(truth, 400, 0.2, rng_s)
            q = rng_s.uniform(-np.pi, np.pi, (200, 2))
            target = truth(q)
            small.append(np.mean((nw_estimate_batch(q, d_small, bandwidth, w) - target) ** 2))
            big.append(np.mean((nw_estimate_batch(q, d_big, bandwidth, w) - target) ** 2))
        small, big = np.asarray(small), np.asarray(big)
        pooled = np.hypot(small.std(ddof=1), big.std(ddof=1)) / np.sqrt(len(small))
        assert big.mean() <= small.mean() + 2.0 * pooled


class TestSparseExperiment:
    def test_constant_truth_zero_noise_gives_zero_mse(self):
        truth = piecewise_step((0.7,), (0.7,), dim=3)
        cfg = SparseMSEConfig(
            truth=truth, n=60, n_queries=40, noise_std=0.0, seeds=5,
            weights_source="consistent",
        )
        res = run_sparse_mse_experiment(cfg)
        assert res.euclidean.mse == pytest.approx(0.0, abs=1e-20)
        assert res.elliptical.mse == pytest.approx(0.0, abs=1e-20)

    def test_sparse_truth_small_config_direction(self):
        truth = sparse_sinusoid(4, [0], [1.0], [2])
        cfg = SparseMSEConfig(truth=truth, n=250, n_queries=200, seeds=6, seed=1)
        res = run_sparse_mse_experiment(cfg, jobs=2)
        assert res.elliptical.mse < res.euclidean.mse
        assert res.p_value_less < 0.05

    def test_report_validation(self):
        with pytest.raises(ParameterError):
            MSEReport("x", 0.5, 10, -1.0, 10, 0.1)
        with pytest.raises(ParameterError):
            MSEReport("x", 0.5, 10, 1.0, 3, 0.1)

    def test_thread_fanout_does_not_change_results(self):
        truth = sparse_sinusoid(3, [0], [1.0], [1])
        cfg = SparseMSEConfig(truth=truth, n=120, n_queries=60, seeds=5, seed=3)
        serial = run_sparse_mse_experiment(cfg, jobs=1)
        fanned = run_sparse_mse_experiment(cfg, jobs=3)
        np.testing.assert_array_equal(
            serial.per_seed_euclidean, fanned.per_seed_euclidean
        )
        np.testing.assert_array_equal(
            serial.per_seed_elliptical, fanned.per_seed_elliptical
        )


class TestEdgeExperiment:
    def test_pure_neighborhoods_recover_piece_distance(self):
        cfg = EdgeConfig(
            n=200, noise_std=0.0, seeds=5, query_offset=0.6,
            bandwidth_grid=(0.05,), est_points=500,
        )
        res = run_edge_preservation_experiment(cfg)
        assert res.piece_distance == pytest.approx(np.sqrt(2.0), abs=1e-12)
        assert res.euclidean_mean == pytest.approx(res.piece_distance, abs=1e-6)
        assert res.elliptical_mean == pytest.approx(res.piece_distance, abs=1e-6)

    def test_small_config_direction(self):
        cfg = EdgeConfig(n=150, seeds=6, seed=2, est_points=800)
        res = run_edge_preservation_experiment(cfg, jobs=2)
        assert res.elliptical_mean >= res.euclidean_mean

    def test_weight_swap_swaps_outcomes(self):
        # plumbing sanity: the per-seed helper is symmetric in its weights
        from elliptical.nwlab import _edge_distance

        rng = make_rng(6)
        truth = piecewise_step((1.0, 0.0), (0.0, 1.0), coord=0, dim=2)
        data = sample_dataset(truth, 100, 0.2, rng, -1.0, 1.0)
        w_a = identity_weights(2)
        w_b = apply_scaling([1.0, 0.01], "maxscale")
        q1, q2 = np.array([-0.3, 0.0]), np.array([0.3, 0.0])
        d_ab = (
            _edge_distance(data, w_a, 0.2, q1, q2),
            _edge_distance(data, w_b, 0.2, q1, q2),
        )
        d_ba = (
            _edge_distance(data, w_b, 0.2, q1, q2),
            _edge_distance(data, w_a, 0.2, q1, q2),
        )
        assert d_ab == (d_ba[1], d_ba[0])


class TestLipschitzTransfer:
    def test_linear_function_never_violates(self):
        rng = make_rng(7)
        a = rng.standard_normal((3, 4))
        f = linear_function(a)
        w = apply_scaling(rng.uniform(0.1, 1.0, 4), "maxscale")
        assert check_lipschitz_transfer(f, w, 5000, rng) <= 0.0

    def test_sine_function_never_violates(self):
        rng = make_rng(8)
        f = separable_sinusoid([1.0, 0.0], [1, 1])
        w = apply_scaling([1.0, 0.3], "maxscale")
        assert check_lipschitz_transfer(f, w, 10_000, rng) <= 0.0

    def test_coincident_pairs_are_benign(self):
        f = linear_function(np.eye(2))

        class _ZeroRng:
            def uniform(self, lo, hi, shape):
                return np.zeros(shape)

        assert check_lipschitz_transfer(f, identity_weights(2), 10, _ZeroRng()) <= 0.0

    def test_requires_gradient_bounds(self):
        f = piecewise_step((0.0,), (1.0,), dim=2)
        with pytest.raises(ParameterError):
            check_lipschitz_transfer(f, identity_weights(2), 10, make_rng(9))
