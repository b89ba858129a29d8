
import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kbrn.kernel import (
    KernelActivation,
    KernelDictionary,
    activate,
    activate_grad_coeffs,
    activate_grad_input,
    build_dictionary_uniform,
    covering_dictionary,
    dictionary_from_samples,
    fit_centers_kmeans_1d,
    gaussian_kernel,
    gram_matrix,
    init_coeffs_mimic,
    kmeans_objective,
    mimic_grid,
    smoothness_penalty,
    smoothness_penalty_grad,
)
from kbrn.mathcore import ShapeError, make_rng

from conftest import brute_force_kmeans


def random_activation(rng, K=5):
    centers = np.sort(rng.uniform(-3, 3, K))
    return KernelActivation(KernelDictionary(centers, rng.uniform(0.5, 1.5)), rng.uniform(-3, 3, K))


class TestKernel:
    def test_zero_distance(self):
        assert gaussian_kernel(0.7, 0.7, 0.3) == 1.0

    def test_symmetry(self):
        assert gaussian_kernel(1.5, 1.0, 0.8) == gaussian_kernel(0.5, 1.0, 0.8)

    def test_against_arbitrary_precision(self):
        mp.mp.dps = 30
        assert abs(gaussian_kernel(1, 0, 1) - float(mp.exp(mp.mpf(-1) / 2))) < 1e-15
        assert abs(gaussian_kernel(1, 0, 1) - 0.606531) < 1e-6

    def test_rejects_bad_bandwidth(self):
        with pytest.raises(ValueError):
            gaussian_kernel(0, 0, 0)


class TestActivate:
    def test_zero_coeffs(self):
        act = KernelActivation(build_dictionary_uniform(-1, 1, 4, 0.5), np.zeros(4))
        np.testing.assert_array_equal(activate(act, np.linspace(-5, 5, 11)), 0.0)

    def test_single_center(self):
        act = KernelActivation(KernelDictionary([0.3], 1.0), [1.0])
        assert activate(act, 0.3) == 1.0

    def test_two_centers(self):
        act = KernelActivation(KernelDictionary([-1.0, 1.0], 1.0), [1.0, 1.0])
        mp.mp.dps = 30
        expected = float(2 * mp.exp(mp.mpf(-1) / 2))
        assert abs(activate(act, 0.0) - expected) < 1e-15
        assert abs(activate(act, 0.0) - 1.213061) < 1e-6

    def test_coefficient_shape_checked(self):
        with pytest.raises(ShapeError):
            KernelActivation(KernelDictionary([0.0, 1.0], 1.0), [1.0])

    def test_dictionary_invariants(self):
        with pytest.raises(ValueError):
            KernelDictionary([0.0, 0.0], 1.0)
        with pytest.raises(ValueError):
            KernelDictionary([1.0, 0.0], 1.0)
        with pytest.raises(ValueError):
            KernelDictionary([0.0], -1.0)


class TestDerivatives:
    def test_peak_and_zero(self):
        act = KernelActivation(KernelDictionary([0.4], 0.7), [2.0])
        assert activate_grad_input(act, 0.4) == 0.0
        act0 = KernelActivation(build_dictionary_uniform(-1, 1, 3, 1.0), np.zeros(3))
        assert activate_grad_input(act0, 0.2) == 0.0

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(-3, 3))
    def test_input_grad_matches_central_difference(self, seed, a):
        act = random_activation(make_rng(seed))
        eps = 1e-5
        fd = (activate(act, a + eps) - activate(act, a - eps)) / (2 * eps)
        an = activate_grad_input(act, a)
        assert abs(an - fd) <= 1e-6 * max(abs(an), abs(fd), 1e-3)

    def test_coeff_grad_entries(self):
        d = build_dictionary_uniform(-2, 2, 5, 0.8)
        act = KernelActivation(d, make_rng(0).uniform(-1, 1, 5))
        g = activate_grad_coeffs(act, d.centers[2])
        assert g[2] == 1.0
        assert np.all((g > 0) & (g <= 1))
        # kappa decays with distance from the evaluation point
        assert g[2] > g[1] > g[0] and g[2] > g[3] > g[4]

    def test_coeff_grad_consistency_identity(self):
        rng = make_rng(4)
        for _ in range(20):
            act = random_activation(rng)
            a = rng.uniform(-3, 3)
            assert abs(activate_grad_coeffs(act, a) @ act.coeffs - activate(act, a)) < 1e-12


class TestProperties:
    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(-50, 50))
    def test_bounded(self, seed, a):
        act = random_activation(make_rng(seed))
        assert abs(activate(act, a)) <= np.abs(act.coeffs).sum() + 1e-12

    def test_gaussian_tail_decay(self):
        rng = make_rng(7)
        for _ in range(20):
            act = random_activation(rng)
            d = act.dictionary
            far = d.centers[-1] + 20 * d.bandwidth
            assert abs(activate(act, far)) <= 1e-10 * np.abs(act.coeffs).sum()
            assert abs(activate(act, d.centers[0] - 20 * d.bandwidth)) <= 1e-10 * np.abs(act.coeffs).sum()

    def test_alternating_coefficients_are_not_monotone(self):
        d = build_dictionary_uniform(-2, 2, 5, 1.0)
        act = KernelActivation(d, [1, -1, 1, -1, 1])
        slopes = activate_grad_input(act, np.linspace(d.centers[0], d.centers[-1], 401))
        assert slopes.min() < 0 < slopes.max()


class TestUniformDictionary:
    def test_midpoint(self):
        np.testing.assert_array_equal(build_dictionary_uniform(-1, 1, 3, 1).centers, [-1, 0, 1])

    def test_endpoints(self):
        np.testing.assert_array_equal(build_dictionary_uniform(0, 1, 2, 1).centers, [0, 1])

    def test_spacing(self):
        np.testing.assert_allclose(np.diff(build_dictionary_uniform(-2, 2, 5, 1).centers), 1.0)

    @pytest.mark.parametrize("lo,hi,K", [(1, 1, 3), (2, 1, 3), (0, 1, 1)])
    def test_errors(self, lo, hi, K):
        with pytest.raises(ValueError):
            build_dictionary_uniform(lo, hi, K, 1.0)


class TestKMeans:
    def test_constant_data(self):
        np.testing.assert_array_equal(fit_centers_kmeans_1d([5, 5, 5, 5], 1), [5])

    def test_two_point_masses(self):
        np.testing.assert_allclose(fit_centers_kmeans_1d([0, 0, 10, 10], 2), [0, 10])

    def test_too_many_clusters(self):
        with pytest.raises(ValueError):
            fit_centers_kmeans_1d([1, 1, 2], 3)

    def test_matches_brute_force(self):
        rng = make_rng(11)
        for _ in range(100):
            n = int(rng.integers(3, 8, endpoint=True))
            x = rng.normal(0, 2, n)
            K = int(rng.integers(1, 3, endpoint=True))
            c = fit_centers_kmeans_1d(x, K, rng=rng)
            assert np.all(np.diff(c) > 0)
            assert abs(kmeans_objective(x, c) - brute_force_kmeans(x, K)) < 1e-9

    def test_large_sample_is_subsampled_and_sorted(self):
        rng = make_rng(3)
        x = np.concatenate([rng.normal(-3, 0.1, 8000), rng.normal(3, 0.1, 8000)])
        c = fit_centers_kmeans_1d(x, 2, rng=rng)
        np.testing.assert_allclose(c, [-3, 3], atol=0.05)

    def test_dictionary_from_samples_bandwidth_rule(self):
        rng = make_rng(0)
        d = dictionary_from_samples(rng.normal(size=500), 6, spread=1.5, rng=rng)
        assert d.bandwidth == pytest.approx(1.5 * np.mean(np.diff(d.centers)))

    def test_degenerate_samples_fall_back_to_uniform(self):
        d = dictionary_from_samples([2.0, 2.0, 3.0], 4)
        np.testing.assert_allclose(d.centers, np.linspace(2, 3, 4))
        d = dictionary_from_samples([1.0, 1.0], 3)
        np.testing.assert_allclose(d.centers, [-1, 0, 1])


class TestMimic:
    def test_zero_target(self):
        d = build_dictionary_uniform(-2, 2, 7, 0.7)
        np.testing.assert_array_equal(init_coeffs_mimic(d, "zero", 50, 1e-3), np.zeros(7))

    def test_tanh_fit(self):
        d = covering_dictionary(-3, 3, 15)
        assert d.bandwidth == pytest.approx(np.diff(d.centers)[0])
        grid = mimic_grid(d, 200)
        assert grid[0] == pytest.approx(-3) and grid[-1] == pytest.approx(3)
        act = KernelActivation(d, init_coeffs_mimic(d, "tanh", 200, 1e-6))
        assert np.max(np.abs(activate(act, grid) - np.tanh(grid))) < 0.01

    def test_sin_fit(self):
        d = covering_dictionary(-np.pi, np.pi, 15)
        act = KernelActivation(d, init_coeffs_mimic(d, "sin", 200, 1e-6))
        grid = mimic_grid(d, 200)
        assert np.mean((activate(act, grid) - np.sin(grid)) ** 2) < 1e-3

    def test_singular_without_ridge_is_reported(self):
        d = build_dictionary_uniform(-1, 1, 30, 2.0)
        with pytest.raises(np.linalg.LinAlgError, match="ridge"):
            init_coeffs_mimic(d, "tanh", 40, 0.0)

    def test_grid_must_cover_coefficients(self):
        with pytest.raises(ValueError):
            init_coeffs_mimic(build_dictionary_uniform(-1, 1, 10, 0.3), "tanh", 5)


class TestSmoothness:
    def test_zero_and_scalar(self):
        d = build_dictionary_uniform(-1, 1, 3, 1)
        assert smoothness_penalty(KernelActivation(d, np.zeros(3)), gram_matrix(d)) == 0
        d1 = KernelDictionary([0.0], 1.0)
        assert smoothness_penalty(KernelActivation(d1, [2.0]), gram_matrix(d1)) == 4.0
        np.testing.assert_array_equal(
            smoothness_penalty_grad(KernelActivation(d1, [3.0]), gram_matrix(d1)), [6.0])
        np.testing.assert_array_equal(
            smoothness_penalty_grad(KernelActivation(d, np.zeros(3)), gram_matrix(d)), 0.0)

    def test_double_sum_oracle(self):
        rng = make_rng(5)
        act = random_activation(rng, K=4)
        c, g, a = act.dictionary.centers, act.dictionary.bandwidth, act.coeffs
        direct = sum(a[j] * a[k] * gaussian_kernel(c[j], c[k], g) for j in range(4) for k in range(4))
        assert abs(smoothness_penalty(act, gram_matrix(act.dictionary)) - direct) < 1e-12

    def test_gram_psd_symmetric_unit_diagonal(self):
        rng = make_rng(6)
        act = random_activation(rng, K=8)
        G = gram_matrix(act.dictionary)
        np.testing.assert_array_equal(G, G.T)
        np.testing.assert_array_equal(np.diag(G), 1.0)
        assert np.linalg.eigvalsh(G).min() >= -1e-10
        for _ in range(1000):
            alpha = rng.normal(size=8)
            assert smoothness_penalty(KernelActivation(act.dictionary, alpha), G) >= -1e-10

    def test_grad_matches_finite_difference(self):
        rng = make_rng(8)
        act = random_activation(rng, K=5)
        G = gram_matrix(act.dictionary)
        an = smoothness_penalty_grad(act, G)
        eps = 1e-5
        for k in range(5):
            up, dn = act.coeffs.copy(), act.coeffs.copy()
            up[k] += eps
            dn[k] -= eps
            fd = (smoothness_penalty(KernelActivation(act.dictionary, up), G)
                  - smoothness_penalty(KernelActivation(act.dictionary, dn), G)) / (2 * eps)
            assert abs(an[k] - fd) <= 1e-7 * max(abs(an[k]), 1.0)

    def test_shape_mismatch(self):
        d = build_dictionary_uniform(-1, 1, 3, 1)
        with pytest.raises(ShapeError):
            smoothness_penalty(KernelActivation(d, np.ones(3)), np.eye(2))
