import numpy as np
import pytest

from msseg import energy, ops
from msseg.energy import (
    EnergyParams,
    GradientOperator,
    LearnedOperator,
    ZeroOperator,
    boundary_penalty,
    boundary_subgradient,
    edge_weight,
    label_entropy,
    make_gaussian_kernel,
    perimeter_estimate,
    segmentation_energy,
    two_phase_labels,
)


def naive_blur(x2d, k):
    """Direct replicate-padded correlation oracle for one channel."""
    r = k.shape[0] // 2
    xp = np.pad(x2d, r, mode="edge")
    out = np.zeros_like(x2d)
    for i in range(x2d.shape[0]):
        for j in range(x2d.shape[1]):
            out[i, j] = np.sum(xp[i:i + k.shape[0], j:j + k.shape[1]] * k)
    return out


def disk_mask(size, radius):
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    c = (size - 1) / 2.0
    return ((xx - c) ** 2 + (yy - c) ** 2 <= radius * radius).astype(float)


def random_simplex(rng, n, h, w):
    v = rng.uniform(0.01, 1.0, size=(n, h, w))
    return v / v.sum(axis=0, keepdims=True)


class TestGaussianKernel:
    def test_near_delta_for_tiny_sigma(self):
        k = make_gaussian_kernel(0.2)
        assert k.values[k.radius, k.radius] > 0.99

    def test_normalized_and_symmetric(self):
        for sigma in (0.5, 1.0, 2.7):
            k = make_gaussian_kernel(sigma)
            assert k.radius == int(np.ceil(3 * sigma))
            assert abs(k.values.sum() - 1.0) < 1e-12
            assert np.array_equal(k.values, k.values[::-1, ::-1])
            assert k.values.min() >= 0.0

    def test_center_to_edge_ratio(self):
        # before normalization the sampled formula gives exp(0.5) for |x| = 1
        k = make_gaussian_kernel(1.0)
        c = k.radius
        assert k.values[c, c] / k.values[c, c + 1] == pytest.approx(np.exp(0.5), rel=1e-12)

    def test_rejects_nonpositive_sigma(self):
        with pytest.raises(ValueError):
            make_gaussian_kernel(0.0)


class TestBoundaryPenalty:
    def test_constant_one_hot_is_zero(self):
        v = np.zeros((3, 8, 8))
        v[1] = 1.0
        k = make_gaussian_kernel(1.5)
        assert boundary_penalty(v, k) == 0.0

    def test_uniform_closed_form(self):
        n, h, w = 4, 10, 12
        v = np.full((n, h, w), 1.0 / n)
        k = make_gaussian_kernel(2.0)
        expected = h * w * (1.0 - 1.0 / n)
        assert boundary_penalty(v, k, weight=1.0) == pytest.approx(expected, abs=1e-12)

    def test_matches_naive_convolution_oracle(self):
        rng = np.random.default_rng(0)
        v = random_simplex(rng, 2, 9, 9)
        e = rng.uniform(0.2, 1.0, size=(1, 9, 9))
        k = make_gaussian_kernel(1.0)
        expected = sum(
            np.sum(e[0] * v[n] * naive_blur(1.0 - v[n], k.values)) for n in range(2)
        )
        assert boundary_penalty(v, k, e, 1.7) == pytest.approx(1.7 * expected, rel=1e-12)

    def test_channel_permutation_invariance(self):
        rng = np.random.default_rng(1)
        v = random_simplex(rng, 3, 8, 8)
        k = make_gaussian_kernel(1.0)
        assert boundary_penalty(v, k) == pytest.approx(
            boundary_penalty(v[[2, 0, 1]], k), rel=1e-12
        )

    def test_disk_perimeter_trend(self):
        # estimate error shrinks from sigma=4 to sigma=2 and lands within 8%
        mask = disk_mask(128, 20)
        target = 2 * np.pi * 20
        err = [abs(perimeter_estimate(two_phase_labels(mask), s) - target)
               for s in (4.0, 2.0)]
        assert err[1] < err[0]
        assert err[1] / target < 0.08


class TestBoundarySubgradient:
    def test_half_labels_give_zero(self):
        v = np.full((2, 6, 6), 0.5)
        k = make_gaussian_kernel(1.0)
        assert np.abs(boundary_subgradient(v, k, 2.0)).max() < 1e-14

    def test_saturated_channel(self):
        v = np.zeros((2, 6, 6))
        v[0] = 1.0
        k = make_gaussian_kernel(1.0)
        p = boundary_subgradient(v, k, 3.0)
        assert np.abs(p[0] + 3.0).max() < 1e-12   # k sums to one
        assert np.abs(p[1] - 3.0).max() < 1e-12

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(2)
        v = random_simplex(rng, 3, 7, 7)
        k = make_gaussian_kernel(0.8)
        p = boundary_subgradient(v, k, 1.3)
        for n in range(3):
            assert np.allclose(p[n], 1.3 * naive_blur(1.0 - 2.0 * v[n], k.values), atol=1e-12)


class TestEntropy:
    def test_one_hot_is_zero(self):
        v = np.zeros((2, 5, 5))
        v[1] = 1.0
        assert label_entropy(v, 0.5) == 0.0

    def test_uniform_closed_form(self):
        n, h, w = 3, 6, 7
        v = np.full((n, h, w), 1.0 / n)
        assert label_entropy(v, 0.25) == pytest.approx(-0.25 * h * w * np.log(n), rel=1e-12)

    def test_matches_direct_sum_and_nonpositive(self):
        rng = np.random.default_rng(3)
        v = random_simplex(rng, 4, 6, 6)
        expected = 0.7 * float(np.sum(v * np.log(v)))
        assert label_entropy(v, 0.7) == pytest.approx(expected, rel=1e-12)
        assert label_entropy(v, 0.7) <= 0.0


class TestEdgeWeight:
    def test_constant_image(self):
        assert np.array_equal(edge_weight(np.full((1, 5, 5), 0.3), 2.0), np.ones((1, 5, 5)))

    def test_zero_slope(self):
        rng = np.random.default_rng(4)
        f = rng.normal(size=(1, 5, 5))
        assert np.array_equal(edge_weight(f, 0.0), np.ones((1, 5, 5)))

    def test_unit_step(self):
        f = np.zeros((1, 6, 6))
        f[0, :, 3:] = 1.0
        e = edge_weight(f, 1.0)
        assert np.allclose(e[0, :, 2], 0.5, atol=1e-14)   # forward difference = 1 there
        assert np.allclose(e[0, :, 0], 1.0, atol=1e-14)


class TestOperators:
    def test_linear_adjoints(self):
        rng = np.random.default_rng(5)
        for op in (ZeroOperator(), GradientOperator(), GradientOperator(spacing=2.0)):
            for _ in range(10):
                x = rng.normal(size=(2, 7, 6))
                w = rng.normal(size=(op.components, 2, 7, 6))
                lhs = np.sum(op.forward(x) * w)
                rhs = np.sum(x * op.adjoint(w))
                assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))

    def test_gradient_last_diff_zero(self):
        rng = np.random.default_rng(6)
        g = GradientOperator().forward(rng.normal(size=(1, 5, 5)))
        assert np.array_equal(g[0][:, -1, :], np.zeros((1, 5)))
        assert np.array_equal(g[1][:, :, -1], np.zeros((1, 5)))

    def test_learned_operator_shapes(self):
        rng = np.random.default_rng(7)
        k1 = ops.ConvKernel(rng.normal(size=(3, 2, 3, 3)), np.zeros(3))
        k2 = ops.ConvKernel(rng.normal(size=(2, 3, 3, 3)), np.zeros(2))
        op = LearnedOperator(k1, k2)
        x = rng.normal(size=(2, 6, 6))
        out = op.forward(x)
        assert out.shape == (1, 2, 6, 6)
        assert op.adjoint(out).shape == (2, 6, 6)


class TestSegmentationEnergy:
    def test_exact_zero_at_matched_one_hot(self):
        f = np.full((2, 6, 6), 0.4)
        v = np.zeros((2, 6, 6))
        v[0] = 1.0
        params = EnergyParams(smooth_weight=0.3, length_weight=0.8, entropy_weight=0.2)
        e = segmentation_energy(f.copy(), v, f, v, ZeroOperator(), params)
        assert e == 0.0

    def test_anchor_term_drops_at_anchor(self):
        rng = np.random.default_rng(8)
        v = random_simplex(rng, 2, 5, 5)
        u = rng.normal(size=(2, 5, 5))
        f = rng.normal(size=(2, 5, 5))
        params = EnergyParams()
        kernel = make_gaussian_kernel(params.kernel_sigma)
        full = segmentation_energy(u, v, f, v, GradientOperator(), params)
        # at labels == anchor the hyperplane term vanishes: energy equals
        # fit + smooth + entropy + plain boundary penalty
        v_rep = v
        fit = 0.5 * np.sum((f - u) ** 2 * v_rep)
        g = GradientOperator().forward(u)
        smooth = 0.5 * params.smooth_weight * np.sum((g * g).sum(axis=0) * v_rep)
        ent = label_entropy(v, params.entropy_weight)
        bnd = boundary_penalty(v, kernel, None, params.length_weight)
        assert full == pytest.approx(fit + smooth + ent + bnd, rel=1e-12)

    def test_matches_term_by_term_oracle(self):
        rng = np.random.default_rng(9)
        n, groups, h, w = 2, 3, 6, 5
        c = n * groups
        u = rng.normal(size=(c, h, w))
        f = rng.normal(size=(c, h, w))
        v = random_simplex(rng, n, h, w)
        a = random_simplex(rng, n, h, w)
        params = EnergyParams(smooth_weight=0.4, length_weight=0.9,
                              entropy_weight=0.3, kernel_sigma=1.0)
        kernel = make_gaussian_kernel(1.0)
        op = GradientOperator()

        # independent loop-based accumulation of the five terms
        fit = smooth = 0.0
        for ch in range(c):
            cls = ch // groups
            d = (f[ch] - u[ch]) ** 2
            gx = np.zeros((h, w)); gy = np.zeros((h, w))
            gx[:-1, :] = u[ch][1:, :] - u[ch][:-1, :]
            gy[:, :-1] = u[ch][:, 1:] - u[ch][:, :-1]
            fit += 0.5 * np.sum(d * v[cls])
            smooth += 0.5 * params.smooth_weight * np.sum((gx ** 2 + gy ** 2) * v[cls])
        hyper = const = 0.0
        for cls in range(n):
            slope = params.length_weight * naive_blur(1.0 - 2.0 * a[cls], kernel.values)
            hyper += np.sum(slope * (v[cls] - a[cls]))
            const += params.length_weight * np.sum(a[cls] * naive_blur(1.0 - a[cls], kernel.values))
        ent = params.entropy_weight * np.sum(v * np.log(v))
        expected = fit + smooth + hyper + ent + const

        got = segmentation_energy(u, v, f, a, op, params, kernel)
        assert got == pytest.approx(expected, rel=1e-11)

    def test_checkerboard_costs_more_than_constant(self):
        h = w = 8
        f = np.full((1, h, w), 0.5)
        v = np.full((1, h, w), 1.0)
        params = EnergyParams(smooth_weight=1.0, length_weight=0.0)
        checker = (np.indices((h, w)).sum(axis=0) % 2).astype(float)[None]
        e_flat = segmentation_energy(np.full((1, h, w), 0.5), v, f, v, GradientOperator(), params)
        e_osc = segmentation_energy(checker, v, f, v, GradientOperator(), params)
        assert e_osc > e_flat

    def test_shape_mismatch(self):
        params = EnergyParams()
        with pytest.raises(ValueError):
            segmentation_energy(np.zeros((2, 4, 4)), np.ones((1, 4, 4)),
                                np.zeros((2, 5, 5)), np.ones((1, 4, 4)),
                                ZeroOperator(), params)


class TestPerimeterEstimate:
    def test_disk_within_tolerance_and_monotone(self):
        mask = disk_mask(256, 40)
        labels = two_phase_labels(mask)
        target = 2 * np.pi * 40
        sigmas = (4.0, 2.0, 1.0)
        estimates = [perimeter_estimate(labels, s) for s in sigmas]
        # the estimate decreases monotonically as sigma shrinks ...
        assert estimates[0] > estimates[1] > estimates[2]
        # ... and every value sits within 8% of the true circumference
        for est in estimates:
            assert abs(est - target) / target < 0.08
