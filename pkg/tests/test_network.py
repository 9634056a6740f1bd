import numpy as np
import pytest

from msseg import network, ops
from msseg.network import (
    block_forward_arrays,
    backward,
    forward,
    gradient_check,
    head_forward,
    init_params,
    parameter_breakdown,
    parameter_count,
)


class TestInit:
    def test_deterministic_in_seed(self):
        a = init_params(seed=7, features=2, classes=2, grids=2)
        b = init_params(seed=7, features=2, classes=2, grids=2)
        for (na, va), (nb, vb) in zip(a.flatten().items(), b.flatten().items()):
            assert na == nb
            assert np.array_equal(va, vb)
        c = init_params(seed=8, features=2, classes=2, grids=2)
        assert not np.array_equal(a.head.weights, c.head.weights)

    def test_default_shapes_c16(self):
        # C = I*N = 16 with N = 2 -> head produces I = 8 channels
        p = init_params(seed=0, features=8, classes=2, grids=3)
        assert p.head.weights.shape == (8, 1, 3, 3)
        assert p.channels == 16
        assert p.levels[0].down.reg1.weights.shape == (16, 16, 3, 3)
        assert p.levels[0].restrict.weights.shape == (16, 16, 3, 3)
        assert p.tail1.weights.shape == (16, 16, 3, 3)
        assert p.tail2.weights.shape == (2, 16, 3, 3)

    def test_initial_scalars(self):
        p = init_params(seed=0, features=2, classes=2, grids=1)
        b = p.levels[0].down
        assert float(b.smooth_weight) == 0.5
        assert float(b.length_weight) == 0.5
        assert float(b.log_inv_temp) == pytest.approx(np.log(10.0))
        assert float(b.step_size) == 0.1
        assert np.all(p.head.bias == 0.0)

    def test_weight_sample_statistics(self):
        # uniform on [-a, a] with a = sqrt(6/(fan_in+fan_out)): mean 0,
        # sd a/sqrt(3); check the sample mean within 3 standard errors
        p = init_params(seed=3, features=8, classes=2, grids=3)
        draws = np.concatenate([
            v.ravel() for k, v in p.flatten().items()
            if k.endswith(".w") and "reg" in k
        ])
        assert draws.size > 10_000
        a = np.sqrt(6.0 / (16 * 9 + 16 * 9))
        se = (a / np.sqrt(3.0)) / np.sqrt(draws.size)
        assert abs(draws.mean()) < 3 * se

    def test_rejects_bad_hyper(self):
        with pytest.raises(ValueError):
            init_params(seed=0, features=0)


class TestHead:
    def test_zero_input_zero_bias(self):
        p = init_params(seed=1, features=3, classes=2, grids=1)
        out = head_forward(np.zeros((1, 8, 8)), p)
        assert np.array_equal(out, np.zeros((6, 8, 8)))

    def test_channel_count_and_stacking(self):
        p = init_params(seed=2, features=3, classes=2, grids=1)
        rng = np.random.default_rng(0)
        img = rng.uniform(size=(1, 8, 8))
        out = head_forward(img, p)
        assert out.shape == (6, 8, 8)
        direct = ops.conv2d(img, p.head, 1, ops.SAME_ZERO)
        assert np.array_equal(out[:3], direct)
        assert np.array_equal(out[3:], direct)


class TestBlock:
    def test_zero_step_keeps_u(self):
        p = init_params(seed=4, features=2, classes=2, grids=1)
        block = p.levels[0].down
        block.step_size[()] = 0.0
        rng = np.random.default_rng(1)
        u = rng.normal(size=(4, 8, 8))
        v = np.full((2, 8, 8), 0.5)
        f = rng.normal(size=(4, 8, 8))
        u2, _ = block_forward_arrays(u, v, f, block, classes=2)
        assert np.array_equal(u2, u)

    def test_zero_kernels_matched_u_gives_uniform(self):
        p = init_params(seed=5, features=2, classes=3, grids=1)
        block = p.levels[0].down
        block.reg1.weights[:] = 0.0
        block.reg2.weights[:] = 0.0
        block.label_kernel[:] = 0.0
        rng = np.random.default_rng(2)
        f = rng.normal(size=(6, 8, 8))
        v = np.full((3, 8, 8), 1.0 / 3.0)
        _, v2 = block_forward_arrays(f.copy(), v, f, block, classes=3)
        assert np.allclose(v2, 1.0 / 3.0, atol=1e-12)

    def test_matches_straight_line_oracle(self):
        """Re-derive one block step with plain numpy calls."""
        p = init_params(seed=6, features=2, classes=2, grids=1)
        block = p.levels[0].down
        rng = np.random.default_rng(3)
        u = rng.normal(size=(4, 6, 6))
        v = rng.uniform(0.2, 0.8, size=(2, 6, 6))
        v = v / v.sum(axis=0, keepdims=True)
        f = rng.normal(size=(4, 6, 6))

        lam = float(block.smooth_weight)
        alpha = float(block.length_weight)
        dt = float(block.step_size)
        inv_temp = float(np.exp(block.log_inv_temp))

        def L(z):
            return ops.conv2d(ops.relu(ops.conv2d(z, block.reg1)), block.reg2)

        def Lt(z):
            a = ops.transpose_conv2d(z, block.reg2)
            return ops.transpose_conv2d(ops.relu(a), block.reg1)

        v_rep = np.repeat(v, 2, axis=0)
        au = v_rep * u + lam * Lt(v_rep * L(u))
        u_next = u + dt * (f * v_rep - au)
        lu = L(u_next)
        data = -0.5 * (f - u_next) ** 2 - 0.5 * lam * lu * lu
        logits = data.reshape(2, 2, 6, 6).sum(axis=1)
        logits = logits - alpha * ops.convolve_channels(1.0 - 2.0 * v, block.label_kernel,
                                                        ops.SAME_ZERO)
        expected_v = ops.channel_softmax(logits * inv_temp)

        got_u, got_v = block_forward_arrays(u, v, f, block, classes=2)
        assert np.allclose(got_u, u_next, atol=1e-12)
        assert np.allclose(got_v, expected_v, atol=1e-12)


class TestForward:
    def test_output_is_label_field(self):
        p = init_params(seed=0, features=2, classes=3, grids=2)
        rng = np.random.default_rng(4)
        out, _ = forward(rng.uniform(size=(1, 12, 12)), p)
        assert out.shape == (3, 12, 12)
        assert out.min() >= 0.0 and out.max() <= 1.0
        assert np.abs(out.sum(axis=0) - 1.0).max() < 1e-12

    def test_deterministic(self):
        p = init_params(seed=0, features=2, classes=2, grids=3)
        rng = np.random.default_rng(5)
        img = rng.uniform(size=(1, 17, 19))
        a, _ = forward(img, p)
        b, _ = forward(img.copy(), p)
        assert np.array_equal(a, b)

    def test_single_grid_equals_block_composition(self):
        p = init_params(seed=9, features=2, classes=2, grids=1)
        rng = np.random.default_rng(6)
        img = rng.uniform(size=(1, 10, 10))
        out, _ = forward(img, p)

        feats = head_forward(img, p)
        v0 = np.full((2, 10, 10), 0.5)
        _, v1 = block_forward_arrays(feats, v0, feats, p.levels[0].down, classes=2)
        stack = np.repeat(v1, 2, axis=0)
        t = ops.relu(ops.conv2d(stack, p.tail1))
        logits = ops.conv2d(t, p.tail2)
        expected = ops.channel_softmax(logits)
        assert np.allclose(out, expected, atol=1e-13)

    def test_trace_replay_bit_identical(self):
        p = init_params(seed=1, features=2, classes=2, grids=2)
        rng = np.random.default_rng(7)
        out, trace = forward(rng.uniform(size=(1, 16, 16)), p)
        assert np.array_equal(trace.replay(), out)

    def test_too_small_image_names_max_grids(self):
        p = init_params(seed=1, features=2, classes=2, grids=6)
        with pytest.raises(ValueError, match="at most"):
            forward(np.zeros((1, 8, 8)), p)

    def test_tail_bias_shift_leaves_output_unchanged(self):
        p = init_params(seed=2, features=2, classes=2, grids=1)
        rng = np.random.default_rng(8)
        img = rng.uniform(size=(1, 8, 8))
        a, _ = forward(img, p)
        p.tail2.bias += 3.7          # same shift on every class logit
        b, _ = forward(img, p)
        assert np.abs(a - b).max() < 1e-12


class TestBackward:
    def test_zero_loss_grad_gives_zero_grads(self):
        p = init_params(seed=3, features=2, classes=2, grids=2)
        rng = np.random.default_rng(9)
        out, trace = forward(rng.uniform(size=(1, 16, 16)), p)
        grads = backward(trace, np.zeros_like(out))
        assert all(np.all(g == 0.0) for g in grads.values())

    def test_unused_level_params_get_exact_zero(self):
        # grids=1 never touches the up-block or the restriction kernel
        p = init_params(seed=4, features=2, classes=2, grids=1)
        rng = np.random.default_rng(10)
        out, trace = forward(rng.uniform(size=(1, 8, 8)), p)
        grads = backward(trace, rng.normal(size=out.shape))
        assert np.all(grads["level0.up.reg1.w"] == 0.0)
        assert np.all(grads["level0.restrict.w"] == 0.0)
        assert np.any(grads["level0.down.reg1.w"] != 0.0)

    def test_loss_grad_shape_checked(self):
        p = init_params(seed=5, features=2, classes=2, grids=1)
        out, trace = forward(np.zeros((1, 8, 8)), p)
        with pytest.raises(ValueError, match="shape"):
            backward(trace, np.zeros((3, 8, 8)))

    def test_finite_difference_gradcheck(self):
        assert gradient_check(seed=0, size=12) < 1e-4


class TestParameterCount:
    def test_count_matches_manual_sum(self):
        p = init_params(seed=0, features=8, classes=2, grids=3)
        c = 16
        conv = c * c * 9 + c
        block = 2 * conv + 9 + 4
        level = 2 * block + conv
        head = 8 * 1 * 9 + 8
        tail = conv + (2 * c * 9 + 2)
        assert parameter_count(p) == head + 3 * level + tail

    def test_default_network_under_half_million(self):
        p = init_params(seed=0, features=8, classes=2, grids=3)
        assert parameter_count(p) < 500_000
        breakdown = parameter_breakdown(p)
        assert sum(breakdown.values()) == parameter_count(p)
