import numpy as np
import pytest

from psgdkit.errors import ContractViolationError
from psgdkit.problems import (
    ParamBlock,
    ParamLayout,
    make_addition_rnn,
    make_quadratic,
    make_rosenbrock,
    make_xor_mlp,
)
from psgdkit.verify import gradient_selfcheck


class TestParamLayout:
    def test_flatten_unflatten_round_trip(self):
        layout = ParamLayout([
            ParamBlock("w1", (3, 2), augmented=True),
            ParamBlock("v", (4,)),
            ParamBlock("w2", (1, 4), augmented=True),
        ])
        rng = np.random.default_rng(0)
        theta = rng.standard_normal(layout.size)
        np.testing.assert_array_equal(layout.flatten(layout.unflatten(theta)), theta)

    def test_unflatten_flatten_round_trip(self):
        layout = ParamLayout([ParamBlock("a", (2, 2)), ParamBlock("b", (3,))])
        tensors = [np.arange(4.0).reshape(2, 2), np.arange(3.0)]
        out = layout.unflatten(layout.flatten(tensors))
        for a, b in zip(out, tensors):
            np.testing.assert_array_equal(a, b)

    def test_shape_mismatch(self):
        layout = ParamLayout([ParamBlock("a", (2, 2))])
        with pytest.raises(ContractViolationError):
            layout.flatten([np.zeros((3, 2))])


class TestQuadratic:
    def test_gradient_example(self):
        prob = make_quadratic(np.diag([2.0, -5.0]))
        ev = prob.bind_batch(0)
        np.testing.assert_allclose(ev.grad(np.array([1.0, 1.0])), [2.0, -5.0])

    def test_differencing_is_exact(self):
        prob = make_quadratic(np.diag([2.0, -5.0]))
        ev = prob.bind_batch(0)
        rng = np.random.default_rng(1)
        theta = rng.standard_normal(2)
        dt = 1e-3 * rng.standard_normal(2)
        np.testing.assert_allclose(ev.grad(theta + dt) - ev.grad(theta),
                                   ev.hvp(theta, dt), rtol=1e-12, atol=1e-15)

    def test_gradient_is_affine_in_theta_per_batch(self):
        # same-batch identity: grad(theta) - grad(0) = H_hat theta
        prob = make_quadratic(np.diag([1.0, 2.0, 3.0]), noise_scale=0.5)
        rng = np.random.default_rng(2)
        for seed in (1, 2, 3):
            ev = prob.bind_batch(seed)
            theta = rng.standard_normal(3)
            np.testing.assert_allclose(ev.grad(theta) - ev.grad(np.zeros(3)),
                                       ev.hvp(theta, theta), rtol=1e-12)

    def test_noisy_gradient_is_unbiased(self):
        h = np.diag([1.0, -2.0, 3.0])
        b = np.array([0.5, 0.0, -0.5])
        prob = make_quadratic(h, b, noise_scale=0.1)
        theta = np.array([1.0, 1.0, 1.0])
        n = 100_000
        acc = np.zeros(3)
        for seed in range(n):
            acc += prob.bind_batch(seed).grad(theta)
        np.testing.assert_allclose(acc / n, h @ theta + b, atol=0.01 * np.linalg.norm(h @ theta + b) + 2e-3)

    def test_asymmetric_rejected(self):
        with pytest.raises(ContractViolationError):
            make_quadratic(np.array([[1.0, 2.0], [0.0, 1.0]]))


class TestRosenbrock:
    def test_global_minimum(self):
        ev = make_rosenbrock().bind_batch(0)
        assert ev.loss(np.array([1.0, 1.0])) == 0.0

    def test_gradient_at_origin(self):
        ev = make_rosenbrock().bind_batch(0)
        np.testing.assert_allclose(ev.grad(np.zeros(2)), [-2.0, 0.0])

    def test_hvp_at_origin(self):
        ev = make_rosenbrock().bind_batch(0)
        np.testing.assert_allclose(ev.hvp(np.zeros(2), np.array([0.0, 1.0])), [0.0, 200.0])

    def test_finite_difference_selfcheck(self):
        assert gradient_selfcheck(make_rosenbrock()) <= 1e-6


class TestXorMlp:
    def test_zero_weights_loss_is_log_two(self):
        prob = make_xor_mlp(4)
        ev = prob.bind_batch(0)
        np.testing.assert_allclose(ev.loss(np.zeros(prob.dim)), np.log(2.0), rtol=1e-12)

    def test_gradient_selfcheck(self):
        assert gradient_selfcheck(make_xor_mlp(4)) <= 1e-6

    def test_hvp_linearity_and_symmetry(self):
        prob = make_xor_mlp(3)
        ev = prob.bind_batch(0)
        rng = np.random.default_rng(3)
        for _ in range(10):
            theta = 0.5 * rng.standard_normal(prob.dim)
            v1 = rng.standard_normal(prob.dim)
            v2 = rng.standard_normal(prob.dim)
            lin = ev.hvp(theta, 2.0 * v1 - 3.0 * v2)
            ref = 2.0 * ev.hvp(theta, v1) - 3.0 * ev.hvp(theta, v2)
            scale = max(np.max(np.abs(ref)), 1e-12)
            assert np.max(np.abs(lin - ref)) <= 1e-8 * scale
            s1 = v2 @ ev.hvp(theta, v1)
            s2 = v1 @ ev.hvp(theta, v2)
            assert abs(s1 - s2) <= 1e-8 * max(abs(s1), abs(s2), 1e-12)

    def test_hvp_matches_finite_differences(self):
        prob = make_xor_mlp(4)
        ev = prob.bind_batch(0)
        rng = np.random.default_rng(4)
        for _ in range(5):
            theta = 0.5 * rng.standard_normal(prob.dim)
            v = rng.standard_normal(prob.dim)
            h = 1e-6
            fd = (ev.grad(theta + h * v) - ev.grad(theta - h * v)) / (2.0 * h)
            hv = ev.hvp(theta, v)
            assert np.max(np.abs(fd - hv)) <= 1e-6 * max(np.max(np.abs(hv)), 1.0)


class TestAdditionRnn:
    def test_zero_weights_mse_is_target_second_moment(self):
        # prediction is identically 0, so the loss equals the spread of the
        # targets about 0; oracle: Monte Carlo over targets alone
        prob = make_addition_rnn(8, 4, batch_size=4)
        theta0 = np.zeros(prob.dim)
        n_batches = 2500  # 10^4 sequences
        acc = 0.0
        for seed in range(n_batches):
            acc += prob.bind_batch(seed).loss(theta0)
        measured = acc / n_batches
        rng = np.random.default_rng(99)
        vals = rng.random((10_000, 2))
        oracle = float(np.mean((0.5 * vals.sum(axis=1)) ** 2))
        np.testing.assert_allclose(measured, oracle, rtol=0.05)

    def test_gradient_selfcheck(self):
        assert gradient_selfcheck(make_addition_rnn(5, 3)) <= 1e-5

    def test_deterministic_batches(self):
        prob = make_addition_rnn(6, 3)
        theta = prob.initial_theta(0)
        assert prob.bind_batch(7).loss(theta) == prob.bind_batch(7).loss(theta)
        assert prob.bind_batch(7).loss(theta) != prob.bind_batch(8).loss(theta)

    def test_no_exact_hvp(self):
        assert make_addition_rnn(5, 3).bind_batch(0).hvp is None


class TestSelfChecks:
    @pytest.mark.parametrize("maker,tol", [
        (lambda: make_quadratic(np.diag([2.0, -5.0, 1.0]), np.array([1.0, 0.0, -1.0])), 1e-6),
        (make_rosenbrock, 1e-6),
        (lambda: make_xor_mlp(4), 1e-6),
        (lambda: make_addition_rnn(5, 3), 1e-5),
    ])
    def test_twenty_random_points(self, maker, tol):
        assert gradient_selfcheck(maker(), n_points=20) <= tol
