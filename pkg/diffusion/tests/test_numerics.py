import threading

import numpy as np
from django.test import SimpleTestCase

from diffusion import numerics as nx
from diffusion.exceptions import NonFiniteError, ShapeError


def conv_oracle(x, k, stride, padding):
    n, c, h, w = x.shape
    kk, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, kk, ho, wo))
    for b in range(n):
        for o in range(kk):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[b, o, i, j] = np.sum(patch * k[o])
    return out


class ElementwiseGradientTests(SimpleTestCase):
    def test_sum_gradient_is_ones(self):
        w = nx.Tensor([1.0, 2.0, 3.0], requires_grad=True)
        nx.backward(nx.sum(w))
        np.testing.assert_array_equal(w.grad, [1.0, 1.0, 1.0])

    def test_mse_against_zero(self):
        w = nx.Tensor([2.0], requires_grad=True)
        nx.backward(nx.mse(w, 0.0))
        np.testing.assert_array_equal(w.grad, [4.0])

    def test_mul_routes_each_factor(self):
        a = nx.Tensor([1.0, 2.0], requires_grad=True)
        b = nx.Tensor([3.0, 5.0], requires_grad=True)
        nx.backward(nx.sum(nx.mul(a, b)))
        np.testing.assert_array_equal(a.grad, [3.0, 5.0])
        np.testing.assert_array_equal(b.grad, [1.0, 2.0])

    def test_shape_mismatch_is_rejected(self):
        with self.assertRaises(ShapeError):
            nx.add(nx.Tensor(np.zeros(3)), nx.Tensor(np.zeros(4)))
        with self.assertRaises(ShapeError):
            nx.mul(nx.Tensor(np.zeros((2, 3))), nx.Tensor(np.zeros(3)))

    def test_backward_needs_scalar(self):
        with self.assertRaises(ShapeError):
            nx.backward(nx.Tensor(np.zeros(2), requires_grad=True))

    def test_non_finite_values_raise_in_debug_mode(self):
        x = nx.Tensor([1.0], requires_grad=True)
        with nx.debug_mode(True):
            with self.assertRaises(NonFiniteError):
                nx.scale(x, float("inf"))

    def test_no_grad_records_nothing(self):
        x = nx.Tensor([1.0, 2.0], requires_grad=True)
        with nx.no_grad():
            y = nx.sum(nx.mul(x, x))
        self.assertFalse(y.requires_grad)
        self.assertTrue(y.is_leaf)

    def test_no_grad_in_another_thread_leaves_this_one_recording(self):
        entered, release = threading.Event(), threading.Event()
        seen = []

        def worker():
            with nx.no_grad():
                seen.append(nx.is_grad_enabled())
                entered.set()
                release.wait(5)

        thread = threading.Thread(target=worker)
        thread.start()
        try:
            self.assertTrue(entered.wait(5))
            x = nx.Tensor([1.0, 2.0], requires_grad=True)
            y = nx.sum(nx.mul(x, x))
            self.assertTrue(nx.is_grad_enabled())
            self.assertTrue(y.requires_grad)
        finally:
            release.set()
            thread.join()
        self.assertEqual(seen, [False])


class StopGradientTests(SimpleTestCase):
    def test_values_pass_through_unchanged(self):
        a = nx.Tensor(np.random.default_rng(1).standard_normal((3, 4)), requires_grad=True)
        np.testing.assert_array_equal(nx.stop_gradient(a).data, a.data)

    def test_gradient_respects_stop_gradient(self):
        x = nx.Tensor([0.5, -1.5, 2.0], requires_grad=True)
        nx.backward(nx.sum(nx.mul(nx.sg(x), x)))
        np.testing.assert_array_equal(x.grad, x.data)

    def test_frozen_stop_gradients_replay_recorded_values(self):
        x = nx.Tensor([1.0, 2.0], requires_grad=True)
        frozen = nx.FrozenStopGradients()
        loss_fn = frozen.wrap(lambda: nx.sum(nx.mul(nx.sg(x), x)))
        first = loss_fn().item()
        x.data[0] = 3.0
        # The stop_gradient factor keeps its recorded value [1, 2].
        self.assertEqual(loss_fn().item(), 1.0 * 3.0 + 2.0 * 2.0)
        self.assertEqual(first, 5.0)
        self.assertEqual(nx.sg(x).data[0], 3.0)


class LinearityAndAccumulationTests(SimpleTestCase):
    def setUp(self):
        rng = np.random.default_rng(7)
        self.x = nx.Tensor(rng.standard_normal((2, 3)), requires_grad=True)
        self.y = rng.standard_normal((2, 3))

    def f(self):
        return nx.mse(nx.silu(self.x), nx.Tensor(self.y))

    def g(self):
        return nx.sum(nx.sigmoid(self.x))

    def grad_of(self, build):
        self.x.grad = None
        nx.backward(build())
        return self.x.grad.copy()

    def test_linearity(self):
        gf = self.grad_of(self.f)
        gg = self.grad_of(self.g)
        combined = self.grad_of(lambda: nx.add(nx.scale(self.f(), 2.5), nx.scale(self.g(), -0.5)))
        np.testing.assert_allclose(combined, 2.5 * gf - 0.5 * gg, rtol=0, atol=1e-12)

    def test_two_backward_passes_double_the_gradient(self):
        once = self.grad_of(self.f)
        self.x.grad = None
        nx.backward(self.f())
        nx.backward(self.f())
        np.testing.assert_array_equal(self.x.grad, 2.0 * once)


class ConvolutionTests(SimpleTestCase):
    def test_matches_nested_loop_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            h, w = rng.integers(3, 9, size=2)
            c, k = rng.integers(1, 4, size=2)
            kh = int(rng.integers(1, 4))
            stride = int(rng.integers(1, 3))
            padding = int(rng.integers(0, 2))
            x = rng.standard_normal((2, c, h, w))
            kernel = rng.standard_normal((k, c, kh, kh))
            out = nx.conv2d(nx.Tensor(x), nx.Tensor(kernel), stride, padding).data
            np.testing.assert_allclose(out, conv_oracle(x, kernel, stride, padding), rtol=0, atol=1e-12)

    def test_channel_mismatch(self):
        with self.assertRaises(ShapeError):
            nx.conv2d(nx.Tensor(np.zeros((1, 2, 4, 4))), nx.Tensor(np.zeros((1, 3, 3, 3))))

    def test_space_to_depth_shape(self):
        out = nx.space_to_depth(nx.Tensor(np.arange(32.0).reshape(1, 2, 4, 4)), 2)
        self.assertEqual(out.shape, (1, 8, 2, 2))


class GradcheckTests(SimpleTestCase):
    def test_mse_passes_tight_tolerance(self):
        x = nx.Tensor(np.random.default_rng(3).standard_normal((4, 5)))
        report = nx.gradcheck(lambda t: nx.mse(t, 0.0), x, tol=1e-6)
        self.assertTrue(report.passed, report.max_rel_error)

    def test_conv_silu_chain(self):
        rng = np.random.default_rng(4)
        kernel = nx.Tensor(rng.standard_normal((3, 2, 3, 3)))
        target = nx.Tensor(rng.standard_normal((2, 3, 3, 3)))
        x = nx.Tensor(rng.standard_normal((2, 2, 5, 5)))
        report = nx.gradcheck(lambda t: nx.mse(nx.silu(nx.conv2d(t, kernel, 2, 1)), target), x, tol=1e-5)
        self.assertTrue(report.passed, report.max_rel_error)

    def test_kernel_gradient_through_upsample_and_space_to_depth(self):
        rng = np.random.default_rng(5)
        x = nx.Tensor(rng.standard_normal((1, 2, 4, 4)))
        kernel = nx.Tensor(rng.standard_normal((2, 8, 1, 1)))

        def f(k):
            h = nx.conv2d(nx.space_to_depth(x, 2), k, 1, 0)
            return nx.mse(nx.upsample_nearest(nx.silu(h), 2))

        self.assertTrue(nx.gradcheck(f, kernel, tol=1e-5).passed)

    def test_parameter_sampling_reports_labels(self):
        rng = np.random.default_rng(6)
        a = nx.Tensor(rng.standard_normal((3, 3)), requires_grad=True)
        b = nx.Tensor(rng.standard_normal(3), requires_grad=True)
        x = nx.Tensor(rng.standard_normal((2, 3)))
        loss_fn = lambda: nx.mse(nx.add_bias(nx.matmul(x, a), b))  # noqa: E731
        report = nx.gradcheck_parameters(loss_fn, [("a", a), ("b", b)], fraction=1.0, tol=1e-5)
        self.assertEqual(len(report.labels), 12)
        self.assertTrue(report.passed)
        self.assertIsNone(a.grad)
