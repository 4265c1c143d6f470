import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import naive_conv, naive_deconv, naive_maxpool
from cascadeseg import rng
from cascadeseg.errors import ShapeError
from cascadeseg.ops import (BatchNormState, ConvParams, add_elementwise,
                            batch_norm, concat_channels, conv_forward,
                            conv_output_extent, deconv_forward,
                            deconv_output_extent, maxpool, mean_tensors,
                            mul_elementwise, relu, scale, softmax_channels,
                            tsum)
from cascadeseg.tensor import (Tape, Tensor, backward, finite_difference_check)


def _gauss(key, shape):
    return rng.gaussian(key, int(np.prod(shape))).reshape(shape)


def _conv_params(key, c_in, c_out, kernel, stride, padding, dims,
                 transposed=False, dtype=np.float64):
    p = ConvParams.create(c_in, c_out, kernel, stride, padding, dims,
                          transposed=transposed, dtype=dtype)
    p.weights.data[...] = _gauss(key, p.weights.shape)
    p.bias.data[...] = _gauss(key + 1, p.bias.shape)
    return p


class TestConvForward:
    def test_identity_kernel(self):
        x = Tensor(_gauss(1, (1, 1, 5, 5)), dtype=np.float64)
        p = ConvParams.create(1, 1, 1, 1, 0, 2, dtype=np.float64)
        p.weights.data[...] = 1.0
        y = conv_forward(x, p)
        assert np.array_equal(y.data, x.data)

    def test_ones_kernel_padded(self):
        x = Tensor(np.ones((1, 1, 4, 4)), dtype=np.float64)
        p = ConvParams.create(1, 1, 3, 1, 1, 2, dtype=np.float64)
        p.weights.data[...] = 1.0
        y = conv_forward(x, p).data[0, 0]
        assert y[0, 0] == 4.0 and y[0, 3] == 4.0
        assert y[0, 1] == 6.0 and y[1, 0] == 6.0
        assert np.all(y[1:3, 1:3] == 9.0)

    def test_matches_naive_2d(self):
        x = Tensor(_gauss(2, (2, 3, 6, 6)), dtype=np.float64)
        p = _conv_params(3, 3, 4, 3, 1, 1, 2)
        y = conv_forward(x, p)
        ref = naive_conv(x.data, p.weights.data, p.bias.data, p.stride, p.padding)
        assert np.allclose(y.data, ref, atol=1e-6)

    def test_matches_naive_strided_3d(self):
        x = Tensor(_gauss(4, (1, 2, 5, 6, 5)), dtype=np.float64)
        p = _conv_params(5, 2, 3, (3, 2, 3), (2, 2, 1), (1, 0, 1), 3)
        y = conv_forward(x, p)
        ref = naive_conv(x.data, p.weights.data, p.bias.data, p.stride, p.padding)
        assert np.allclose(y.data, ref, atol=1e-6)

    def test_channel_mismatch(self):
        x = Tensor(np.ones((1, 2, 4, 4)), dtype=np.float64)
        p = ConvParams.create(3, 1, 3, 1, 1, 2, dtype=np.float64)
        with pytest.raises(ShapeError):
            conv_forward(x, p)

    def test_too_small_input(self):
        x = Tensor(np.ones((1, 1, 2, 2)), dtype=np.float64)
        p = ConvParams.create(1, 1, 3, 1, 0, 2, dtype=np.float64)
        with pytest.raises(ShapeError):
            conv_forward(x, p)


class TestDeconvForward:
    def test_doubling_2d(self):
        x = Tensor(_gauss(6, (1, 1, 8, 8)), dtype=np.float64)
        p = _conv_params(7, 1, 1, 4, 2, 1, 2, transposed=True)
        assert deconv_forward(x, p).shape == (1, 1, 16, 16)

    def test_doubling_3d(self):
        x = Tensor(_gauss(8, (1, 1, 4, 4, 4)), dtype=np.float64)
        p = _conv_params(9, 1, 1, 4, 2, 1, 3, transposed=True)
        assert deconv_forward(x, p).shape == (1, 1, 8, 8, 8)

    def test_matches_naive(self):
        x = Tensor(_gauss(10, (2, 2, 4, 5)), dtype=np.float64)
        p = _conv_params(11, 2, 3, (4, 3), (2, 2), (1, 0), 2, transposed=True)
        y = deconv_forward(x, p)
        ref = naive_deconv(x.data, p.weights.data, p.bias.data, p.stride, p.padding)
        assert np.allclose(y.data, ref, atol=1e-6)

    def test_adjoint_identity(self):
        # <conv(x, w), y> == <x, deconv(y, w)> with shared weights, no bias,
        # over 50 random instances. Input extents are derived from the deconv
        # shape formula so the conv is information-preserving (no floor loss
        # in the output extent).
        for seed in range(50):
            key = rng.stream_key(seed, "adjoint")
            u = rng.uniform(key + 9, 6)
            dims = 2 if u[0] < 0.7 else 3
            c_in, c_out = 1 + int(u[1] * 3), 1 + int(u[2] * 3)
            stride = 1 + int(u[3] * 2)
            kernel = stride + 1 + int(u[4] * 2)
            padding = min(int(u[5] * 2), (kernel - 1) // 2)
            small = 3 if dims == 2 else 2
            extent = deconv_output_extent(small, kernel, stride, padding)
            w = Tensor(_gauss(key, (c_out, c_in) + (kernel,) * dims),
                       dtype=np.float64)
            geom = ((kernel,) * dims, (stride,) * dims, (padding,) * dims)
            conv_p = ConvParams(c_in, c_out, *geom, w, None, False)
            deconv_p = ConvParams(c_out, c_in, *geom, w, None, True)
            x = Tensor(_gauss(key + 1, (1, c_in) + (extent,) * dims),
                       dtype=np.float64)
            cx = conv_forward(x, conv_p)
            assert cx.shape[2:] == (small,) * dims
            y = Tensor(_gauss(key + 2, cx.shape), dtype=np.float64)
            lhs = float(np.sum(cx.data * y.data))
            rhs = float(np.sum(x.data * deconv_forward(y, deconv_p).data))
            assert abs(lhs - rhs) <= 1e-6 * max(1.0, abs(lhs))


class TestMaxpool:
    def test_single_window(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2),
                   dtype=np.float64)
        y = maxpool(x, 2, 2)
        assert y.data.reshape(-1).tolist() == [4.0]

    def test_constant_ties_route_to_first(self):
        x = Tensor(np.ones((1, 1, 4, 4)), requires_grad=True, dtype=np.float64)
        with Tape() as tape:
            y = tsum(maxpool(x, 2, 2))
        backward(tape, y)
        g = x.grad[0, 0]
        expected = np.zeros((4, 4))
        expected[0::2, 0::2] = 1.0  # first cell of each window in scan order
        assert np.array_equal(g, expected)

    def test_matches_naive(self):
        x = Tensor(_gauss(12, (1, 2, 6, 6)), dtype=np.float64)
        y = maxpool(x, 2, 2)
        assert np.array_equal(y.data, naive_maxpool(x.data, (2, 2), (2, 2)))

    def test_window_too_large(self):
        x = Tensor(np.ones((1, 1, 2, 2)), dtype=np.float64)
        with pytest.raises(ShapeError):
            maxpool(x, 3, 1)


class TestBatchNorm:
    def test_normalized_input_is_fixed_point(self):
        key = rng.stream_key(0, "bn-fixed")
        raw = _gauss(key, (4, 3, 8, 8))
        mu = raw.mean(axis=(0, 2, 3), keepdims=True)
        sd = raw.std(axis=(0, 2, 3), keepdims=True)
        x = Tensor((raw - mu) / sd, dtype=np.float64)
        s = BatchNormState.create(3, dtype=np.float64)
        y = batch_norm(x, s)
        assert np.allclose(y.data, x.data / np.sqrt(1 + s.epsilon), atol=1e-6)

    def test_zero_gamma_gives_beta(self):
        x = Tensor(_gauss(1, (2, 2, 4, 4)), dtype=np.float64)
        s = BatchNormState.create(2, dtype=np.float64)
        s.gamma.data[...] = 0.0
        s.beta.data[...] = [1.5, -2.0]
        y = batch_norm(x, s)
        assert np.allclose(y.data[:, 0], 1.5) and np.allclose(y.data[:, 1], -2.0)

    def test_train_output_statistics(self):
        x = Tensor(_gauss(2, (4, 2, 16, 16)) * 3.0 + 1.0, dtype=np.float64)
        s = BatchNormState.create(2, dtype=np.float64)
        y = batch_norm(x, s).data
        var = x.data.var(axis=(0, 2, 3))
        for c in range(2):
            assert abs(y[:, c].mean()) <= 1e-6
            assert abs(y[:, c].var() - var[c] / (var[c] + s.epsilon)) <= 1e-4

    def test_running_stats_update_and_infer(self):
        x = Tensor(_gauss(3, (4, 2, 8, 8)) * 2.0 + 0.5, dtype=np.float64)
        s = BatchNormState.create(2, dtype=np.float64)
        batch_norm(x, s)
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        assert np.allclose(s.running_mean, 0.9 * 0 + 0.1 * mu)
        assert np.allclose(s.running_var, 0.9 * 1 + 0.1 * var)
        s.mode = "infer"
        y = batch_norm(x, s).data
        expect = (x.data - s.running_mean.reshape(1, 2, 1, 1)) / np.sqrt(
            s.running_var.reshape(1, 2, 1, 1) + s.epsilon)
        assert np.allclose(y, expect)

    def test_channel_mismatch(self):
        s = BatchNormState.create(3, dtype=np.float64)
        with pytest.raises(ShapeError):
            batch_norm(Tensor(np.ones((1, 2, 4, 4)), dtype=np.float64), s)

    def test_train_needs_two_samples(self):
        s = BatchNormState.create(1, dtype=np.float64)
        with pytest.raises(ShapeError):
            batch_norm(Tensor(np.ones((1, 1, 1, 1)), dtype=np.float64), s)


class TestStateValidation:
    def test_conv_params_weight_shape_checked(self):
        w = Tensor(np.zeros((2, 3, 3, 3)), dtype=np.float64)
        with pytest.raises(ShapeError):
            ConvParams(2, 3, (3, 3), (1, 1), (1, 1), w, None, False)
        ConvParams(3, 2, (3, 3), (1, 1), (1, 1), w, None, False)
        # transposed layout is (in, out, kernel...)
        ConvParams(2, 3, (3, 3), (1, 1), (1, 1), w, None, True)

    def test_batch_norm_state_validated(self):
        s = BatchNormState.create(2)
        with pytest.raises(ValueError):
            BatchNormState(s.gamma, s.beta, s.running_mean,
                           np.array([-0.1, 1.0]))
        with pytest.raises(ValueError):
            BatchNormState(s.gamma, s.beta, s.running_mean, s.running_var,
                           epsilon=0.0)
        with pytest.raises(ValueError):
            BatchNormState(s.gamma, s.beta, s.running_mean, s.running_var,
                           momentum=1.0)


class TestElementwiseOps:
    def test_relu(self):
        y = relu(Tensor(np.array([-1.0, 0.0, 2.0]), dtype=np.float64))
        assert y.data.tolist() == [0.0, 0.0, 2.0]

    def test_concat_recoverable(self):
        a = Tensor(_gauss(1, (2, 3, 4, 4)), dtype=np.float64)
        b = Tensor(_gauss(2, (2, 5, 4, 4)), dtype=np.float64)
        y = concat_channels([a, b])
        assert y.shape == (2, 8, 4, 4)
        assert np.array_equal(y.data[:, :3], a.data)
        assert np.array_equal(y.data[:, 3:], b.data)

    def test_concat_shape_mismatch(self):
        a = Tensor(np.ones((1, 2, 4, 4)), dtype=np.float64)
        b = Tensor(np.ones((1, 2, 5, 4)), dtype=np.float64)
        with pytest.raises(ShapeError):
            concat_channels([a, b])

    def test_add_shape_mismatch(self):
        with pytest.raises(ShapeError):
            add_elementwise(Tensor(np.ones(3)), Tensor(np.ones(4)))

    def test_softmax_sums_to_one(self):
        x = Tensor(_gauss(3, (2, 4, 5, 5)) * 3, dtype=np.float64)
        p = softmax_channels(x).data
        assert np.allclose(p.sum(axis=1), 1.0, atol=1e-6)
        assert np.all(p >= 0)

    def test_softmax_shift_invariance(self):
        x = _gauss(4, (1, 3, 4, 4))
        shift = _gauss(5, (1, 1, 4, 4))
        a = softmax_channels(Tensor(x, dtype=np.float64)).data
        b = softmax_channels(Tensor(x + shift, dtype=np.float64)).data
        assert np.allclose(a, b, atol=1e-6)

    def test_mean_tensors(self):
        xs = [Tensor(np.full(3, float(v)), dtype=np.float64) for v in (1, 2, 6)]
        assert np.allclose(mean_tensors(xs).data, 3.0)


class TestShapeAlgebra:
    @settings(max_examples=60, deadline=None)
    @given(st.integers(3, 12), st.integers(1, 4), st.integers(1, 3),
           st.integers(0, 2))
    def test_conv_output_extent_formula(self, extent, kernel, stride, padding):
        if extent + 2 * padding < kernel:
            return
        x = Tensor(np.zeros((1, 1, extent, extent)), dtype=np.float64)
        p = ConvParams.create(1, 1, kernel, stride, padding, 2, dtype=np.float64)
        y = conv_forward(x, p)
        expect = conv_output_extent(extent, kernel, stride, padding)
        assert y.shape[2:] == (expect, expect)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(2, 8), st.integers(2, 5), st.integers(1, 3),
           st.integers(0, 1))
    def test_deconv_output_extent_formula(self, extent, kernel, stride, padding):
        expect = deconv_output_extent(extent, kernel, stride, padding)
        if expect < 1 or kernel < stride:
            return
        x = Tensor(np.zeros((1, 1, extent, extent)), dtype=np.float64)
        p = ConvParams.create(1, 1, kernel, stride, padding, 2, transposed=True,
                              dtype=np.float64)
        y = deconv_forward(x, p)
        assert y.shape[2:] == (expect, expect)


class TestGradients:
    """Finite-difference checks for every differentiable op (a few seeds here;
    the acceptance suite runs 20)."""

    def _check(self, f, x, tol=1e-5):
        assert finite_difference_check(f, x, 1e-5) <= tol

    def test_conv_gradients(self):
        for seed in (0, 1):
            key = rng.stream_key(seed, "conv-grad")
            p = _conv_params(key, 2, 3, 3, 2, 1, 2)
            x = Tensor(_gauss(key + 2, (2, 2, 5, 5)), dtype=np.float64)
            self._check(lambda t: tsum(conv_forward(t, p)), x)
            xf = Tensor(x.data, dtype=np.float64)

            def wrt_w(t):
                q = ConvParams(p.in_channels, p.out_channels, p.kernel, p.stride,
                               p.padding, t, p.bias, False)
                return tsum(conv_forward(xf, q))

            self._check(wrt_w, p.weights)
            def wrt_b(t):
                q = ConvParams(p.in_channels, p.out_channels, p.kernel, p.stride,
                               p.padding, p.weights, t, False)
                return tsum(conv_forward(xf, q))

            self._check(wrt_b, p.bias)

    def test_deconv_gradients(self):
        key = rng.stream_key(0, "deconv-grad")
        p = _conv_params(key, 3, 2, 4, 2, 1, 2, transposed=True)
        x = Tensor(_gauss(key + 2, (1, 3, 4, 4)), dtype=np.float64)
        self._check(lambda t: tsum(relu(deconv_forward(t, p))), x)
        xf = Tensor(x.data, dtype=np.float64)

        def wrt_w(t):
            q = ConvParams(p.in_channels, p.out_channels, p.kernel, p.stride,
                           p.padding, t, p.bias, True)
            return tsum(deconv_forward(xf, q))

        self._check(wrt_w, p.weights)

    def test_maxpool_gradient(self):
        x = Tensor(_gauss(rng.stream_key(1, "pool-grad"), (1, 2, 6, 6)),
                   dtype=np.float64)
        self._check(lambda t: tsum(maxpool(t, 2, 2)), x)

    def test_batch_norm_gradients(self):
        key = rng.stream_key(2, "bn-grad")
        x = Tensor(_gauss(key, (3, 2, 4, 4)), dtype=np.float64)
        for mode in ("train", "infer"):
            s = BatchNormState.create(2, dtype=np.float64)
            s.running_mean[...] = [0.2, -0.1]
            s.running_var[...] = [1.5, 0.7]
            s.gamma.data[...] = [1.2, 0.8]
            s.beta.data[...] = [0.1, -0.3]
            s.mode = mode
            self._check(lambda t: tsum(mul_elementwise(
                batch_norm(t, s), Tensor(_gauss(key + 1, t.shape),
                                         dtype=np.float64))), x)
            self._check(lambda t: tsum(batch_norm(
                x, BatchNormState(t, s.beta, s.running_mean, s.running_var,
                                  mode=mode))), s.gamma)

    def test_softmax_and_misc_gradients(self):
        key = rng.stream_key(3, "misc-grad")
        x = Tensor(_gauss(key, (1, 3, 4, 4)), dtype=np.float64)
        probe = Tensor(_gauss(key + 1, (1, 3, 4, 4)), dtype=np.float64)
        self._check(lambda t: tsum(mul_elementwise(softmax_channels(t), probe)), x)
        self._check(lambda t: tsum(scale(t, 2.5)), x)
        other = Tensor(_gauss(key + 2, x.shape), dtype=np.float64)
        self._check(lambda t: tsum(mul_elementwise(add_elementwise(t, other),
                                                   other)), x)
        self._check(lambda t: tsum(mul_elementwise(
            concat_channels([t, other]),
            Tensor(_gauss(key + 3, (1, 6, 4, 4)), dtype=np.float64))), x)
        self._check(lambda t: tsum(mul_elementwise(
            mean_tensors([t, other]), probe)), x)
