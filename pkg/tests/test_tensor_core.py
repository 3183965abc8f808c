import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fsodm import ops
from fsodm.gradcheck import check_gradients
from fsodm.optim import sgd_step
from fsodm.tensor import DimensionError, Parameter, Tensor, UsageError, backward, precision
from oracles import naive_conv2d, naive_maxpool


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class TestConv2d:
    def test_scalar_scaling(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        out = ops.conv2d(x, Tensor([[[[2.0]]]]), Tensor([0.0]))
        np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 2.0))

    def test_identity_kernel(self, rng):
        x = Tensor(rng.normal(size=(1, 1, 5, 4)))
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1
        out = ops.conv2d(x, Tensor(k), Tensor([0.0]), padding=1)
        np.testing.assert_array_equal(out.data, x.data)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
    def test_matches_naive_loops(self, rng, stride, pad):
        with precision(np.float64):
            x = rng.normal(size=(1, 2, 5, 5))
            w = rng.normal(size=(3, 2, 3, 3))
            b = rng.normal(size=3)
            out = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad).data
        ref = naive_conv2d(x, w, b, stride, pad)
        assert out.shape == ref.shape
        assert np.abs(out - ref).max() / np.abs(ref).max() < 1e-12

    def test_channel_mismatch_names_axis(self):
        with pytest.raises(DimensionError, match="axis 1"):
            ops.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_even_kernel_rejected(self):
        with pytest.raises(DimensionError):
            ops.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))))

    @pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 3), (1, 0, 1)])
    def test_gradients(self, rng, stride, pad, k):
        with precision(np.float64):
            x = Tensor(rng.normal(size=(2, 3, 6, 6)), requires_grad=True)
            w = Tensor(rng.normal(size=(4, 3, k, k)), requires_grad=True)
            b = Tensor(rng.normal(size=4), requires_grad=True)
            probe = Tensor(rng.normal(size=ops.conv2d(x, w, b, stride, pad).shape))
            err = check_gradients(lambda: ops.sum(ops.mul(ops.conv2d(x, w, b, stride, pad), probe)), [x, w, b])
        assert err < 1e-4


class TestPooling:
    def test_maxpool_small(self):
        out = ops.maxpool2d(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])), 2, 2)
        np.testing.assert_array_equal(out.data, [[[[4.0]]]])

    def test_maxpool_tie_routes_to_first(self):
        x = Tensor(np.full((1, 1, 4, 4), 3.0), requires_grad=True)
        ops.sum(ops.maxpool2d(x, 2, 2)).backward()
        np.testing.assert_array_equal(ops.maxpool2d(x, 2, 2).data, np.full((1, 1, 2, 2), 3.0))
        expected = np.zeros((4, 4))
        expected[0::2, 0::2] = 1.0
        np.testing.assert_array_equal(x.grad[0, 0], expected)

    def test_maxpool_matches_scan(self, rng):
        x = rng.normal(size=(1, 1, 8, 8))
        with precision(np.float64):
            out = ops.maxpool2d(Tensor(x), 2, 2).data
        np.testing.assert_array_equal(out, naive_maxpool(x, 2))

    def test_maxpool_indivisible(self):
        with pytest.raises(DimensionError):
            ops.maxpool2d(Tensor(np.zeros((1, 1, 5, 4))), 2, 2)

    def test_global_maxpool(self):
        x = np.array([[[[1, 2], [3, 4]], [[-1, -1], [-1, 0]]]], dtype=float)
        np.testing.assert_array_equal(ops.global_maxpool(Tensor(x)).data, [[4.0, 0.0]])

    def test_global_maxpool_single_pixel(self, rng):
        x = rng.normal(size=(2, 3, 1, 1)).astype(np.float32)
        np.testing.assert_array_equal(ops.global_maxpool(Tensor(x)).data, x[:, :, 0, 0])

    def test_global_maxpool_scan_oracle(self, rng):
        x = rng.normal(size=(2, 3, 5, 7)).astype(np.float32)
        out = ops.global_maxpool(Tensor(x)).data
        for n in range(2):
            for c in range(3):
                best = -np.inf
                for v in x[n, c].reshape(-1):
                    best = v if v > best else best
                assert out[n, c] == best

    def test_pool_gradients(self, rng):
        with precision(np.float64):
            x = Tensor(rng.normal(size=(2, 2, 4, 6)), requires_grad=True)
            err1 = check_gradients(lambda: ops.sum(ops.square(ops.maxpool2d(x, 2, 2))), [x])
            err2 = check_gradients(lambda: ops.sum(ops.square(ops.global_maxpool(x))), [x])
        assert max(err1, err2) < 1e-4


class TestChannelwiseScale:
    def test_unit_vector_identity(self, rng):
        f = Tensor(rng.normal(size=(2, 3, 4, 4)))
        np.testing.assert_array_equal(ops.channelwise_scale(f, Tensor(np.ones(3))).data, f.data)

    def test_zero_vector(self, rng):
        f = Tensor(rng.normal(size=(1, 3, 4, 4)))
        assert not ops.channelwise_scale(f, Tensor(np.zeros(3))).data.any()

    def test_equals_diagonal_1x1_conv(self, rng):
        with precision(np.float64):
            f = Tensor(rng.normal(size=(2, 5, 3, 4)))
            v = rng.normal(size=5)
            out = ops.channelwise_scale(f, Tensor(v)).data
            ref = ops.conv2d(f, Tensor(np.diag(v)[:, :, None, None]), Tensor(np.zeros(5))).data
        assert np.abs(out - ref).max() / np.abs(ref).max() < 1e-12

    def test_many_vectors_layout(self, rng):
        f = Tensor(rng.normal(size=(2, 3, 2, 2)))
        v = Tensor(rng.normal(size=(4, 3)))
        out = ops.channelwise_scale(f, v).data
        for n in range(2):
            for m in range(4):
                np.testing.assert_array_equal(out[n * 4 + m], ops.channelwise_scale(f, v[m]).data[n])

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            ops.channelwise_scale(Tensor(np.zeros((1, 3, 2, 2))), Tensor(np.ones(4)))

    def test_gradients(self, rng):
        with precision(np.float64):
            f = Tensor(rng.normal(size=(2, 3, 2, 3)), requires_grad=True)
            v1 = Tensor(rng.normal(size=3), requires_grad=True)
            v2 = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
            p1 = Tensor(rng.normal(size=(2, 3, 2, 3)))
            p2 = Tensor(rng.normal(size=(8, 3, 2, 3)))
            e1 = check_gradients(lambda: ops.sum(ops.mul(ops.channelwise_scale(f, v1), p1)), [f, v1])
            e2 = check_gradients(lambda: ops.sum(ops.mul(ops.channelwise_scale(f, v2), p2)), [f, v2])
        assert max(e1, e2) < 1e-4


class TestActivations:
    def test_sigmoid_zero(self):
        assert ops.sigmoid(Tensor([0.0])).data[0] == 0.5

    def test_sigmoid_extremes_finite(self):
        out = ops.sigmoid(Tensor([-1000.0, 1000.0])).data
        assert out[0] == 0.0 and out[1] == 1.0

    def test_softmax_uniform(self):
        out = ops.softmax(Tensor(np.full(7, 2.5)), axis=0).data
        np.testing.assert_allclose(out, 1 / 7, rtol=1e-6)

    def test_softmax_extended_precision_oracle(self):
        with precision(np.float64):
            out = ops.softmax(Tensor([1.0, 2.0, 3.0]), axis=0).data
        mpmath.mp.dps = 40
        es = [mpmath.exp(v) for v in (1, 2, 3)]
        ref = [float(e / sum(es)) for e in es]
        np.testing.assert_allclose(out, ref, rtol=1e-14)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
    def test_softmax_simplex(self, xs):
        with precision(np.float64):
            out = ops.softmax(Tensor(xs), axis=0).data
        assert (out >= 0).all()
        assert abs(out.sum() - 1) < 1e-9

    def test_leaky_relu(self):
        np.testing.assert_allclose(ops.leaky_relu(Tensor([-2.0, 3.0])).data, [-0.2, 3.0])

    def test_gradients(self, rng):
        with precision(np.float64):
            x = Tensor(rng.normal(size=(3, 5)) + 0.05, requires_grad=True)
            p = Tensor(rng.normal(size=(3, 5)))
            errs = [
                check_gradients(lambda: ops.sum(ops.mul(ops.sigmoid(x), p)), [x]),
                check_gradients(lambda: ops.sum(ops.mul(ops.leaky_relu(x), p)), [x]),
                check_gradients(lambda: ops.sum(ops.mul(ops.softmax(x, axis=1), p)), [x]),
                check_gradients(lambda: ops.sum(ops.mul(ops.log_softmax(x, axis=0), p)), [x]),
                check_gradients(lambda: ops.sum(ops.mul(ops.exp(x), p)), [x]),
            ]
            y = Tensor(rng.uniform(0.5, 2.0, size=(4,)), requires_grad=True)
            errs.append(check_gradients(lambda: ops.sum(ops.log(y)), [y]))
        assert max(errs) < 1e-4


class TestReshapeConcat:
    def test_upsample(self):
        out = ops.upsample_nearest2x(Tensor(np.full((1, 1, 1, 1), 5.0)))
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 5.0))

    def test_concat_roundtrip(self, rng):
        a = Tensor(rng.normal(size=(2, 2, 3, 3)))
        b = Tensor(rng.normal(size=(2, 3, 3, 3)))
        out = ops.concat_channels(a, b)
        assert out.shape == (2, 5, 3, 3)
        np.testing.assert_array_equal(out[:, :2].data, a.data)
        np.testing.assert_array_equal(out[:, 2:].data, b.data)

    def test_concat_spatial_mismatch(self):
        with pytest.raises(DimensionError):
            ops.concat_channels(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 4, 4))))

    def test_gradients(self, rng):
        with precision(np.float64):
            a = Tensor(rng.normal(size=(1, 2, 2, 3)), requires_grad=True)
            b = Tensor(rng.normal(size=(1, 1, 2, 3)), requires_grad=True)
            p = Tensor(rng.normal(size=(1, 3, 4, 6)))
            f = lambda: ops.sum(ops.mul(ops.upsample_nearest2x(ops.concat_channels(a, b)), p))  # noqa: E731
            err = check_gradients(f, [a, b])
            idx = np.array([[0, 3], [5, 5]])
            err2 = check_gradients(lambda: ops.sum(ops.square(ops.gather(a, idx))), [a])
            err3 = check_gradients(lambda: ops.sum(ops.square(a[:, 1:, :, ::2])), [a])
        assert max(err, err2, err3) < 1e-4


class TestBackwardAndSGD:
    def test_sum_grad_is_ones(self, rng):
        p = Parameter(rng.normal(size=(3, 2)), "p")
        ops.sum(p).backward()
        np.testing.assert_array_equal(p.grad, np.ones((3, 2)))

    def test_half_square_grad_is_value(self, rng):
        with precision(np.float64):
            p = Parameter(rng.normal(size=5), "p")
            ops.mul(ops.sum(ops.square(p)), 0.5).backward()
        np.testing.assert_allclose(p.grad, p.data, rtol=1e-15)

    def test_fan_out_accumulates_exactly(self):
        x = Tensor([1.5], requires_grad=True)
        ops.sum(x + x).backward()
        assert x.grad[0] == 2.0

    def test_non_scalar_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(UsageError):
            backward(ops.mul(x, 2.0))

    def test_shared_subgraph_visited_once(self, rng):
        with precision(np.float64):
            x = Tensor(rng.normal(size=4), requires_grad=True)
            y = ops.sigmoid(x)
            z = ops.sum(ops.mul(y, y)) + ops.sum(y)
            err = check_gradients(lambda: ops.sum(ops.mul(ops.sigmoid(x), ops.sigmoid(x))) + ops.sum(ops.sigmoid(x)), [x])
            x.grad = None
            z.backward()
            s = 1 / (1 + np.exp(-x.data))
            np.testing.assert_allclose(x.grad, (2 * s + 1) * s * (1 - s), rtol=1e-12)
        assert err < 1e-4

    def test_sgd_update_rule(self):
        with precision(np.float64):
            p = Parameter(np.array([1.0, -2.0]), "w")
            for _ in range(2):
                p.grad = np.array([0.5, 0.25])
                sgd_step([p], lr=0.1, momentum=0.9, weight_decay=0.01)
        v = np.zeros(2)
        ref = np.array([1.0, -2.0])
        for _ in range(2):
            v = 0.9 * v - 0.1 * (np.array([0.5, 0.25]) + 0.01 * ref)
            ref = ref + v
        np.testing.assert_allclose(p.data, ref, rtol=1e-15)
        assert p.grad is None

    def test_deterministic(self, rng):
        x = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
        w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
        a = ops.conv2d(Tensor(x), Tensor(w), padding=1).data
        b = ops.conv2d(Tensor(x), Tensor(w), padding=1).data
        assert a.tobytes() == b.tobytes()
