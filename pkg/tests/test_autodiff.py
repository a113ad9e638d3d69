import numpy as np
import pytest

from depthbayes import autodiff as ad
from depthbayes.tensor import ConvSpec


def numeric_grad(fn, args, index, eps=1e-6):
    """Central finite differences of a scalar function of arrays."""
    x = args[index]
    out = np.zeros_like(x)
    flat, oflat = x.ravel(), out.ravel()
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        hi = float(ad.value_of(fn(*args)))
        flat[i] = keep - eps
        lo = float(ad.value_of(fn(*args)))
        flat[i] = keep
        oflat[i] = (hi - lo) / (2.0 * eps)
    return out


def reverse_grad(fn, args, index):
    leaves = [ad.leaf(a) for a in args]
    return ad.grad(fn(*leaves), leaves)[index]


def check(fn, args, tol=1e-7):
    for index in range(len(args)):
        got = reverse_grad(fn, args, index)
        want = numeric_grad(fn, args, index)
        np.testing.assert_allclose(got, want, atol=tol, rtol=tol)


class TestPrimitiveGradients:
    def test_arithmetic_with_broadcasting(self, rng):
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(1, 4))
        c = rng.normal(size=())

        def fn(a, b, c):
            return ad.mean(ad.multiply(ad.add(a, b), ad.subtract(a, c)))

        check(fn, [a, b, c])

    def test_divide_and_sqrt(self, rng):
        a = rng.normal(size=(4,)) + 3.0
        b = rng.normal(size=(4,)) + 3.0
        check(lambda a, b: ad.total(ad.divide(ad.sqrt(a), b)), [a, b])

    def test_matmul(self, rng):
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        check(lambda a, b: ad.total(ad.matmul(a, b)), [a, b])

    def test_exp_tanh_softplus_abs(self, rng):
        a = rng.normal(size=(5,))

        def fn(a):
            return ad.total(ad.add(ad.exp(ad.multiply(a, 0.3)), ad.add(ad.tanh(a), ad.add(ad.softplus(a), ad.absolute(a)))))

        check(fn, [a])

    def test_reductions_and_reshape(self, rng):
        a = rng.normal(size=(2, 3, 4))

        def fn(a):
            s = ad.total(a, axis=1, keepdims=True)
            m = ad.mean(a, axis=2)
            return ad.add(ad.total(ad.multiply(s, s)), ad.total(ad.reshape(m, (6,))))

        check(fn, [a])

    def test_moveaxis_and_upsample(self, rng):
        a = rng.normal(size=(2, 3, 2))

        def fn(a):
            return ad.total(ad.multiply(ad.upsample_nearest(ad.moveaxis(a, 0, 2), 2), 0.5))

        check(fn, [a])

    def test_softmax(self, rng):
        a = rng.normal(size=(3, 5))
        w = rng.normal(size=(3, 5))
        check(lambda a: ad.total(ad.multiply(ad.softmax(a, axis=1), w)), [a])

    def test_softmax_rows_sum_to_one(self, rng):
        rows = ad.softmax(rng.normal(size=(6, 8)) * 10.0, axis=1)
        np.testing.assert_allclose(rows.sum(axis=1), np.ones(6), atol=1e-12)

    @pytest.mark.parametrize("stride,padding", [((1, 1), (0, 0)), ((2, 1), (1, 1)), ((2, 2), (0, 1))])
    def test_conv2d(self, rng, stride, padding):
        x = rng.normal(size=(2, 5, 6))
        k = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=(3,))
        spec = ConvSpec(stride=stride, padding=padding)
        check(lambda x, k, b: ad.total(ad.conv2d(x, k, spec, b)), [x, k, b])


class TestMedian:
    def test_even_count_routes_half_to_each_middle(self):
        values = np.array([[1.0, 4.0], [2.0, 9.0]])
        lf = ad.leaf(values)
        out = ad.median(lf)
        assert float(out.value) == 3.0
        np.testing.assert_array_equal(ad.grad(out, [lf])[0], [[0.0, 0.5], [0.5, 0.0]])

    def test_odd_count_routes_to_middle(self):
        lf = ad.leaf(np.array([5.0, -1.0, 2.0]))
        out = ad.median(lf)
        assert float(out.value) == 2.0
        np.testing.assert_array_equal(ad.grad(out, [lf])[0], [0.0, 0.0, 1.0])

    def test_fd_at_generic_point(self, rng):
        a = rng.normal(size=(3, 3))
        check(lambda a: ad.multiply(ad.median(a), 2.0), [a])


class TestEngine:
    def test_plain_arrays_stay_plain(self, rng):
        a = rng.normal(size=(2, 2))
        assert isinstance(ad.add(a, a), np.ndarray)
        assert isinstance(ad.conv2d(rng.normal(size=(1, 3, 3)), rng.normal(size=(1, 1, 2, 2))), np.ndarray)

    def test_unused_leaf_gets_zero(self, rng):
        a, b = ad.leaf(rng.normal(size=3)), ad.leaf(rng.normal(size=3))
        out = ad.total(ad.multiply(a, 2.0))
        ga, gb = ad.grad(out, [a, b])
        np.testing.assert_array_equal(ga, np.full(3, 2.0))
        np.testing.assert_array_equal(gb, np.zeros(3))

    def test_fanout_accumulates(self, rng):
        a = ad.leaf(np.array(3.0))
        out = ad.add(ad.multiply(a, a), a)  # a^2 + a, derivative 2a + 1
        np.testing.assert_allclose(ad.grad(out, [a])[0], 7.0)

    def test_operator_overloads_with_ndarray(self, rng):
        values = rng.normal(size=(2, 2))
        lf = ad.leaf(values)
        out = ad.total(values * lf + values - lf / 2.0)
        g = ad.grad(out, [lf])[0]
        np.testing.assert_allclose(g, values - 0.5)

    def test_abs_subgradient_zero_at_zero(self):
        lf = ad.leaf(np.array([0.0, -2.0, 2.0]))
        g = ad.grad(ad.total(ad.absolute(lf)), [lf])[0]
        np.testing.assert_array_equal(g, [0.0, -1.0, 1.0])
