# -*- coding: utf-8 -*-

"""
tensor_ops.py -- forward and backward kernels for every operator
that an architecture graph contains

activations are NHWC numpy arrays, conv kernels are (kh, kw, Cin, Cout),
depthwise kernels are (kh, kw, C), dense weights are (Cin, Cout)
each *_forward returns (output, cache) and the matching *_backward
takes the upstream gradient plus that cache
"""

import math
import unittest

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import logsumexp
from scipy.special import softmax as scipy_softmax

from archgraph import ShapeMismatchError
from nas_common import NasDataException, NasNumericException, NasRunException

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def check_finite(opname, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            bad = int(np.size(a) - np.count_nonzero(np.isfinite(a)))
            raise NasNumericException(opname, "%d of %d values" % (bad, np.size(a)))


# zero "same" padding: output extent is ceil(size / stride),
# odd padding totals put the extra row/column at the bottom/right


def same_padding(size, k, stride):
    out = math.ceil(size / stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, total // 2, total - total // 2


def extract_windows(x, kh, kw, stride):
    n, h, w, c = x.shape
    ho, pt, pb = same_padding(h, kh, stride)
    wo, pl, pr = same_padding(w, kw, stride)
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    # windows shape is (N, Ho, Wo, C, kh, kw)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    return win, (x.shape, xp.shape, pt, pl, stride)


# scatter window gradients (N, Ho, Wo, kh, kw, C) back onto the input


def scatter_windows(dwin, geometry):
    xshape, xpshape, pt, pl, stride = geometry
    _, ho, wo, kh, kw, _ = dwin.shape
    dxp = np.zeros(xpshape, dtype=dwin.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dwin[:, :, :, i, j, :]
    return dxp[:, pt:pt + xshape[1], pl:pl + xshape[2], :]


def conv2d_forward(x, w, stride=1):
    kh, kw, cin, _ = w.shape
    if x.shape[-1] != cin:
        raise ShapeMismatchError(
            "conv2d: input has %d channels but kernel expects %d" % (x.shape[-1], cin)
        )
    win, geometry = extract_windows(x, kh, kw, stride)
    out = np.tensordot(win, w, axes=([3, 4, 5], [2, 0, 1]))
    return out, (win, geometry)


def conv2d_backward(dout, w, cache):
    win, geometry = cache
    dw = np.tensordot(win, dout, axes=([0, 1, 2], [0, 1, 2])).transpose(1, 2, 0, 3)
    dwin = np.tensordot(dout, w, axes=([3], [3]))
    return scatter_windows(dwin, geometry), dw


def depthwise_conv_forward(x, w, stride=1):
    kh, kw, c = w.shape
    if x.shape[-1] != c:
        raise ShapeMismatchError(
            "depthwise_conv: input has %d channels but kernel has %d filters" % (x.shape[-1], c)
        )
    win, geometry = extract_windows(x, kh, kw, stride)
    out = np.einsum("nhwcij,ijc->nhwc", win, w)
    return out, (win, geometry)


def depthwise_conv_backward(dout, w, cache):
    win, geometry = cache
    dw = np.einsum("nhwcij,nhwc->ijc", win, dout)
    dwin = np.einsum("nhwc,ijc->nhwijc", dout, w)
    return scatter_windows(dwin, geometry), dw


# running_mean and running_var are updated in place in train mode


def batch_norm_forward(x, gamma, beta, running_mean, running_var, train):
    if gamma.shape[0] != x.shape[-1] or beta.shape[0] != x.shape[-1]:
        raise ShapeMismatchError(
            "batch_norm: %d channels but gamma/beta have %d/%d" % (x.shape[-1], gamma.shape[0], beta.shape[0])
        )
    if train:
        if x.shape[0] < 2:
            raise NasRunException("batch_norm in train mode needs a batch of at least 2, got %d" % x.shape[0])
        mu = x.mean(axis=(0, 1, 2))
        var = x.var(axis=(0, 1, 2))
        running_mean *= BN_MOMENTUM
        running_mean += (1.0 - BN_MOMENTUM) * mu
        running_var *= BN_MOMENTUM
        running_var += (1.0 - BN_MOMENTUM) * var
    else:
        mu = running_mean
        var = running_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mu) * inv_std
    return gamma * xhat + beta, (xhat, inv_std, gamma, train)


def batch_norm_backward(dout, cache):
    xhat, inv_std, gamma, train = cache
    dgamma = np.sum(dout * xhat, axis=(0, 1, 2))
    dbeta = np.sum(dout, axis=(0, 1, 2))
    dxhat = dout * gamma
    if not train:
        return dxhat * inv_std, dgamma, dbeta
    m = xhat.shape[0] * xhat.shape[1] * xhat.shape[2]
    dx = (inv_std / m) * (
        m * dxhat - np.sum(dxhat, axis=(0, 1, 2)) - xhat * np.sum(dxhat * xhat, axis=(0, 1, 2))
    )
    return dx, dgamma, dbeta


# add_stc draws one weight vector per forward pass,
# backward reuses the weights kept in the cache


def combine_forward(inputs, kind, train=False, rng=None):
    first = inputs[0].shape
    for i, x in enumerate(inputs):
        same = x.shape[:3] == first[:3] if kind == "concat" else x.shape == first
        if not same:
            raise ShapeMismatchError(
                "combine %s: input 0 has shape %s but input %d has shape %s" % (kind, first, i, x.shape)
            )
    if kind == "concat":
        widths = [x.shape[-1] for x in inputs]
        return np.concatenate(inputs, axis=-1), (kind, widths)
    b = len(inputs)
    if kind == "add_stc" and train:
        weights = rng.dirichlet(np.ones(b))
    elif kind == "add_stc":
        weights = np.full(b, 1.0 / b)
    elif kind == "add_det":
        weights = np.ones(b)
    else:
        raise NasRunException("unknown combiner %s" % kind)
    weights = weights.astype(inputs[0].dtype)
    out = weights[0] * inputs[0]
    for wt, x in zip(weights[1:], inputs[1:]):
        out = out + wt * x
    return out, (kind, weights)


def combine_backward(dout, cache):
    kind, info = cache
    if kind == "concat":
        return np.split(dout, np.cumsum(info)[:-1], axis=-1)
    return [wt * dout for wt in info]


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return dout * mask


def global_avg_pool_forward(x):
    return x.mean(axis=(1, 2)), x.shape


def global_avg_pool_backward(dout, xshape):
    n, h, w, c = xshape
    return np.broadcast_to(dout[:, None, None, :] / (h * w), xshape).copy()


def dense_forward(x, w, b):
    if x.shape[-1] != w.shape[0]:
        raise ShapeMismatchError("dense: input width %d but weights expect %d" % (x.shape[-1], w.shape[0]))
    return x @ w + b, x


def dense_backward(dout, w, x):
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def softmax(logits):
    return scipy_softmax(logits, axis=1)


# mean cross-entropy over the batch plus its gradient wrt the logits


def softmax_cross_entropy(logits, labels):
    n, c = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeMismatchError("cross-entropy: %d logits rows but labels shape %s" % (n, labels.shape))
    if n and (labels.min() < 0 or labels.max() >= c):
        raise NasDataException(
            "label out of range: labels span [%d, %d] but there are %d classes" % (labels.min(), labels.max(), c)
        )
    lse = logsumexp(logits, axis=1)
    rows = np.arange(n)
    loss = float(np.mean(lse - logits[rows, labels]))
    dlogits = np.exp(logits - lse[:, None])
    dlogits[rows, labels] -= 1.0
    dlogits /= n
    check_finite("softmax_cross_entropy", loss, dlogits)
    return loss, dlogits


# test oracles


def naive_conv2d(x, w, stride):
    n, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    ho, pt, _ = same_padding(h, kh, stride)
    wo, pl, _ = same_padding(wd, kw, stride)
    out = np.zeros((n, ho, wo, cout))
    for b in range(n):
        for oy in range(ho):
            for ox in range(wo):
                for co in range(cout):
                    acc = 0.0
                    for i in range(kh):
                        for j in range(kw):
                            y = oy * stride + i - pt
                            xx = ox * stride + j - pl
                            if 0 <= y < h and 0 <= xx < wd:
                                for ci in range(cin):
                                    acc += x[b, y, xx, ci] * w[i, j, ci, co]
                    out[b, oy, ox, co] = acc
    return out


def naive_depthwise(x, w, stride):
    n, h, wd, c = x.shape
    kh, kw, _ = w.shape
    ho, pt, _ = same_padding(h, kh, stride)
    wo, pl, _ = same_padding(wd, kw, stride)
    out = np.zeros((n, ho, wo, c))
    for b in range(n):
        for oy in range(ho):
            for ox in range(wo):
                for i in range(kh):
                    for j in range(kw):
                        y = oy * stride + i - pt
                        xx = ox * stride + j - pl
                        if 0 <= y < h and 0 <= xx < wd:
                            out[b, oy, ox, :] += x[b, y, xx, :] * w[i, j, :]
    return out


def numeric_grad(f, a, h=1e-5):
    g = np.zeros_like(a)
    it = np.nditer(a, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = a[idx]
        a[idx] = orig + h
        fp = f()
        a[idx] = orig - h
        fm = f()
        a[idx] = orig
        g[idx] = (fp - fm) / (2 * h)
    return g


# error relative to the largest gradient magnitude in the tensor


def relative_error(analytic, numeric):
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-300)
    return float(np.max(np.abs(analytic - numeric)) / scale)


class TestTensorOps(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(2024)

    def test_same_padding(self):
        self.assertEqual(same_padding(5, 3, 1), (5, 1, 1))
        self.assertEqual(same_padding(32, 1, 2), (16, 0, 0))
        self.assertEqual(same_padding(8, 3, 2), (4, 0, 1))
        self.assertEqual(same_padding(7, 5, 2), (4, 2, 2))

    def test_conv_identity_kernel(self):
        x = self.rng.standard_normal((2, 5, 5, 3))
        w = np.eye(3).reshape(1, 1, 3, 3)
        out, _ = conv2d_forward(x, w)
        np.testing.assert_array_equal(out, x)

    def test_conv_matches_naive_loop(self):
        for k in (1, 3, 5):
            for stride in (1, 2):
                h, wd = self.rng.integers(1, 9, size=2)
                cin, cout = self.rng.integers(1, 5, size=2)
                x = self.rng.standard_normal((2, h, wd, cin))
                w = self.rng.standard_normal((k, k, cin, cout))
                out, _ = conv2d_forward(x, w, stride)
                self.assertEqual(out.shape, (2, math.ceil(h / stride), math.ceil(wd / stride), cout))
                np.testing.assert_allclose(out, naive_conv2d(x, w, stride), rtol=0, atol=1e-12)

    def test_randomized_oracle_cases(self):
        for case in range(200):
            rng = np.random.default_rng(case)
            k = int(rng.choice([1, 3, 5]))
            kh, kw = (k, k) if case % 4 else (k, 1)
            stride = int(rng.integers(1, 3))
            h, wd = (int(d) for d in rng.integers(1, 7, size=2))
            cin, cout = (int(d) for d in rng.integers(1, 4, size=2))
            x = rng.standard_normal((1, h, wd, cin))
            w = rng.standard_normal((kh, kw, cin, cout))
            np.testing.assert_allclose(conv2d_forward(x, w, stride)[0], naive_conv2d(x, w, stride), rtol=0, atol=1e-12)
            wdw = rng.standard_normal((kh, kw, cin))
            np.testing.assert_allclose(
                depthwise_conv_forward(x, wdw, stride)[0], naive_depthwise(x, wdw, stride), rtol=0, atol=1e-12
            )

    def test_conv_rectangular_kernels(self):
        x = self.rng.standard_normal((1, 5, 5, 2))
        for shape in ((3, 1), (1, 5), (5, 3)):
            w = self.rng.standard_normal(shape + (2, 3))
            out, _ = conv2d_forward(x, w, 1)
            np.testing.assert_allclose(out, naive_conv2d(x, w, 1), rtol=0, atol=1e-12)

    def test_conv_channel_mismatch(self):
        with self.assertRaises(ShapeMismatchError):
            conv2d_forward(np.zeros((1, 4, 4, 3)), np.zeros((3, 3, 2, 4)))

    def check_conv_grads(self, seed, stride):
        rng = np.random.default_rng(seed)
        k = int(rng.choice([1, 3, 5]))
        x = rng.standard_normal((2, 5, 5, 2))
        w = rng.standard_normal((k, k, 2, 3))
        out, cache = conv2d_forward(x, w, stride)
        r = rng.standard_normal(out.shape)
        dx, dw = conv2d_backward(r, w, cache)

        def loss():
            return float(np.sum(conv2d_forward(x, w, stride)[0] * r))

        self.assertLess(relative_error(dw, numeric_grad(loss, w)), 1e-6)
        self.assertLess(relative_error(dx, numeric_grad(loss, x)), 1e-6)

    def test_conv_grads_random_seeds(self):
        for seed in range(20):
            self.check_conv_grads(seed, 1 + seed % 2)

    def test_depthwise_single_channel_is_conv(self):
        x = self.rng.standard_normal((2, 6, 6, 1))
        w = self.rng.standard_normal((3, 3, 1))
        dw_out, _ = depthwise_conv_forward(x, w)
        conv_out, _ = conv2d_forward(x, w.reshape(3, 3, 1, 1))
        np.testing.assert_allclose(dw_out, conv_out, atol=1e-12)

    def test_depthwise_ones_identity(self):
        x = self.rng.standard_normal((2, 4, 4, 3))
        out, _ = depthwise_conv_forward(x, np.ones((1, 1, 3)))
        np.testing.assert_array_equal(out, x)

    def test_depthwise_grads_random_seeds(self):
        for seed in range(20):
            rng = np.random.default_rng(100 + seed)
            stride = 1 + seed % 2
            x = rng.standard_normal((2, 4, 4, 3))
            w = rng.standard_normal((3, 3, 3))
            out, cache = depthwise_conv_forward(x, w, stride)
            r = rng.standard_normal(out.shape)
            dx, dw = depthwise_conv_backward(r, w, cache)

            def loss():
                return float(np.sum(depthwise_conv_forward(x, w, stride)[0] * r))

            self.assertLess(relative_error(dw, numeric_grad(loss, w)), 1e-6)
            self.assertLess(relative_error(dx, numeric_grad(loss, x)), 1e-6)

    def test_batch_norm_train_normalizes(self):
        x = 3.0 + 2.0 * self.rng.standard_normal((8, 4, 4, 3))
        rm, rv = np.zeros(3), np.ones(3)
        out, _ = batch_norm_forward(x, np.ones(3), np.zeros(3), rm, rv, True)
        var = x.var(axis=(0, 1, 2))
        np.testing.assert_allclose(out.mean(axis=(0, 1, 2)), 0.0, atol=1e-6)
        np.testing.assert_allclose(out.var(axis=(0, 1, 2)), var / (var + BN_EPS), atol=1e-6)
        np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 1, 2)))
        self.assertTrue(np.all(rv >= 0))

    def test_batch_norm_affine_eval(self):
        x = self.rng.standard_normal((4, 2, 2, 2))
        rm, rv = np.zeros(2), np.full(2, 1.0 - BN_EPS)
        out, _ = batch_norm_forward(x, np.full(2, 2.0), np.full(2, 3.0), rm, rv, False)
        np.testing.assert_allclose(out, 2 * x + 3, atol=1e-12)

    def test_batch_norm_rejects_single_example(self):
        with self.assertRaises(NasRunException):
            batch_norm_forward(np.zeros((1, 2, 2, 2)), np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), True)

    def test_batch_norm_grads_random_seeds(self):
        for seed in range(20):
            rng = np.random.default_rng(200 + seed)
            x = rng.standard_normal((3, 3, 3, 2))
            gamma = rng.standard_normal(2)
            beta = rng.standard_normal(2)
            r = rng.standard_normal(x.shape)
            out, cache = batch_norm_forward(x, gamma, beta, np.zeros(2), np.ones(2), True)
            dx, dgamma, dbeta = batch_norm_backward(r, cache)

            def loss():
                y, _ = batch_norm_forward(x, gamma, beta, np.zeros(2), np.ones(2), True)
                return float(np.sum(y * r))

            self.assertLess(relative_error(dx, numeric_grad(loss, x)), 1e-5)
            self.assertLess(relative_error(dgamma, numeric_grad(loss, gamma)), 1e-5)
            self.assertLess(relative_error(dbeta, numeric_grad(loss, beta)), 1e-5)

    def test_combine_add_det(self):
        x = self.rng.standard_normal((2, 3, 3, 4))
        out, _ = combine_forward([x, x], "add_det")
        np.testing.assert_allclose(out, 2 * x)

    def test_combine_add_stc_eval_equal_weights(self):
        x = self.rng.standard_normal((2, 3, 3, 4))
        y = self.rng.standard_normal((2, 3, 3, 4))
        out, _ = combine_forward([x, y], "add_stc", train=False)
        np.testing.assert_allclose(out, 0.5 * x + 0.5 * y)

    def test_combine_add_stc_train_weights_on_simplex(self):
        xs = [self.rng.standard_normal((2, 2, 2, 3)) for _ in range(4)]
        for _ in range(50):
            _, (_, weights) = combine_forward(xs, "add_stc", train=True, rng=self.rng)
            self.assertTrue(np.all(weights >= 0))
            self.assertAlmostEqual(float(weights.sum()), 1.0, delta=1e-12)

    def test_combine_add_stc_backward_reuses_weights(self):
        xs = [self.rng.standard_normal((2, 2, 2, 3)) for _ in range(3)]
        _, cache = combine_forward(xs, "add_stc", train=True, rng=self.rng)
        d = np.ones((2, 2, 2, 3))
        grads = combine_backward(d, cache)
        for g, wt in zip(grads, cache[1]):
            np.testing.assert_allclose(g, wt)

    def test_combine_concat(self):
        xs = [self.rng.standard_normal((2, 4, 4, 16)) for _ in range(4)]
        out, cache = combine_forward(xs, "concat")
        self.assertEqual(out.shape[-1], 64)
        for i, x in enumerate(xs):
            np.testing.assert_array_equal(out[..., 16 * i:16 * (i + 1)], x)
        for g, x in zip(combine_backward(out, cache), xs):
            np.testing.assert_array_equal(g, x)

    def test_combine_shape_mismatch(self):
        with self.assertRaises(ShapeMismatchError):
            combine_forward([np.zeros((1, 2, 2, 3)), np.zeros((1, 2, 2, 4))], "add_det")
        with self.assertRaises(ShapeMismatchError):
            combine_forward([np.zeros((1, 2, 2, 3)), np.zeros((1, 3, 3, 3))], "concat")

    def test_relu_idempotent(self):
        x = self.rng.standard_normal((2, 3, 3, 2))
        once, _ = relu_forward(x)
        twice, _ = relu_forward(once)
        np.testing.assert_array_equal(once, twice)
        np.testing.assert_array_equal(relu_backward(np.ones_like(x), x > 0), (x > 0).astype(float))
        _, mask = relu_forward(np.zeros(3))
        self.assertFalse(mask.any())

    def test_pool_and_dense_grads(self):
        x = self.rng.standard_normal((3, 2, 2, 4))
        w = self.rng.standard_normal((4, 5))
        b = self.rng.standard_normal(5)
        r = self.rng.standard_normal((3, 5))

        def loss():
            pooled, _ = global_avg_pool_forward(x)
            return float(np.sum(dense_forward(pooled, w, b)[0] * r))

        pooled, pshape = global_avg_pool_forward(x)
        _, xin = dense_forward(pooled, w, b)
        dpooled, dw, db = dense_backward(r, w, xin)
        dx = global_avg_pool_backward(dpooled, pshape)
        self.assertLess(relative_error(dw, numeric_grad(loss, w)), 1e-8)
        self.assertLess(relative_error(db, numeric_grad(loss, b)), 1e-8)
        self.assertLess(relative_error(dx, numeric_grad(loss, x)), 1e-8)

    def test_softmax_rows_sum_to_one(self):
        p = softmax(self.rng.standard_normal((6, 10)) * 20)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)

    def test_cross_entropy_analytic(self):
        loss, _ = softmax_cross_entropy(np.zeros((4, 10)), np.arange(4))
        self.assertAlmostEqual(loss, math.log(10), places=12)
        logits = np.array([[1000.0, 0.0], [0.0, 1000.0]])
        loss, _ = softmax_cross_entropy(logits, np.array([0, 1]))
        self.assertAlmostEqual(loss, 0.0, places=12)

    def test_cross_entropy_grad(self):
        logits = self.rng.standard_normal((5, 4))
        labels = self.rng.integers(0, 4, size=5)
        _, d = softmax_cross_entropy(logits, labels)

        def loss():
            return softmax_cross_entropy(logits, labels)[0]

        self.assertLess(relative_error(d, numeric_grad(loss, logits)), 1e-7)

    def test_cross_entropy_label_range(self):
        with self.assertRaises(NasDataException):
            softmax_cross_entropy(np.zeros((2, 3)), np.array([0, 3]))

    def test_check_finite(self):
        with self.assertRaises(NasNumericException) as ctx:
            check_finite("conv2d", np.array([1.0, np.nan]))
        self.assertIn("conv2d", str(ctx.exception))


if __name__ == "__main__":
    unittest.main()
