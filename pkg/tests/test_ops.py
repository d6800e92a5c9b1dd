import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sconv import _kernels_py, ops
from sconv.errors import DimensionError, NumericError
from sconv.tensor import ConvGeometry

try:
    from sconv import _kernels_cy
except ImportError:
    _kernels_cy = None


def naive_conv2d(x, w, b, geom):
    """Quadruple-loop reference convolution with zero padding."""
    c_out, c_in, kh, kw = w.shape
    _, h, ww = x.shape
    ho, wo = geom.out_size(h, ww)
    y = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for oy in range(ho):
            for ox in range(wo):
                acc = 0.0
                for ci in range(c_in):
                    for ky in range(kh):
                        for kx in range(kw):
                            iy = oy * geom.stride - geom.padding + ky * geom.dilation
                            ix = ox * geom.stride - geom.padding + kx * geom.dilation
                            if 0 <= iy < h and 0 <= ix < ww:
                                acc += w[o, ci, ky, kx] * x[ci, iy, ix]
                y[o, oy, ox] = acc + (b[o] if b is not None else 0.0)
    return y


class TestConv2d:
    @pytest.mark.parametrize("stride,pad,dil", [(1, 1, 1), (2, 1, 1), (1, 0, 1),
                                                (1, 2, 2), (2, 2, 1)])
    def test_matches_naive_oracle(self, rng, stride, pad, dil):
        geom = ConvGeometry(3, 3, stride=stride, padding=pad, dilation=dil)
        x = rng.standard_normal((2, 9, 8))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        y, _ = ops.conv2d_forward(x, w, b, geom)
        np.testing.assert_allclose(y, naive_conv2d(x, w, b, geom),
                                   rtol=1e-12, atol=1e-12)

    def test_no_bias(self, rng):
        geom = ConvGeometry(1, 1)
        x = rng.standard_normal((2, 4, 4))
        w = rng.standard_normal((3, 2, 1, 1))
        y, _ = ops.conv2d_forward(x, w, None, geom)
        np.testing.assert_allclose(y, naive_conv2d(x, w, None, geom), atol=1e-12)

    def test_shape_mismatch_raises(self, rng):
        geom = ConvGeometry(3, 3, padding=1)
        with pytest.raises(DimensionError):
            ops.conv2d_forward(rng.standard_normal((2, 4, 4)),
                               rng.standard_normal((3, 5, 3, 3)), None, geom)

    def test_nonfinite_input_raises(self):
        geom = ConvGeometry(3, 3, padding=1)
        x = np.full((1, 4, 4), np.nan)
        with pytest.raises(NumericError):
            ops.conv2d_forward(x, np.ones((1, 1, 3, 3)), None, geom)


class TestKernelBackends:
    """The compiled extension must agree with the pure fallback bit-for-bit
    at the tolerances below (identical arithmetic, different loops)."""

    @pytest.mark.skipif(_kernels_cy is None, reason="compiled backend not built")
    def test_im2col_parity(self, rng):
        x = rng.standard_normal((3, 10, 9))
        for args in ((3, 3, 1, 1, 1), (3, 3, 2, 1, 1), (2, 4, 1, 2, 2)):
            a = _kernels_py.im2col(x, *args)
            b = _kernels_cy.im2col(x, *args)
            np.testing.assert_allclose(a, b, rtol=0, atol=0)

    @pytest.mark.skipif(_kernels_cy is None, reason="compiled backend not built")
    def test_col2im_parity(self, rng):
        cols = rng.standard_normal((3 * 9, 8 * 7))
        a = _kernels_py.col2im(cols, 3, 8, 7, 3, 3, 1, 1, 1)
        b = _kernels_cy.col2im(cols, 3, 8, 7, 3, 3, 1, 1, 1)
        np.testing.assert_allclose(a, b, rtol=1e-14, atol=1e-14)

    @pytest.mark.skipif(_kernels_cy is None, reason="compiled backend not built")
    def test_deform_gather_parity(self, rng):
        fmap = np.ascontiguousarray(rng.standard_normal((6, 7, 4)))
        coords = np.ascontiguousarray(rng.uniform(-2, 8, size=(9, 5, 5, 2)))
        a = _kernels_py.deform_gather(fmap, coords)
        b = _kernels_cy.deform_gather(fmap, coords)
        np.testing.assert_allclose(a, b, rtol=1e-14, atol=1e-14)
        dout = rng.standard_normal(a.shape)
        da = _kernels_py.deform_gather_backward(dout, fmap, coords)
        db = _kernels_cy.deform_gather_backward(dout, fmap, coords)
        np.testing.assert_allclose(da[0], db[0], rtol=1e-13, atol=1e-13)
        np.testing.assert_allclose(da[1], db[1], rtol=1e-13, atol=1e-13)

    @pytest.mark.skipif(_kernels_cy is None, reason="compiled backend not built")
    def test_pack_cols_parity(self, rng):
        xs = np.ascontiguousarray(rng.standard_normal((9, 5, 6, 4)))
        for pack, unpack in (
            (("pack_cols_cmajor", "unpack_cols_cmajor")),
            (("pack_cols_kmajor", "unpack_cols_kmajor")),
        ):
            a = getattr(_kernels_py, pack)(xs)
            b = getattr(_kernels_cy, pack)(xs)
            np.testing.assert_allclose(a, b, rtol=0, atol=0)
            cols = np.ascontiguousarray(rng.standard_normal(a.shape))
            ua = getattr(_kernels_py, unpack)(cols, 9, 5, 6)
            ub = getattr(_kernels_cy, unpack)(cols, 9, 5, 6)
            np.testing.assert_allclose(ua, ub, rtol=0, atol=0)

    def test_pack_unpack_roundtrip(self, rng):
        xs = np.ascontiguousarray(rng.standard_normal((4, 3, 7, 5)))
        rc = _kernels_py.unpack_cols_cmajor(_kernels_py.pack_cols_cmajor(xs), 4, 3, 7)
        rk = _kernels_py.unpack_cols_kmajor(_kernels_py.pack_cols_kmajor(xs), 4, 3, 7)
        np.testing.assert_array_equal(rc, xs)
        np.testing.assert_array_equal(rk, xs)

    def test_col2im_is_adjoint_of_im2col(self, rng):
        """<im2col(x), y> == <x, col2im(y)> for all x, y (transpose pair)."""
        x = rng.standard_normal((2, 6, 5))
        cols = _kernels_py.im2col(x, 3, 3, 2, 1, 1)
        y = rng.standard_normal(cols.shape)
        lhs = float((cols * y).sum())
        rhs = float((x * _kernels_py.col2im(y, 2, 6, 5, 3, 3, 2, 1, 1)).sum())
        assert abs(lhs - rhs) < 1e-10

    def test_gather_on_integer_grid_is_lookup(self, rng):
        fmap = np.ascontiguousarray(rng.standard_normal((5, 5, 3)))
        yy, xx = np.meshgrid(np.arange(5.0), np.arange(5.0), indexing="ij")
        coords = np.ascontiguousarray(np.stack([yy, xx], axis=-1)[None])
        out = _kernels_py.deform_gather(fmap, coords)
        np.testing.assert_allclose(out[0], fmap, atol=0)

    def test_gather_outside_reads_zero(self, rng):
        fmap = np.ascontiguousarray(rng.standard_normal((4, 4, 2)))
        coords = np.ascontiguousarray(
            np.array([[[[-5.0, -5.0]]], [[[10.0, 2.0]]]]))
        out = _kernels_py.deform_gather(fmap, coords)
        np.testing.assert_array_equal(out, 0)


class TestActivations:
    def test_relu_values(self):
        y, _ = ops.relu(np.array([-1.0, 0.0, 2.5]))
        np.testing.assert_array_equal(y, [0.0, 0.0, 2.5])

    def test_relu_grad_at_zero_is_zero(self):
        _, cache = ops.relu(np.array([0.0]))
        assert ops.relu_backward(cache, np.array([3.0]))["input"][0] == 0.0

    def test_sigmoid_extremes_stable(self):
        y, _ = ops.sigmoid(np.array([-800.0, 0.0, 800.0]))
        assert np.all(np.isfinite(y))
        np.testing.assert_allclose(y, [0.0, 0.5, 1.0], atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-30, 30))
    def test_sigmoid_symmetry(self, v):
        a, _ = ops.sigmoid(np.array([v]))
        b, _ = ops.sigmoid(np.array([-v]))
        assert abs((a[0] + b[0]) - 1.0) < 1e-12


class TestBilinearResize:
    def test_identity_size_is_copy(self, rng):
        x = rng.standard_normal((3, 5, 5))
        y, _ = ops.bilinear_resize(x, 5, 5)
        np.testing.assert_array_equal(x, y)
        assert y is not x

    def test_constant_map_preserved(self):
        x = np.full((2, 6, 4), 3.25)
        y, _ = ops.bilinear_resize(x, 13, 9)
        np.testing.assert_allclose(y, 3.25, atol=1e-12)

    def test_linear_ramp_preserved_on_upsampling(self):
        # interior of a linear ramp stays linear under bilinear interpolation
        x = np.arange(8.0)[None, None, :] * np.ones((1, 8, 1))
        y, _ = ops.bilinear_resize(x, 16, 16)
        d = np.diff(y[0, 8, 2:-2])
        np.testing.assert_allclose(d, d[0], atol=1e-12)

    def test_downsample_then_shape(self, rng):
        y, _ = ops.bilinear_resize(rng.standard_normal((4, 32, 48)), 5, 7)
        assert y.shape == (4, 5, 7)

    def test_invalid_target_raises(self, rng):
        with pytest.raises(DimensionError):
            ops.bilinear_resize(rng.standard_normal((1, 4, 4)), 0, 4)


class TestSoftmaxCE:
    def test_matches_log_softmax_oracle(self, rng):
        logits = rng.standard_normal((4, 3, 3))
        labels = rng.integers(0, 4, size=(3, 3))
        loss, _, meta = ops.softmax_cross_entropy(logits, labels, 255)
        # independent oracle via scipy-free dense computation
        e = np.exp(logits - logits.max(axis=0))
        logp = np.log(e / e.sum(axis=0))
        ref = -np.mean([logp[labels[i, j], i, j]
                        for i in range(3) for j in range(3)])
        assert abs(loss - ref) < 1e-12
        assert meta["n_pixels"] == 9

    def test_ignore_pixels_have_zero_grad(self, rng):
        logits = rng.standard_normal((3, 2, 2))
        labels = np.array([[255, 0], [1, 255]])
        _, grad, _ = ops.softmax_cross_entropy(logits, labels, 255)
        np.testing.assert_array_equal(grad[:, 0, 0], 0)
        np.testing.assert_array_equal(grad[:, 1, 1], 0)

    def test_all_ignored_returns_zero(self, rng):
        logits = rng.standard_normal((3, 2, 2))
        labels = np.full((2, 2), 255)
        loss, grad, meta = ops.softmax_cross_entropy(logits, labels, 255)
        assert loss == 0.0 and meta["all_ignored"]
        np.testing.assert_array_equal(grad, 0)

    def test_grad_sums_to_zero_over_classes_unweighted(self, rng):
        logits = rng.standard_normal((5, 4, 4))
        labels = rng.integers(0, 5, size=(4, 4))
        _, grad, _ = ops.softmax_cross_entropy(logits, labels, 255)
        np.testing.assert_allclose(grad.sum(axis=0), 0, atol=1e-12)

    def test_extreme_logits_finite(self):
        logits = np.zeros((2, 2, 2))
        logits[0] = 1e4
        loss, grad, _ = ops.softmax_cross_entropy(
            logits, np.zeros((2, 2), dtype=np.int64), 255)
        assert np.isfinite(loss) and np.all(np.isfinite(grad))
