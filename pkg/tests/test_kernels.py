import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hspace import kernels

needs_cython = pytest.mark.skipif(kernels.BACKEND != "cython", reason="compiled kernels not built")

GEOMETRIES = [(3, 3, 1, 1), (3, 3, 2, 1), (1, 1, 1, 0), (2, 2, 2, 0), (3, 3, 1, 0)]


def naive_im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh, ow = (h + 2 * pad - kh) // stride + 1, (w + 2 * pad - kw) // stride + 1
    out = np.zeros((c * kh * kw, n * oh * ow), x.dtype)
    for ci in range(c):
        for i in range(kh):
            for j in range(kw):
                row = (ci * kh + i) * kw + j
                for b in range(n):
                    for y in range(oh):
                        for z in range(ow):
                            out[row, (b * oh + y) * ow + z] = xp[b, ci, y * stride + i, z * stride + j]
    return out


@pytest.mark.parametrize("kh,kw,stride,pad", GEOMETRIES)
def test_python_im2col_matches_loop_oracle(rng, kh, kw, stride, pad):
    x = rng.standard_normal((2, 3, 6, 5))
    np.testing.assert_array_equal(kernels.im2col(x, kh, kw, stride, pad, backend="python"),
                                  naive_im2col(x, kh, kw, stride, pad))


@pytest.mark.parametrize("kh,kw,stride,pad", GEOMETRIES)
def test_col2im_is_adjoint(rng, kh, kw, stride, pad):
    x = rng.standard_normal((2, 3, 6, 5))
    cols = kernels.im2col(x, kh, kw, stride, pad)
    y = rng.standard_normal(cols.shape)
    back = kernels.col2im(y, x.shape, kh, kw, stride, pad)
    assert abs(np.sum(cols * y) - np.sum(x * back)) < 1e-10 * np.abs(cols * y).sum()


@needs_cython
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("kh,kw,stride,pad", GEOMETRIES)
def test_backends_agree(rng, dtype, kh, kw, stride, pad):
    x = rng.standard_normal((2, 4, 8, 7)).astype(dtype)
    a = kernels.im2col(x, kh, kw, stride, pad, backend="python")
    b = kernels.im2col(x, kh, kw, stride, pad, backend="cython")
    assert b.dtype == dtype and np.array_equal(a, b)
    y = rng.standard_normal(a.shape).astype(dtype)
    ca = kernels.col2im(y, x.shape, kh, kw, stride, pad, backend="python")
    cb = kernels.col2im(y, x.shape, kh, kw, stride, pad, backend="cython")
    np.testing.assert_allclose(ca, cb, rtol=1e-5 if dtype == np.float32 else 1e-12, atol=1e-6)


@needs_cython
@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(3, 9), st.integers(3, 9),
       st.integers(1, 3), st.integers(1, 2), st.integers(0, 1))
def test_backends_agree_on_random_geometry(n, c, h, w, k, stride, pad):
    if k > h + 2 * pad or k > w + 2 * pad:
        return
    x = np.random.default_rng(h * w + k).standard_normal((n, c, h, w))
    np.testing.assert_array_equal(kernels.im2col(x, k, k, stride, pad, backend="python"),
                                  kernels.im2col(x, k, k, stride, pad, backend="cython"))


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.im2col(np.zeros((1, 1, 3, 3)), 3, 3, backend="fortran")
