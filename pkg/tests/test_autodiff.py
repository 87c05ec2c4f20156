import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hspace import autodiff as ad
from hspace import denoiser as dn
from hspace import jacobian as jc
from hspace.autodiff import Tensor

from oracles import fd_jacobian


def rel(a, b):
    return float(np.linalg.norm(np.ravel(a) - np.ravel(b)) / max(np.linalg.norm(np.ravel(b)), 1e-300))


def _const(shape, seed):
    return Tensor(np.random.default_rng(seed).standard_normal(shape))


# each entry: (name, input shape, map built from engine primitives)
PRIMITIVES = [
    ("add", (2, 3), lambda x: x + _const((2, 3), 1)),
    ("sub", (2, 3), lambda x: _const((2, 3), 2) - x),
    ("mul", (2, 3), lambda x: x * x * _const((2, 3), 3)),
    ("silu", (4, 5), ad.silu),
    ("square", (3,), ad.square),
    ("reshape", (2, 6), lambda x: ad.reshape(x, (3, 4)) * _const((3, 4), 4)),
    ("concat", (2, 3, 4, 4), lambda x: ad.concat(x, x * x, axis=1)),
    ("upsample", (2, 3, 4, 4), ad.upsample2x),
    ("affine", (3, 5), lambda x: ad.affine(x, _const((5, 4), 5), _const((4,), 6))),
    ("conv_s1", (2, 3, 6, 6), lambda x: ad.conv2d(x, _const((4, 3, 3, 3), 7), _const((4,), 8))),
    ("conv_s2", (2, 3, 6, 6), lambda x: ad.conv2d(x, _const((4, 3, 3, 3), 9), None, stride=2)),
    ("conv_1x1", (2, 3, 5, 5), lambda x: ad.conv2d(x, _const((2, 3, 1, 1), 10))),
    ("group_norm", (2, 8, 3, 3), lambda x: ad.group_norm(x, _const((8,), 11), _const((8,), 12), 4)),
    ("sum_all", (3, 4), lambda x: ad.reshape(ad.sum_all(x * x), (1,))),
    ("mse", (3, 4), lambda x: ad.reshape(ad.mse(x, np.ones((3, 4))), (1,))),
]


@pytest.mark.parametrize("name,shape,fn", PRIMITIVES, ids=[p[0] for p in PRIMITIVES])
def test_primitive_adjoint_identity(name, shape, fn, rng):
    for _ in range(5):
        h = rng.standard_normal(shape)
        v = rng.standard_normal(shape)
        out_shape = ad.DifferentiableFunction(fn).value(h).shape
        u = rng.standard_normal(out_shape)
        lhs = float(np.sum(u * ad.jvp(fn, h, v)))
        rhs = float(np.sum(ad.vjp(fn, h, u) * v))
        assert abs(lhs - rhs) <= 1e-10 * max(abs(lhs), 1.0)


@pytest.mark.parametrize("name,shape,fn", PRIMITIVES, ids=[p[0] for p in PRIMITIVES])
def test_primitive_jvp_matches_finite_differences(name, shape, fn, rng):
    h = rng.standard_normal(shape)
    v = rng.standard_normal(shape)
    f = ad.DifferentiableFunction(fn)
    a = 1e-3
    fd = (f.value(h + a * v) - f.value(h - a * v)) / (2 * a)
    assert rel(ad.jvp(fn, h, v), fd) < 1e-3


def test_jvp_identity_returns_direction(rng):
    h, v = rng.standard_normal(7), rng.standard_normal(7)
    np.testing.assert_array_equal(ad.jvp(lambda x: x, h, v), v)


def test_jvp_of_square_is_two_h_v(rng):
    h, v = rng.standard_normal(9), rng.standard_normal(9)
    np.testing.assert_allclose(ad.jvp(lambda x: x * x, h, v), 2 * h * v, rtol=1e-12)


def test_vjp_identity_returns_cotangent(rng):
    h, u = rng.standard_normal(5), rng.standard_normal(5)
    np.testing.assert_array_equal(ad.vjp(lambda x: x, h, u), u)


def test_vjp_dense_matrix_is_transpose_product(rng):
    A = rng.standard_normal((6, 4))
    W = Tensor(A.T.copy())
    f = lambda x: ad.affine(x, W)
    h = rng.standard_normal((1, 4))
    u = rng.standard_normal((1, 6))
    np.testing.assert_allclose(ad.vjp(f, h, u)[0], A.T @ u[0], rtol=1e-12)


def test_shape_mismatch_rejected(rng):
    with pytest.raises(ad.ShapeError):
        ad.jvp(lambda x: x, np.zeros(3), np.zeros(4))
    with pytest.raises(ad.ShapeError):
        ad.vjp(lambda x: x, np.zeros(3), np.zeros(4))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-3, 3)),
       arrays(np.float64, (3, 4), elements=st.floats(-3, 3)),
       st.floats(-4, 4))
def test_jvp_is_linear_in_direction(h, v, c):
    fn = lambda x: ad.silu(x) * x
    np.testing.assert_allclose(ad.jvp(fn, h, c * v), c * ad.jvp(fn, h, v), rtol=1e-9, atol=1e-12)


# ------------------------------------------------------------ the denoiser

def _h_probe(params, seed=0, t=40):
    rng = np.random.default_rng(seed)
    x_t = rng.standard_normal(params.config.image_shape)
    return jc.DenoiserProbe(params, x_t, t)


def test_denoiser_adjoint_identity(tiny64, rng):
    probe = _h_probe(tiny64)
    h = probe.h
    for _ in range(10):
        v = rng.standard_normal((probe.d_in, 1))
        u = rng.standard_normal((probe.d_out, 1))
        lhs = float(u[:, 0] @ probe.jvp(h, v)[:, 0])
        rhs = float(probe.vjp(h, u)[:, 0] @ v[:, 0])
        assert abs(lhs - rhs) <= 1e-5 * abs(lhs)


def test_denoiser_jvp_matches_finite_differences(tiny64, rng):
    probe = _h_probe(tiny64, seed=1)
    h = probe.h
    a = 1e-3
    for _ in range(5):
        v = rng.standard_normal(h.shape)
        fd = (probe.value(h + a * v) - probe.value(h - a * v)) / (2 * a)
        assert rel(probe.jvp(h, v.reshape(-1, 1))[:, 0], fd) < 1e-3


def test_denoiser_batched_jvp_equals_single_columns(tiny64, rng):
    probe = _h_probe(tiny64, seed=2)
    V = rng.standard_normal((probe.d_in, 3))
    block = probe.jvp(probe.h, V)
    for i in range(3):
        np.testing.assert_allclose(block[:, i], probe.jvp(probe.h, V[:, i:i + 1])[:, 0], rtol=1e-10, atol=1e-12)


def test_small_dense_jacobian_matches_jvp_columns(rng):
    W = rng.standard_normal((3, 4))
    f = ad.DifferentiableFunction(lambda x: ad.silu(ad.affine(x, Tensor(W))))
    h = rng.standard_normal((1, 3))
    J = fd_jacobian(f.value, h, step=1e-6)
    cols = np.stack([ad.jvp(f, h, e.reshape(1, 3)).ravel() for e in np.eye(3)], axis=1)
    np.testing.assert_allclose(cols, J, rtol=1e-6, atol=1e-9)


# ------------------------------------------------------------ grad_params

def test_grad_of_half_squared_norm_is_params(rng):
    params = {"a": rng.standard_normal((3, 2)), "b": rng.standard_normal(4)}
    loss = lambda p: ad.mul(ad.sum_all(ad.square(p["a"])) + ad.sum_all(ad.square(p["b"])), 0.5)
    value, grads = ad.grad_params(loss, params)
    for k in params:
        np.testing.assert_allclose(grads[k], params[k], rtol=1e-12)
    assert value == pytest.approx(0.5 * sum(float((v ** 2).sum()) for v in params.values()))


def test_linear_least_squares_closed_form(rng):
    x = rng.standard_normal((1, 4))
    y = rng.standard_normal((1, 3))
    params = {"W": rng.standard_normal((4, 3)), "b": rng.standard_normal(3)}
    loss = lambda p: ad.mse(ad.affine(Tensor(x), p["W"], p["b"]), y)
    _, grads = ad.grad_params(loss, params)
    r = x @ params["W"] + params["b"] - y
    np.testing.assert_allclose(grads["W"], x.T @ r * (2 / 3), rtol=1e-12)
    np.testing.assert_allclose(grads["b"], r[0] * (2 / 3), rtol=1e-12)


def test_tiny_training_loss_gradient_matches_finite_differences(tiny64):
    rng = np.random.default_rng(5)
    cfg = tiny64.config
    x_t = rng.standard_normal((2,) + cfg.image_shape)
    t = np.array([10, 70])
    target = rng.standard_normal(x_t.shape)
    fn = dn.loss_fn(cfg, x_t, t, target)
    arrays = {k: v.copy() for k, v in tiny64.arrays.items()}
    _, grads = ad.grad_params(fn, arrays)
    names = sorted(arrays)
    a = 1e-3
    for _ in range(20):
        name = names[rng.integers(len(names))]
        idx = tuple(rng.integers(s) for s in arrays[name].shape)
        old = arrays[name][idx]
        arrays[name][idx] = old + a
        with ad.no_grad():
            up = float(fn({k: Tensor(v) for k, v in arrays.items()}).data)
        arrays[name][idx] = old - a
        with ad.no_grad():
            down = float(fn({k: Tensor(v) for k, v in arrays.items()}).data)
        arrays[name][idx] = old
        fd = (up - down) / (2 * a)
        assert abs(grads[name][idx] - fd) <= 1e-3 * max(abs(fd), 1e-4), name


def test_non_finite_loss_names_parameter_block():
    params = {"good": np.ones(2), "bad": np.array([1.0, np.nan])}
    loss = lambda p: ad.sum_all(p["good"]) + ad.sum_all(p["bad"])
    with pytest.raises(ad.NonFiniteError, match="bad"):
        ad.grad_params(loss, params)


def test_evaluation_is_bit_deterministic(tiny64):
    x = np.random.default_rng(0).standard_normal((3,) + tiny64.config.image_shape)
    a, ha = dn.forward(tiny64, x, 17)
    b, hb = dn.forward(tiny64, x, 17)
    assert np.array_equal(a, b) and np.array_equal(ha, hb)
