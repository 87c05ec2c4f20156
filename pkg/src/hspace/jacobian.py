"""Top singular vectors of the Jacobian of the denoiser with respect to the
bottleneck, computed without forming the Jacobian.

Every probe maps a batch of bottleneck tensors (k, *in_shape) to a batch of
outputs (k, *out_shape) row by row, so one forward-mode pass evaluates k
Jacobian-vector products and one reverse pass evaluates k vector-Jacobian
products. Blocks of vectors are stored as columns: V is (d_in, k).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import denoiser as dn
from .autodiff import Tensor
from .directions import Direction, _fix_signs

log = logging.getLogger(__name__)


class JacobianProbe:
    """Differentiable map with fixed context, viewed through its Jacobian."""

    in_shape: tuple = ()
    out_shape: tuple = ()
    max_batch: int = 64

    def apply(self, H: Tensor) -> Tensor:
        raise NotImplementedError

    @property
    def d_in(self) -> int:
        return int(np.prod(self.in_shape))

    @property
    def d_out(self) -> int:
        return int(np.prod(self.out_shape))

    def _check_h(self, h):
        h = np.asarray(h)
        if h.shape != tuple(self.in_shape):
            raise ad.ShapeError(f"probe input must have shape {self.in_shape}, got {h.shape}")
        return h

    def value(self, h) -> np.ndarray:
        h = self._check_h(h)
        with ad.no_grad():
            return self.apply(Tensor(h[None])).data[0]

    def _columns(self, h, B, d, fn):
        h = self._check_h(h)
        B = np.asarray(B, dtype=h.dtype)
        if B.ndim != 2 or B.shape[0] != d:
            raise ad.ShapeError(f"expected a ({d}, k) block, got {B.shape}")
        parts = [fn(h, B[:, s:s + self.max_batch]) for s in range(0, B.shape[1], self.max_batch)]
        if not parts:
            return np.zeros((0, 0))
        return np.concatenate(parts, axis=1)

    def jvp(self, h, V) -> np.ndarray:
        """J @ V for a (d_in, k) block; returns (d_out, k)."""
        def one(h, Vb):
            k = Vb.shape[1]
            H = np.broadcast_to(h, (k,) + h.shape).copy()
            with ad.no_grad():
                out = self.apply(Tensor(H, tangent=Vb.T.reshape((k,) + h.shape)))
            tan = out.tangent if out.tangent is not None else np.zeros_like(out.data)
            return tan.reshape(k, -1).T
        return self._columns(h, V, self.d_in, one)

    def vjp(self, h, U) -> np.ndarray:
        """J^T @ U for a (d_out, k) block; returns (d_in, k)."""
        def one(h, Ub):
            k = Ub.shape[1]
            leaf = Tensor(np.broadcast_to(h, (k,) + h.shape).copy(), requires_grad=True)
            out = self.apply(leaf)
            ad.backward(out, Ub.T.reshape(out.shape).astype(out.dtype))
            g = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
            return g.reshape(k, -1).T
        return self._columns(h, U, self.d_out, one)


class LinearProbe(JacobianProbe):
    """h -> A h for an explicit matrix (the Jacobian is A everywhere)."""

    def __init__(self, A):
        self.A = np.asarray(A)
        if self.A.ndim != 2:
            raise ValueError("A must be a matrix")
        self.out_shape, self.in_shape = (self.A.shape[0],), (self.A.shape[1],)
        self._W = Tensor(self.A.T.copy())

    def apply(self, H):
        W = self._W if self._W.dtype == H.dtype else Tensor(self._W.data.astype(H.dtype))
        return ad.affine(H, W)


class FunctionProbe(JacobianProbe):
    """Wraps a batched map ``fn(Tensor (k, *in)) -> Tensor (k, *out)``."""

    def __init__(self, fn, in_shape, out_shape):
        self.fn = fn
        self.in_shape, self.out_shape = tuple(in_shape), tuple(out_shape)

    def apply(self, H):
        return self.fn(H)


class DenoiserProbe(JacobianProbe):
    """h -> eps(x_t, h), or the predicted clean image, at one (x_t, t).

    The skip tensors and time embedding are computed once from ``x_t`` and
    held fixed, so only the decoder is differentiated.
    """

    def __init__(self, params: dn.DenoiserParams, x_t, t: int, target: str = "eps",
                 schedule=None, max_batch: int = 16):
        if target not in ("eps", "x0"):
            raise ValueError(f"unknown probe target {target!r}")
        if target == "x0" and schedule is None:
            raise ValueError("the x0 target needs the noise schedule")
        cfg = params.config
        self.params, self.t, self.target = params, int(t), target
        self.x_t = np.asarray(x_t, dtype=params.dtype).reshape(cfg.image_shape)
        self.state = dn.encode(params, self.x_t, self.t)
        self.in_shape, self.out_shape = cfg.h_shape, cfg.image_shape
        self.max_batch = max_batch
        if target == "x0":
            ab = schedule.alpha_bar[self.t]
            self._x0_coef = (1.0 / np.sqrt(ab), -np.sqrt(1.0 - ab) / np.sqrt(ab))

    @property
    def h(self) -> np.ndarray:
        """The bottleneck activation of ``x_t`` (the natural probe point)."""
        return self.state.h[0]

    def apply(self, H):
        eps = dn.decode_from(self.params, self.state, H)
        if self.target == "eps":
            return eps
        a, b = self._x0_coef
        x = Tensor(np.broadcast_to(self.x_t * a, eps.shape).astype(eps.dtype))
        return x + eps * Tensor(np.asarray(b, dtype=eps.dtype))


class MaskedProbe(JacobianProbe):
    def __init__(self, probe: JacobianProbe, mask):
        self.probe = probe
        self.mask = mask
        self.in_shape, self.out_shape = probe.in_shape, probe.out_shape
        self.max_batch = probe.max_batch

    def apply(self, H):
        out = self.probe.apply(H)
        return out * Tensor(self.mask.astype(out.dtype))


def masked_probe(probe: JacobianProbe, mask) -> MaskedProbe:
    """Restrict the probe's output to a region: outputs become f(h) * mask."""
    m = np.asarray(mask, dtype=np.float64)
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("mask values must be exactly 0 or 1")
    try:
        m = np.broadcast_to(m, probe.out_shape)
    except ValueError:
        raise ad.ShapeError(f"mask shape {m.shape} does not fit output {probe.out_shape}") from None
    return MaskedProbe(probe, m.copy())


def jtj_apply(probe: JacobianProbe, h, v) -> np.ndarray:
    """J^T J v for one bottleneck-shaped ``v``, via a jvp then a vjp."""
    v = np.asarray(v)
    if v.shape != tuple(probe.in_shape):
        raise ad.ShapeError(f"v must have shape {probe.in_shape}, got {v.shape}")
    col = v.reshape(-1, 1)
    return probe.vjp(h, probe.jvp(h, col))[:, 0].reshape(v.shape)


# ---------------------------------------------------------------- iteration

@dataclass(frozen=True)
class StoppingRule:
    """Stop when every singular value estimate moves by less than ``tol``
    (relative) between iterations, or after ``max_iter`` iterations."""
    tol: float = 1e-4
    max_iter: int = 30

    def __post_init__(self):
        if self.tol <= 0 or self.max_iter < 1:
            raise ValueError("tol must be positive and max_iter at least 1")


@dataclass
class SpectralResult:
    V: np.ndarray            # (d_in, k), orthonormal columns
    sigma: np.ndarray        # (k,), descending
    U: np.ndarray            # (d_out, k), orthonormal columns
    in_shape: tuple
    out_shape: tuple
    iterations: list         # iterations used per block
    stop_reasons: list       # "tolerance" or "max_iter" per block
    residuals: np.ndarray    # ||J^T J v - s^2 v|| / s^2 per component
    history: list = field(default_factory=list)    # sigma estimates per iteration
    rayleigh: list = field(default_factory=list)   # Ritz values per iteration
    meta: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return len(self.sigma)

    @property
    def converged(self) -> bool:
        return all(r == "tolerance" for r in self.stop_reasons)

    def v(self, i: int) -> np.ndarray:
        """The i-th right singular vector (0-based) in bottleneck shape."""
        return self.V[:, i].reshape(self.in_shape)


def _relative_change(new, old):
    scale = np.maximum(np.abs(old), 1e-300)
    diff = np.abs(new - old)
    return float(np.max(np.where(diff == 0, 0.0, diff / scale)))


def _check_finite(arr, it, what):
    if not np.all(np.isfinite(arr)):
        raise ad.NonFiniteError(f"non-finite {what} at iteration {it}")


def _iterate(probe, h, Phi, stop, V_prev=None):
    """Power-iterate one block; deflates against ``V_prev`` every iteration."""
    prev, hist, ritz = None, [], []
    reason, it = "max_iter", 0
    for it in range(1, stop.max_iter + 1):
        if V_prev is not None:
            Phi = _deflate(Phi, V_prev)
        Psi = probe.jvp(h, Phi)
        _check_finite(Psi, it, "Jacobian-vector product")
        ritz.append(np.linalg.eigvalsh(Psi.T @ Psi)[::-1])
        Phi_hat = probe.vjp(h, Psi)
        _check_finite(Phi_hat, it, "vector-Jacobian product")
        Phi, s2, _ = np.linalg.svd(Phi_hat, full_matrices=False)
        sig = np.sqrt(s2)
        hist.append(sig)
        if prev is not None and _relative_change(sig, prev) < stop.tol:
            reason = "tolerance"
            break
        prev = sig
    return Phi, hist[-1], hist, ritz, it, reason


def _deflate(Phi, V):
    """Project onto the orthogonal complement of span(V), then re-orthonormalize."""
    Phi = Phi - V @ np.linalg.solve(V.T @ V, V.T @ Phi)
    Q, _ = np.linalg.qr(Phi)
    return Q


def _left_vectors(probe, h, V):
    """Orthonormalized J V, columns signed to agree with J v_i."""
    JV = probe.jvp(h, V)
    Q, R = np.linalg.qr(JV)
    d = np.sign(np.diag(R))
    d[d == 0] = 1.0
    return Q * d


def _residuals(probe, h, V, sigma):
    AV = probe.vjp(h, probe.jvp(h, V))
    s2 = sigma ** 2
    num = np.linalg.norm(AV - V * s2, axis=0)
    return np.where(s2 > 0, num / np.where(s2 > 0, s2, 1.0), num)


def _initial_block(d, k, V0, rng, start=0):
    if V0 is not None:
        V0 = np.asarray(V0, dtype=np.float64)
        if V0.shape[0] != d or V0.shape[1] < start + k:
            raise ValueError(f"initial block must be ({d}, >= {start + k}), got {V0.shape}")
        return V0[:, start:start + k]
    return rng.standard_normal((d, k))


def _result(probe, h, V, sigma, iters, reasons, hist, ritz, residuals):
    order = np.argsort(-sigma, kind="stable")
    V, sigma = _fix_signs(V[:, order]), sigma[order]
    U = _left_vectors(probe, h, V)
    res = _residuals(probe, h, V, sigma) if residuals else np.full(len(sigma), np.nan)
    return SpectralResult(V, sigma, U, tuple(probe.in_shape), tuple(probe.out_shape),
                          iters, reasons, res, hist, ritz)


def subspace_iteration(probe: JacobianProbe, h, k: int, V0=None, stop: StoppingRule | None = None,
                       seed: int = 0, residuals: bool = True) -> SpectralResult:
    """Top-k singular triplets of the probe's Jacobian at ``h`` (all k at once)."""
    stop = stop or StoppingRule()
    d = probe.d_in
    if not 1 <= k <= d:
        raise ValueError(f"k={k} outside 1..{d}")
    h = probe._check_h(h)
    rng = np.random.default_rng(seed)
    Phi, _ = np.linalg.qr(_initial_block(d, k, V0, rng))
    V, sig, hist, ritz, it, reason = _iterate(probe, h, Phi.astype(h.dtype), stop)
    log.debug("subspace iteration stopped after %d iterations (%s)", it, reason)
    return _result(probe, h, V, sig, [it], [reason], hist, ritz, residuals)


def sequential_subspace_iteration(probe: JacobianProbe, h, k: int, b: int, V0=None,
                                  stop: StoppingRule | None = None, seed: int = 0,
                                  residuals: bool = True) -> SpectralResult:
    """Blocked variant: finds b vectors at a time, each block kept orthogonal
    to the vectors already accepted, so memory scales with b instead of k."""
    stop = stop or StoppingRule()
    d = probe.d_in
    if not 1 <= k <= d:
        raise ValueError(f"k={k} outside 1..{d}")
    if not 1 <= b <= k:
        raise ValueError(f"block size b={b} outside 1..{k}")
    h = probe._check_h(h)
    rng = np.random.default_rng(seed)
    V = np.zeros((d, 0))
    sigma, iters, reasons, hist, ritz = [], [], [], [], []
    for start in range(0, k, b):
        width = min(b, k - start)
        Phi, _ = np.linalg.qr(_initial_block(d, width, V0, rng, start))
        Phi, sig, hs, rz, it, reason = _iterate(probe, h, Phi, stop, V if V.shape[1] else None)
        if V.shape[1]:
            # the last SVD mixes in a little of span(V); remove it once more
            Phi = _deflate(Phi, V)
        V = np.concatenate([V, Phi], axis=1)
        sigma.append(sig)
        iters.append(it)
        reasons.append(reason)
        hist.append(hs)
        ritz.append(rz)
    return _result(probe, h, V, np.concatenate(sigma), iters, reasons, hist, ritz, residuals)


def broadcast_direction(result: SpectralResult, i: int, **meta) -> Direction:
    """Direction applying right singular vector ``i`` (0-based) at every step."""
    if not 0 <= i < result.k:
        raise IndexError(f"component {i} outside 0..{result.k - 1}")
    v = result.v(i).astype(np.float32)
    return Direction(v, "jacobian", broadcast=True,
                     meta={**result.meta, **meta, "component": i, "sigma": float(result.sigma[i])})
