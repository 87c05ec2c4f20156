"""Noise schedules, the generalized DDIM/DDPM reverse process with bottleneck
injection, DDIM inversion, the bottleneck swap, and denoiser training."""
from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import denoiser as dn

log = logging.getLogger(__name__)


class ScheduleError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    pass


def stream(seed: int, purpose: str, *extra: int) -> np.random.Generator:
    """Named, reproducible random sub-stream derived from a single seed."""
    tag = zlib.crc32(purpose.encode())
    return np.random.default_rng(np.random.SeedSequence([int(seed), tag, *map(int, extra)]))


@dataclass
class NoiseSchedule:
    alpha_bar: np.ndarray  # length T+1, alpha_bar[0] == 1
    eta: np.ndarray        # length T+1, eta[0] unused

    def __post_init__(self):
        self.alpha_bar = np.asarray(self.alpha_bar, dtype=np.float64)
        self.eta = np.broadcast_to(np.asarray(self.eta, dtype=np.float64), self.alpha_bar.shape).copy()
        ab = self.alpha_bar
        if ab[0] != 1.0:
            raise ScheduleError("alpha_bar[0] must equal 1")
        if np.any(np.diff(ab) >= 0) or ab[-1] <= 0:
            raise ScheduleError("alpha_bar must be strictly decreasing and positive")
        if np.any((self.eta < 0) | (self.eta > 1)):
            raise ScheduleError("eta values must lie in [0, 1]")

    @property
    def T(self) -> int:
        return len(self.alpha_bar) - 1

    def with_eta(self, eta) -> "NoiseSchedule":
        return NoiseSchedule(self.alpha_bar, eta)


def linear_schedule(T: int, beta_start: float | None = None, beta_end: float | None = None,
                    eta: float = 1.0) -> NoiseSchedule:
    """Linear beta schedule; endpoints default to 1e-4..0.02 rescaled by 1000/T."""
    scale = 1000.0 / T
    beta_start = 1e-4 * scale if beta_start is None else beta_start
    beta_end = 0.02 * scale if beta_end is None else beta_end
    betas = np.linspace(beta_start, beta_end, T)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(alpha_bar, eta)


def _check_t(t, schedule, lo=0):
    if not lo <= t <= schedule.T:
        raise ScheduleError(f"timestep {t} outside [{lo}, {schedule.T}]")


def forward_noise(x0, t: int, n, schedule: NoiseSchedule):
    """Noisy image at step ``t``: sqrt(ab_t) x0 + sqrt(1 - ab_t) n."""
    _check_t(t, schedule)
    ab = schedule.alpha_bar[t]
    x0 = np.asarray(x0)
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * np.asarray(n)).astype(x0.dtype, copy=False)


def sigma(t: int, schedule: NoiseSchedule, t_prev: int | None = None) -> float:
    _check_t(t, schedule, lo=1)
    t_prev = t - 1 if t_prev is None else t_prev
    ab_t, ab_p = schedule.alpha_bar[t], schedule.alpha_bar[t_prev]
    return float(schedule.eta[t] * np.sqrt((1 - ab_p) / (1 - ab_t)) * np.sqrt(1 - ab_t / ab_p))


def predict_x0(x_t, epsilon, t: int, schedule: NoiseSchedule):
    ab = schedule.alpha_bar[t]
    x_t = np.asarray(x_t)
    return ((x_t - np.sqrt(1 - ab) * np.asarray(epsilon)) / np.sqrt(ab)).astype(x_t.dtype, copy=False)


def direction_term(epsilon, t: int, schedule: NoiseSchedule, t_prev: int | None = None):
    t_prev = t - 1 if t_prev is None else t_prev
    s = sigma(t, schedule, t_prev)
    c = 1 - schedule.alpha_bar[t_prev] - s * s
    if c < -1e-12:
        raise ScheduleError(f"1 - alpha_bar[{t_prev}] - sigma^2 = {c} < 0")
    epsilon = np.asarray(epsilon)
    return (np.sqrt(max(c, 0.0)) * epsilon).astype(epsilon.dtype, copy=False)


# ------------------------------------------------------------------ injection

@dataclass
class InjectionPlan:
    """Bottleneck edit applied during sampling.

    ``offsets`` is either one bottleneck-shaped tensor applied at every step
    or an array with a leading step axis. It may also carry a batch axis
    after the step axis, or be None when only ``x_T_offset`` is edited. ``replace`` substitutes the bottleneck instead of
    adding to it (used by the swap experiment).
    """
    offsets: np.ndarray | None
    gamma: float = 1.0
    mode: str = "both"
    broadcast: bool = True
    replace: bool = False
    x_T_offset: np.ndarray | None = None

    def __post_init__(self):
        if self.mode not in ("both", "asyrp"):
            raise ValueError(f"unknown injection mode {self.mode!r}")
        if not np.isfinite(self.gamma):
            raise ValueError("gamma must be finite")

    def at(self, step: int):
        if self.offsets is None:
            return None
        off = self.offsets if self.broadcast else self.offsets[step]
        if self.replace:
            return off
        return self.gamma * off


def timestep_sequence(T: int, steps: int | None) -> np.ndarray:
    """Descending, evenly spaced timesteps ending at 1 (DDIM-style subsequence)."""
    if steps is None or steps >= T:
        return np.arange(T, 0, -1)
    if steps < 1:
        raise ValueError("steps must be positive")
    seq = np.unique(np.round(np.linspace(1, T, steps)).astype(int))
    if len(seq) != steps:
        raise ValueError(f"cannot pick {steps} distinct timesteps from T={T}")
    return seq[::-1].copy()


def _eps_call(params, x_t, t, plan, step, bottleneck=None):
    off = None if plan is None else plan.at(step)
    if off is None:
        return dn.forward(params, x_t, t)
    if plan.replace:
        return dn.forward(params, x_t, t, replace_h=off)
    return dn.forward(params, x_t, t, delta_h=off.astype(params.dtype, copy=False))


def reverse_step(params, x_t, t: int, schedule: NoiseSchedule, z_t=None,
                 inject: InjectionPlan | None = None, t_prev: int | None = None, step: int = 0):
    """One generalized DDIM step from ``t`` to ``t_prev``; returns (x_prev, h_t)."""
    t_prev = t - 1 if t_prev is None else t_prev
    s = sigma(t, schedule, t_prev)
    if s > 0 and z_t is None:
        raise ValueError(f"z_t required at t={t} (sigma={s:.4g})")
    ab_p = schedule.alpha_bar[t_prev]
    if inject is not None and inject.mode == "asyrp":
        eps_edit, h = _eps_call(params, x_t, t, inject, step)
        eps_plain, _ = dn.forward(params, x_t, t)
    else:
        eps_edit, h = _eps_call(params, x_t, t, inject, step)
        eps_plain = eps_edit
    x_prev = np.sqrt(ab_p) * predict_x0(x_t, eps_edit, t, schedule) \
        + direction_term(eps_plain, t, schedule, t_prev)
    if s > 0:
        x_prev = x_prev + s * np.asarray(z_t)
    return x_prev.astype(params.dtype, copy=False), h


@dataclass
class LatentTrajectory:
    """Record of one (batched) generative pass, in sampling order T..1.

    Arrays carry a batch axis: ``x_T`` (N, C, H, W); ``z`` (S, N, C, H, W)
    or None when every step is deterministic; ``h`` (S, N, *h_shape).
    """
    timesteps: np.ndarray
    x_T: np.ndarray
    z: np.ndarray | None
    h: np.ndarray
    x_0: np.ndarray
    seeds: list = field(default_factory=list)

    def __len__(self):
        return len(self.timesteps)

    @property
    def batch(self) -> int:
        return self.x_T.shape[0]

    def select(self, idx) -> "LatentTrajectory":
        idx = np.atleast_1d(idx)
        return LatentTrajectory(
            self.timesteps, self.x_T[idx], None if self.z is None else self.z[:, idx],
            self.h[:, idx], self.x_0[idx], [self.seeds[i] for i in idx] if self.seeds else [])

    def h_flat(self) -> np.ndarray:
        """(N, S * h_dim): the concatenated bottleneck code of each sample."""
        return self.h.transpose(1, 0, *range(2, self.h.ndim)).reshape(self.batch, -1)


def draw_noise(config, seeds, timesteps, schedule, dtype=np.float32):
    """x_T and per-step z for each seed, from that seed's own named streams."""
    shape = config.image_shape
    x_T = np.stack([stream(s, "x_T").standard_normal(shape) for s in seeds]).astype(dtype)
    stochastic = any(schedule.eta[t] > 0 for t in timesteps)
    z = None
    if stochastic:
        z = np.zeros((len(timesteps), len(seeds)) + shape, dtype=dtype)
        for j, s in enumerate(seeds):
            rng = stream(s, "z")
            for i, t in enumerate(timesteps):
                if schedule.eta[t] > 0:
                    z[i, j] = rng.standard_normal(shape)
    return x_T, z


def sample(params, schedule: NoiseSchedule, seed=0, steps: int | None = 50,
           inject: InjectionPlan | None = None, x_T=None, z=None):
    """Run the reverse process for one seed or a list of seeds (batched).

    Returns (x_0, trajectory). The recorded ``h`` are the pre-injection
    activations. ``x_T``/``z`` override the seed-derived noise.
    """
    seeds = [int(s) for s in np.atleast_1d(seed)]
    ts = timestep_sequence(schedule.T, steps)
    x_T_d, z_d = draw_noise(params.config, seeds, ts, schedule, params.dtype)
    x_T = x_T_d if x_T is None else np.asarray(x_T, dtype=params.dtype)
    z = z_d if z is None else z
    x = x_T
    if inject is not None and inject.x_T_offset is not None:
        x = x + inject.gamma * inject.x_T_offset.astype(params.dtype)
    hs = []
    for i, t in enumerate(ts):
        t_prev = int(ts[i + 1]) if i + 1 < len(ts) else 0
        z_i = None if z is None else z[i]
        try:
            x, h = reverse_step(params, x, int(t), schedule, z_i, inject, t_prev, step=i)
        except ad.NonFiniteError as err:
            raise DivergenceError(f"denoiser diverged at t={t}: {err}") from err
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"non-finite pixels after step at t={t}")
        hs.append(h)
    traj = LatentTrajectory(ts, x_T, z, np.stack(hs), x, seeds)
    return x, traj


def invert(params, x_0, schedule: NoiseSchedule, steps: int | None = 50,
           refine: int = 0) -> LatentTrajectory:
    """Deterministic DDIM inversion from images to x_T, recording h at each step.

    With ``refine`` > 0 each step is corrected by fixed-point iterations so
    that the deterministic sampling step maps the result back onto the
    current point (the plain update evaluates the noise one step early).
    """
    if np.any(schedule.eta[1:] != 0):
        raise ScheduleError("inversion requires eta == 0 at every timestep")
    cfg = params.config
    x, _ = dn._batched(np.asarray(x_0), cfg.image_shape)
    x = x.astype(params.dtype)
    images = x.copy()
    ts = timestep_sequence(schedule.T, steps)
    ascending = ts[::-1]
    hs = []
    t_cur = 0
    for t_next in ascending:
        t_next = int(t_next)
        eps, h = dn.forward(params, x, t_next)
        x_next = _inversion_update(x, eps, t_cur, t_next, schedule, params.dtype)
        for _ in range(refine):
            eps, h = dn.forward(params, x_next, t_next)
            x_next = _inversion_update(x, eps, t_cur, t_next, schedule, params.dtype)
        if not np.all(np.isfinite(x_next)):
            raise DivergenceError(f"non-finite latent during inversion at t={t_next}")
        hs.append(h)
        x, t_cur = x_next, t_next
    h = np.stack(hs[::-1])
    return LatentTrajectory(ts, x, None, h, images)


def _inversion_update(x, eps, t_cur, t_next, schedule, dtype):
    x0_pred = predict_x0(x, eps, t_cur, schedule) if t_cur > 0 else x
    ab_n = schedule.alpha_bar[t_next]
    return (np.sqrt(ab_n) * x0_pred + np.sqrt(1 - ab_n) * eps).astype(dtype)


def swap_h(params, traj_a: LatentTrajectory, traj_b: LatentTrajectory, schedule: NoiseSchedule):
    """Regenerate each sample with the other's bottleneck codes.

    Keeps {x_T, z} of one trajectory and forces every bottleneck activation
    to the other's. The returned trajectories carry the forced codes, so a
    second swap restores the originals.
    """
    if traj_a.h.shape != traj_b.h.shape or not np.array_equal(traj_a.timesteps, traj_b.timesteps):
        raise ValueError("trajectories differ in length or bottleneck shape")
    if (traj_a.z is None) != (traj_b.z is None):
        raise ValueError("trajectories use different stochasticity patterns")
    steps = len(traj_a.timesteps)
    out = []
    for base, donor in ((traj_a, traj_b), (traj_b, traj_a)):
        plan = InjectionPlan(donor.h, broadcast=False, replace=True)
        x, _ = sample(params, schedule, base.seeds or 0, steps, plan, x_T=base.x_T, z=base.z)
        out.append(LatentTrajectory(base.timesteps, base.x_T, base.z, donor.h, x, base.seeds))
    return out[0].x_0, out[1].x_0, out[0], out[1]


# ------------------------------------------------------------------- training

@dataclass
class TrainSettings:
    steps: int = 3000
    batch: int = 32
    lr: float = 2e-3
    warmup: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    grad_clip: float = 1.0
    log_every: int = 50


class Adam:
    def __init__(self, params: dict, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k in sorted(params):
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] -= (lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)).astype(params[k].dtype)


def training_batch(images, schedule, rng, batch):
    idx = rng.integers(0, len(images), batch)
    x0 = images[idx]
    t = rng.integers(1, schedule.T + 1, batch)
    n = rng.standard_normal(x0.shape).astype(x0.dtype)
    ab = schedule.alpha_bar[t].reshape(-1, 1, 1, 1)
    x_t = (np.sqrt(ab) * x0 + np.sqrt(1 - ab) * n).astype(x0.dtype)
    return x_t, t, n


def train(images, config, schedule: NoiseSchedule, settings: TrainSettings | None = None,
          seed: int = 0, params=None, callback=None):
    """Fit the denoiser to predict the injected noise; returns (params, loss log)."""
    settings = settings or TrainSettings()
    images = np.asarray(images, dtype=np.float32)
    if images.min() < -1.0 - 1e-6 or images.max() > 1.0 + 1e-6:
        raise ValueError("training images must be scaled to [-1, 1]")
    params = params or dn.init_params(config, seed)
    arrays = params.arrays
    opt = Adam(arrays, settings.lr, settings.beta1, settings.beta2)
    rng = stream(seed, "data")
    losses = []
    for step in range(settings.steps):
        x_t, t, n = training_batch(images, schedule, rng, settings.batch)
        try:
            loss, grads = ad.grad_params(dn.loss_fn(config, x_t, t, n), arrays)
        except ad.NonFiniteError as err:
            raise DivergenceError(f"training diverged at step {step}: {err}") from err
        total = np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
        if settings.grad_clip and total > settings.grad_clip:
            grads = {k: g * (settings.grad_clip / total) for k, g in grads.items()}
        lr = settings.lr * min(1.0, (step + 1) / max(settings.warmup, 1))
        # cosine decay to 10% over the run
        lr *= 0.55 + 0.45 * np.cos(np.pi * step / max(settings.steps, 1))
        opt.step(arrays, grads, lr)
        losses.append(loss)
        if callback is not None:
            callback(step, loss)
        if settings.log_every and step % settings.log_every == 0:
            log.info("step %d loss %.5f", step, loss)
    return params, np.asarray(losses)


def validation_loss(params, images, schedule, seed=1, n_batches=8, batch=64):
    """Mean denoising MSE and the zero-predictor baseline on held-out images."""
    rng = stream(seed, "validation")
    images = np.asarray(images, dtype=params.dtype)
    model, baseline = [], []
    for _ in range(n_batches):
        x_t, t, n = training_batch(images, schedule, rng, batch)
        eps, _ = dn.forward(params, x_t, t)
        model.append(float(np.mean((eps - n) ** 2)))
        baseline.append(float(np.mean(n.astype(np.float64) ** 2)))
    return float(np.mean(model)), float(np.mean(baseline))
