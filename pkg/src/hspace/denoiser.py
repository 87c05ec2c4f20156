"""Compact U-Net noise predictor that exposes its bottleneck activation.

The network is split at the deepest block: :func:`encode` maps a noisy
image to the bottleneck activation ``h`` plus the skip tensors, and
:func:`decode` maps (``h``, skips) to the noise prediction. Offsets added
to ``h`` therefore reach every decoder layer, while the skip path still
carries information straight from ``x_t``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

GROUPS = 4


@dataclass(frozen=True)
class DenoiserConfig:
    image_size: int
    widths: tuple = (16, 32, 64)
    channels_in: int = 1
    time_embed_dim: int = 32

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if not self.widths:
            raise ValueError("widths must be non-empty")
        if self.image_size % (2 ** self.num_levels):
            raise ValueError(f"image_size {self.image_size} not divisible by 2^{self.num_levels}")
        for w in self.widths:
            if w % GROUPS:
                raise ValueError(f"width {w} not divisible by {GROUPS} norm groups")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")

    @property
    def num_levels(self) -> int:
        return len(self.widths)

    @property
    def bottleneck_side(self) -> int:
        return self.image_size // 2 ** self.num_levels

    @property
    def bottleneck_channels(self) -> int:
        return self.widths[-1]

    @property
    def h_shape(self) -> tuple:
        s = self.bottleneck_side
        return (self.bottleneck_channels, s, s)

    @property
    def image_shape(self) -> tuple:
        return (self.channels_in, self.image_size, self.image_size)


TINY = DenoiserConfig(image_size=16, widths=(8, 16), time_embed_dim=16)
DESK = DenoiserConfig(image_size=32, widths=(16, 32, 64), time_embed_dim=32)
# geometry of the 256x256 reference checkpoint: (512, 8, 8) bottleneck
REFERENCE_256 = DenoiserConfig(image_size=256, channels_in=3,
                               widths=(128, 128, 256, 256, 512), time_embed_dim=128)

CONFIGS = {"tiny": TINY, "desk": DESK}


def h_dims(config: DenoiserConfig, T: int) -> tuple:
    """Shape of the stacked bottleneck activations over ``T`` steps."""
    return (int(T),) + config.h_shape


@dataclass
class DenoiserParams:
    config: DenoiserConfig
    arrays: dict
    # number of forward evaluations, for instrumentation only
    calls: int = field(default=0, compare=False)

    @property
    def dtype(self):
        return next(iter(self.arrays.values())).dtype

    def astype(self, dtype) -> "DenoiserParams":
        return DenoiserParams(self.config, {k: v.astype(dtype) for k, v in self.arrays.items()})

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.config, {k: v.copy() for k, v in self.arrays.items()})


def _block_specs(config: DenoiserConfig):
    """(name, c_in, c_out) for every residual block, in evaluation order."""
    w = config.widths
    specs = []
    c = w[0]
    for i, wi in enumerate(w):
        specs.append((f"enc{i}", c, wi))
        c = wi
    specs.append(("mid", w[-1], w[-1]))
    for i in reversed(range(config.num_levels)):
        specs.append((f"dec{i}", 2 * w[i], w[i]))
    return specs


def init_params(config: DenoiserConfig, seed: int = 0, dtype=np.float32) -> DenoiserParams:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1417]))
    arrays = {}

    def conv(name, c_out, c_in, k, gain=1.0):
        std = gain * np.sqrt(2.0 / (c_in * k * k))
        arrays[f"{name}.w"] = rng.normal(0.0, std, (c_out, c_in, k, k))
        arrays[f"{name}.b"] = np.zeros(c_out)

    def dense(name, d_in, d_out, gain=1.0):
        arrays[f"{name}.w"] = rng.normal(0.0, gain * np.sqrt(1.0 / d_in), (d_in, d_out))
        arrays[f"{name}.b"] = np.zeros(d_out)

    def norm(name, c):
        arrays[f"{name}.g"] = np.ones(c)
        arrays[f"{name}.b"] = np.zeros(c)

    w = config.widths
    e = config.time_embed_dim
    dense("temb", e, e)
    conv("stem", w[0], config.channels_in, 3)
    for name, c_in, c_out in _block_specs(config):
        norm(f"{name}.n1", c_in)
        conv(f"{name}.c1", c_out, c_in, 3)
        dense(f"{name}.t", e, c_out, gain=0.5)
        norm(f"{name}.n2", c_out)
        conv(f"{name}.c2", c_out, c_out, 3, gain=0.5)
        if c_in != c_out:
            conv(f"{name}.skip", c_out, c_in, 1)
    for i, wi in enumerate(w):
        conv(f"down{i}", wi, wi, 3)
    for i in range(config.num_levels):
        c_above = w[i + 1] if i + 1 < config.num_levels else w[-1]
        conv(f"up{i}", w[i], c_above, 3)
    norm("out.n", w[0])
    conv("out.c", config.channels_in, w[0], 3, gain=0.1)
    arrays = {k: v.astype(dtype) for k, v in arrays.items()}
    return DenoiserParams(config, arrays)


def timestep_embedding(t, dim: int, dtype=np.float32) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps; returns (N, dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(dtype)


class _Net:
    """Parameter lookup that wraps arrays as tensors once per evaluation."""

    def __init__(self, config, tensors):
        self.config = config
        self.p = tensors

    @classmethod
    def of(cls, params):
        return cls(params.config, {k: Tensor(v) for k, v in params.arrays.items()})

    def conv(self, name, x, stride=1):
        return ad.conv2d(x, self.p[f"{name}.w"], self.p[f"{name}.b"], stride=stride)

    def norm_act(self, name, x):
        return ad.silu(ad.group_norm(x, self.p[f"{name}.g"], self.p[f"{name}.b"], GROUPS))

    def block(self, name, x, temb):
        h = self.conv(f"{name}.c1", self.norm_act(f"{name}.n1", x))
        t = ad.affine(temb, self.p[f"{name}.t.w"], self.p[f"{name}.t.b"])
        h = h + ad.reshape(t, t.shape + (1, 1))
        h = self.conv(f"{name}.c2", self.norm_act(f"{name}.n2", h))
        skip = self.conv(f"{name}.skip", x) if f"{name}.skip.w" in self.p else x
        return h + skip

    def embed(self, t, n, dtype):
        t = np.broadcast_to(np.atleast_1d(np.asarray(t)), (n,))
        e = Tensor(timestep_embedding(t, self.config.time_embed_dim, dtype))
        return ad.silu(ad.affine(e, self.p["temb.w"], self.p["temb.b"]))

    def encode(self, x, temb):
        skips = []
        h = self.conv("stem", x)
        for i in range(self.config.num_levels):
            h = self.block(f"enc{i}", h, temb)
            skips.append(h)
            h = self.conv(f"down{i}", h, stride=2)
        h = self.block("mid", h, temb)
        return h, skips

    def decode(self, h, skips, temb):
        for i in reversed(range(self.config.num_levels)):
            h = ad.upsample2x(self.conv(f"up{i}", h))
            h = self.block(f"dec{i}", ad.concat(h, skips[i]), temb)
        return self.conv("out.c", self.norm_act("out.n", h))


def _batched(x, shape):
    x = np.asarray(x)
    if x.shape == tuple(shape):
        return x[None], True
    if x.shape[1:] != tuple(shape):
        raise ad.ShapeError(f"expected shape {shape} or (N, *{shape}), got {x.shape}")
    return x, False


@dataclass
class EncoderState:
    """Everything :func:`decode_from` needs: skips and time embedding (constants)."""
    h: np.ndarray
    skips: list
    temb: np.ndarray


def encode(params: DenoiserParams, x_t, t) -> EncoderState:
    """Run the encoder half; returns the bottleneck activation and the skip tensors."""
    cfg = params.config
    x, _ = _batched(x_t, cfg.image_shape)
    x = x.astype(params.dtype, copy=False)
    net = _Net.of(params)
    with ad.no_grad():
        temb = net.embed(t, x.shape[0], x.dtype)
        h, skips = net.encode(Tensor(x), temb)
    return EncoderState(h.data, [s.data for s in skips], temb.data)


def decode_from(params: DenoiserParams, state: EncoderState, h: Tensor) -> Tensor:
    """Decoder half as a differentiable function of ``h`` (skips held fixed)."""
    net = _Net.of(params)
    skips = [Tensor(s) for s in state.skips]
    if h.shape[0] != state.skips[0].shape[0]:
        reps = h.shape[0] // state.skips[0].shape[0]
        skips = [Tensor(np.repeat(s.data, reps, axis=0)) for s in skips]
        temb = Tensor(np.repeat(state.temb, reps, axis=0))
    else:
        temb = Tensor(state.temb)
    return net.decode(h, skips, temb)


def forward(params: DenoiserParams, x_t, t, delta_h=None, replace_h=None):
    """Noise prediction and the pre-injection bottleneck activation.

    ``delta_h`` is added to the bottleneck before decoding; ``replace_h``
    substitutes it outright. Accepts a single image (C, H, W) or a batch.
    """
    cfg = params.config
    x, single = _batched(x_t, cfg.image_shape)
    x = x.astype(params.dtype, copy=False)
    params.calls += 1
    net = _Net.of(params)
    with ad.no_grad():
        temb = net.embed(t, x.shape[0], x.dtype)
        h, skips = net.encode(Tensor(x), temb)
        h_used = h
        if replace_h is not None:
            h_used = Tensor(_batched(replace_h, cfg.h_shape)[0].astype(x.dtype))
        if delta_h is not None:
            d, _ = _batched(delta_h, cfg.h_shape)
            h_used = h_used + Tensor(d.astype(x.dtype))
        if h_used.shape != h.shape:
            raise ad.ShapeError(f"bottleneck override shape {h_used.shape} != {h.shape}")
        eps = net.decode(h_used, skips, temb)
    if not np.all(np.isfinite(eps.data)):
        raise ad.NonFiniteError("denoiser produced a non-finite activation")
    if single:
        return eps.data[0], h.data[0]
    return eps.data, h.data


def loss_fn(config: DenoiserConfig, x_t: np.ndarray, t: np.ndarray, target: np.ndarray):
    """Build ``tensors -> mse(eps(x_t, t), target)`` for :func:`autodiff.grad_params`."""
    def fn(tensors):
        net = _Net(config, tensors)
        temb = net.embed(t, x_t.shape[0], x_t.dtype)
        h, skips = net.encode(Tensor(x_t), temb)
        eps = net.decode(h, skips, temb)
        return ad.mse(eps, target)
    return fn
