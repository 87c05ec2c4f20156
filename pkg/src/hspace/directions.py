"""Editing directions in the bottleneck space and unsupervised discovery by
per-timestep incremental PCA."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import diffusion as df

log = logging.getLogger(__name__)

METHODS = ("pca", "jacobian", "supervised", "random")
KINDS = ("h", "xT")


@dataclass
class Direction:
    """An edit: per-step offsets (S, *shape) or one broadcast tensor (*shape).

    ``kind`` is "h" for bottleneck offsets and "xT" for an offset on the
    initial noise. ``norms`` holds reference per-step norms.
    """
    offsets: np.ndarray
    method: str
    broadcast: bool = False
    kind: str = "h"
    timesteps: np.ndarray | None = None
    norms: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets)
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.kind not in KINDS:
            raise ValueError(f"unknown latent kind {self.kind!r}")
        if self.kind == "xT" and not self.broadcast:
            raise ValueError("x_T directions are single tensors (broadcast=True)")
        if self.timesteps is not None:
            self.timesteps = np.asarray(self.timesteps)
            if not self.broadcast and len(self.timesteps) != len(self.offsets):
                raise ValueError("timesteps length differs from the number of per-step offsets")
        if self.norms is None:
            self.norms = self.step_norms()

    @property
    def shape(self) -> tuple:
        """Shape of one offset tensor."""
        return self.offsets.shape if self.broadcast else self.offsets.shape[1:]

    def step_norms(self) -> np.ndarray:
        if self.broadcast:
            return np.array([np.linalg.norm(self.offsets.astype(np.float64))])
        flat = self.offsets.reshape(len(self.offsets), -1).astype(np.float64)
        return np.linalg.norm(flat, axis=1)

    def flat(self) -> np.ndarray:
        """The full concatenated latent as one float64 vector."""
        return self.offsets.astype(np.float64).ravel()

    def with_flat(self, vec, method=None, **meta) -> "Direction":
        """Same layout, new values (norms recomputed)."""
        off = np.asarray(vec, dtype=np.float64).reshape(self.offsets.shape).astype(self.offsets.dtype)
        return replace(self, offsets=off, method=method or self.method, norms=None,
                       meta={**self.meta, **meta})

    def expanded(self, steps: int) -> np.ndarray:
        """Per-step offsets of shape (steps, *shape)."""
        if self.kind != "h":
            raise ValueError("only bottleneck directions have per-step offsets")
        if self.broadcast:
            return np.broadcast_to(self.offsets, (steps,) + self.offsets.shape)
        if len(self.offsets) != steps:
            raise ValueError(f"direction has {len(self.offsets)} steps, sampler uses {steps}")
        return self.offsets

    def plan(self, gamma: float = 1.0, mode: str = "both") -> df.InjectionPlan:
        if self.kind == "xT":
            return df.InjectionPlan(None, gamma, mode, broadcast=True, x_T_offset=self.offsets)
        return df.InjectionPlan(self.offsets, gamma, mode, broadcast=self.broadcast)


# ------------------------------------------------------------- h collection

@dataclass
class HBatch:
    """Bottleneck rows of one sampling batch: ``rows`` is (S, B, D)."""
    rows: np.ndarray
    seeds: list
    timesteps: np.ndarray
    skipped: list = field(default_factory=list)


def collect_h(params, schedule, n_samples: int, seed: int = 0, batch: int = 64,
              steps: int | None = 50):
    """Stream bottleneck activations of ``n_samples`` generated images.

    Yields :class:`HBatch` objects in seed order. Sample ``i`` uses seed
    ``seed * 1_000_003 + i``. A batch that diverges is re-run one sample at
    a time; samples that still diverge are skipped and listed in
    ``HBatch.skipped`` so the caller can account for them.
    """
    if n_samples < 1 or batch < 1:
        raise ValueError("n_samples and batch must be positive")
    base = int(seed) * 1_000_003
    for start in range(0, n_samples, batch):
        seeds = [base + i for i in range(start, min(start + batch, n_samples))]
        try:
            _, traj = df.sample(params, schedule, seeds, steps)
            hs, kept, skipped = traj.h, seeds, []
        except df.DivergenceError:
            parts, kept, skipped = [], [], []
            for s in seeds:
                try:
                    _, tr = df.sample(params, schedule, s, steps)
                    parts.append(tr.h)
                    kept.append(s)
                except df.DivergenceError as err:
                    log.warning("sample seed %d diverged, skipped: %s", s, err)
                    skipped.append(s)
            if not parts:
                yield HBatch(np.zeros((0, 0, 0)), [], df.timestep_sequence(schedule.T, steps), skipped)
                continue
            hs = np.concatenate(parts, axis=1)
        rows = hs.reshape(hs.shape[0], hs.shape[1], -1)
        yield HBatch(rows, kept, df.timestep_sequence(schedule.T, steps), skipped)


# ------------------------------------------------------------ incremental PCA

def _fix_signs(components):
    """Flip columns so each one's largest-magnitude coordinate is positive."""
    if components.size == 0:
        return components
    idx = np.argmax(np.abs(components), axis=0)
    signs = np.sign(components[idx, np.arange(components.shape[1])])
    signs[signs == 0] = 1.0
    return components * signs


@dataclass
class IncrementalPCA:
    """Top-k principal axes of a stream of rows; ``components`` is (dim, k)."""
    k: int
    dim: int
    n: int = 0
    mean: np.ndarray | None = None
    components: np.ndarray | None = None
    singular_values: np.ndarray | None = None

    def __post_init__(self):
        if self.k < 1 or self.dim < 1:
            raise ValueError("k and dim must be positive")
        if self.mean is None:
            self.mean = np.zeros(self.dim)
        if self.components is None:
            self.components = np.zeros((self.dim, 0))
            self.singular_values = np.zeros(0)

    @property
    def explained_variance(self) -> np.ndarray:
        return self.singular_values ** 2 / max(self.n - 1, 1)

    def update(self, batch) -> "IncrementalPCA":
        return ipca_update(self, batch)


def ipca_update(state: IncrementalPCA, batch) -> IncrementalPCA:
    """Fold a batch of rows into the state (sequential Karhunen-Loeve update)."""
    X = np.asarray(batch, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != state.dim:
        raise ValueError(f"batch must be (m, {state.dim}), got {X.shape}")
    m = X.shape[0]
    if m == 0:
        return state
    if not np.all(np.isfinite(X)):
        raise ValueError("batch contains non-finite values")
    n_old, n_new = state.n, state.n + m
    mu_b = X.mean(axis=0)
    mean = state.mean + (m / n_new) * (mu_b - state.mean)
    centered = X - mu_b
    if n_old == 0:
        M = centered
    else:
        correction = np.sqrt(n_old * m / n_new) * (state.mean - mu_b)
        M = np.vstack([state.singular_values[:, None] * state.components.T,
                       centered, correction[None]])
    _, S, Vt = np.linalg.svd(M, full_matrices=False)
    k = min(state.k, len(S))
    comps = _fix_signs(Vt[:k].T)
    return IncrementalPCA(state.k, state.dim, n_new, mean, comps, S[:k])


def fit_pca(params, schedule, n_samples: int = 2048, k: int = 16, seed: int = 0,
            batch: int = 64, steps: int | None = 50):
    """One incremental PCA per sampling step; returns (states, timesteps, skipped)."""
    states, ts, skipped = None, None, []
    for hb in collect_h(params, schedule, n_samples, seed, batch, steps):
        skipped += hb.skipped
        ts = hb.timesteps
        if not hb.seeds:
            continue
        if states is None:
            states = [IncrementalPCA(k, hb.rows.shape[2]) for _ in range(hb.rows.shape[0])]
        states = [ipca_update(s, r) for s, r in zip(states, hb.rows)]
    if states is None:
        raise df.DivergenceError("every sample diverged")
    if skipped:
        log.warning("%d of %d samples skipped after divergence", len(skipped), n_samples)
    return states, ts, skipped


def assemble_pca_direction(states, j: int, timesteps, h_shape) -> Direction:
    """Per-step direction from the ``j``-th component (1-based) of every state."""
    for s in states:
        if not 1 <= j <= s.components.shape[1]:
            raise IndexError(f"component {j} outside 1..{s.components.shape[1]}")
    offsets = np.stack([s.components[:, j - 1].reshape(h_shape) for s in states]).astype(np.float32)
    return Direction(offsets, "pca", broadcast=False, timesteps=timesteps,
                     meta={"j": j, "n": states[0].n})


def random_direction_norm_matched(reference: Direction, seed: int = 0) -> Direction:
    """Gaussian offsets rescaled to the reference's norm at every step."""
    rng = df.stream(seed, "random-direction")
    g = rng.standard_normal(reference.offsets.shape)
    norms = np.asarray(reference.norms, dtype=np.float64)
    if reference.broadcast:
        g *= norms[0] / np.linalg.norm(g)
    else:
        flat = g.reshape(len(g), -1)
        flat *= (norms / np.linalg.norm(flat, axis=1))[:, None]
    out = Direction(g.astype(reference.offsets.dtype), "random", reference.broadcast,
                    reference.kind, reference.timesteps, norms.copy(),
                    meta={"seed": seed, "reference": reference.method})
    return out
