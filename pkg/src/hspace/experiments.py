"""Desk-scale experiments: trained-model cache, edit-strength calibration,
and the comparisons run by the CLI and the acceptance suite."""
from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import denoiser as dn
from . import diffusion as df
from . import directions as dr
from . import faces
from . import jacobian as jc
from . import storage
from . import supervised as sv

log = logging.getLogger(__name__)

EVAL_ATTRIBUTES = ("eyes", "smile", "scale", "brightness")


# ----------------------------------------------------------- model recipes

@dataclass(frozen=True)
class Recipe:
    """Everything that determines a trained model."""
    model: str = "desk"
    T: int = 200
    dataset_size: int = 4096
    entangled: float = 0.6
    steps: int = 5000
    batch: int = 32
    lr: float = 2e-3
    seed: int = 0

    @property
    def config(self) -> dn.DenoiserConfig:
        return dn.CONFIGS[self.model]

    def schedule(self, eta: float = 1.0) -> df.NoiseSchedule:
        return df.linear_schedule(self.T, eta=eta)

    def key(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return f"{self.model}-{hashlib.sha1(blob).hexdigest()[:12]}"

    def settings(self) -> df.TrainSettings:
        return df.TrainSettings(steps=self.steps, batch=self.batch, lr=self.lr)

    def dataset(self):
        return faces.generate_dataset(self.dataset_size, self.seed, self.config.image_size, self.entangled)


DESK_RECIPE = Recipe()
TINY_RECIPE = Recipe(model="tiny", T=100, dataset_size=2048, entangled=0.0, steps=1500, batch=32)


def cache_dir() -> Path:
    return Path(os.environ.get("HSPACE_CACHE", Path.home() / ".cache" / "hspace"))


@dataclass
class TrainedModel:
    params: dn.DenoiserParams
    recipe: Recipe
    losses: np.ndarray
    seconds: float
    cached: bool

    def schedule(self, eta: float = 1.0):
        return self.recipe.schedule(eta)


def train_recipe(recipe: Recipe, callback=None) -> TrainedModel:
    images, _ = recipe.dataset()
    t0 = time.perf_counter()
    params, losses = df.train(images, recipe.config, recipe.schedule(), recipe.settings(),
                              recipe.seed, callback=callback)
    return TrainedModel(params, recipe, losses, time.perf_counter() - t0, False)


def trained_model(recipe: Recipe = DESK_RECIPE, directory=None, callback=None) -> TrainedModel:
    """Load the model for ``recipe`` from the cache, training it on a miss."""
    base = Path(directory or cache_dir())
    path = base / f"{recipe.key()}.hslb"
    info = base / f"{recipe.key()}.json"
    if path.exists() and info.exists():
        meta = json.loads(info.read_text())
        losses = np.asarray(meta["losses"])
        return TrainedModel(storage.load_params(path), recipe, losses, meta["seconds"], True)
    log.info("training %s (%s), not found in %s", recipe.model, recipe.key(), base)
    tm = train_recipe(recipe, callback)
    storage.save_params(path, tm.params, T=recipe.T)
    storage.atomic_write(info, json.dumps({"recipe": asdict(recipe), "seconds": tm.seconds,
                                           "losses": tm.losses.tolist()}))
    return tm


def fitted_pca(model: TrainedModel, n_samples: int = 2048, k: int = 16, seed: int = 0,
               steps: int = 50, directory=None):
    """Per-step PCA states of ``model``'s bottleneck, cached next to the model."""
    base = Path(directory or cache_dir())
    path = base / f"{model.recipe.key()}-pca-{n_samples}-{k}-{seed}-{steps}.hslb"
    if path.exists():
        return storage.load_pca(path)
    states, ts, _ = dr.fit_pca(model.params, model.schedule(), n_samples, k, seed, steps=steps)
    storage.save_pca(path, states, ts)
    return states, ts


# -------------------------------------------------------------- helpers

def seeds_for(purpose: str, n: int, seed: int = 0) -> list:
    """Disjoint sample seeds per purpose, reproducible from one seed."""
    rng = df.stream(seed, f"seeds:{purpose}")
    return [int(s) for s in rng.choice(2 ** 31 - 1, size=n, replace=False)]


def attribute_change(oracle, before, after) -> np.ndarray:
    """Signed change of each attribute in range-normalized units, per sample."""
    return oracle.normalized(oracle.score_batch(after)) - oracle.normalized(oracle.score_batch(before))


def calibrate_gamma(params, schedule, direction, oracle, attribute: str, target: float,
                    seeds, steps: int = 25, start: float = 1.0, max_evals: int = 6):
    """Strength at which the mean |change| of ``attribute`` is closest to ``target``.

    Doubles or halves ``start`` until the target is bracketed, then takes
    the log-linear interpolation. Returns (gamma, achieved effect).
    """
    j = oracle.names.index(attribute)
    base, _ = df.sample(params, schedule, seeds, steps)
    base_n = oracle.normalized(oracle.score_batch(base))[:, j]
    cache = {}

    def effect(g):
        if g not in cache:
            x, _ = df.sample(params, schedule, seeds, steps, direction.plan(g))
            cache[g] = float(np.mean(np.abs(oracle.normalized(oracle.score_batch(x))[:, j] - base_n)))
        return cache[g]

    g, lo, hi = start, None, None
    for _ in range(max_evals):
        e = effect(g)
        if e < target:
            lo = (g, e)
        else:
            hi = (g, e)
        if lo and hi:
            break
        g = g * 2.0 if e < target else g / 2.0
    if lo and hi and hi[1] > lo[1] > 0:
        w = (np.log(target) - np.log(lo[1])) / (np.log(hi[1]) - np.log(lo[1]))
        g = float(np.exp(np.log(lo[0]) + w * (np.log(hi[0]) - np.log(lo[0]))))
        return g, effect(g)
    best = min(cache, key=lambda k: abs(cache[k] - target))
    return best, cache[best]


# ------------------------------------------------------ PCA versus random

@dataclass
class PcaVsRandom:
    rows: list                 # (trial, component, gamma, pca_effect, random_effect)
    wins: int
    comparisons: int

    @property
    def win_rate(self) -> float:
        return self.wins / max(self.comparisons, 1)


def pca_vs_random(params, schedule, states, timesteps, trials: int = 25, gamma: float = 4.0,
                  components=(1, 2), seed: int = 0, steps: int = 50) -> PcaVsRandom:
    """Compare top principal directions with norm-matched random directions.

    Each trial draws a fresh sample and a fresh random direction per
    component; the score of an edit is its largest absolute change over
    the oracle attributes. Directions must match the sampler's step count.
    """
    oracle = faces.AttributeOracle(EVAL_ATTRIBUTES, params.config.image_size)
    h_shape = params.config.h_shape
    pcs = {j: dr.assemble_pca_direction(states, j, timesteps, h_shape) for j in components}
    sample_seeds = seeds_for("pca-vs-random", trials, seed)
    base, _ = df.sample(params, schedule, sample_seeds, steps)
    rows, wins, total = [], 0, 0
    for j, d in pcs.items():
        x_pc, _ = df.sample(params, schedule, sample_seeds, steps, d.plan(gamma))
        e_pc = np.abs(attribute_change(oracle, base, x_pc)).max(axis=1)
        rand = [dr.random_direction_norm_matched(d, seed * 1000 + 17 * t + j) for t in range(trials)]
        # one random direction per sample: offsets carry a batch axis after the step axis
        batched = np.stack([r.offsets for r in rand], axis=1)
        plan = df.InjectionPlan(batched, gamma, broadcast=False)
        x_r, _ = df.sample(params, schedule, sample_seeds, steps, plan)
        e_rand = np.abs(attribute_change(oracle, base, x_r)).max(axis=1)
        for t in range(trials):
            rows.append((t, j, gamma, float(e_pc[t]), float(e_rand[t])))
            wins += int(e_pc[t] > e_rand[t])
            total += 1
    return PcaVsRandom(rows, wins, total)


def pca_gamma_sweep(params, schedule, direction, gammas, seed: int, steps: int = 50):
    """Images and normalized attribute scores along a strength sweep."""
    oracle = faces.AttributeOracle(EVAL_ATTRIBUTES, params.config.image_size)
    imgs = []
    for g in gammas:
        x, _ = df.sample(params, schedule, seed, steps, direction.plan(g))
        imgs.append(x[0])
    imgs = np.stack(imgs)
    return imgs, oracle.normalized(oracle.score_batch(imgs))


# ------------------------------------------------------------ Jacobian

def probe_at(params, traj: df.LatentTrajectory, step: int, schedule=None, target="eps",
             sample: int = 0, mask=None):
    """Probe at the stored (x_t, h_t) of one trajectory step.

    The x_t entering step ``i`` is regenerated by replaying the trajectory
    up to that step with its own noise.
    """
    x_t = replay_to(params, traj, step, schedule, sample)
    probe = jc.DenoiserProbe(params, x_t, int(traj.timesteps[step]), target, schedule)
    if mask is not None:
        probe = jc.masked_probe(probe, mask)
    return probe, probe_h(probe)


def probe_h(probe):
    return probe.probe.h if isinstance(probe, jc.MaskedProbe) else probe.h


def replay_to(params, traj, step: int, schedule, sample: int = 0):
    """x_t at the start of sampling step ``step`` for one sample of ``traj``."""
    if schedule is None:
        raise ValueError("replaying a trajectory needs its noise schedule")
    x = traj.x_T[sample:sample + 1]
    ts = traj.timesteps
    for i in range(step):
        t_prev = int(ts[i + 1]) if i + 1 < len(ts) else 0
        z = None if traj.z is None else traj.z[i, sample:sample + 1]
        x, _ = df.reverse_step(params, x, int(ts[i]), schedule, z, None, t_prev, i)
    return x[0]


def sweep_steps(n_steps: int) -> list:
    """Step indices of t* at 0.25, 0.5 and 0.75 of the way through the run."""
    return sorted({min(n_steps - 1, int(round(f * (n_steps - 1)))) for f in (0.25, 0.5, 0.75)})


@dataclass
class TransferResult:
    source_seed: int
    component: int
    attribute: str
    source_change: float
    target_changes: list
    consistent: int
    gamma: float
    sigma: list = field(default_factory=list)


def jacobian_transfer(params, schedule, source_seed: int, target_seeds, step_frac: float = 0.5,
                      k: int = 4, gamma: float = 1.0, steps: int = 50, seed: int = 0) -> TransferResult:
    """Discover directions on one sample, then apply the strongest to others.

    The component and attribute are chosen on the source sample alone: the
    component whose edit changes some attribute the most, and that
    attribute. A target counts as consistent when the attribute moves in
    the same direction as on the source.
    """
    oracle = faces.AttributeOracle(EVAL_ATTRIBUTES, params.config.image_size)
    x_src, traj = df.sample(params, schedule, source_seed, steps)
    step = int(round(step_frac * (steps - 1)))
    probe, h = probe_at(params, traj, step, schedule)
    res = jc.subspace_iteration(probe, h, k, seed=seed)
    best = (-1.0, 0, 0, 0.0)
    for i in range(k):
        d = jc.broadcast_direction(res, i, t_star=int(traj.timesteps[step]), seed=source_seed)
        x, _ = df.sample(params, schedule, source_seed, steps, d.plan(gamma))
        ch = attribute_change(oracle, x_src, x)[0]
        j = int(np.argmax(np.abs(ch)))
        if abs(ch[j]) > best[0]:
            best = (abs(ch[j]), i, j, float(ch[j]))
    _, i, j, src_change = best
    d = jc.broadcast_direction(res, i, t_star=int(traj.timesteps[step]), seed=source_seed)
    targets = list(target_seeds)
    base, _ = df.sample(params, schedule, targets, steps)
    x, _ = df.sample(params, schedule, targets, steps, d.plan(gamma))
    ch = attribute_change(oracle, base, x)[:, j]
    consistent = int(np.sum(np.sign(ch) == np.sign(src_change)))
    return TransferResult(source_seed, i, oracle.names[j], src_change, ch.tolist(), consistent,
                          gamma, res.sigma.tolist())


@dataclass
class LocalityResult:
    inside_fraction: float
    sigma: list
    diff: np.ndarray
    images: tuple


def left_half_mask(config) -> np.ndarray:
    m = np.zeros(config.image_shape)
    m[..., : config.image_size // 2] = 1.0
    return m


def mask_locality(params, schedule, seed: int, mask, step_frac: float = 0.5, gamma: float = 1.0,
                  steps: int = 50, k: int = 3) -> LocalityResult:
    """Share of the edit's pixel energy that falls inside the mask."""
    x0, traj = df.sample(params, schedule, seed, steps)
    step = int(round(step_frac * (steps - 1)))
    probe, h = probe_at(params, traj, step, schedule, mask=mask)
    res = jc.subspace_iteration(probe, h, k)
    d = jc.broadcast_direction(res, 0, t_star=int(traj.timesteps[step]), seed=seed)
    x1, _ = df.sample(params, schedule, seed, steps, d.plan(gamma))
    diff = np.abs(x1[0].astype(np.float64) - x0[0])
    energy = diff ** 2
    m = np.broadcast_to(mask, energy.shape)
    frac = float((energy * m).sum() / max(energy.sum(), 1e-300))
    return LocalityResult(frac, res.sigma.tolist(), diff, (x0[0], x1[0]))


# ------------------------------------------------------- supervised

def annotated_pool(params, schedule, n: int, seed: int = 0, steps: int = 50, batch: int = 64,
                   attributes=EVAL_ATTRIBUTES, purpose: str = "pool"):
    """Generate and annotate ``n`` samples, keeping their trajectories."""
    oracle = faces.AttributeOracle(attributes, params.config.image_size)
    seeds = seeds_for(purpose, n, seed)
    reports = []
    for s in range(0, n, batch):
        x, traj = df.sample(params, schedule, seeds[s:s + batch], steps)
        rep = sv.annotate(x, oracle, traj.seeds, traj)
        reports.append(rep)
    samples = [a for r in reports for a in r.samples]
    for i, a in enumerate(samples):
        a.index = i
    return sv.AnnotationReport(samples, [a.index for a in samples if a.flagged]), oracle


def naive_directions(report, attributes, m: int, kind: str = "h") -> dict:
    return {a: sv.mean_difference_direction(sv.select_extremes(report, a, m, kind)) for a in attributes}


def disentangled_directions(naive: dict) -> dict:
    out = {}
    for a, v in naive.items():
        others = [naive[b] for b in naive if b != a]
        out[a] = sv.disentangle_multi(v, others)
    return out


@dataclass
class DisentangleRun:
    naive: sv.EffectMatrix
    disentangled: sv.EffectMatrix
    gammas_naive: dict
    gammas_disentangled: dict
    naive_dirs: dict
    clean_dirs: dict


def calibrate_all(params, schedule, dirs: dict, oracle, seeds, target: float, steps: int):
    return {a: calibrate_gamma(params, schedule, d, oracle, a, target, seeds, steps)[0]
            for a, d in dirs.items()}


def disentanglement_experiment(params, schedule, pool_size: int = 256, m: int = 32,
                               n_samples: int = 16, repeats: int = 10, seed: int = 0,
                               steps: int = 25, target: float | None = None,
                               attributes=EVAL_ATTRIBUTES) -> DisentangleRun:
    """Effect matrices of naive and projected supervised directions."""
    report, oracle = annotated_pool(params, schedule, pool_size, seed, steps, attributes=attributes)
    naive = naive_directions(report, attributes, m)
    clean = disentangled_directions(naive)
    cal_seeds = seeds_for("calibration", 8, seed)
    if target is None:
        scores = oracle.normalized(np.array([[s.scores[a] for a in attributes] for s in report.usable()]))
        target = float(np.median(scores.std(axis=0)))
    g_naive = calibrate_all(params, schedule, naive, oracle, cal_seeds, target, steps)
    g_clean = calibrate_all(params, schedule, clean, oracle, cal_seeds, target, steps)
    eval_seed = seed + 1
    em_naive = sv.evaluate_disentanglement(params, schedule, naive, oracle, n_samples, g_naive,
                                           repeats, eval_seed, steps)
    em_clean = sv.evaluate_disentanglement(params, schedule, clean, oracle, n_samples, g_clean,
                                           repeats, eval_seed, steps)
    return DisentangleRun(em_naive, em_clean, g_naive, g_clean, naive, clean)


# ---------------------------------------------------- sample efficiency

SAMPLE_SIZES = (5, 10, 25, 50, 100, 200)


def sample_efficiency(params, schedule, attribute: str = "smile", sizes=SAMPLE_SIZES,
                      n_eval: int = 16, gamma: float = 1.0, seed: int = 0, steps: int = 25,
                      pool_size: int | None = None):
    """Effect of h-space versus x_T directions built from n example pairs.

    Runs deterministically (eta = 0) so that an x_T offset is meaningful.
    Returns rows (n, latent, mean signed change, std) and the edited
    images of the first evaluation sample per (n, latent).
    """
    sch = schedule.with_eta(0.0)
    pool_size = pool_size or 2 * max(sizes)
    report, oracle = annotated_pool(params, sch, pool_size, seed, steps, attributes=EVAL_ATTRIBUTES)
    j = oracle.names.index(attribute)
    eval_seeds = seeds_for("efficiency-eval", n_eval, seed)
    base, _ = df.sample(params, sch, eval_seeds, steps)
    rows, grid = [], []
    for n in sizes:
        for kind in ("h", "xT"):
            d = sv.mean_difference_direction(sv.select_extremes(report, attribute, n, kind))
            x, _ = df.sample(params, sch, eval_seeds, steps, d.plan(gamma))
            ch = attribute_change(oracle, base, x)[:, j]
            rows.append((n, kind, float(ch.mean()), float(ch.std())))
            grid.append(x[0])
    return rows, np.stack(grid), base[0]


# ------------------------------------------------------------- Asyrp

def asyrp_comparison(params, schedule, direction, gammas, seed: int = 0, steps: int = 25):
    """Same edits injected into both terms and into the predicted image only.

    Returns rows (mode, gamma, denoiser calls, per-attribute change) and
    the images, one row of the grid per mode.
    """
    oracle = faces.AttributeOracle(EVAL_ATTRIBUTES, params.config.image_size)
    base, _ = df.sample(params, schedule, seed, steps)
    rows, imgs = [], []
    for mode in ("both", "asyrp"):
        for g in gammas:
            before = params.calls
            x, _ = df.sample(params, schedule, seed, steps, direction.plan(g, mode))
            calls = params.calls - before
            ch = attribute_change(oracle, base, x)[0]
            rows.append((mode, g, calls, *map(float, ch)))
            imgs.append(x[0])
    return rows, np.stack(imgs)
