"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 numerical failure (a
``diagnostic.txt`` is written to the output directory).
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
import traceback
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from . import denoiser as dn
from . import diffusion as df
from . import directions as dr
from . import experiments as ex
from . import faces
from . import jacobian as jc
from . import kernels
from . import storage
from . import supervised as sv
from .config import ConfigError, RunConfig, parse_config_text, parse_floats, write_manifest

log = logging.getLogger("hspace")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2
NUMERIC_ERRORS = (df.DivergenceError, ad.NonFiniteError, df.ScheduleError, np.linalg.LinAlgError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# config keys that may also be given as flags
CONFIG_FLAGS = {
    "model": str, "T": int, "eta": float, "seed": int, "steps": int, "train_steps": int,
    "batch": int, "lr": float, "dataset_size": int, "entangled": float, "n_samples": int,
    "k": int, "gammas": str, "attributes": str, "pairs": int, "pool": int, "repeats": int,
    "trials": int,
}


def _add_config_flags(p, keys):
    for key in keys:
        flag = "--" + key.replace("_", "-")
        p.add_argument(flag, dest=key, type=CONFIG_FLAGS[key], default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hspace", description="Semantic editing in the bottleneck of a small diffusion model.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def cmd(name, *keys, parent=sub, **kw):
        p = parent.add_parser(name, **kw)
        p.add_argument("--config", help="flat key = value file")
        p.add_argument("--out", required=True, help="output directory")
        _add_config_flags(p, keys)
        return p

    cmd("train", "model", "T", "seed", "train_steps", "batch", "lr", "dataset_size", "entangled",
        help="train a denoiser on synthetic faces").add_argument("--save-dataset", action="store_true")

    p = cmd("sample", "seed", "steps", "eta", "n_samples", help="generate images")
    p.add_argument("--params", required=True)

    p = cmd("invert", "steps", help="invert images to their initial noise")
    p.add_argument("--params", required=True)
    p.add_argument("--images", required=True, nargs="+", help="PNG files or a container with 'images'")

    p = cmd("swap", "steps", "eta", help="exchange bottleneck codes between two samples")
    p.add_argument("--params", required=True)
    p.add_argument("--seed-a", type=int, default=0)
    p.add_argument("--seed-b", type=int, default=1)

    disc = sub.add_parser("discover", help="find editing directions").add_subparsers(
        dest="method", required=True, parser_class=_Parser)
    p = cmd("pca", "seed", "steps", "eta", "n_samples", "k", "batch", "gammas", parent=disc)
    p.add_argument("--params", required=True)
    p.add_argument("--components", type=int, default=2, help="directions to write")
    p = cmd("jacobian", "seed", "steps", "eta", "k", "gammas", parent=disc)
    p.add_argument("--params", required=True)
    p.add_argument("--timestep", default="sweep", help="step index into the sampler, or 'sweep'")
    p.add_argument("--block", "-b", dest="block", type=int, default=0,
                   help="block size for the sequential variant (0: all k at once)")
    p.add_argument("--mask", help="8-bit grayscale PNG, thresholded at half intensity")
    p = cmd("supervised", "seed", "steps", "eta", "pairs", "pool", parent=disc)
    p.add_argument("--params", required=True)
    p.add_argument("--attribute", required=True, choices=sorted(faces.ATTRIBUTES))
    p.add_argument("--latent", choices=("h", "xT"), default="h")

    p = cmd("edit", "seed", "steps", "eta", "gammas", help="apply a direction over a strength sweep")
    p.add_argument("--params", required=True)
    p.add_argument("--direction", required=True)
    p.add_argument("--gamma", help="comma-separated strengths (overrides gammas)")
    p.add_argument("--mode", choices=("both", "asyrp"), default="both")

    p = cmd("compose", "seed", "steps", "eta", help="apply several directions together")
    p.add_argument("--params", required=True)
    p.add_argument("--direction", action="append", required=True)
    p.add_argument("--gamma", action="append", type=float, required=True)

    ev = sub.add_parser("evaluate", help="run an evaluation experiment").add_subparsers(
        dest="experiment", required=True, parser_class=_Parser)
    p = cmd("disentangle", "seed", "steps", "eta", "attributes", "pairs", "pool", "repeats",
            "n_samples", parent=ev)
    p.add_argument("--params", required=True)
    p = cmd("pca-vs-random", "seed", "steps", "eta", "n_samples", "k", "trials", parent=ev)
    p.add_argument("--params", required=True)
    p.add_argument("--pca", help="saved PCA states (computed when omitted)")
    p.add_argument("--gamma", type=float, default=4.0)
    p = cmd("sample-efficiency", "seed", "steps", "n_samples", parent=ev)
    p.add_argument("--params", required=True)
    p.add_argument("--attribute", default="smile", choices=sorted(faces.ATTRIBUTES))
    p.add_argument("--sizes", default="5,10,25,50,100,200")
    p.add_argument("--gamma", type=float, default=1.0)
    p = cmd("asyrp", "seed", "steps", "eta", "gammas", parent=ev)
    p.add_argument("--params", required=True)
    p.add_argument("--direction", required=True)
    return parser


# per-command defaults that differ from RunConfig's
COMMAND_DEFAULTS = {("discover", "jacobian"): {"k": 8}}


def resolve_config(args) -> RunConfig:
    values = dict(COMMAND_DEFAULTS.get(_command_key(args), {}))
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            values.update(parse_config_text(fh.read()))
    values.update({k: getattr(args, k) for k in CONFIG_FLAGS if getattr(args, k, None) is not None})
    return RunConfig().with_values(values)


# ------------------------------------------------------------------ helpers

class Run:
    """Output directory, resolved config and manifest bookkeeping for one command."""

    def __init__(self, args, argv, cfg):
        self.args, self.argv, self.cfg = args, argv, cfg
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.outputs, self.extra = [], {}
        self.params = None

    def path(self, name) -> Path:
        self.outputs.append(name)
        return self.out / name

    def schedule(self, eta=None):
        return df.linear_schedule(self.cfg.resolved_T(), eta=self.cfg.eta if eta is None else eta)

    def load_params(self, path):
        _, meta = storage.read_container(path)
        self.params = storage.load_params(path)
        if "T" in meta:
            self.cfg = self.cfg.with_values({"T": int(meta["T"])})
        self.extra["params_file"] = str(path)
        return self.params

    def finish(self, command):
        extra = dict(self.extra)
        extra.update({"outputs": sorted(self.outputs), "backend": kernels.BACKEND,
                      "version": __version__})
        if self.params is not None:
            extra["denoiser_calls"] = self.params.calls
        write_manifest(self.out, command, self.argv, self.cfg, extra)


def _images_from(paths, config):
    if len(paths) == 1 and paths[0].endswith(".hslb"):
        entries, _ = storage.read_container(paths[0])
        return np.asarray(entries["images"], dtype=np.float32)
    imgs = [storage.from_uint8(storage.load_png(p)) for p in paths]
    return np.stack(imgs)[:, None].reshape((len(imgs),) + config.image_shape)


def _scores_csv(path, oracle, images, seeds):
    sc = oracle.score_batch(images)
    storage.write_csv(path, ["seed", *oracle.names], [[s, *map(float, r)] for s, r in zip(seeds, sc)],
                      version="scores v1")


# -------------------------------------------------------------- commands

def cmd_train(run: Run):
    cfg = run.cfg
    recipe = ex.Recipe(cfg.model, cfg.resolved_T(), cfg.dataset_size, cfg.entangled,
                       cfg.train_steps, cfg.batch, cfg.lr, cfg.seed)
    images, labels = recipe.dataset()
    t0 = time.perf_counter()
    params, losses = df.train(images, recipe.config, recipe.schedule(), recipe.settings(), cfg.seed)
    run.extra["train_seconds"] = round(time.perf_counter() - t0, 1)
    storage.save_params(run.path("params.hslb"), params, T=recipe.T)
    storage.write_csv(run.path("loss.csv"), ["step", "loss"], list(enumerate(map(float, losses))),
                      version="loss v1")
    storage.write_csv(run.path("labels.csv"), faces.PARAM_NAMES, labels.tolist(), version="labels v1")
    if run.args.save_dataset:
        storage.write_container(run.path("dataset.hslb"), {"images": images}, {"kind": "dataset"})
    val_imgs, _ = faces.generate_dataset(512, cfg.seed + 1, recipe.config.image_size, cfg.entangled)
    model, base = df.validation_loss(params, val_imgs, recipe.schedule())
    run.extra.update(validation_loss=model, zero_baseline=base, final_loss=float(losses[-1]))


def cmd_sample(run: Run):
    params = run.load_params(run.args.params)
    n = min(run.cfg.n_samples, 4096)
    seeds = [run.cfg.seed * 1_000_003 + i for i in range(n)]
    x, traj = df.sample(params, run.schedule(), seeds, run.cfg.steps)
    storage.save_trajectory(run.path("trajectory.hslb"), traj)
    storage.save_png(run.path("samples.png"), storage.image_grid(x, cols=min(8, n)))
    oracle = faces.AttributeOracle(size=params.config.image_size)
    _scores_csv(run.path("scores.csv"), oracle, x, seeds)


def cmd_invert(run: Run):
    params = run.load_params(run.args.params)
    images = _images_from(run.args.images, params.config)
    sch = run.schedule(eta=0.0)
    traj = df.invert(params, images, sch, run.cfg.steps)
    recon, _ = df.sample(params, sch, 0, run.cfg.steps, x_T=traj.x_T)
    mse = float(np.mean((recon.astype(np.float64) - images) ** 2))
    storage.save_trajectory(run.path("trajectory.hslb"), traj)
    storage.save_png(run.path("reconstruction.png"), storage.image_grid(np.concatenate([images, recon]),
                                                                        rows=2))
    run.extra["reconstruction_mse"] = mse


def cmd_swap(run: Run):
    params = run.load_params(run.args.params)
    sch = run.schedule()
    xa, ta = df.sample(params, sch, run.args.seed_a, run.cfg.steps)
    xb, tb = df.sample(params, sch, run.args.seed_b, run.cfg.steps)
    a_hb, b_ha, _, _ = df.swap_h(params, ta, tb, sch)
    grid = storage.image_grid([xa[0], xb[0], a_hb[0], b_ha[0]], 2, 2)
    storage.save_png(run.path("swap.png"), grid)


def cmd_discover_pca(run: Run):
    params = run.load_params(run.args.params)
    cfg = run.cfg
    states, ts, skipped = dr.fit_pca(params, run.schedule(), cfg.n_samples, cfg.k, cfg.seed,
                                     cfg.batch, cfg.steps)
    storage.save_pca(run.path("pca.hslb"), states, ts)
    run.extra["skipped_samples"] = len(skipped)
    for j in range(1, min(run.args.components, cfg.k) + 1):
        d = dr.assemble_pca_direction(states, j, ts, params.config.h_shape)
        storage.save_direction(run.path(f"pca_{j}.hslb"), d)
        imgs = [df.sample(params, run.schedule(), cfg.seed, cfg.steps, d.plan(g))[0][0] for g in cfg.gamma_list()]
        storage.save_png(run.path(f"sweep_{j}.png"), storage.image_grid(imgs, labels=cfg.gamma_list()))


def cmd_discover_jacobian(run: Run):
    params = run.load_params(run.args.params)
    cfg, args = run.cfg, run.args
    sch = run.schedule()
    _, traj = df.sample(params, sch, cfg.seed, cfg.steps)
    steps = ex.sweep_steps(cfg.steps) if args.timestep == "sweep" else [int(args.timestep)]
    for s in steps:
        if not 0 <= s < cfg.steps:
            raise UsageError(f"--timestep {s} outside 0..{cfg.steps - 1}")
    mask = storage.load_mask(args.mask, params.config.image_shape) if args.mask else None
    k = min(cfg.k, int(np.prod(params.config.h_shape)))
    for s in steps:
        probe, h = ex.probe_at(params, traj, s, sch, mask=mask)
        if args.block:
            res = jc.sequential_subspace_iteration(probe, h, k, args.block, seed=cfg.seed)
        else:
            res = jc.subspace_iteration(probe, h, k, seed=cfg.seed)
        t_star = int(traj.timesteps[s])
        res.meta.update(t_star=t_star, seed=cfg.seed, mask=args.mask or "")
        storage.save_spectral(run.path(f"spectral_t{t_star}.hslb"), res)
        run.extra[f"sigma_t{t_star}"] = [round(float(v), 6) for v in res.sigma]
        run.extra[f"stop_t{t_star}"] = res.stop_reasons
        rows = []
        for i in range(min(k, 4)):
            d = jc.broadcast_direction(res, i, t_star=t_star, seed=cfg.seed)
            storage.save_direction(run.path(f"direction_t{t_star}_{i}.hslb"), d)
            rows += [df.sample(params, sch, cfg.seed, cfg.steps, d.plan(g))[0][0] for g in cfg.gamma_list()]
        storage.save_png(run.path(f"sweep_t{t_star}.png"),
                         storage.image_grid(rows, cols=len(cfg.gamma_list()), labels=cfg.gamma_list()))


def cmd_discover_supervised(run: Run):
    params = run.load_params(run.args.params)
    cfg, args = run.cfg, run.args
    report, oracle = ex.annotated_pool(params, run.schedule(), cfg.pool, cfg.seed, cfg.steps,
                                       attributes=list(faces.ATTRIBUTES))
    pairs = sv.select_extremes(report, args.attribute, cfg.pairs, args.latent)
    d = sv.mean_difference_direction(pairs)
    storage.save_direction(run.path(f"{args.attribute}_{args.latent}.hslb"), d)
    run.extra.update(flagged=len(report.flagged), pairs=len(pairs))


def _load_direction_for(run, path):
    d = storage.load_direction(path)
    if d.kind == "h" and not d.broadcast and len(d.offsets) != run.cfg.steps:
        run.cfg = run.cfg.with_values({"steps": len(d.offsets)})
    return d


def cmd_edit(run: Run):
    params = run.load_params(run.args.params)
    d = _load_direction_for(run, run.args.direction)
    gammas = parse_floats(run.args.gamma) if run.args.gamma else run.cfg.gamma_list()
    sch, cfg = run.schedule(), run.cfg
    imgs = []
    for g in gammas:
        x, _ = df.sample(params, sch, cfg.seed, cfg.steps, d.plan(g, run.args.mode))
        imgs.append(x[0])
    imgs = np.stack(imgs)
    storage.write_container(run.path("edits.hslb"), {"images": imgs, "gammas": np.asarray(gammas)},
                            {"kind": "edits", "mode": run.args.mode})
    storage.save_png(run.path("edit.png"), storage.image_grid(imgs, labels=gammas))
    _scores_csv(run.path("scores.csv"), faces.AttributeOracle(size=params.config.image_size), imgs,
                [cfg.seed] * len(imgs))
    run.extra["mode"] = run.args.mode


def cmd_compose(run: Run):
    params = run.load_params(run.args.params)
    if len(run.args.direction) != len(run.args.gamma):
        raise UsageError("give one --gamma per --direction")
    dirs = [_load_direction_for(run, p) for p in run.args.direction]
    plan = sv.compose_edits(list(zip(dirs, run.args.gamma)))
    sch, cfg = run.schedule(), run.cfg
    x0, _ = df.sample(params, sch, cfg.seed, cfg.steps)
    x1, _ = df.sample(params, sch, cfg.seed, cfg.steps, plan)
    storage.write_container(run.path("compose.hslb"), {"original": x0, "edited": x1}, {"kind": "edits"})
    storage.save_png(run.path("compose.png"), storage.image_grid([x0[0], x1[0]], labels=["orig", "edit"]))


def cmd_eval_disentangle(run: Run):
    params = run.load_params(run.args.params)
    cfg = run.cfg
    res = ex.disentanglement_experiment(params, run.schedule(), cfg.pool, cfg.pairs,
                                        min(cfg.n_samples, 256), cfg.repeats, cfg.seed, cfg.steps,
                                        attributes=cfg.attribute_list())
    for name, em, gam in (("naive", res.naive, res.gammas_naive),
                          ("disentangled", res.disentangled, res.gammas_disentangled)):
        storage.atomic_write(run.path(f"effect_{name}.csv"), em.to_csv())
        run.extra[f"{name}_diagonal_rows"] = em.diagonal_hits()
        run.extra[f"{name}_excluded"] = em.excluded
        _direction_grids(run, params, name, res, gam)


def _direction_grids(run, params, name, res, gammas):
    # one strip per attribute: original and the edit at its calibrated strength
    sch, cfg = run.schedule(), run.cfg
    seeds = ex.seeds_for("grid", 4, cfg.seed)
    dirs = res.naive_dirs if name == "naive" else res.clean_dirs
    for attr, d in dirs.items():
        x0, _ = df.sample(params, sch, seeds, cfg.steps)
        x1, _ = df.sample(params, sch, seeds, cfg.steps, d.plan(gammas[attr]))
        storage.save_png(run.path(f"grid_{name}_{attr}.png"),
                         storage.image_grid(np.concatenate([x0, x1]), rows=2))


def cmd_eval_pca_vs_random(run: Run):
    params = run.load_params(run.args.params)
    cfg = run.cfg
    if run.args.pca:
        states, ts = storage.load_pca(run.args.pca)
    else:
        states, ts, _ = dr.fit_pca(params, run.schedule(), cfg.n_samples, max(cfg.k, 2), cfg.seed,
                                   64, cfg.steps)
    res = ex.pca_vs_random(params, run.schedule(), states, ts, cfg.trials, run.args.gamma, seed=cfg.seed,
                           steps=len(ts))
    storage.write_csv(run.path("pca_vs_random.csv"),
                      ["trial", "component", "gamma", "pca_effect", "random_effect"], res.rows,
                      version="pca-vs-random v1")
    run.extra.update(wins=res.wins, comparisons=res.comparisons, win_rate=round(res.win_rate, 4))


def cmd_eval_sample_efficiency(run: Run):
    params = run.load_params(run.args.params)
    cfg = run.cfg
    sizes = [int(s) for s in parse_floats(run.args.sizes)]
    rows, imgs, base = ex.sample_efficiency(params, run.schedule(), run.args.attribute, sizes,
                                            min(cfg.n_samples, 64), run.args.gamma, cfg.seed, cfg.steps)
    storage.write_csv(run.path("sample_efficiency.csv"), ["n", "latent", "mean_change", "std_change"],
                      rows, version="sample-efficiency v1")
    # first row: the unedited sample; then one row per n with the h and x_T edits
    tiles = np.concatenate([np.stack([base, base]), imgs])
    storage.save_png(run.path("sample_efficiency.png"), storage.image_grid(tiles, cols=2, labels=["h", "xT"]))


def cmd_eval_asyrp(run: Run):
    params = run.load_params(run.args.params)
    d = _load_direction_for(run, run.args.direction)
    cfg = run.cfg
    rows, imgs = ex.asyrp_comparison(params, run.schedule(), d, cfg.gamma_list(), cfg.seed, cfg.steps)
    names = faces.AttributeOracle(ex.EVAL_ATTRIBUTES).names
    storage.write_csv(run.path("asyrp.csv"), ["mode", "gamma", "denoiser_calls", *names], rows,
                      version="asyrp v1")
    storage.save_png(run.path("asyrp.png"),
                     storage.image_grid(imgs, rows=2, labels=cfg.gamma_list()))
    run.extra["calls_both"] = sum(r[2] for r in rows if r[0] == "both")
    run.extra["calls_asyrp"] = sum(r[2] for r in rows if r[0] == "asyrp")


COMMANDS = {
    ("train",): cmd_train, ("sample",): cmd_sample, ("invert",): cmd_invert, ("swap",): cmd_swap,
    ("discover", "pca"): cmd_discover_pca, ("discover", "jacobian"): cmd_discover_jacobian,
    ("discover", "supervised"): cmd_discover_supervised, ("edit",): cmd_edit,
    ("compose",): cmd_compose, ("evaluate", "disentangle"): cmd_eval_disentangle,
    ("evaluate", "pca-vs-random"): cmd_eval_pca_vs_random,
    ("evaluate", "sample-efficiency"): cmd_eval_sample_efficiency,
    ("evaluate", "asyrp"): cmd_eval_asyrp,
}


def _command_key(args):
    sub = getattr(args, "method", None) or getattr(args, "experiment", None)
    return (args.command, sub) if sub else (args.command,)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
    except (UsageError, ConfigError, OSError) as err:
        print(f"hspace: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    key = _command_key(args)
    run = None
    try:
        run = Run(args, argv, cfg)
        COMMANDS[key](run)
        run.finish(" ".join(key))
        return EXIT_OK
    except (UsageError, ConfigError, FileNotFoundError, storage.ContainerError, KeyError,
            ad.ShapeError) as err:
        print(f"hspace: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except NUMERIC_ERRORS as err:
        out = run.out if run is not None else Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        storage.atomic_write(out / "diagnostic.txt",
                             f"command = {' '.join(key)}\nerror = {type(err).__name__}: {err}\n\n"
                             + traceback.format_exc())
        print(f"hspace: numerical failure: {err} (see {out / 'diagnostic.txt'})", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
