"""Directions from labelled examples: difference of latent means, removal of
unwanted attributes by orthogonal projection, and the effect-matrix
evaluation of how cleanly each direction edits its own attribute."""
from __future__ import annotations

import hashlib
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import diffusion as df
from .directions import Direction

log = logging.getLogger(__name__)

ENTANGLED_TOL = 1e-7   # relative norm below which a projection counts as zero
GRAM_COND_MAX = 1e8


class DegenerateAttributeWarning(UserWarning):
    pass


class EntangledWarning(UserWarning):
    pass


@dataclass
class AnnotatedSample:
    index: int
    seed: int
    scores: dict
    h: np.ndarray | None = None       # (S, *h_shape) bottleneck codes
    x_T: np.ndarray | None = None
    timesteps: np.ndarray | None = None
    flagged: bool = False


@dataclass
class AnnotationReport:
    samples: list
    flagged: list = field(default_factory=list)

    def usable(self) -> list:
        return [s for s in self.samples if not s.flagged]


def annotate(images, oracle, seeds=None, trajectory: df.LatentTrajectory | None = None) -> AnnotationReport:
    """Score every image on every oracle attribute.

    A sample whose scores are not all finite, or whose estimator raises,
    is flagged and excluded from selection; the report lists it.
    """
    images = np.asarray(images)
    seeds = list(range(len(images))) if seeds is None else [int(s) for s in seeds]
    out, flagged = [], []
    for i, img in enumerate(images):
        try:
            vec = oracle.score(img)
            ok = bool(np.all(np.isfinite(vec)))
        except (ValueError, FloatingPointError, np.linalg.LinAlgError) as err:
            log.warning("oracle failed on sample %d: %s", i, err)
            vec, ok = np.full(len(oracle.names), np.nan), False
        s = AnnotatedSample(i, seeds[i], dict(zip(oracle.names, map(float, vec))), flagged=not ok)
        if trajectory is not None:
            s.h, s.x_T, s.timesteps = trajectory.h[:, i], trajectory.x_T[i], trajectory.timesteps
        if not ok:
            flagged.append(i)
        out.append(s)
    return AnnotationReport(out, flagged)


@dataclass
class ExamplePairSet:
    attribute: str
    negatives: list          # latents, most negative first
    positives: list          # latents, most positive first
    kind: str = "h"
    timesteps: np.ndarray | None = None
    negative_seeds: list = field(default_factory=list)
    positive_seeds: list = field(default_factory=list)

    def __post_init__(self):
        if not self.positives or len(self.positives) != len(self.negatives):
            raise ValueError("need at least one (negative, positive) pair")
        shapes = {np.shape(q) for q in self.positives + self.negatives}
        if len(shapes) != 1:
            raise ValueError("all latents in a pair set must share one shape")
        if self.kind not in ("h", "xT"):
            raise ValueError(f"unknown latent kind {self.kind!r}")

    def __len__(self):
        return len(self.positives)

    @property
    def pairs(self):
        return list(zip(self.negatives, self.positives))


def select_extremes(annotated, attribute: str, m: int, kind: str = "h") -> ExamplePairSet:
    """The m highest-scoring samples as positives and the m lowest as negatives.

    Pairs are formed by rank (highest with lowest). Ties are broken by seed.
    """
    samples = annotated.usable() if isinstance(annotated, AnnotationReport) else \
        [s for s in annotated if not s.flagged]
    if m < 1 or 2 * m > len(samples):
        raise ValueError(f"need 2*m <= {len(samples)} usable samples, got m={m}")
    scores = np.array([s.scores[attribute] for s in samples])
    if np.all(scores == scores[0]):
        warnings.warn(f"degenerate attribute {attribute!r}: all scores equal", DegenerateAttributeWarning)
    low = sorted(samples, key=lambda s: (s.scores[attribute], s.seed))[:m]
    taken = {id(s) for s in low}
    rest = [s for s in samples if id(s) not in taken]
    high = sorted(rest, key=lambda s: (-s.scores[attribute], s.seed))[:m]

    def latent(s):
        q = s.h if kind == "h" else s.x_T
        if q is None:
            raise ValueError(f"sample {s.index} carries no {kind} latent")
        return q

    return ExamplePairSet(attribute, [latent(s) for s in low], [latent(s) for s in high], kind,
                          low[0].timesteps, [s.seed for s in low], [s.seed for s in high])


def mean_difference_direction(pairs: ExamplePairSet) -> Direction:
    """v = mean over pairs of (q_plus - q_minus)."""
    pos = np.stack([np.asarray(q, dtype=np.float64) for q in pairs.positives])
    neg = np.stack([np.asarray(q, dtype=np.float64) for q in pairs.negatives])
    v = (pos - neg).mean(axis=0)
    dtype = np.asarray(pairs.positives[0]).dtype
    dtype = dtype if np.issubdtype(dtype, np.floating) else np.float64
    meta = {"attribute": pairs.attribute, "n_pairs": len(pairs)}
    if pairs.kind == "xT":
        return Direction(v.astype(dtype), "supervised", broadcast=True, kind="xT", meta=meta)
    return Direction(v.astype(dtype), "supervised", broadcast=False, timesteps=pairs.timesteps, meta=meta)


def _check_compatible(*dirs):
    ref = dirs[0]
    for d in dirs[1:]:
        if d.kind != ref.kind or d.offsets.shape != ref.offsets.shape:
            raise ValueError("directions differ in latent kind or shape")


def _project_out_one(v1, v2):
    n2 = float(v2 @ v2)
    if n2 == 0.0:
        raise ValueError("cannot project onto a zero direction")
    return v1 - (float(v1 @ v2) / n2) * v2


def _entangled_check(r, v, what):
    if np.linalg.norm(r) <= ENTANGLED_TOL * np.linalg.norm(v):
        warnings.warn(f"{what}: direction lies in the span of the others (fully entangled)",
                      EntangledWarning)
        return np.zeros_like(r)
    return r


def disentangle_pair(v1: Direction, v2: Direction) -> Direction:
    """Remove from v1 its component along v2 (inner product over the whole latent)."""
    _check_compatible(v1, v2)
    a, b = v1.flat(), v2.flat()
    r = _entangled_check(_project_out_one(a, b), a, "disentangle_pair")
    return v1.with_flat(r, removed=_attr(v2))


def _attr(d):
    return str(d.meta.get("attribute", d.method))


def dependent_columns(V, cond_max=GRAM_COND_MAX) -> list:
    """Indices of columns lying (numerically) in the span of earlier columns."""
    bad, kept = [], []
    for i in range(V.shape[1]):
        cols = kept + [i]
        G = V[:, cols].T @ V[:, cols]
        if np.linalg.cond(G) >= cond_max:
            bad.append(i)
        else:
            kept.append(i)
    return bad


def projector_apply(V, v):
    """[I - V (V^T V)^-1 V^T] v for a (D, k) matrix V."""
    G = V.T @ V
    return v - V @ np.linalg.solve(G, V.T @ v)


def disentangle_multi(v0: Direction, others: list) -> Direction:
    """Project v0 onto the orthogonal complement of span(others)."""
    if not others:
        raise ValueError("need at least one direction to project out")
    _check_compatible(v0, *others)
    if len(others) == 1:
        return disentangle_pair(v0, others[0])
    V = np.stack([d.flat() for d in others], axis=1)
    G = V.T @ V
    if np.linalg.cond(G) >= GRAM_COND_MAX:
        bad = dependent_columns(V)
        names = [_attr(others[i]) for i in bad]
        raise np.linalg.LinAlgError(f"directions are linearly dependent: columns {bad} ({names})")
    a = v0.flat()
    r = _entangled_check(projector_apply(V, a), a, "disentangle_multi")
    return v0.with_flat(r, removed=",".join(_attr(d) for d in others))


def compose_edits(edits) -> df.InjectionPlan:
    """Sum of gamma_d * v_d over (direction, gamma) pairs as one plan.

    Terms are summed in a canonical order keyed on their content, so the
    plan does not depend on the order the edits were listed in.
    """
    edits = [(d, float(g)) for d, g in edits]
    if not edits:
        raise ValueError("no edits to compose")
    _check_compatible(*[d for d, _ in edits])
    kind = edits[0][0].kind
    if kind == "xT":
        terms = [np.asarray(g * d.offsets.astype(np.float64)) for d, g in edits]
        broadcast = True
    else:
        broadcast = all(d.broadcast for d, _ in edits)
        steps = max((len(d.offsets) for d, _ in edits if not d.broadcast), default=0)
        terms = [g * (d.offsets if broadcast else d.expanded(steps)).astype(np.float64) for d, g in edits]
    terms.sort(key=lambda a: hashlib.sha1(np.ascontiguousarray(a).tobytes()).hexdigest())
    total = terms[0].copy()
    for a in terms[1:]:
        total += a
    dtype = edits[0][0].offsets.dtype
    total = total.astype(dtype)
    if kind == "xT":
        return df.InjectionPlan(None, 1.0, broadcast=True, x_T_offset=total)
    return df.InjectionPlan(total, 1.0, broadcast=broadcast)


# -------------------------------------------------------------- evaluation

@dataclass
class EffectMatrix:
    """Mean (and std over repeats) of |change| in attribute j when editing with i."""
    edits: list
    attributes: list
    mean: np.ndarray
    std: np.ndarray
    excluded: int = 0
    per_repeat: np.ndarray | None = None

    @property
    def argmax(self) -> np.ndarray:
        return np.argmax(self.mean, axis=1)

    def diagonal_hits(self) -> int:
        """Rows whose strongest effect is on their own attribute."""
        return sum(int(self.attributes[j] == e) for e, j in zip(self.edits, self.argmax))

    def off_diagonal_rows(self) -> list:
        return [e for e, j in zip(self.edits, self.argmax) if self.attributes[j] != e]

    def to_csv(self) -> str:
        head = ["edit"] + [f"{a}_{s}" for a in self.attributes for s in ("mean", "std")] + ["argmax"]
        lines = ["# effect-matrix v1", ",".join(head)]
        for i, e in enumerate(self.edits):
            cells = [f"{self.mean[i, j]:.6f},{self.std[i, j]:.6f}" for j in range(len(self.attributes))]
            lines.append(",".join([e] + cells + [self.attributes[self.argmax[i]]]))
        return "\n".join(lines) + "\n"


def _finite_rows(x):
    return np.all(np.isfinite(x.reshape(len(x), -1)), axis=1)


def edit_scores(params, schedule, seeds, oracle, plan=None, steps: int | None = 50, batch: int = 64):
    """Oracle scores (normalized to each attribute's range) of sampled images.

    Rows of samples that diverge are NaN.
    """
    seeds = list(seeds)
    out = np.full((len(seeds), len(oracle.names)), np.nan)
    for s in range(0, len(seeds), batch):
        chunk = seeds[s:s + batch]
        try:
            x, _ = df.sample(params, schedule, chunk, steps, plan)
        except df.DivergenceError:
            x = np.stack([_sample_or_nan(params, schedule, c, steps, plan) for c in chunk])
        ok = _finite_rows(x)
        out[s:s + len(chunk)][ok] = oracle.normalized(oracle.score_batch(x[ok]))
    return out


def _sample_or_nan(params, schedule, seed, steps, plan):
    try:
        return df.sample(params, schedule, seed, steps, plan)[0][0]
    except df.DivergenceError:
        return np.full(params.config.image_shape, np.nan, dtype=params.dtype)


def evaluate_disentanglement(params, schedule, directions: dict, oracle, n_samples: int = 32,
                             gamma=1.0, repeats: int = 10, seed: int = 0,
                             steps: int | None = 50, batch: int = 64) -> EffectMatrix:
    """Effect matrix over ``repeats`` disjoint seed sets.

    ``directions`` maps an edit name (normally the attribute it targets)
    to a Direction; ``gamma`` is one value or a dict per edit name.
    Scores are normalized to each attribute's declared range, so entries
    are comparable across attributes.
    """
    names = list(directions)
    gammas = {n: float(gamma[n] if isinstance(gamma, dict) else gamma) for n in names}
    A = len(oracle.names)
    per = np.zeros((repeats, len(names), A))
    excluded = 0
    for r in range(repeats):
        seeds = [(int(seed) * 1000 + r) * 100_003 + i for i in range(n_samples)]
        base = edit_scores(params, schedule, seeds, oracle, None, steps, batch)
        for i, n in enumerate(names):
            d = directions[n]
            if not np.any(d.offsets):
                continue
            edited = edit_scores(params, schedule, seeds, oracle, d.plan(gammas[n]), steps, batch)
            delta = np.abs(edited - base)
            ok = np.all(np.isfinite(delta), axis=1)
            excluded += int((~ok).sum())
            per[r, i] = delta[ok].mean(axis=0) if ok.any() else np.nan
    if excluded:
        log.warning("%d edited samples diverged and were excluded", excluded)
    return EffectMatrix(names, list(oracle.names), per.mean(axis=0), per.std(axis=0), excluded, per)


def directions_from_inverted_images(negatives, positives, params, schedule, steps: int | None = 50,
                                    attribute: str = "") -> Direction:
    """Invert each image deterministically and take the mean bottleneck difference."""
    negatives, positives = np.asarray(negatives), np.asarray(positives)
    if negatives.shape != positives.shape:
        raise ValueError("negative and positive image sets differ in shape")
    sch = schedule.with_eta(0.0)
    tn = df.invert(params, negatives, sch, steps)
    tp = df.invert(params, positives, sch, steps)
    pairs = ExamplePairSet(attribute, list(tn.h.swapaxes(0, 1)), list(tp.h.swapaxes(0, 1)),
                           "h", tn.timesteps)
    return mean_difference_direction(pairs)
