"""Procedural grayscale faces with known attributes, and pixel-based estimators.

Geometry is defined in a face frame with unit canvas half-width; a face
is an ellipse with two elliptical eyes and a mouth stroke whose curvature
follows ``mouth_curve``. The estimators recover each attribute from fixed
regions of that frame after locating the face from its silhouette.
"""
from __future__ import annotations

from dataclasses import astuple, dataclass, fields

import numpy as np
from scipy.special import ndtr

BG, FACE, FEATURE = -0.6, 0.5, -0.8
FACE_A, FACE_B = 0.52, 0.66          # face semi-axes (horizontal, vertical)
EYE_X, EYE_Y, EYE_W, EYE_H = 0.22, -0.18, 0.14, 0.12
MOUTH_Y, MOUTH_HALF, MOUTH_AMP, MOUTH_THICK = 0.28, 0.24, 0.15, 0.05
SUPERSAMPLE = 4


@dataclass(frozen=True)
class FaceParams:
    eye_openness: float = 0.5
    mouth_curve: float = 0.0
    head_rotation: float = 0.0
    face_scale: float = 1.0
    brightness: float = 0.0
    dx: float = 0.0
    dy: float = 0.0

    def validate(self):
        for name, (lo, hi) in RANGES.items():
            v = getattr(self, name)
            if not (lo - 1e-9 <= v <= hi + 1e-9):
                raise ValueError(f"{name}={v} outside [{lo}, {hi}]")
        return self

    def as_array(self):
        return np.array(astuple(self), dtype=np.float64)


RANGES = {
    "eye_openness": (0.0, 1.0),
    "mouth_curve": (-1.0, 1.0),
    "head_rotation": (-0.3, 0.3),
    "face_scale": (0.8, 1.2),
    "brightness": (-0.2, 0.2),
    "dx": (-1.0, 1.0),
    "dy": (-1.0, 1.0),
}
PARAM_NAMES = [f.name for f in fields(FaceParams)]

# attribute name -> FaceParams field
ATTRIBUTES = {
    "eyes": "eye_openness",
    "smile": "mouth_curve",
    "rotation": "head_rotation",
    "scale": "face_scale",
    "brightness": "brightness",
}


def _face_frame(u, v, cx, cy, rot, scale):
    """Map canvas coordinates to the face frame (p right, q down)."""
    x, y = u - cx, v - cy
    c, s = np.cos(rot), np.sin(rot)
    return (c * x + s * y) / scale, (-s * x + c * y) / scale


def _mouth_line(p, curve):
    return MOUTH_Y + curve * MOUTH_AMP * (1.0 / 3.0 - (p / MOUTH_HALF) ** 2)


def _grid(size, factor):
    n = size * factor
    coords = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    return np.meshgrid(coords, coords, indexing="xy")


def render_batch(params: np.ndarray, size: int = 32) -> np.ndarray:
    """Render rows of FaceParams arrays; returns (N, 1, size, size) in [-1, 1]."""
    params = np.atleast_2d(np.asarray(params, dtype=np.float64))
    u, v = _grid(size, SUPERSAMPLE)
    out = np.empty((len(params), 1, size, size), dtype=np.float32)
    chunk = 64
    for start in range(0, len(params), chunk):
        P = params[start:start + chunk]
        eye, mouth, rot, scale, bright, dx, dy = (P[:, i, None, None] for i in range(7))
        cx, cy = dx * 2.0 / size, dy * 2.0 / size
        p, q = _face_frame(u[None], v[None], cx, cy, rot, scale)
        face = (p / FACE_A) ** 2 + (q / FACE_B) ** 2 <= 1.0
        eh = EYE_H * eye
        with np.errstate(divide="ignore", invalid="ignore"):
            eyes = ((np.abs(p) - EYE_X) / EYE_W) ** 2 + ((q - EYE_Y) / eh) ** 2 <= 1.0
        eyes &= eh > 0
        stroke = (np.abs(p) <= MOUTH_HALF) & (np.abs(q - _mouth_line(p, mouth)) <= MOUTH_THICK)
        feature = face & (eyes | stroke)
        val = np.where(face, FACE, BG)
        val = np.where(feature, FEATURE, val) + bright
        n = len(P)
        img = val.reshape(n, size, SUPERSAMPLE, size, SUPERSAMPLE).mean(axis=(2, 4))
        out[start:start + n, 0] = img
    return np.clip(out, -1.0, 1.0)


def render(p: FaceParams, size: int = 32) -> np.ndarray:
    """Render one face as a (1, size, size) image."""
    p.validate()
    return render_batch(p.as_array()[None], size)[0]


# ------------------------------------------------------------------ estimators

def _pixel_grid(size):
    coords = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    return np.meshgrid(coords, coords, indexing="xy")


def _background_level(img):
    k = max(img.shape[-1] // 8, 1)
    corners = np.concatenate([img[:k, :k].ravel(), img[:k, -k:].ravel(),
                              img[-k:, :k].ravel(), img[-k:, -k:].ravel()])
    return float(np.median(corners))


def _silhouette(img, bg):
    """Face coverage with interior features filled row by row."""
    cover = np.clip((img - bg) / (FACE - BG), 0.0, 1.0)
    filled = cover.copy()
    strong = cover > 0.5
    for r in range(img.shape[0]):
        cols = np.flatnonzero(strong[r])
        if len(cols) >= 2:
            filled[r, cols[0] + 1:cols[-1]] = 1.0
    return filled


def measure_attributes(image, size: int | None = None) -> dict:
    """Estimate every attribute from one image of shape (1, S, S) or (S, S).

    Total on any finite input: degenerate images return neutral values
    (eyes 0, smile 0, rotation 0, scale 0).
    """
    img = np.asarray(image, dtype=np.float64)
    img = img.reshape(img.shape[-2], img.shape[-1])
    size = img.shape[-1]
    img = np.nan_to_num(img, nan=0.0, posinf=1.0, neginf=-1.0)
    bg = _background_level(img)
    brightness = bg - BG
    face_level = FACE + brightness

    u, v = _pixel_grid(size)
    pix_area = (2.0 / size) ** 2
    mask = _silhouette(img, bg)
    mass = mask.sum()
    out = {"brightness": brightness, "eyes": 0.0, "smile": 0.0, "rotation": 0.0,
           "scale": 0.0, "dx": 0.0, "dy": 0.0}
    if mass * pix_area < 0.05:
        return out
    area = mass * pix_area
    scale = np.sqrt(area / (np.pi * FACE_A * FACE_B))
    cx, cy = (mask * u).sum() / mass, (mask * v).sum() / mass
    mu20 = (mask * (u - cx) ** 2).sum() / mass
    mu02 = (mask * (v - cy) ** 2).sum() / mass
    mu11 = (mask * (u - cx) * (v - cy)).sum() / mass
    # major axis angle from the x axis; the face's major axis is vertical
    major = 0.5 * np.arctan2(2.0 * mu11, mu20 - mu02)
    rot = major - np.sign(major) * np.pi / 2 if major != 0 else 0.0
    out.update(scale=scale, rotation=rot, dx=cx * size / 2.0, dy=cy * size / 2.0)

    p, q = _face_frame(u, v, cx, cy, rot, scale)
    inner = (p / (0.9 * FACE_A)) ** 2 + (q / (0.9 * FACE_B)) ** 2 <= 1.0
    dark = np.clip((face_level - img) / (FACE - FEATURE), 0.0, 1.0)
    px_face = pix_area / scale ** 2  # pixel area in face units

    eye_region = inner & (q < 0.02) & (q > -0.40) & (np.abs(p) > 0.03)
    eye_area = (dark * eye_region).sum() * px_face
    out["eyes"] = eye_area / (2.0 * np.pi * EYE_W * EYE_H)

    mouth_region = inner & (q > 0.08)
    w = dark * mouth_region
    if w.sum() * px_face > 1e-3:
        design = np.stack([np.ones_like(p[w > 0]), (p[w > 0] / MOUTH_HALF) ** 2], axis=1)
        sw = np.sqrt(w[w > 0])
        coef, *_ = np.linalg.lstsq(design * sw[:, None], q[w > 0] * sw, rcond=None)
        out["smile"] = -coef[1] / MOUTH_AMP
    return {k: float(v) for k, v in out.items()}


class AttributeOracle:
    """Registered estimators with per-attribute tolerance (10% of range)."""

    def __init__(self, names=None, size: int = 32):
        self.names = list(names or ATTRIBUTES)
        for n in self.names:
            if n not in ATTRIBUTES:
                raise KeyError(f"unknown attribute {n!r}")
        self.size = size
        self.ranges = {n: RANGES[ATTRIBUTES[n]] for n in self.names}
        self.tolerance = {n: 0.1 * (hi - lo) for n, (lo, hi) in self.ranges.items()}

    def score(self, image) -> np.ndarray:
        m = measure_attributes(image)
        return np.array([m[n] for n in self.names])

    def score_batch(self, images) -> np.ndarray:
        return np.stack([self.score(im) for im in np.asarray(images)])

    def normalized(self, scores) -> np.ndarray:
        """Scores rescaled so each attribute's declared range maps to [0, 1]."""
        lo = np.array([self.ranges[n][0] for n in self.names])
        hi = np.array([self.ranges[n][1] for n in self.names])
        return (np.asarray(scores) - lo) / (hi - lo)

    def truth(self, params) -> np.ndarray:
        """Ground-truth attribute vectors for rows of FaceParams arrays."""
        params = np.atleast_2d(params)
        return np.stack([params[:, PARAM_NAMES.index(ATTRIBUTES[n])] for n in self.names], axis=1)


def sample_params(n: int, rng: np.random.Generator, entangled: float = 0.0) -> np.ndarray:
    """i.i.d. uniform FaceParams rows; optionally correlate eyes with brightness.

    ``entangled`` is the target Pearson correlation between eye_openness and
    brightness, realised with a Gaussian copula so both marginals stay uniform.
    """
    z = rng.standard_normal((n, len(PARAM_NAMES)))
    if entangled:
        # Pearson correlation of a Gaussian copula's uniforms is (6/pi) asin(r/2)
        r = 2.0 * np.sin(np.pi * entangled / 6.0)
        i, j = PARAM_NAMES.index("eye_openness"), PARAM_NAMES.index("brightness")
        z[:, j] = r * z[:, i] + np.sqrt(1.0 - r * r) * z[:, j]
    u = ndtr(z)
    lo = np.array([RANGES[n][0] for n in PARAM_NAMES])
    hi = np.array([RANGES[n][1] for n in PARAM_NAMES])
    return lo + u * (hi - lo)


def generate_dataset(n: int, seed: int, size: int = 32, entangled: float = 0.0):
    """Deterministic dataset of ``n`` faces; returns (images, params rows)."""
    from .diffusion import stream
    rng = stream(seed, "faces")
    params = sample_params(n, rng, entangled)
    return render_batch(params, size), params
