"""Persistence: the HSLB named-array container, 8-bit PNG grids, CSV, and
atomic file writes.

Container layout (all little-endian)::

    b"HSLB"  u32 version  u32 count
    count x { u32 name_len, name (UTF-8), u8 dtype (0=f32, 1=f64),
              u32 rank, rank x u64 dims, raw data }

Metadata rides along as ordinary entries: a string value is an empty
f32 entry named ``@key=value``; a number is a rank-0 f64 entry ``@key``;
a numeric list is a rank-1 f64 entry ``@key``.
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"HSLB"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class ContainerError(ValueError):
    pass


def atomic_write(path, data: bytes | str) -> Path:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def encode_container(entries: dict, meta: dict | None = None) -> bytes:
    items = list(entries.items())
    for key, val in (meta or {}).items():
        if isinstance(val, str):
            items.append((f"@{key}={val}", np.zeros(0, np.float32)))
        else:
            items.append((f"@{key}", np.asarray(val, dtype=np.float64)))
    out = [MAGIC, struct.pack("<II", VERSION, len(items))]
    for name, arr in items:
        arr = np.asarray(arr)
        if arr.dtype not in CODES:
            raise ContainerError(f"entry {name!r}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack("<BI", CODES[arr.dtype], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=DTYPES[CODES[arr.dtype]]).tobytes())
    return b"".join(out)


def decode_container(buf: bytes):
    """Returns (entries, meta)."""
    view = memoryview(buf)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise ContainerError(f"truncated container at byte {pos} (need {n} more)")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise ContainerError("not an HSLB container (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    entries, meta = {}, {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = bytes(take(n)).decode("utf-8")
        code, rank = struct.unpack("<BI", take(5))
        if code not in DTYPES:
            raise ContainerError(f"entry {name!r}: unknown dtype code {code}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        dt = DTYPES[code]
        size = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(take(size), dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
        if name.startswith("@"):
            if "=" in name:
                k, v = name[1:].split("=", 1)
                meta[k] = v
            else:
                meta[name[1:]] = arr.item() if arr.ndim == 0 else arr
        else:
            entries[name] = arr
    if pos != len(view):
        raise ContainerError(f"{len(view) - pos} trailing bytes after last entry")
    return entries, meta


def write_container(path, entries: dict, meta: dict | None = None) -> Path:
    return atomic_write(path, encode_container(entries, meta))


def read_container(path):
    return decode_container(Path(path).read_bytes())


# ------------------------------------------------------- typed save / load

def save_params(path, params, **extra):
    """Weights plus config fields; ``extra`` adds numeric metadata (e.g. T)."""
    cfg = params.config
    meta = {"kind": "denoiser", "image_size": cfg.image_size, "channels_in": cfg.channels_in,
            "widths": list(cfg.widths), "time_embed_dim": cfg.time_embed_dim, **extra}
    return write_container(path, params.arrays, meta)


def load_params(path):
    from .denoiser import DenoiserConfig, DenoiserParams
    arrays, meta = read_container(path)
    if meta.get("kind") != "denoiser":
        raise ContainerError(f"{path} does not hold denoiser parameters")
    cfg = DenoiserConfig(int(meta["image_size"]), tuple(int(w) for w in np.atleast_1d(meta["widths"])),
                         int(meta["channels_in"]), int(meta["time_embed_dim"]))
    return DenoiserParams(cfg, arrays)


def _meta_scalars(d: dict) -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, (str, int, float, np.integer, np.floating)) and not isinstance(v, bool):
            out[f"m.{k}"] = v if isinstance(v, str) else float(v)
    return out


def _meta_restore(meta: dict) -> dict:
    out = {}
    for k, v in meta.items():
        if k.startswith("m."):
            if isinstance(v, float) and v.is_integer():
                v = int(v)
            out[k[2:]] = v
    return out


def save_direction(path, d):
    entries = {"offsets": d.offsets, "norms": np.asarray(d.norms, dtype=np.float64)}
    if d.timesteps is not None:
        entries["timesteps"] = np.asarray(d.timesteps, dtype=np.float64)
    meta = {"kind": "direction", "method": d.method, "latent": d.kind,
            "broadcast": float(d.broadcast), **_meta_scalars(d.meta)}
    return write_container(path, entries, meta)


def load_direction(path):
    from .directions import Direction
    e, meta = read_container(path)
    if meta.get("kind") != "direction":
        raise ContainerError(f"{path} does not hold a direction")
    ts = e["timesteps"].astype(int) if "timesteps" in e else None
    return Direction(e["offsets"], meta["method"], bool(meta["broadcast"]), meta["latent"], ts,
                     e["norms"], _meta_restore(meta))


def save_trajectory(path, traj):
    entries = {"timesteps": traj.timesteps.astype(np.float64), "x_T": traj.x_T, "h": traj.h,
               "x_0": traj.x_0, "seeds": np.asarray(traj.seeds, dtype=np.float64)}
    if traj.z is not None:
        entries["z"] = traj.z
    return write_container(path, entries, {"kind": "trajectory"})


def load_trajectory(path):
    from .diffusion import LatentTrajectory
    e, meta = read_container(path)
    if meta.get("kind") != "trajectory":
        raise ContainerError(f"{path} does not hold a trajectory")
    return LatentTrajectory(e["timesteps"].astype(int), e["x_T"], e.get("z"), e["h"], e["x_0"],
                            [int(s) for s in e["seeds"]])


def save_spectral(path, res):
    entries = {"V": res.V, "sigma": res.sigma, "U": res.U, "residuals": res.residuals,
               "iterations": np.asarray(res.iterations, dtype=np.float64),
               "in_shape": np.asarray(res.in_shape, dtype=np.float64),
               "out_shape": np.asarray(res.out_shape, dtype=np.float64)}
    meta = {"kind": "spectral", "stop": ",".join(res.stop_reasons), **_meta_scalars(res.meta)}
    return write_container(path, entries, meta)


def load_spectral(path):
    from .jacobian import SpectralResult
    e, meta = read_container(path)
    if meta.get("kind") != "spectral":
        raise ContainerError(f"{path} does not hold a spectral result")
    return SpectralResult(e["V"], e["sigma"], e["U"], tuple(int(x) for x in e["in_shape"]),
                          tuple(int(x) for x in e["out_shape"]), [int(i) for i in e["iterations"]],
                          meta["stop"].split(","), e["residuals"], meta=_meta_restore(meta))


def save_pca(path, states, timesteps):
    entries = {"timesteps": np.asarray(timesteps, dtype=np.float64)}
    for i, s in enumerate(states):
        entries[f"{i}.mean"] = s.mean
        entries[f"{i}.components"] = s.components
        entries[f"{i}.singular_values"] = s.singular_values
        entries[f"{i}.n"] = np.asarray(float(s.n))
    meta = {"kind": "pca", "k": states[0].k, "dim": states[0].dim, "steps": len(states)}
    return write_container(path, entries, meta)


def load_pca(path):
    from .directions import IncrementalPCA
    e, meta = read_container(path)
    if meta.get("kind") != "pca":
        raise ContainerError(f"{path} does not hold PCA states")
    states = [IncrementalPCA(int(meta["k"]), int(meta["dim"]), int(e[f"{i}.n"]), e[f"{i}.mean"],
                             e[f"{i}.components"], e[f"{i}.singular_values"])
              for i in range(int(meta["steps"]))]
    return states, e["timesteps"].astype(int)


# ------------------------------------------------------------------ images

SEPARATOR = 2
SEPARATOR_VALUE = 255
CAPTION_HEIGHT = 12


def to_uint8(img) -> np.ndarray:
    """Map [-1, 1] affinely to 0..255 (values outside are clipped)."""
    a = np.asarray(img, dtype=np.float64)
    a = a.reshape(a.shape[-2], a.shape[-1])
    a = np.nan_to_num(a, nan=-1.0, posinf=1.0, neginf=-1.0)
    return np.round((np.clip(a, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)


def from_uint8(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float32) / 127.5 - 1.0


def image_grid(images, rows: int | None = None, cols: int | None = None, labels=None) -> np.ndarray:
    """Row-major uint8 grid with 2-px separators around every tile.

    ``labels`` (one per column) adds a caption strip under the grid.
    """
    tiles = [to_uint8(im) for im in images]
    if not tiles:
        raise ValueError("image_grid needs at least one image")
    n = len(tiles)
    if rows is None and cols is None:
        rows, cols = 1, n
    elif rows is None:
        rows = -(-n // cols)
    elif cols is None:
        cols = -(-n // rows)
    if rows * cols < n:
        raise ValueError(f"{rows}x{cols} grid cannot hold {n} images")
    th, tw = tiles[0].shape
    if any(t.shape != (th, tw) for t in tiles):
        raise ValueError("all images must share one size")
    s = SEPARATOR
    H, W = rows * th + (rows + 1) * s, cols * tw + (cols + 1) * s
    grid = np.full((H, W), SEPARATOR_VALUE, dtype=np.uint8)
    for i, t in enumerate(tiles):
        r, c = divmod(i, cols)
        y, x = s + r * (th + s), s + c * (tw + s)
        grid[y:y + th, x:x + tw] = t
    if labels is not None:
        grid = np.vstack([grid, _caption_strip(list(labels), cols, tw, W)])
    return grid


def _caption_strip(labels, cols, tw, width):
    from PIL import Image, ImageDraw
    strip = Image.new("L", (width, CAPTION_HEIGHT), 0)
    draw = ImageDraw.Draw(strip)
    for c, text in enumerate(labels[:cols]):
        x = SEPARATOR + c * (tw + SEPARATOR)
        draw.text((x + 1, 0), str(text), fill=255)
    return np.asarray(strip, dtype=np.uint8)


def save_png(path, array) -> Path:
    import io
    from PIL import Image
    a = np.asarray(array)
    if a.dtype != np.uint8:
        a = to_uint8(a)
    buf = io.BytesIO()
    Image.fromarray(a, mode="L").save(buf, format="PNG")
    return atomic_write(path, buf.getvalue())


def load_png(path) -> np.ndarray:
    from PIL import Image
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8)


def load_mask(path, shape=None) -> np.ndarray:
    """8-bit grayscale image thresholded at half intensity into {0, 1}."""
    m = (load_png(path).astype(np.float64) / 255.0 >= 0.5).astype(np.float64)
    if shape is not None:
        m = np.broadcast_to(m, shape).copy()
    return m


def write_csv(path, header, rows, version: str | None = None) -> Path:
    import csv
    import io
    buf = io.StringIO()
    if version:
        buf.write(f"# {version}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return atomic_write(path, buf.getvalue())
