"""Latent-space walks and slice rendering of decoded volumes."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from foldrare.grid import VoxelGrid


@dataclass(frozen=True)
class Traversal:
    base: np.ndarray
    dim: int
    values: np.ndarray
    volumes: list

    def __post_init__(self):
        if len(self.values) != len(self.volumes):
            raise ValueError("one decoded volume per traversal value")


def latent_mean(codes) -> np.ndarray:
    c = np.asarray(codes, dtype=float)
    if c.ndim != 2 or len(c) == 0:
        raise ValueError("latent_mean needs a nonempty (n, L) array")
    return c.mean(axis=0)


def interpolate(z1, z2, steps: int) -> list[np.ndarray]:
    z1, z2 = np.asarray(z1, float), np.asarray(z2, float)
    if z1.shape != z2.shape:
        raise ValueError("endpoints differ in length")
    if steps < 2:
        raise ValueError("steps must be >= 2")
    lo, hi = np.minimum(z1, z2), np.maximum(z1, z2)
    out = []
    for k in range(steps):
        t = k / (steps - 1)
        # clip guards the segment property against rounding
        out.append(np.clip((1 - t) * z1 + t * z2, lo, hi))
    return out


def dimension_traversal(base, dim: int, v_min: float, v_max: float, steps: int, model) -> Traversal:
    """Sweep one coordinate of `base` and decode each point at the posterior mean."""
    from foldrare.vae import decode

    base = np.asarray(base, float)
    if not 0 <= dim < len(base):
        raise IndexError(f"dim {dim} outside latent size {len(base)}")
    if v_min > v_max:
        raise ValueError("v_min must be <= v_max")
    values = np.linspace(v_min, v_max, steps)
    zs = np.repeat(base[None], steps, axis=0)
    zs[:, dim] = values
    decoded = decode(model, zs)
    return Traversal(base, dim, values, [VoxelGrid(v.astype(np.float32)) for v in decoded])


def binarize(x: VoxelGrid, threshold: float = 0.4) -> VoxelGrid:
    return x.replace((np.asarray(x.data) >= threshold).astype(np.uint8), kind="binary")


def render_slices(g: VoxelGrid, axis: int, depths) -> list[np.ndarray]:
    """8-bit slices with one min-max scaling for the whole volume.

    axis 2 gives axial views (constant third coordinate). A constant volume
    renders as all zeros.
    """
    data = np.asarray(g.data, dtype=float)
    n = data.shape[axis]
    for d in depths:
        if not 0 <= d < n:
            raise IndexError(f"depth {d} outside [0, {n}) on axis {axis}")
    lo, hi = data.min(), data.max()
    scaled = np.zeros_like(data) if hi == lo else (data - lo) / (hi - lo)
    img = np.round(scaled * 255).astype(np.uint8)
    return [np.ascontiguousarray(np.take(img, d, axis=axis)) for d in depths]


def write_pgm(image: np.ndarray, path) -> Path:
    path = Path(path)
    h, w = image.shape
    path.write_bytes(b"P5\n%d %d\n255\n" % (w, h) + image.astype(np.uint8).tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h], np.uint8).reshape(h, w)


def write_traversal(tr: Traversal, out_dir, axis: int = 2, depths=None, prefix: str = "frame") -> Path:
    """Slice images per frame plus a JSON manifest listing them in order."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frames = []
    for k, (v, vol) in enumerate(zip(tr.values, tr.volumes)):
        ds = depths if depths is not None else [vol.dims[axis] // 2]
        files = []
        for d, img in zip(ds, render_slices(vol, axis, ds)):
            name = f"{prefix}_{k:03d}_d{d:02d}.pgm"
            write_pgm(img, out_dir / name)
            files.append(name)
        frames.append({"index": k, "value": float(v), "slices": files})
    manifest = {"dim": tr.dim, "base": [float(b) for b in tr.base], "axis": axis, "frames": frames}
    path = out_dir / f"{prefix}.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path
