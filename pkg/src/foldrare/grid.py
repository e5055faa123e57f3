"""Dense 3D voxel grids and the geometric primitives shared by the pipeline.

Arrays are held as numpy arrays of shape (nx, ny, nz) indexed ``[x, y, z]``.
Serialization flattens them x-fastest (Fortran order), which is the order
documented for the FVOL1 file format.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
from scipy import ndimage

from foldrare._chamfer import chamfer_distance

Kind = Literal["label", "scalar", "binary"]
KINDS: tuple[str, ...] = ("label", "scalar", "binary")
_DTYPES = {"label": np.uint32, "scalar": np.float32, "binary": np.uint8}

MAGIC = b"FVOL0001"
_HEADER = struct.Struct("<4I3f")


class VolumeFormatError(ValueError):
    """Unknown magic bytes or otherwise unreadable FVOL1 file."""


class VolumeHeaderError(VolumeFormatError):
    """Header is short or carries invalid fields."""


class VolumeTruncatedError(VolumeFormatError):
    """Payload is not a whole number of elements."""


class VolumeLengthError(VolumeFormatError):
    """Payload element count disagrees with the declared dims."""


@dataclass(frozen=True)
class BoundingBox:
    """Inclusive voxel-index box."""

    min: tuple[int, int, int]
    max: tuple[int, int, int]

    def __post_init__(self):
        lo = tuple(int(v) for v in self.min)
        hi = tuple(int(v) for v in self.max)
        if len(lo) != 3 or len(hi) != 3:
            raise ValueError("bounding box corners must be 3-tuples")
        if any(a > b for a, b in zip(lo, hi)):
            raise ValueError(f"bounding box min {lo} exceeds max {hi}")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @property
    def extent(self) -> tuple[int, int, int]:
        return tuple(b - a + 1 for a, b in zip(self.min, self.max))

    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(a, b + 1) for a, b in zip(self.min, self.max))

    def within(self, dims) -> bool:
        return all(0 <= a and b < n for a, b, n in zip(self.min, self.max, dims))

    def expand(self, margin: int, dims=None) -> "BoundingBox":
        lo = [a - margin for a in self.min]
        hi = [b + margin for b in self.max]
        if dims is not None:
            lo = [max(0, a) for a in lo]
            hi = [min(n - 1, b) for b, n in zip(hi, dims)]
        return BoundingBox(tuple(lo), tuple(hi))

    def to_json(self) -> dict:
        return {"min": list(self.min), "max": list(self.max)}

    @classmethod
    def from_json(cls, d: dict) -> "BoundingBox":
        return cls(tuple(d["min"]), tuple(d["max"]))

    @classmethod
    def of_support(cls, mask: np.ndarray) -> "BoundingBox":
        idx = np.nonzero(mask)
        if len(idx[0]) == 0:
            raise ValueError("bounding box of an empty support")
        return cls(tuple(int(i.min()) for i in idx), tuple(int(i.max()) for i in idx))


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    data: np.ndarray
    voxel_size_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    kind: Kind = "scalar"
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown grid kind {self.kind!r}")
        src = np.asarray(self.data)
        if self.kind != "scalar" and src.size and (src.min() < 0 or not np.all(src == np.round(src))):
            raise ValueError(f"{self.kind} grid needs nonnegative integer values")
        arr = np.array(src, dtype=_DTYPES[self.kind], copy=True)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"grid data must be a non-empty 3D array, got shape {arr.shape}")
        # f32-representable so FVOL1 round trips are exact
        vs = tuple(float(np.float32(v)) for v in self.voxel_size_mm)
        if len(vs) != 3 or not all(v > 0 and np.isfinite(v) for v in vs):
            raise ValueError(f"voxel sizes must be three positive reals, got {self.voxel_size_mm}")
        if self.kind == "binary" and arr.size and arr.max() > 1:
            raise ValueError("binary grid holds values other than 0/1")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "voxel_size_mm", vs)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    def flat(self) -> np.ndarray:
        """Data flattened x-fastest."""
        return self.data.ravel(order="F")

    def replace(self, data=None, **kw) -> "VoxelGrid":
        return VoxelGrid(
            self.data if data is None else data,
            kw.get("voxel_size_mm", self.voxel_size_mm),
            kw.get("kind", self.kind),
            dict(kw.get("meta", self.meta)),
        )

    def __eq__(self, other):
        if not isinstance(other, VoxelGrid):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.voxel_size_mm == other.voxel_size_mm
            and self.data.shape == other.data.shape
            and np.array_equal(self.data, other.data)
        )

    @classmethod
    def from_flat(cls, flat, dims, voxel_size_mm=(1.0, 1.0, 1.0), kind: Kind = "scalar"):
        flat = np.asarray(flat)
        if flat.size != int(np.prod(dims)):
            raise ValueError(f"{flat.size} values for dims {tuple(dims)}")
        return cls(flat.reshape(tuple(dims), order="F"), voxel_size_mm, kind)


def flip_lr(g: VoxelGrid) -> VoxelGrid:
    """Mirror along x: voxel (x, y, z) moves to (nx-1-x, y, z)."""
    return g.replace(g.data[::-1, :, :])


def rotation_matrix(angles_deg) -> np.ndarray:
    """Rotation applying x, then y, then z (right-handed, degrees)."""
    ax, ay, az = np.deg2rad(np.asarray(angles_deg, dtype=float))
    cx, sx, cy, sy, cz, sz = np.cos(ax), np.sin(ax), np.cos(ay), np.sin(ay), np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def rotate_about(g: VoxelGrid, center, angles_deg, fill: float = 0.0) -> VoxelGrid:
    """Rotate a scalar grid about `center` (voxel coords) with trilinear resampling.

    Each output voxel p takes the input value at R^-1 (p - c) + c; samples
    falling outside the grid take `fill`.
    """
    if g.kind != "scalar":
        raise ValueError("rotate_about expects a scalar grid")
    angles = np.asarray(angles_deg, dtype=float)
    if not np.all(np.isfinite(angles)):
        raise ValueError("rotation angles must be finite")
    if not angles.any():
        return g.replace()
    c = np.asarray(center, dtype=float)
    inv = rotation_matrix(angles).T
    out = ndimage.affine_transform(
        g.data.astype(np.float64), inv, offset=c - inv @ c,
        order=1, mode="constant", cval=float(fill), prefilter=False,
    )
    return g.replace(out)


def crop(g: VoxelGrid, box: BoundingBox) -> VoxelGrid:
    if not box.within(g.dims):
        raise IndexError(f"box {box.min}..{box.max} outside grid dims {g.dims}")
    return g.replace(g.data[box.slices()])


def pad_offsets(dims, target) -> tuple[int, int, int]:
    """Lower-side padding when centering `dims` inside `target` (floor on the low side)."""
    return tuple((t - n) // 2 for n, t in zip(dims, target))


def pad_to(g: VoxelGrid, target, fill: float = 0.0) -> VoxelGrid:
    target = tuple(int(t) for t in target)
    if any(t < n for n, t in zip(g.dims, target)):
        raise ValueError(f"pad target {target} smaller than grid dims {g.dims}")
    lo = pad_offsets(g.dims, target)
    out = np.full(target, fill, dtype=g.data.dtype)
    out[tuple(slice(a, a + n) for a, n in zip(lo, g.dims))] = g.data
    return g.replace(out)


def dilate(b: VoxelGrid, radius_mm: float) -> VoxelGrid:
    """Binary dilation by chamfer-distance thresholding."""
    if radius_mm < 0:
        raise ValueError("dilation radius must be nonnegative")
    # small slack so 4/3 + float error does not leak past radius 4/3
    dist = chamfer_distance(b.data, b.voxel_size_mm)
    return b.replace((dist <= radius_mm + 1e-9).astype(np.uint8), kind="binary")


def downsample(g: VoxelGrid, factor: int) -> VoxelGrid:
    """Block-mean pooling; partial edge blocks average only the voxels they hold."""
    factor = int(factor)
    if factor < 1:
        raise ValueError("downsample factor must be >= 1")
    vs = tuple(v * factor for v in g.voxel_size_mm)
    if factor == 1:
        return g.replace(voxel_size_mm=vs)
    dims = g.dims
    out_dims = tuple(-(-n // factor) for n in dims)
    padded = tuple(n * factor for n in out_dims)
    vals = np.zeros(padded)
    cnt = np.zeros(padded)
    region = tuple(slice(0, n) for n in dims)
    vals[region] = g.data
    cnt[region] = 1.0
    shape = (out_dims[0], factor, out_dims[1], factor, out_dims[2], factor)
    total = vals.reshape(shape).sum(axis=(1, 3, 5))
    n = cnt.reshape(shape).sum(axis=(1, 3, 5))
    return g.replace(total / n, voxel_size_mm=vs, kind="scalar")


def save_volume(g: VoxelGrid, path, meta: dict | None = None) -> Path:
    path = Path(path)
    header = _HEADER.pack(KINDS.index(g.kind), *g.dims, *g.voxel_size_mm)
    payload = g.flat().astype(np.dtype(_DTYPES[g.kind]).newbyteorder("<")).tobytes()
    path.write_bytes(MAGIC + header + payload)
    if meta is not None:
        sidecar = path.with_name(path.name.split(".")[0] + ".meta.json")
        sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def load_volume(path) -> VoxelGrid:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise VolumeFormatError(f"{path}: unknown magic {raw[:len(MAGIC)]!r}")
    if len(raw) < len(MAGIC) + _HEADER.size:
        raise VolumeHeaderError(f"{path}: header truncated")
    kind_id, nx, ny, nz, sx, sy, sz = _HEADER.unpack_from(raw, len(MAGIC))
    if kind_id >= len(KINDS):
        raise VolumeHeaderError(f"{path}: unknown kind id {kind_id}")
    if min(nx, ny, nz) < 1 or not min(sx, sy, sz) > 0:
        raise VolumeHeaderError(f"{path}: invalid dims or voxel size")
    kind = KINDS[kind_id]
    dtype = np.dtype(_DTYPES[kind]).newbyteorder("<")
    payload = raw[len(MAGIC) + _HEADER.size:]
    if len(payload) % dtype.itemsize:
        raise VolumeTruncatedError(f"{path}: payload of {len(payload)} bytes is not whole {kind} elements")
    n = len(payload) // dtype.itemsize
    if n != nx * ny * nz:
        raise VolumeLengthError(f"{path}: {n} elements for declared dims {nx}x{ny}x{nz}")
    flat = np.frombuffer(payload, dtype=dtype)
    return VoxelGrid.from_flat(flat, (nx, ny, nz), (sx, sy, sz), kind)
