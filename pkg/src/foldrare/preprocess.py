"""Skeleton volumes to masked, normalized distance-map crops.

A `DistanceMap` is a scalar VoxelGrid in mm (0 on skeleton voxels); a
`NormalizedMap` is a scalar VoxelGrid in [0, 1] (1 on skeleton voxels).
Both are plain VoxelGrids; the aliases only document intent.
"""

from __future__ import annotations

import json
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from foldrare._chamfer import chamfer_distance
from foldrare.grid import (
    BoundingBox,
    VoxelGrid,
    crop,
    dilate,
    downsample,
    flip_lr,
    load_volume,
    pad_offsets,
    pad_to,
    rotate_about,
    save_volume,
)

DistanceMap = VoxelGrid
NormalizedMap = VoxelGrid


@dataclass(frozen=True, eq=False)
class RegionMask:
    mask: VoxelGrid
    bbox: BoundingBox
    center: tuple[float, float, float]
    margin: int = 8
    dilation_mm: float = 5.0

    @classmethod
    def from_support(cls, mask: VoxelGrid, margin: int = 8, dilation_mm: float = 0.0) -> "RegionMask":
        if margin < 0:
            raise ValueError("margin must be >= 0")
        support = mask.data != 0
        center = tuple(float(c) for c in np.argwhere(support).mean(axis=0))
        return cls(mask.replace(kind="binary"), BoundingBox.of_support(support), center, int(margin), float(dilation_mm))

    def to_json(self) -> dict:
        return {
            "bbox": self.bbox.to_json(),
            "center": list(self.center),
            "margin": self.margin,
            "dilation_mm": self.dilation_mm,
        }

    def save(self, volume_path) -> None:
        volume_path = Path(volume_path)
        save_volume(self.mask, volume_path)
        volume_path.with_suffix(".json").write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, volume_path) -> "RegionMask":
        volume_path = Path(volume_path)
        d = json.loads(volume_path.with_suffix(".json").read_text())
        return cls(
            load_volume(volume_path),
            BoundingBox.from_json(d["bbox"]),
            tuple(d["center"]),
            int(d["margin"]),
            float(d["dilation_mm"]),
        )


def chamfer_dt(skeleton: VoxelGrid) -> DistanceMap:
    """Two-pass (3,4,5)/3 chamfer distance to the nearest nonzero voxel, in mm."""
    dist = chamfer_distance(skeleton.data, skeleton.voxel_size_mm)
    return skeleton.replace(dist, kind="scalar")


def normalize_map(d: DistanceMap) -> NormalizedMap:
    # 1 - (2 sigmoid(X) - 1) == 2 sigmoid(-X)
    return d.replace(2.0 * expit(-np.asarray(d.data, dtype=np.float64)))


def _per_subject_labels(target_labels, n):
    if (
        isinstance(target_labels, Sequence)
        and len(target_labels) == n
        and all(isinstance(t, Iterable) and not isinstance(t, (str, bytes)) for t in target_labels)
    ):
        return [set(int(v) for v in t) for t in target_labels]
    labels = set(int(v) for v in target_labels)
    return [labels] * n


def learn_mask(subjects: Sequence[VoxelGrid], target_labels, dilation_mm: float = 5.0, margin: int = 8) -> RegionMask:
    """Accumulate target-label voxels over a labeled cohort, then dilate.

    `target_labels` is one label set for every subject, or a list holding one
    set per subject.
    """
    if not subjects:
        raise ValueError("learn_mask needs at least one subject")
    ref = subjects[0]
    counts = np.zeros(ref.dims, dtype=np.int64)
    for g, labels in zip(subjects, _per_subject_labels(target_labels, len(subjects))):
        if g.dims != ref.dims or g.voxel_size_mm != ref.voxel_size_mm:
            raise ValueError("all subjects must share dims and voxel size")
        counts += np.isin(g.data, list(labels))
    if not counts.any():
        raise ValueError("no target-label voxel in any subject")
    support = VoxelGrid((counts >= 1).astype(np.uint8), ref.voxel_size_mm, "binary")
    if dilation_mm > 0:
        support = dilate(support, dilation_mm)
    return RegionMask.from_support(support, margin=margin, dilation_mm=dilation_mm)


def mirror_mask(mask: RegionMask) -> RegionMask:
    """Mask of the contralateral side: the same geometry reflected in x."""
    nx = mask.mask.dims[0]
    lo, hi = mask.bbox.min, mask.bbox.max
    return RegionMask(
        flip_lr(mask.mask),
        BoundingBox((nx - 1 - hi[0], lo[1], lo[2]), (nx - 1 - lo[0], hi[1], hi[2])),
        (nx - 1 - mask.center[0], mask.center[1], mask.center[2]),
        mask.margin,
        mask.dilation_mm,
    )


@dataclass(frozen=True)
class CropGeometry:
    """Where a native-frame mask lands at training resolution."""

    factor: int
    crop_box: BoundingBox
    pad_dims: tuple[int, int, int]
    pad_offset: tuple[int, int, int]

    @classmethod
    def of(cls, mask: RegionMask, factor: int, pad_dims) -> "CropGeometry":
        box = _crop_box(mask, factor)
        pad_dims = tuple(int(p) for p in pad_dims)
        if any(p < e for p, e in zip(pad_dims, box.extent)):
            raise ValueError(f"pad dims {pad_dims} smaller than crop extent {box.extent}")
        return cls(int(factor), box, pad_dims, pad_offsets(box.extent, pad_dims))

    def native_to_crop(self, point) -> np.ndarray:
        """Continuous native voxel coords to continuous crop-frame coords."""
        p = (np.asarray(point, dtype=float) + 0.5) / self.factor - 0.5
        return p - np.asarray(self.crop_box.min) + np.asarray(self.pad_offset)

    def box_to_crop(self, box: BoundingBox) -> BoundingBox:
        """Native inclusive box to the crop-frame voxels it touches, clipped."""
        lo = np.array([v // self.factor for v in box.min]) - self.crop_box.min + self.pad_offset
        hi = np.array([v // self.factor for v in box.max]) - self.crop_box.min + self.pad_offset
        lo = np.clip(lo, 0, np.array(self.pad_dims) - 1)
        hi = np.clip(hi, 0, np.array(self.pad_dims) - 1)
        return BoundingBox(tuple(lo), tuple(hi))


def crop_frame_mask(mask: RegionMask, factor: int, pad_dims) -> RegionMask:
    """Express a native mask in the padded training frame.

    A training voxel belongs to the mask when any native voxel of its block does.
    """
    geo = CropGeometry.of(mask, factor, pad_dims)
    ds = downsample(mask.mask.replace(kind="scalar"), factor)
    m = crop(ds.replace((ds.data > 0).astype(np.float32)), geo.crop_box)
    m = pad_to(m, geo.pad_dims, 0.0)
    binary = m.replace((m.data > 0).astype(np.uint8), kind="binary")
    center = tuple(float(v) for v in geo.native_to_crop(mask.center))
    return RegionMask(binary, BoundingBox.of_support(binary.data), center, 0, mask.dilation_mm)


def preprocess_subject(
    skeleton: VoxelGrid, mask: RegionMask, downsample_factor: int = 2, pad_dims=None, flip: bool = False
) -> NormalizedMap:
    """chamfer_dt -> downsample -> crop(bbox + margin) -> normalize -> [flip_lr] -> pad.

    The mask itself is not applied here. `flip` mirrors the crop, for
    contralateral subjects cropped with a mirrored mask.
    """
    if skeleton.dims != mask.mask.dims or skeleton.voxel_size_mm != mask.mask.voxel_size_mm:
        raise ValueError("skeleton and mask must share native dims and voxel size")
    if flip and skeleton.dims[0] % downsample_factor:
        raise ValueError("flipped crops need nx divisible by the downsample factor")
    geo = CropGeometry.of(mask, downsample_factor, pad_dims or _crop_extent(mask, downsample_factor))
    x = downsample(chamfer_dt(skeleton), downsample_factor)
    x = normalize_map(crop(x, geo.crop_box))
    if flip:
        x = flip_lr(x)
    return pad_to(x, geo.pad_dims, 0.0)


def _crop_box(mask: RegionMask, factor: int) -> BoundingBox:
    ds_dims = tuple(-(-n // factor) for n in mask.mask.dims)
    ds_box = BoundingBox(tuple(v // factor for v in mask.bbox.min), tuple(v // factor for v in mask.bbox.max))
    return ds_box.expand(mask.margin, ds_dims)


def _crop_extent(mask: RegionMask, factor: int):
    return _crop_box(mask, factor).extent


def apply_mask(x: NormalizedMap, mask: RegionMask) -> NormalizedMap:
    if x.dims != mask.mask.dims:
        raise ValueError(f"map dims {x.dims} != mask dims {mask.mask.dims}")
    return x.replace(np.where(mask.mask.data != 0, x.data, 0.0))


def augment(x: NormalizedMap, mask: RegionMask, angle_range_deg: float, rng: np.random.Generator) -> NormalizedMap:
    """Random rotation about the mask center, then the fixed mask."""
    if angle_range_deg < 0:
        raise ValueError("angle range must be >= 0")
    if angle_range_deg > 0:
        angles = rng.uniform(-angle_range_deg, angle_range_deg, size=3)
        x = rotate_about(x, mask.center, angles, fill=0.0)
    return apply_mask(x, mask)
