"""Procedural sulcus-like skeletons and the deletion / asymmetry benchmarks.

Each subject is a label volume of 1-voxel-thick ribbons ("simple surfaces"):
a main ribbon with one or two knob bends (the central-sulcus analog, 1-2
labels), two flanking ribbons cut into short pieces, and a few small
branches. Geometry is laid out in an abstract (depth, perpendicular, length)
frame and mapped onto grid axes per region, so a second region is a matter of
configuration.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from foldrare.grid import BoundingBox, VoxelGrid, flip_lr, load_volume, save_volume
from foldrare.preprocess import RegionMask

# abstract (depth, perp, length) axis -> grid axis
REGION_AXES = {"central": (0, 1, 2), "cingulate": (0, 2, 1)}
ROLE_IDS = {"central": 1, "pre": 2, "post": 3, "branch": 4, "speckle": 5}
PAPER_BANDS = ((200, 500), (500, 700), (700, 1000), (1000, None))
PAPER_SKELETON_VOXELS = 3500


@dataclass(frozen=True)
class GeneratorParams:
    dims: tuple[int, int, int] = (64, 64, 80)
    voxel_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    side: str = "right"
    region: str = "central"
    branch_count_range: tuple[int, int] = (0, 3)
    branch_size_range: tuple[int, int] = (60, 240)
    double_knob_prob: float = 0.10
    interruption_prob: float = 0.0
    gap_voxels: int = 8
    knob_position: float = 0.5
    knob_position_sd: float = 0.06
    knob_amplitude: tuple[float, float] = (3.0, 6.0)
    # slope of the ribbons' course across the long axis
    tilt_range: tuple[float, float] = (-0.06, 0.06)
    split_prob: float = 0.6
    # small skeleton fragments scattered around the main ribbon (count, voxels per side)
    speckle_count_range: tuple[int, int] = (0, 40)
    speckle_side_range: tuple[int, int] = (2, 5)
    # where along the main ribbon (fraction of its length) a split or gap falls
    split_position: tuple[float, float] = (0.3, 0.7)
    flank_segment_range: tuple[int, int] = (3, 7)
    # chance that a flank segment is absent, so missing pieces occur naturally
    flank_drop_prob: float = 0.15

    def __post_init__(self):
        for name in ("double_knob_prob", "interruption_prob", "split_prob", "flank_drop_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name}={p} outside [0, 1]")
        if self.side not in ("left", "right"):
            raise ValueError(f"side must be left or right, got {self.side!r}")
        if self.region not in REGION_AXES:
            raise ValueError(f"unknown region {self.region!r}; known: {sorted(REGION_AXES)}")
        for name in ("branch_count_range", "speckle_count_range"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi:
                raise ValueError(f"{name} must satisfy 0 <= lo <= hi")
        if not 1 <= self.speckle_side_range[0] <= self.speckle_side_range[1]:
            raise ValueError("speckle_side_range must be positive and ordered")
        if not 0 < self.branch_size_range[0] <= self.branch_size_range[1]:
            raise ValueError("branch_size_range must be positive and ordered")
        if not 0.0 <= self.split_position[0] <= self.split_position[1] <= 1.0:
            raise ValueError("split_position must be an ordered pair inside [0, 1]")
        if not self.tilt_range[0] <= self.tilt_range[1]:
            raise ValueError("tilt_range must be ordered")

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorParams":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class SyntheticSubject:
    id: str
    skeleton: VoxelGrid
    truth: dict
    seed: int

    @property
    def roles(self) -> dict[int, str]:
        return {int(k): v for k, v in self.truth["roles"].items()}

    def labels_with_role(self, role: str) -> list[int]:
        return sorted(k for k, v in self.roles.items() if v == role)


@dataclass(frozen=True)
class SizeBand:
    lo: int
    hi: int | None = None  # exclusive; None means unbounded

    def __post_init__(self):
        if not (0 < self.lo and (self.hi is None or self.lo < self.hi)):
            raise ValueError(f"invalid size band [{self.lo}, {self.hi})")

    def __contains__(self, n) -> bool:
        return self.lo <= n and (self.hi is None or n < self.hi)

    @property
    def name(self) -> str:
        return f"{self.lo}-{self.hi}" if self.hi is not None else f"{self.lo}+"


def rescale_bands(scale: float, bands=PAPER_BANDS) -> list[SizeBand]:
    """Paper-scale deletion bands multiplied by `scale` (desk voxels / 3500)."""
    out = []
    for lo, hi in bands:
        out.append(SizeBand(max(1, round(lo * scale)), None if hi is None else max(2, round(hi * scale))))
    return out


@dataclass
class Altered:
    id: str
    source_id: str
    skeleton: VoxelGrid
    erased_label: int | None = None
    flip: bool = False


@dataclass
class BenchmarkSet:
    tag: str
    controls: list[SyntheticSubject]
    altered: list[Altered]
    provenance: dict = field(default_factory=dict)


def subject_seed(cohort_seed: int, index: int, stream: int = 0) -> int:
    state = np.random.SeedSequence([int(cohort_seed), int(stream), int(index)]).generate_state(2, np.uint32)
    return int(state[0]) << 32 | int(state[1])


# ---------------------------------------------------------------- generation


class _Canvas:
    """Label volume in the abstract frame; first writer keeps a voxel."""

    def __init__(self, shape):
        self.a = np.zeros(shape, dtype=np.int64)
        self.shape = shape

    def put(self, pts: np.ndarray, label: int, forbid: np.ndarray | None = None, limit: int | None = None) -> int:
        """Write the free voxels of `pts` (first `limit` of them, in order); return the count written."""
        if len(pts) == 0:
            return 0
        _, first = np.unique(pts, axis=0, return_index=True)
        pts = pts[np.sort(first)]
        ok = np.all((pts >= 0) & (pts < np.array(self.shape)), axis=1)
        pts = pts[ok]
        if forbid is not None and len(pts):
            pts = pts[~forbid[tuple(pts.T)]]
        free = self.a[tuple(pts.T)] == 0
        pts = pts[free][:limit]
        self.a[tuple(pts.T)] = label
        return len(pts)


def _ribbon_points(cs, b_of, a_start, depth_of) -> np.ndarray:
    """Voxels of a sheet b = b_of(c, a), a in [a_start, a_start + depth(c)).

    Consecutive length positions are bridged in b so the sheet stays
    26-connected where it bends steeply.
    """
    pts = []
    prev = {}
    for c in cs:
        d = int(round(depth_of(c)))
        for a in range(a_start, a_start + max(d, 0)):
            b = int(round(b_of(c, a)))
            bs = [b]
            if a in prev and prev[a][0] == c - 1 and abs(b - prev[a][1]) > 1:
                step = 1 if b > prev[a][1] else -1
                bs = range(prev[a][1] + step, b + step, step)
            for bb in bs:
                pts.append((a, bb, c))
            prev[a] = (c, b)
    return np.array(pts, dtype=np.int64).reshape(-1, 3)


def _to_grid(arr: np.ndarray, region: str) -> np.ndarray:
    axes = REGION_AXES[region]
    out_order = np.argsort(axes)  # grid axis k takes abstract axis out_order[k]
    return np.transpose(arr, out_order)


def _abstract_shape(dims, region):
    axes = REGION_AXES[region]
    return tuple(int(dims[axes[k]]) for k in range(3))


def _box_to_grid(lo, hi, region) -> BoundingBox:
    axes = REGION_AXES[region]
    glo, ghi = [0, 0, 0], [0, 0, 0]
    for k in range(3):
        glo[axes[k]], ghi[axes[k]] = int(lo[k]), int(hi[k])
    return BoundingBox(tuple(glo), tuple(ghi))


def generate_subject(params: GeneratorParams, seed: int, subject_id: str | None = None) -> SyntheticSubject:
    """Draw one labeled skeleton; fully determined by (params, seed)."""
    if min(params.dims) < 24:
        raise ValueError(f"dims {params.dims} too small to host the ribbon (need >= 24 per axis)")
    rng = np.random.default_rng(seed)
    na, nb, nc = _abstract_shape(params.dims, params.region)
    sb = nb / 64.0
    canvas = _Canvas((na, nb, nc))
    roles: dict[int, str] = {}

    # main ribbon
    c0 = int(round(0.15 * nc + rng.uniform(-2, 2)))
    c1 = int(round(0.85 * nc + rng.uniform(-2, 2)))
    length = c1 - c0
    a_s = int(round(0.3 * na + rng.uniform(-1, 1)))
    depth = 0.28 * na * rng.uniform(0.9, 1.1)
    b0 = 0.45 * nb + rng.uniform(-1.5, 1.5) * sb
    slope = rng.uniform(*params.tilt_range)
    c_mid = 0.5 * (c0 + c1)
    knob_frac = float(np.clip(rng.normal(params.knob_position, params.knob_position_sd), 0.2, 0.8))
    knob_sigma = 0.06 * nc
    knobs = [(c0 + knob_frac * length, rng.uniform(*params.knob_amplitude) * sb)]
    double = bool(rng.random() < params.double_knob_prob)
    if double:
        sep = rng.uniform(0.18, 0.25) * length
        zk = knobs[0][0]
        second = zk + sep if (c1 - zk) > (zk - c0) else zk - sep
        knobs.append((second, knobs[0][1] * rng.uniform(0.7, 1.0)))

    def bump(c, a):
        decay = 1.0 - 0.3 * (a - a_s) / depth
        return decay * sum(amp * math.exp(-((c - zk) ** 2) / (2 * knob_sigma**2)) for zk, amp in knobs)

    def b_central(c, a):
        return b0 + slope * (c - c_mid) + bump(c, a)

    interrupted = bool(rng.random() < params.interruption_prob)
    split = interrupted or bool(rng.random() < params.split_prob)
    zp = c0 + rng.uniform(*params.split_position) * length
    ppfm = rng.uniform(0.35, 0.6) if split else rng.uniform(0.0, 0.3)
    ppfm_sigma = 0.05 * nc

    def depth_central(c):
        return depth * (1.0 - ppfm * math.exp(-((c - zp) ** 2) / (2 * ppfm_sigma**2)))

    gap_lo = gap_hi = None
    if interrupted:
        gap_lo = int(math.floor(zp - params.gap_voxels / 2))
        gap_hi = gap_lo + int(params.gap_voxels)  # exclusive
    cs = np.arange(c0, c1 + 1)
    pts = _ribbon_points(cs, b_central, a_s, depth_central)
    gap_pts = np.empty((0, 3), np.int64)
    if interrupted:
        in_gap = (pts[:, 2] >= gap_lo) & (pts[:, 2] < gap_hi)
        gap_pts, pts = pts[in_gap], pts[~in_gap]
    if split:
        upper = pts[pts[:, 2] < zp]
        lower = pts[pts[:, 2] >= zp]
        canvas.put(upper, 1)
        canvas.put(lower, 2)
        roles.update({1: "central", 2: "central"})
    else:
        canvas.put(pts, 1)
        roles[1] = "central"

    forbid = np.zeros((na, nb, nc), dtype=bool)
    gap_box = None
    if interrupted and len(gap_pts):
        lo, hi = gap_pts.min(axis=0), gap_pts.max(axis=0)
        forbid[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1] = True
        gap_box = _box_to_grid(lo, hi, params.region)

    next_label = max(roles) + 1
    flank_info = {}
    for role, offset, follow in (("pre", -rng.uniform(6.5, 8), 0.35), ("post", rng.uniform(7.5, 9), 0.55)):
        fa = a_s + int(round(rng.uniform(-1, 1)))
        fdepth = 0.22 * na * rng.uniform(0.8, 1.2)
        waves = [(rng.uniform(0, 1.5) * sb, rng.uniform(20, 40), rng.uniform(0, 2 * math.pi)) for _ in range(2)]
        fb0 = b0 + offset * sb

        def b_flank(c, a, fb0=fb0, waves=waves, follow=follow):
            u = sum(amp * math.sin(2 * math.pi * c / lam + ph) for amp, lam, ph in waves)
            return fb0 + slope * (c - c_mid) + follow * bump(c, fa) + u

        fc0 = int(round(0.04 * nc + rng.uniform(0, 3)))
        fc1 = int(round(0.96 * nc - rng.uniform(0, 3)))
        flank_info[role] = (b_flank, fa, fdepth, fc0, fc1)
        c = fc0
        while c <= fc1:
            seg = int(rng.integers(params.flank_segment_range[0], params.flank_segment_range[1] + 1))
            seg_depth = fdepth * rng.uniform(0.7, 1.1)
            seg_cs = np.arange(c, min(c + seg, fc1 + 1))
            c += seg
            if rng.random() < params.flank_drop_prob:
                continue
            canvas.put(_ribbon_points(seg_cs, b_flank, fa, lambda _c, d=seg_depth: d), next_label, forbid)
            roles[next_label] = role
            next_label += 1

    n_branches = int(rng.integers(params.branch_count_range[0], params.branch_count_range[1] + 1))
    hosts = {"central": (b_central, a_s, depth_central, c0, c1)}
    hosts.update(flank_info)
    host_names = ["central", "pre", "post"]
    for _ in range(n_branches):
        host = host_names[int(rng.choice(3, p=[0.4, 0.3, 0.3]))]
        hb, ha, hdepth, hc0, hc1 = hosts[host]
        hdepth_f = hdepth if callable(hdepth) else (lambda _c, d=hdepth: d)
        ch = float(rng.uniform(hc0 + 2, hc1 - 2))
        size = int(rng.integers(params.branch_size_range[0], params.branch_size_range[1] + 1))
        d = max(3, int(round(hdepth_f(ch) * rng.uniform(0.5, 0.9))))
        ell = int(np.clip(math.ceil(size / d), 3, 16))
        d = max(d, math.ceil(size / ell))
        ell += 3  # slack; the branch is cut to exactly `size` free voxels
        theta = rng.uniform(math.radians(20), math.radians(70))
        sgn_b = 1 if rng.random() < 0.5 else -1
        sgn_c = 1 if rng.random() < 0.5 else -1
        bh = hb(ch, ha)
        bpts = []
        for t in np.arange(1.0, ell + 0.5, 0.5):
            bb = int(round(bh + sgn_b * t * math.cos(theta)))
            cc = int(round(ch + sgn_c * t * math.sin(theta)))
            for a in range(ha, ha + d):
                bpts.append((a, bb, cc))
        canvas.put(np.array(bpts, dtype=np.int64), next_label, forbid, limit=size)
        roles[next_label] = "branch"
        next_label += 1

    n_speckles = int(rng.integers(params.speckle_count_range[0], params.speckle_count_range[1] + 1))
    for _ in range(n_speckles):
        a = int(rng.integers(a_s, a_s + max(1, int(depth))))
        b = int(round(b0 + rng.uniform(-10, 10) * sb))
        c = int(rng.integers(c0, c1 + 1))
        h, w = (int(v) for v in rng.integers(params.speckle_side_range[0], params.speckle_side_range[1] + 1, 2))
        patch = np.array([(a + i, b, c + j) for i in range(h) for j in range(w)], dtype=np.int64)
        if canvas.put(patch, next_label, forbid):
            roles[next_label] = "speckle"
            next_label += 1

    # drop labels that ended up empty and renumber 1..K in creation order
    arr = canvas.a
    present = [lab for lab in sorted(roles) if np.any(arr == lab)]
    lut = np.zeros(next_label, dtype=np.int64)
    new_roles = {}
    for new, old in enumerate(present, start=1):
        lut[old] = new
        new_roles[new] = roles[old]
    arr = lut[arr]
    grid = _to_grid(arr, params.region)
    if params.side == "left":
        grid = grid[::-1, :, :]
        if gap_box is not None:
            nx = grid.shape[0]
            gap_box = BoundingBox((nx - 1 - gap_box.max[0],) + gap_box.min[1:], (nx - 1 - gap_box.min[0],) + gap_box.max[1:])
    skeleton = VoxelGrid(grid, params.voxel_mm, "label")
    counts = np.bincount(grid.ravel(), minlength=len(present) + 1)
    truth = {
        "hemisphere": params.side,
        "region": params.region,
        "knob_count": len(knobs),
        "knob_position": knob_frac,
        "interrupted": interrupted and gap_box is not None,
        "gap_box": gap_box.to_json() if gap_box is not None else None,
        "ss_sizes": {str(k): int(counts[k]) for k in new_roles},
        "roles": {str(k): v for k, v in new_roles.items()},
    }
    return SyntheticSubject(subject_id or f"s{seed:020d}", skeleton, truth, int(seed))


def generate_cohort(params: GeneratorParams, n: int, cohort_seed: int, prefix: str, stream: int = 0):
    return [
        generate_subject(params, subject_seed(cohort_seed, i, stream), f"{prefix}{i:04d}")
        for i in range(n)
    ]


def sulcus_labels(subject: SyntheticSubject) -> VoxelGrid:
    """Relabel simple surfaces by sulcus: central=1, pre=2, post=3, branch=4, speckle=5."""
    lut = np.zeros(int(subject.skeleton.data.max()) + 1, dtype=np.int64)
    for lab, role in subject.roles.items():
        lut[lab] = ROLE_IDS[role]
    return subject.skeleton.replace(lut[subject.skeleton.data])


def skeleton_voxels_in_mask(skeleton: VoxelGrid, mask: RegionMask) -> int:
    return int(np.count_nonzero(skeleton.data[mask.mask.data != 0]))


# ---------------------------------------------------------------- benchmarks


def deletion_candidates(skeleton: VoxelGrid, mask: RegionMask, band: SizeBand) -> list[int]:
    inside = skeleton.data[mask.mask.data != 0]
    counts = np.bincount(inside.astype(np.int64), minlength=int(skeleton.data.max()) + 1)
    return [lab for lab in range(1, len(counts)) if counts[lab] in band]


def delete_ss(subject: SyntheticSubject, mask: RegionMask, band: SizeBand, rng: np.random.Generator):
    """Erase one simple surface whose in-mask size falls in `band`.

    Returns (pruned skeleton, erased label), or None when the subject has no
    eligible simple surface.
    """
    candidates = deletion_candidates(subject.skeleton, mask, band)
    if not candidates:
        return None
    label = candidates[int(rng.integers(len(candidates)))]
    data = subject.skeleton.data
    return subject.skeleton.replace(np.where(data == label, 0, data)), label


def build_deletion_benchmark(test_subjects, mask: RegionMask, band: SizeBand, rng, split_ratio: float = 0.5) -> BenchmarkSet:
    eligible = [s for s in test_subjects if deletion_candidates(s.skeleton, mask, band)]
    if len(eligible) < 2:
        raise ValueError(f"band {band.name}: {len(eligible)} eligible subjects, need at least 2")
    order = rng.permutation(len(eligible))
    n_altered = min(len(eligible) - 1, max(1, int(round(len(eligible) * split_ratio))))
    n_controls = len(eligible) - n_altered
    controls = [eligible[i] for i in order[:n_controls]]
    altered, provenance = [], {}
    for i in order[n_controls:]:
        s = eligible[i]
        pruned, label = delete_ss(s, mask, band, rng)
        altered.append(Altered(f"{s.id}-del{band.lo}", s.id, pruned, erased_label=label))
        provenance[s.id] = {"erased_label": label, "erased_voxels": s.truth["ss_sizes"][str(label)]}
    return BenchmarkSet(f"deletion-{band.name}", controls, altered, provenance)


def build_asymmetry_benchmark(right_params: GeneratorParams, left_params: GeneratorParams, n: int, seed: int) -> BenchmarkSet:
    """n right-side controls against n left-side subjects flagged for flipping."""
    if n < 2:
        raise ValueError("asymmetry benchmark needs n >= 2")
    right_params = replace(right_params, side="right")
    left_params = replace(left_params, side="left")
    controls = generate_cohort(right_params, n, seed, "asymR", stream=0)
    left = generate_cohort(left_params, n, seed, "asymL", stream=1)
    altered = [Altered(s.id, s.id, s.skeleton, flip=True) for s in left]
    provenance = {s.id: {"seed": s.seed, **s.truth} for s in left}
    return BenchmarkSet("asymmetry", controls, altered, provenance)


# ---------------------------------------------------------------- manifests


def write_cohort(subjects, directory, name: str) -> Path:
    directory = Path(directory)
    (directory / name).mkdir(parents=True, exist_ok=True)
    entries = []
    for s in subjects:
        rel = f"{name}/{s.id}.fvol"
        save_volume(s.skeleton, directory / rel)
        entries.append({"id": s.id, "skeleton": rel, "seed": s.seed, **s.truth})
    path = directory / f"{name}.json"
    path.write_text(json.dumps(entries, indent=1, sort_keys=True))
    return path


def altered_subjects(bset: BenchmarkSet) -> list[SyntheticSubject]:
    """Altered members as subjects, for benchmarks whose provenance keeps seed and truth."""
    out = []
    for a in bset.altered:
        prov = dict(bset.provenance[a.id])
        seed = prov.pop("seed")
        out.append(SyntheticSubject(a.id, a.skeleton, prov, seed))
    return out


def read_cohort(manifest) -> list[SyntheticSubject]:
    manifest = Path(manifest)
    out = []
    for e in json.loads(manifest.read_text()):
        e = dict(e)
        sid, rel, seed = e.pop("id"), e.pop("skeleton"), e.pop("seed")
        out.append(SyntheticSubject(sid, load_volume(manifest.parent / rel), e, seed))
    return out


def params_to_dict(p: GeneratorParams) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(p).items()}
