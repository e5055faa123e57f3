"""Pipeline stages. Each stage reads upstream artifacts and writes `<workdir>/<stage>/`.

A stage is complete once its `stage.json` exists; downstream stages check for
it. Every stage is a pure function of (config, upstream artifacts).
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from foldrare import detect as dt
from foldrare import explore as ex
from foldrare import vae
from foldrare.config import PipelineConfig
from foldrare.grid import BoundingBox, VoxelGrid, save_volume
from foldrare.preprocess import (
    CropGeometry,
    RegionMask,
    apply_mask,
    crop_frame_mask,
    learn_mask,
    mirror_mask,
    preprocess_subject,
)
from foldrare.synth import (
    SizeBand,
    altered_subjects,
    build_asymmetry_benchmark,
    build_deletion_benchmark,
    generate_cohort,
    read_cohort,
    rescale_bands,
    skeleton_voxels_in_mask,
    write_cohort,
)

STAGES = ("synth", "preprocess", "train", "gridsearch", "benchmark", "detect", "explore", "report")
UPSTREAM = {
    "synth": (),
    "preprocess": ("synth",),
    "train": ("preprocess",),
    "gridsearch": ("preprocess",),
    "benchmark": ("preprocess",),
    "detect": ("train", "benchmark"),
    "explore": ("detect",),
    "report": ("detect", "explore"),
}
# files that legitimately differ between identical runs
VOLATILE = {"timing.json"}


class MissingStage(RuntimeError):
    def __init__(self, stage: str, needed_by: str):
        super().__init__(f"stage {needed_by!r} needs stage {stage!r}; run `{stage}` first")
        self.stage = stage


class StageError(RuntimeError):
    pass


class WorkdirLocked(RuntimeError):
    pass


def stage_dir(cfg: PipelineConfig, stage: str) -> Path:
    return Path(cfg.workdir) / stage


def stage_rng(cfg: PipelineConfig, stage: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, STAGES.index(stage), *extra])


def require(cfg: PipelineConfig, stage: str) -> None:
    for up in UPSTREAM[stage]:
        if not (stage_dir(cfg, up) / "stage.json").exists():
            raise MissingStage(up, stage)


def sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def config_digest(cfg: PipelineConfig) -> str:
    """Hash of the resolved config without the workdir, which only says where outputs go."""
    d = cfg.to_dict()
    d.pop("workdir")
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def _finish(cfg: PipelineConfig, stage: str, summary: dict | None = None) -> Path:
    d = stage_dir(cfg, stage)
    files = sorted(p for p in d.rglob("*") if p.is_file() and p.name != "stage.json" and p.name not in VOLATILE)
    record = {
        "stage": stage,
        "config_sha256": config_digest(cfg),
        "artifacts": {p.relative_to(d).as_posix(): sha256(p) for p in files},
        "summary": summary or {},
    }
    path = d / "stage.json"
    path.write_text(json.dumps(record, indent=1, sort_keys=True))
    return path


def _fresh(cfg: PipelineConfig, stage: str) -> Path:
    d = stage_dir(cfg, stage)
    d.mkdir(parents=True, exist_ok=True)
    marker = d / "stage.json"
    if marker.exists():
        marker.unlink()
    return d


class workdir_lock:
    """Exclusive ownership of a work directory by one running command."""

    def __init__(self, workdir):
        self.path = Path(workdir) / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise WorkdirLocked(f"{self.path} exists: another command owns this work directory") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


# ---------------------------------------------------------------- helpers


def _cohort(cfg, name):
    return read_cohort(stage_dir(cfg, "synth") / f"{name}.json")


def _mask(cfg) -> RegionMask:
    return RegionMask.load(stage_dir(cfg, "preprocess") / "mask.fvol")


def _frame(cfg) -> RegionMask:
    return RegionMask.load(stage_dir(cfg, "preprocess") / "frame_mask.fvol")


def _prep(cfg, skeleton, mask, flip=False) -> np.ndarray:
    p = cfg.preprocess
    return preprocess_subject(skeleton, mask, p.downsample_factor, tuple(p.pad_dims), flip=flip).data


def _save_maps(directory: Path, name: str, ids, maps) -> None:
    np.save(directory / f"{name}.npy", np.asarray(maps, dtype=np.float32))
    (directory / f"{name}.ids.json").write_text(json.dumps(list(ids)))


def _load_maps(directory: Path, name: str):
    return json.loads((directory / f"{name}.ids.json").read_text()), np.load(directory / f"{name}.npy")


def _masked(x: np.ndarray, frame: RegionMask) -> np.ndarray:
    return (x * (frame.mask.data != 0)).astype(np.float32)


def model_config(cfg: PipelineConfig) -> vae.ModelConfig:
    seed = int(np.random.SeedSequence([cfg.seed, cfg.model.seed]).generate_state(1)[0])
    mc = replace(cfg.model, seed=seed)
    if cfg.gridsearch.use_best:
        best = stage_dir(cfg, "gridsearch") / "best.json"
        if not best.exists():
            raise MissingStage("gridsearch", "train")
        b = json.loads(best.read_text())
        mc = replace(mc, beta=b["beta"], latent_dim=b["latent_dim"])
    return mc


def desk_bands(cfg: PipelineConfig, mask: RegionMask, train) -> tuple[float, list[SizeBand]]:
    """Paper bands rescaled by mean in-mask skeleton size of the training cohort."""
    mean = float(np.mean([skeleton_voxels_in_mask(s.skeleton, mask) for s in train]))
    scale = mean / cfg.benchmark.reference_voxels
    return scale, rescale_bands(scale, cfg.benchmark.bands)


def _log(log, msg):
    if log is not None:
        log(msg)


# ---------------------------------------------------------------- stages


def run_synth(cfg: PipelineConfig, log=None) -> Path:
    d = _fresh(cfg, "synth")
    s = cfg.splits
    params = replace(cfg.generator, side="right")
    try:
        controls = generate_cohort(params, cfg.n_controls, cfg.seed, "ctl", stream=0)
        interrupted = generate_cohort(
            replace(params, **cfg.benchmark.interrupted_overrides), s.n_interrupted, cfg.seed, "int", stream=4
        )
        left = replace(params, **cfg.benchmark.left_overrides)
        asym = build_asymmetry_benchmark(params, left, s.n_asymmetry, cfg.seed + 1)
    except (TypeError, ValueError) as e:
        raise StageError(f"generation failed: {e}") from e
    cuts = np.cumsum([s.n_train, s.n_val])
    for name, subjects in (
        ("train", controls[: cuts[0]]),
        ("val", controls[cuts[0]: cuts[1]]),
        ("test", controls[cuts[1]:]),
        ("interrupted", interrupted),
        ("asym_right", asym.controls),
    ):
        write_cohort(subjects, d, name)
    write_cohort(altered_subjects(asym), d, "asym_left")
    _log(log, f"synth: {cfg.n_controls} controls, {s.n_interrupted} interrupted, {2 * s.n_asymmetry} asymmetry")
    return _finish(cfg, "synth", {"n_controls": cfg.n_controls})


def run_preprocess(cfg: PipelineConfig, log=None) -> Path:
    require(cfg, "preprocess")
    d = _fresh(cfg, "preprocess")
    p = cfg.preprocess
    train = _cohort(cfg, "train")
    labeled = train[: cfg.splits.n_labeled]
    targets = [{lab for r in p.target_roles for lab in s.labels_with_role(r)} for s in labeled]
    mask = learn_mask([s.skeleton for s in labeled], targets, p.dilation_mm, p.margin)
    try:
        frame = crop_frame_mask(mask, p.downsample_factor, tuple(p.pad_dims))
    except ValueError as e:
        raise StageError(f"crop does not fit the configured pad dims: {e}") from e
    mask.save(d / "mask.fvol")
    frame.save(d / "frame_mask.fvol")
    for name in ("train", "val", "test"):
        subjects = train if name == "train" else _cohort(cfg, name)
        _save_maps(d, name, [s.id for s in subjects], [_prep(cfg, s.skeleton, mask) for s in subjects])
    geo = CropGeometry.of(mask, p.downsample_factor, tuple(p.pad_dims))
    _log(log, f"preprocess: mask bbox {mask.bbox.min}-{mask.bbox.max}, crop {geo.crop_box.extent} -> {geo.pad_dims}")
    return _finish(cfg, "preprocess", {"mask_voxels": int(mask.mask.data.sum()), "crop_extent": list(geo.crop_box.extent)})


def run_train(cfg: PipelineConfig, log=None) -> Path:
    require(cfg, "train")
    mc = model_config(cfg)
    d = _fresh(cfg, "train")
    pre = stage_dir(cfg, "preprocess")
    _, xs = _load_maps(pre, "train")
    _, xv = _load_maps(pre, "val")
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    model, report = vae.train(mc, xs, xv, _frame(cfg), log=log)
    vae.save_checkpoint(model, d / "model.fvae")
    (d / "train_report.csv").write_text(report.to_csv())
    (d / "timing.json").write_text(json.dumps({"wall_time_s": report.wall_time_s}))
    tot = report.series("train", "total")
    return _finish(cfg, "train", {"first_total": float(tot[0]), "last_total": float(tot[-1])})


def run_gridsearch(cfg: PipelineConfig, log=None) -> Path:
    require(cfg, "gridsearch")
    d = _fresh(cfg, "gridsearch")
    g = cfg.gridsearch
    pre = stage_dir(cfg, "preprocess")
    mask, frame = _mask(cfg), _frame(cfg)
    _, xs = _load_maps(pre, "train")
    _, xv = _load_maps(pre, "val")
    train = _cohort(cfg, "train")
    _, bands = desk_bands(cfg, mask, train)
    proxy = build_deletion_benchmark(_cohort(cfg, "val"), mask, bands[-1], stage_rng(cfg, "gridsearch"))
    xp = np.stack([_prep(cfg, a.skeleton, mask) for a in proxy.altered])
    base = replace(model_config(replace(cfg, gridsearch=replace(g, use_best=False))), epochs=g.epochs)
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    best, table = vae.grid_search(g.betas, g.latent_dims, base, xs[: g.n_train], xv, xp, frame,
                                  cfg.detect.k_folds, g.gate, log=log)
    (d / "table.json").write_text(json.dumps(table, indent=1))
    (d / "best.json").write_text(json.dumps({"beta": best.beta, "latent_dim": best.latent_dim}))
    return _finish(cfg, "gridsearch", {"beta": best.beta, "latent_dim": best.latent_dim})


def run_benchmark(cfg: PipelineConfig, log=None) -> Path:
    require(cfg, "benchmark")
    d = _fresh(cfg, "benchmark")
    p = cfg.preprocess
    mask = _mask(cfg)
    scale, bands = desk_bands(cfg, mask, _cohort(cfg, "train"))
    test = _cohort(cfg, "test")
    test_ids, test_maps = _load_maps(stage_dir(cfg, "preprocess"), "test")
    by_id = dict(zip(test_ids, test_maps))
    sets = []
    for k, band in enumerate(bands):
        tag = f"deletion-{band.name}"
        try:
            bset = build_deletion_benchmark(test, mask, band, stage_rng(cfg, "benchmark", k), cfg.benchmark.split_ratio)
        except ValueError as e:
            _log(log, f"benchmark: skipping {tag}: {e}")
            continue
        _save_maps(d, f"{tag}_controls", [s.id for s in bset.controls], [by_id[s.id] for s in bset.controls])
        _save_maps(d, f"{tag}_altered", [a.id for a in bset.altered], [_prep(cfg, a.skeleton, mask) for a in bset.altered])
        sets.append({"tag": tag, "kind": "deletion", "band": [band.lo, band.hi], "provenance": bset.provenance})
        _log(log, f"benchmark: {tag}: {len(bset.controls)} controls / {len(bset.altered)} altered")

    right, left = _cohort(cfg, "asym_right"), _cohort(cfg, "asym_left")
    mirrored = mirror_mask(mask)
    _save_maps(d, "asymmetry_controls", [s.id for s in right], [_prep(cfg, s.skeleton, mask) for s in right])
    _save_maps(d, "asymmetry_altered", [s.id for s in left], [_prep(cfg, s.skeleton, mirrored, flip=True) for s in left])
    sets.append({"tag": "asymmetry", "kind": "asymmetry",
                 "provenance": {s.id: {"knob_count": s.truth.get("knob_count")} for s in left}})

    geo = CropGeometry.of(mask, p.downsample_factor, tuple(p.pad_dims))
    interrupted = _cohort(cfg, "interrupted")
    n_ctl = cfg.benchmark.interrupted_controls
    _save_maps(d, "interrupted_controls", test_ids[:n_ctl], test_maps[:n_ctl])
    _save_maps(d, "interrupted_altered", [s.id for s in interrupted], [_prep(cfg, s.skeleton, mask) for s in interrupted])
    gaps = {}
    for s in interrupted:
        box = s.truth.get("gap_box")
        gaps[s.id] = geo.box_to_crop(BoundingBox.from_json(box)).to_json() if box else None
    sets.append({"tag": "interrupted", "kind": "interrupted", "gap_boxes": gaps})

    index = {"scale": scale, "bands": [[b.lo, b.hi] for b in bands], "sets": sets}
    (d / "benchmarks.json").write_text(json.dumps(index, indent=1, sort_keys=True))
    return _finish(cfg, "benchmark", {"scale": scale, "sets": [s["tag"] for s in sets]})


def _svm(cfg, codes, labels, rng):
    c = cfg.detect
    return dt.linear_svm_cv(codes, labels, c.k_folds, rng, c.svm_lambda, c.svm_epochs)


def _one_class_repeats(cfg, coords, rng):
    """OCSVM on seeded 90% subsamples and isolation forests with distinct seeds."""
    c = cfg.detect
    n = len(coords)
    oc, iso = [], []
    for _ in range(c.repeats):
        sub = np.sort(rng.choice(n, max(4, int(0.9 * n)), replace=False))
        model = dt.fit_one_class(coords[sub], c.nu)
        oc.append(model.decision(coords) < -1e-6)
        scores = dt.isolation_forest(coords, c.n_trees, rng=np.random.default_rng(rng.integers(2**63)))
        iso.append(scores >= np.quantile(scores, 1 - c.nu))
    return np.array(oc), np.array(iso)


def run_detect(cfg: PipelineConfig, log=None) -> Path:
    require(cfg, "detect")
    d = _fresh(cfg, "detect")
    torch.set_num_threads(1)
    model = vae.load_checkpoint(stage_dir(cfg, "train") / "model.fvae")
    frame = _frame(cfg)
    bdir = stage_dir(cfg, "benchmark")
    index = json.loads((bdir / "benchmarks.json").read_text())
    _, xtrain = _load_maps(stage_dir(cfg, "preprocess"), "train")
    train_err = vae.reconstruction_error(model, _masked(xtrain[: cfg.splits.n_val], frame))
    summary = {"train_recon_mean": float(train_err.mean()), "benchmarks": {}}
    for k, s in enumerate(index["sets"]):
        tag = s["tag"]
        rng = stage_rng(cfg, "detect", k)
        groups = {}
        for g in ("controls", "altered"):
            ids, x = _load_maps(bdir, f"{tag}_{g}")
            xm = _masked(x, frame)
            mu, _ = vae.encode(model, xm)
            err = vae.reconstruction_error(model, xm)
            groups[g] = (ids, xm, mu, err)
        ci, _, cmu, cerr = groups["controls"]
        ai, axm, amu, aerr = groups["altered"]
        codes = np.concatenate([cmu, amu])
        labels = np.r_[np.zeros(len(ci), int), np.ones(len(ai), int)]
        roc, weights = _svm(cfg, codes, labels, rng)
        coords = dt.pca2d(codes)
        oc_flags, if_flags = _one_class_repeats(cfg, coords, rng)
        decision, _ = dt.one_class_svm(coords, cfg.detect.nu)
        if_scores = dt.isolation_forest(coords, cfg.detect.n_trees, rng=rng)
        ids = list(ci) + list(ai)
        ctrl_rank = dt.repeated_outlier_controls(np.vstack([oc_flags, if_flags])[:, : len(ci)], ci)
        ks = dt.ks_test(aerr, cerr)
        mwu = dt.mwu_test(aerr, cerr)
        entry = {
            "kind": s["kind"],
            "n_controls": len(ci),
            "n_altered": len(ai),
            "latent_auc": roc.auc,
            "svm_weights": [float(w) for w in weights],
            "top_dim": int(np.argmax(weights)),
            "ocsvm_auc": dt.auc(-decision, labels),
            "iforest_auc": dt.auc(if_scores, labels),
            "ks": ks.to_json(),
            "mwu": mwu.to_json(),
            "recon_mean_controls": float(cerr.mean()),
            "recon_mean_altered": float(aerr.mean()),
            "frequent_outlier_controls": [[i, f] for i, f in ctrl_rank[:5]],
        }
        if s["kind"] == "interrupted":
            entry["gap_fill"] = _gap_fill(cfg, model, ai, axm, s["gap_boxes"], d / "residuals")
        summary["benchmarks"][tag] = entry
        _write_scores(d / f"{tag}_scores.csv", ids, labels, np.r_[cerr, aerr], if_scores, decision, codes)
        _log(log, f"detect: {tag}: latent AUC {roc.auc:.3f}  KS p {ks.p_value:.3g}  MWU p {mwu.p_value:.3g}")
    (d / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return _finish(cfg, "detect", {"sets": list(summary["benchmarks"])})


def _gap_fill(cfg, model, ids, xm, gap_boxes, out_dir: Path) -> dict:
    out_dir.mkdir(exist_ok=True)
    frame = _frame(cfg)
    x_hat = _masked(vae.reconstruct(model, xm).astype(np.float32), frame)
    fractions = {}
    for i, x, xh in zip(ids, xm, x_hat):
        res = dt.residual_maps(VoxelGrid(x), VoxelGrid(xh), cfg.detect.noise_floor)
        save_volume(res.omissions, out_dir / f"{i}_omissions.fvol")
        save_volume(res.additions, out_dir / f"{i}_additions.fvol")
        box = gap_boxes.get(i)
        fractions[i] = dt.gap_fill_fraction(res, BoundingBox.from_json(box)) if box else 0.0
    hits = sum(f >= cfg.detect.gap_mass for f in fractions.values())
    share = hits / max(1, len(fractions))
    return {"fractions": fractions, "subjects_filled": hits, "share": share,
            "holds": bool(share >= cfg.detect.gap_subjects)}


def _write_scores(path, ids, labels, err, if_scores, decision, codes):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["id", "group", "recon_error", "iforest", "ocsvm_decision"] + [f"mu{j}" for j in range(codes.shape[1])])
        for i, y, e, s, dcs, mu in zip(ids, labels, err, if_scores, decision, codes):
            w.writerow([i, "benchmark" if y else "control", f"{e:.6f}", f"{s:.6f}", f"{dcs:.6f}"] + [f"{m:.6f}" for m in mu])


def run_explore(cfg: PipelineConfig, log=None) -> Path:
    require(cfg, "explore")
    d = _fresh(cfg, "explore")
    e = cfg.explore
    model = vae.load_checkpoint(stage_dir(cfg, "train") / "model.fvae")
    frame = _frame(cfg)
    summary_in = json.loads((stage_dir(cfg, "detect") / "summary.json").read_text())
    _, xtest = _load_maps(stage_dir(cfg, "preprocess"), "test")
    codes, _ = vae.encode(model, _masked(xtest, frame))
    mean = ex.latent_mean(codes)
    asym = summary_in["benchmarks"].get("asymmetry")
    dim = asym["top_dim"] if asym else 0
    tr = ex.dimension_traversal(mean, dim, float(codes[:, dim].min()), float(codes[:, dim].max()), e.steps, model)
    depth = [frame.mask.dims[e.axis] // 2]
    ex.write_traversal(tr, d / "traversal", e.axis, depth, "traversal")
    inside = frame.mask.data != 0
    first = ex.binarize(apply_mask(tr.volumes[0], frame), e.threshold).data
    last = ex.binarize(apply_mask(tr.volumes[-1], frame), e.threshold).data
    changed = float(np.mean(first[inside] != last[inside]))
    for k in range(min(e.n_interpolations, len(codes) // 2)):
        zs = ex.interpolate(codes[2 * k], codes[2 * k + 1], e.steps)
        vols = [VoxelGrid(v.astype(np.float32)) for v in vae.decode(model, np.stack(zs))]
        path = ex.Traversal(codes[2 * k], -1, np.linspace(0, 1, e.steps), vols)
        ex.write_traversal(path, d / "interpolation", e.axis, depth, f"interp{k}")
    ex.write_pgm(ex.render_slices(VoxelGrid(vae.decode(model, mean)[0].astype(np.float32)), e.axis, depth)[0],
                 d / "mean_decode.pgm")
    summary = {"traversal_dim": dim, "binarized_change_fraction": changed, "mean_code": [float(v) for v in mean]}
    (d / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    _log(log, f"explore: traversal of dim {dim} changes {changed:.1%} of in-mask voxels")
    return _finish(cfg, "explore", {"traversal_dim": dim})


def _fmt_p(p: float) -> str:
    return f"{p:.3g}"


def run_report(cfg: PipelineConfig, log=None) -> Path:
    require(cfg, "report")
    d = _fresh(cfg, "report")
    det = json.loads((stage_dir(cfg, "detect") / "summary.json").read_text())
    exp = json.loads((stage_dir(cfg, "explore") / "summary.json").read_text())
    bench = json.loads((stage_dir(cfg, "benchmark") / "benchmarks.json").read_text())
    lines = [
        "# Rare fold pattern detection report",
        "",
        f"Region: {cfg.region}. Seed: {cfg.seed}. Config sha256: `{config_digest(cfg)}`.",
        f"Model: L={cfg.model.latent_dim}, beta={cfg.model.beta:g}, input {tuple(cfg.model.input_dims)}.",
        f"Deletion bands rescaled by {bench['scale']:.4f} (mean in-mask skeleton voxels / {cfg.benchmark.reference_voxels}).",
        "",
        "## Benchmarks",
        "",
        "| benchmark | controls | altered | latent AUC | OCSVM AUC | IF AUC | KS D | KS p | MWU p | recon ctl | recon alt |",
        "|---|---|---|---|---|---|---|---|---|---|---|",
    ]
    for tag, b in det["benchmarks"].items():
        lines.append(
            f"| {tag} | {b['n_controls']} | {b['n_altered']} | {b['latent_auc']:.3f} | {b['ocsvm_auc']:.3f} | "
            f"{b['iforest_auc']:.3f} | {b['ks']['statistic']:.3f} | {_fmt_p(b['ks']['p_value'])} | "
            f"{_fmt_p(b['mwu']['p_value'])} | {b['recon_mean_controls']:.2f} | {b['recon_mean_altered']:.2f} |"
        )
    lines += ["", f"Mean reconstruction error on training subjects: {det['train_recon_mean']:.2f}.", ""]
    inter = det["benchmarks"].get("interrupted")
    if inter:
        g = inter["gap_fill"]
        lines += [
            "## Interrupted pattern",
            "",
            f"Mann-Whitney U p = {_fmt_p(inter['mwu']['p_value'])} (U = {inter['mwu']['statistic']:g}).",
            f"Gap filling: {g['subjects_filled']}/{inter['n_altered']} subjects carry >= {cfg.detect.gap_mass:.0%} "
            f"of their additions inside the gap ({'holds' if g['holds'] else 'does not hold'}).",
            "",
        ]
    lines += [
        "## Latent exploration",
        "",
        f"Traversal of dimension {exp['traversal_dim']}: binarized endpoints differ in "
        f"{exp['binarized_change_fraction']:.2%} of in-mask voxels.",
        "",
        "## Artifacts",
        "",
        "| file | sha256 |",
        "|---|---|",
    ]
    for stage in STAGES[:-1]:
        marker = stage_dir(cfg, stage) / "stage.json"
        if not marker.exists():
            continue
        for rel, digest in sorted(json.loads(marker.read_text())["artifacts"].items()):
            lines.append(f"| {stage}/{rel} | `{digest}` |")
    path = d / "report.md"
    path.write_text("\n".join(lines) + "\n")
    _log(log, f"report: {path}")
    return _finish(cfg, "report")


RUNNERS = {
    "synth": run_synth,
    "preprocess": run_preprocess,
    "train": run_train,
    "gridsearch": run_gridsearch,
    "benchmark": run_benchmark,
    "detect": run_detect,
    "explore": run_explore,
    "report": run_report,
}


def run_all(cfg: PipelineConfig, stages=None, log=None) -> None:
    for st in stages or [s for s in STAGES if s != "gridsearch" or cfg.gridsearch.use_best]:
        RUNNERS[st](cfg, log)
