"""Acceptance suite: the eight primary criteria at their stated tolerances.

Each test prints one line `ACCEPTANCE <id> PASS|FAIL: <detail>` (visible with
`pytest -s`, and summarized at the end of the session by conftest.py).
The desk run trains the full-size model once per session (minutes on one CPU).
"""

import itertools
import json
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import integrate
from scipy.spatial.distance import cdist

from foldrare import detect as dt
from foldrare import vae
from foldrare.config import load_config
from foldrare.grid import VoxelGrid
from foldrare.pipeline import STAGES, run_all, stage_dir
from foldrare.preprocess import chamfer_dt

ROOT = Path(__file__).resolve().parents[1]
DESK = ROOT / "configs" / "desk.json"
CINGULATE = ROOT / "configs" / "cingulate.json"

# small cohort used for the byte-identity check; every stage still runs
SMALL = [
    "splits.n_labeled=10", "splits.n_train=40", "splits.n_val=10", "splits.n_test=40",
    "splits.n_interrupted=6", "splits.n_asymmetry=12", "model.epochs=2", "detect.repeats=2",
    "detect.n_trees=20",
]

RESULTS = {}


def verdict(key, ok, detail):
    line = f"ACCEPTANCE {key} {'PASS' if ok else 'FAIL'}: {detail}"
    RESULTS[key] = line
    print(line)
    assert ok, line


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    work = tmp_path_factory.mktemp("desk")
    cfg = load_config(DESK, [f"workdir={work}"])
    t0 = time.perf_counter()
    run_all(cfg)
    elapsed = time.perf_counter() - t0
    summary = json.loads((stage_dir(cfg, "detect") / "summary.json").read_text())
    bench = json.loads((stage_dir(cfg, "benchmark") / "benchmarks.json").read_text())
    return {"cfg": cfg, "elapsed": elapsed, "summary": summary["benchmarks"], "bench": bench}


def _deletions(desk):
    tags = [s["tag"] for s in desk["bench"]["sets"] if s["kind"] == "deletion"]
    return [(t, desk["summary"][t]) for t in tags]


def test_c1_deletion_auc_monotone(desk):
    rows = _deletions(desk)
    aucs = [b["latent_auc"] for _, b in rows]
    n_test = desk["cfg"].splits.n_test
    ok = (
        len(rows) == 4
        and n_test >= 200
        and all(a <= b for a, b in zip(aucs, aucs[1:]))
        and aucs[0] <= 0.65
        and aucs[-1] >= 0.90
        and desk["elapsed"] <= 30 * 60
    )
    verdict("C1", ok, f"bands {[t for t, _ in rows]} AUC {[round(a, 3) for a in aucs]}, "
            f"test subjects {n_test}, runtime {desk['elapsed']:.0f}s")


def test_c2_ks_by_band(desk):
    rows = _deletions(desk)
    p_small, p_large = rows[0][1]["ks"]["p_value"], rows[-1][1]["ks"]["p_value"]
    verdict("C2", p_small > 0.05 and p_large < 1e-3, f"KS p smallest band {p_small:.3g}, largest band {p_large:.3g}")


def test_c3_asymmetry_dissociation(desk):
    b = desk["summary"]["asymmetry"]
    a, p = b["latent_auc"], b["ks"]["p_value"]
    verdict("C3", a >= 0.75 and p > 0.05, f"latent AUC {a:.3f}, recon-error KS p {p:.3g}")


def test_c4_interruption(desk):
    b = desk["summary"]["interrupted"]
    g = b["gap_fill"]
    ok = b["n_altered"] >= 20 and b["n_controls"] >= 200 and b["mwu"]["p_value"] < 0.05 and g["holds"]
    verdict("C4", ok, f"{b['n_altered']} interrupted vs {b['n_controls']} controls, MWU p {b['mwu']['p_value']:.3g}, "
            f"gap filled in {g['subjects_filled']}/{b['n_altered']} ({g['share']:.0%})")


def test_c5_gradient_check():
    t0 = time.perf_counter()
    clean = vae.grad_check()
    corrupt = vae.grad_check(corrupt=1.01)
    elapsed = time.perf_counter() - t0
    ok = clean < 1e-4 and corrupt > 1e-3 and elapsed < 60
    verdict("C5", ok, f"max rel err {clean:.2e}, with 1% corruption {corrupt:.2e}, {elapsed:.1f}s")


def _euclidean(obj):
    pts = np.argwhere(np.ones_like(obj))
    return cdist(pts, np.argwhere(obj)).min(axis=1).reshape(obj.shape)


def _perm_p(a, b, stat):
    pooled = np.r_[a, b]
    obs = stat(a, b)
    hits = total = 0
    for comb in itertools.combinations(range(len(pooled)), len(a)):
        sel = np.zeros(len(pooled), bool)
        sel[list(comb)] = True
        hits += stat(pooled[sel], pooled[~sel]) >= obs - 1e-12
        total += 1
    return hits / total


def _ks_stat(a, b):
    grid = np.r_[a, b]
    return np.max(np.abs((a[:, None] <= grid).mean(0) - (b[:, None] <= grid).mean(0)))


def _u_dev(a, b):
    u = sum((x > y) + 0.5 * (x == y) for x in a for y in b)
    return abs(u - len(a) * len(b) / 2)


def _kl_quad(mu, logvar):
    total = 0.0
    for m, lv in zip(mu, logvar):
        s = np.exp(lv / 2)

        def f(z, m=m, s=s):
            q = np.exp(-((z - m) ** 2) / (2 * s * s)) / (s * np.sqrt(2 * np.pi))
            log_ratio = -np.log(s) - (z - m) ** 2 / (2 * s * s) + z * z / 2
            return q * log_ratio

        total += integrate.quad(f, m - 12 * s, m + 12 * s, epsabs=1e-12, epsrel=1e-12, limit=200)[0]
    return total


def test_c6_numerical_oracles():
    rng = np.random.default_rng(2024)
    chamfer_worst = 0.0
    for _ in range(50):
        a = np.zeros((16, 16, 16), np.uint8)
        a[tuple(rng.integers(0, 16, (3, int(rng.integers(1, 12)))))] = 1
        d = chamfer_dt(VoxelGrid(a, kind="binary")).data
        e = _euclidean(a)
        far = e > 0
        chamfer_worst = max(chamfer_worst, float(np.max(np.abs(d[far] - e[far]) / e[far])))

    auc_worst = 0.0
    for _ in range(20):
        s = np.round(rng.normal(size=60), 1)
        y = rng.integers(0, 2, 60)
        y[:2] = [0, 1]
        pos, neg = s[y == 1], s[y == 0]
        pairs = ((pos[:, None] > neg).sum() + 0.5 * (pos[:, None] == neg).sum()) / (len(pos) * len(neg))
        auc_worst = max(auc_worst, abs(dt.auc(s, y) - pairs))

    test_worst = 0.0
    for _ in range(10):
        n1, n2 = int(rng.integers(3, 9)), int(rng.integers(3, 9))
        a, b = rng.normal(size=n1), rng.normal(0.7, 1, size=n2)
        test_worst = max(test_worst, abs(dt.ks_test(a, b).p_value - _perm_p(a, b, _ks_stat)),
                         abs(dt.mwu_test(a, b).p_value - _perm_p(a, b, _u_dev)))

    kl_worst = 0.0
    for _ in range(10):
        mu, lv = rng.normal(size=4), rng.uniform(-3, 2, size=4)
        kl_worst = max(kl_worst, abs(float(vae.kl_divergence(mu, lv)) - _kl_quad(mu, lv)))

    ok = chamfer_worst <= 0.15 and auc_worst <= 1e-12 and test_worst <= 0.02 and kl_worst <= 1e-6
    verdict("C6", ok, f"chamfer rel err {chamfer_worst:.3f}, AUC diff {auc_worst:.1e}, "
            f"KS/MWU vs permutation {test_worst:.4f}, KL vs quadrature {kl_worst:.1e}")


def test_c7_byte_identical_reruns(tmp_path):
    digests = []
    for run in ("a", "b"):
        cfg = load_config(DESK, [f"workdir={tmp_path / run}", *SMALL])
        run_all(cfg)
        digests.append({
            "report": (stage_dir(cfg, "report") / "report.md").read_bytes(),
            "model": (stage_dir(cfg, "train") / "model.fvae").read_bytes(),
        })
    same = digests[0] == digests[1]
    verdict("C7", same, f"report.md and model.fvae {'identical' if same else 'differ'} across two runs")


def test_c8_region_transposition(tmp_path):
    cfg = load_config(CINGULATE, [f"workdir={tmp_path / 'w'}"])
    run_all(cfg)
    missing = []
    for stage in STAGES:
        if stage == "gridsearch" and not cfg.gridsearch.use_best:
            continue
        marker = stage_dir(cfg, stage) / "stage.json"
        if not marker.exists():
            missing.append(f"{stage}/stage.json")
            continue
        for rel in json.loads(marker.read_text())["artifacts"]:
            if not (stage_dir(cfg, stage) / rel).exists():
                missing.append(f"{stage}/{rel}")
    verdict("C8", cfg.region == "cingulate" and not missing,
            f"region {cfg.region}, input {tuple(cfg.model.input_dims)}, missing artifacts: {missing or 'none'}")
