"""Retrain the model on an existing work directory and score every benchmark.

Used to pick the desk operating point: the synth, preprocess and benchmark
stages must already exist in WORKDIR; each ModelConfig override set given on
the command line is trained in turn and summarized on one line per benchmark.

    python3 scripts/calibrate.py WORKDIR '{"epochs": 120, "batch_size": 4}' ...
"""

from __future__ import annotations

import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from foldrare import detect as dt
from foldrare import vae
from foldrare.preprocess import RegionMask


def score(model, work: Path, tag: str, inside: np.ndarray, rng) -> str:
    a = np.load(work / "benchmark" / f"{tag}_controls.npy") * inside
    b = np.load(work / "benchmark" / f"{tag}_altered.npy") * inside
    codes = np.concatenate([vae.encode(model, a)[0], vae.encode(model, b)[0]])
    labels = np.r_[np.zeros(len(a), int), np.ones(len(b), int)]
    roc, _ = dt.linear_svm_cv(codes, labels, 5, rng)
    ea, eb = vae.reconstruction_error(model, a), vae.reconstruction_error(model, b)
    return (f"  {tag:<20} AUC {roc.auc:.3f}  KS p {dt.ks_test(eb, ea).p_value:.3g}  "
            f"MWU p {dt.mwu_test(eb, ea).p_value:.3g}")


def main(work: str, *variants: str) -> None:
    torch.set_num_threads(1)
    work = Path(work)
    frame = RegionMask.load(work / "preprocess" / "frame_mask.fvol")
    inside = frame.mask.data != 0
    train = np.load(work / "preprocess" / "train.npy")
    val = np.load(work / "preprocess" / "val.npy")
    tags = [s["tag"] for s in json.loads((work / "benchmark" / "benchmarks.json").read_text())["sets"]]
    for text in variants or ("{}",):
        cfg = replace(vae.ModelConfig(input_dims=train.shape[1:], learning_rate=1e-3), **json.loads(text))
        t0 = time.perf_counter()
        model, report = vae.train(cfg, train, val, frame)
        print(f"{text}: {time.perf_counter() - t0:.0f}s, val recon {report.series('val', 'recon')[-1]:.1f}, "
              f"val kl {report.series('val', 'kl')[-1]:.2f}")
        for tag in tags:
            print(score(model, work, tag, inside, np.random.default_rng(0)), flush=True)


if __name__ == "__main__":
    if len(sys.argv) < 2:
        raise SystemExit(__doc__)
    main(*sys.argv[1:])
