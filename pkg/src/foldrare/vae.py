"""Depth-3 convolutional beta-VAE on normalized distance-map crops.

The objective minimized is the negated evidence bound with a weighted KL:

    total = sum_voxels (x - decode(z))**2 + beta * KL(q(z|x) || N(0, I))

with z = mu + exp(logvar / 2) * eps. Inference paths (codes, reconstruction
errors, decodes) use the posterior mean (eps = 0).
"""

from __future__ import annotations

import csv
import io
import json
import struct
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from foldrare.grid import VoxelGrid
from foldrare.preprocess import RegionMask, apply_mask, augment

CHECKPOINT_MAGIC = b"FVAE0001"
ACTIVATIONS = {"relu": nn.ReLU, "elu": nn.ELU}


@dataclass(frozen=True)
class ModelConfig:
    input_dims: tuple[int, int, int] = (32, 32, 40)
    channels: tuple[int, int, int] = (16, 32, 64)
    kernel: int = 3
    stride: int = 2
    latent_dim: int = 16
    beta: float = 2.0
    learning_rate: float = 1e-4
    epochs: int = 100
    batch_size: int = 16
    seed: int = 0
    augment_deg: float = 10.0
    # linear ramp of the KL weight from 0 to beta over the first epochs (0 = off)
    kl_warmup_epochs: int = 0
    recon_kind: str = "sse"
    activation: str = "relu"

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if any(d % 8 for d in self.input_dims):
            raise ValueError(f"input dims {self.input_dims} must be divisible by 8")
        if self.recon_kind != "sse":
            raise ValueError("only sum-of-squared-errors reconstruction is supported")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(ACTIVATIONS)}")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


class BetaVAE(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c1, c2, c3 = config.channels
        k, s, p = config.kernel, config.stride, config.kernel // 2
        act = ACTIVATIONS[config.activation]
        self.act = act()
        self.encoder = nn.Sequential(
            nn.Conv3d(1, c1, k, s, p), act(),
            nn.Conv3d(c1, c2, k, s, p), act(),
            nn.Conv3d(c2, c3, k, s, p), act(),
        )
        self.bottom = tuple(d // 8 for d in config.input_dims)
        n_flat = c3 * int(np.prod(self.bottom))
        self.fc_mu = nn.Linear(n_flat, config.latent_dim)
        self.fc_logvar = nn.Linear(n_flat, config.latent_dim)
        self.fc_dec = nn.Linear(config.latent_dim, n_flat)
        self.decoder = nn.Sequential(
            nn.ConvTranspose3d(c3, c2, k, s, p, output_padding=s - 1), act(),
            nn.ConvTranspose3d(c2, c1, k, s, p, output_padding=s - 1), act(),
            nn.ConvTranspose3d(c1, 1, k, s, p, output_padding=s - 1), nn.Sigmoid(),
        )

    def encode(self, x: torch.Tensor):
        h = self.encoder(x.unsqueeze(1)).flatten(1)
        return self.fc_mu(h), self.fc_logvar(h)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        h = self.act(self.fc_dec(z)).view(-1, self.config.channels[2], *self.bottom)
        return self.decoder(h).squeeze(1)

    def forward(self, x, eps):
        mu, logvar = self.encode(x)
        return self.decode(reparameterize(mu, logvar, eps)), mu, logvar


def build_model(config: ModelConfig) -> BetaVAE:
    torch.manual_seed(config.seed)
    return BetaVAE(config)


def _as_batch(x, dtype=torch.float32) -> torch.Tensor:
    if isinstance(x, VoxelGrid):
        x = x.data[None]
    elif isinstance(x, (list, tuple)) and x and isinstance(x[0], VoxelGrid):
        x = np.stack([g.data for g in x])
    t = torch.as_tensor(np.ascontiguousarray(x), dtype=dtype)
    return t.unsqueeze(0) if t.dim() == 3 else t


def _check_dims(model: BetaVAE, x: torch.Tensor) -> None:
    if tuple(x.shape[1:]) != tuple(model.config.input_dims):
        raise ValueError(f"input dims {tuple(x.shape[1:])} != model input dims {model.config.input_dims}")


def reparameterize(mu, logvar, eps):
    return mu + torch.exp(0.5 * logvar) * eps if isinstance(mu, torch.Tensor) else (
        np.asarray(mu) + np.exp(0.5 * np.asarray(logvar)) * np.asarray(eps)
    )


def kl_divergence(mu, logvar):
    """KL(N(mu, exp(logvar)) || N(0, I)) summed over latent dimensions (last axis)."""
    if isinstance(mu, torch.Tensor):
        return -0.5 * torch.sum(1 + logvar - mu**2 - torch.exp(logvar), dim=-1)
    mu, logvar = np.asarray(mu, float), np.asarray(logvar, float)
    return -0.5 * np.sum(1 + logvar - mu**2 - np.exp(logvar), axis=-1)


def _loss_terms(model, x, eps, beta):
    x_hat, mu, logvar = model(x, eps)
    recon = ((x - x_hat) ** 2).flatten(1).sum(dim=1)
    kl = kl_divergence(mu, logvar)
    return recon, kl, recon + beta * kl


def loss(model: BetaVAE, x, eps, beta: float):
    """Per-sample (recon, kl, total) as numpy arrays."""
    xt = _as_batch(x, next(model.parameters()).dtype)
    _check_dims(model, xt)
    e = _as_batch(eps, xt.dtype).reshape(xt.shape[0], -1)
    with torch.no_grad():
        r, k, t = _loss_terms(model, xt, e, beta)
    return r.double().numpy(), k.double().numpy(), t.double().numpy()


@torch.no_grad()
def encode(model: BetaVAE, x) -> tuple[np.ndarray, np.ndarray]:
    """Posterior (mu, logvar) for one map or a stack, one sample at a time."""
    xt = _as_batch(x, next(model.parameters()).dtype)
    _check_dims(model, xt)
    mus, lvs = [], []
    for i in range(xt.shape[0]):
        mu, lv = model.encode(xt[i:i + 1])
        mus.append(mu[0].double().numpy())
        lvs.append(lv[0].double().numpy())
    return np.stack(mus), np.stack(lvs)


@torch.no_grad()
def decode(model: BetaVAE, z) -> np.ndarray:
    zt = torch.as_tensor(np.atleast_2d(np.asarray(z, float)), dtype=next(model.parameters()).dtype)
    return np.stack([model.decode(zt[i:i + 1])[0].double().numpy() for i in range(zt.shape[0])])


@torch.no_grad()
def reconstruct(model: BetaVAE, x) -> np.ndarray:
    mu, _ = encode(model, x)
    return decode(model, mu)


def reconstruction_error(model: BetaVAE, x) -> np.ndarray:
    """Per-sample sum of squared errors of the posterior-mean reconstruction."""
    xs = _as_batch(x).double().numpy()
    x_hat = reconstruct(model, x)
    return np.array([np.sum((a - b) ** 2) for a, b in zip(xs, x_hat)])


# ---------------------------------------------------------------- training


@dataclass
class TrainReport:
    rows: list[dict] = field(default_factory=list)
    wall_time_s: float = 0.0
    seed: int = 0

    def series(self, split: str, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.rows if r["split"] == split])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "recon", "kl", "total", "split"])
        for r in self.rows:
            w.writerow([r["epoch"], repr(float(r["recon"])), repr(float(r["kl"])), repr(float(r["total"])), r["split"]])
        return buf.getvalue()


def _stack(maps) -> np.ndarray:
    if isinstance(maps, np.ndarray):
        return maps.astype(np.float32)
    return np.stack([m.data if isinstance(m, VoxelGrid) else np.asarray(m) for m in maps]).astype(np.float32)


def _masked(x: np.ndarray, mask: RegionMask | None) -> np.ndarray:
    return x if mask is None else x * (mask.mask.data != 0)


def train(config: ModelConfig, train_set, val_set=None, mask: RegionMask | None = None, log=None):
    """Adam on the batch-mean total loss; deterministic given config.seed.

    Each epoch draws a fresh batch order and per-sample rotations (stream keyed
    by (seed, epoch, sample index)); the mask is applied after rotation.
    """
    t0 = time.perf_counter()
    xs = _stack(train_set)
    if len(xs) == 0:
        raise ValueError("empty training set")
    val = _masked(_stack(val_set), mask) if val_set is not None and len(val_set) else None
    model = build_model(config)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    gen = torch.Generator().manual_seed(config.seed)
    report = TrainReport(seed=config.seed)
    grid_like = VoxelGrid(np.zeros(config.input_dims, np.float32))
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(len(xs))
        sums = np.zeros(3)
        model.train()
        for b, start in enumerate(range(0, len(xs), config.batch_size)):
            idx = order[start:start + config.batch_size]
            batch = []
            for i in idx:
                x = grid_like.replace(xs[i])
                if mask is not None:
                    x = augment(x, mask, config.augment_deg, np.random.default_rng([config.seed, epoch, int(i)]))
                batch.append(x.data)
            xb = torch.as_tensor(np.stack(batch))
            eps = torch.randn(len(idx), config.latent_dim, generator=gen)
            beta = config.beta * min(1.0, (epoch + 1) / config.kl_warmup_epochs) if config.kl_warmup_epochs else config.beta
            recon, kl, total = _loss_terms(model, xb, eps, config.beta)
            objective = (recon + beta * kl).mean()
            if not torch.isfinite(objective):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}, batch {b}")
            opt.zero_grad()
            objective.backward()
            opt.step()
            sums += [recon.sum().item(), kl.sum().item(), total.sum().item()]
        r, k, t = sums / len(xs)
        report.rows.append({"epoch": epoch, "split": "train", "recon": r, "kl": k, "total": t})
        if val is not None:
            model.eval()
            vr, vk, vt = loss(model, val, np.zeros((len(val), config.latent_dim)), config.beta)
            report.rows.append({"epoch": epoch, "split": "val", "recon": vr.mean(), "kl": vk.mean(), "total": vt.mean()})
        if log is not None:
            log(f"epoch {epoch:3d}  train total {t:10.3f}  recon {r:10.3f}  kl {k:8.3f}")
    model.eval()
    report.wall_time_s = time.perf_counter() - t0
    return model, report


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(model: BetaVAE, path) -> Path:
    path = Path(path)
    tensors = [t.detach().to(torch.float32).contiguous() for t in model.state_dict().values()]
    head = [CHECKPOINT_MAGIC, struct.pack("<I", len(tensors))]
    for t in tensors:
        head.append(struct.pack(f"<I{t.dim()}I", t.dim(), *t.shape))
    body = [t.numpy().astype("<f4").tobytes() for t in tensors]
    path.write_bytes(b"".join(head + body))
    path.with_suffix(".json").write_text(json.dumps(model.config.to_dict(), indent=2, sort_keys=True))
    return path


def load_checkpoint(path) -> BetaVAE:
    path = Path(path)
    config = ModelConfig.from_dict(json.loads(path.with_suffix(".json").read_text()))
    raw = path.read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an FVAE0001 checkpoint")
    (n,) = struct.unpack_from("<I", raw, 8)
    pos, shapes = 12, []
    for _ in range(n):
        (nd,) = struct.unpack_from("<I", raw, pos)
        shapes.append(struct.unpack_from(f"<{nd}I", raw, pos + 4))
        pos += 4 + 4 * nd
    model = BetaVAE(config)
    state = model.state_dict()
    if len(shapes) != len(state):
        raise ValueError(f"{path}: {len(shapes)} tensors, model expects {len(state)}")
    for (name, ref), shape in zip(state.items(), shapes):
        if tuple(ref.shape) != tuple(shape):
            raise ValueError(f"{path}: tensor {name} has shape {shape}, expected {tuple(ref.shape)}")
        count = int(np.prod(shape))
        arr = np.frombuffer(raw, "<f4", count, pos).reshape(shape)
        state[name] = torch.from_numpy(arr.astype(np.float32))
        pos += 4 * count
    if pos != len(raw):
        raise ValueError(f"{path}: {len(raw) - pos} trailing bytes")
    model.load_state_dict(state)
    model.eval()
    return model


# ---------------------------------------------------------------- gradient check


# smooth activations: a central difference straddling a ReLU kink is not a gradient error
TINY = ModelConfig(input_dims=(8, 8, 8), channels=(2, 2, 2), latent_dim=2, beta=2.0, activation="elu")


def grad_check(config: ModelConfig = TINY, model: BetaVAE | None = None, x=None, eps=None,
               n_params: int = 50, h: float = 1e-3, seed: int = 0, corrupt: float = 1.0) -> float:
    """Max relative error between autograd and central finite differences.

    Runs in float64 on `n_params` randomly chosen scalar parameters. `corrupt`
    scales the analytic gradient, to confirm the check catches faults.
    """
    rng = np.random.default_rng(seed)
    if model is None:
        model = build_model(replace(config, seed=seed))
    model = model.double()
    if x is None:
        x = rng.random((1, *config.input_dims))
    xt = _as_batch(x, torch.float64)
    e = torch.as_tensor(rng.standard_normal((xt.shape[0], config.latent_dim)) if eps is None else eps,
                        dtype=torch.float64).reshape(xt.shape[0], -1)

    def objective():
        return _loss_terms(model, xt, e, config.beta)[2].sum()

    params = [p for p in model.parameters()]
    model.zero_grad()
    objective().backward()
    analytic = torch.cat([p.grad.flatten() for p in params]).numpy() * corrupt
    sizes = np.cumsum([0] + [p.numel() for p in params])
    picks = rng.choice(sizes[-1], size=min(n_params, sizes[-1]), replace=False)
    worst = 0.0
    with torch.no_grad():
        for flat in picks:
            k = int(np.searchsorted(sizes, flat, side="right") - 1)
            view = params[k].view(-1)
            j = int(flat - sizes[k])
            orig = view[j].item()
            view[j] = orig + h
            up = objective().item()
            view[j] = orig - h
            down = objective().item()
            view[j] = orig
            numeric = (up - down) / (2 * h)
            a = analytic[flat]
            worst = max(worst, float(abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)))
    return worst


# ---------------------------------------------------------------- grid search


def select_config(table: list[dict], gate: float = 1.25) -> dict:
    """Highest AUC among rows whose val recon error is within `gate` x the grid minimum.

    Ties keep the earlier row.
    """
    if not table:
        raise ValueError("empty grid")
    floor = min(r["val_recon"] for r in table)
    passing = [r for r in table if r["val_recon"] <= gate * floor]
    return max(passing, key=lambda r: r["auc"])


def grid_search(betas, latent_dims, base: ModelConfig, train_set, val_set, proxy_outliers,
                mask: RegionMask | None = None, k_folds: int = 5, gate: float = 1.25, log=None):
    """Train each (beta, L), score val-vs-proxy latent SVM AUC, pick per `select_config`."""
    from foldrare.detect import linear_svm_cv

    grid = [(float(b), int(L)) for b in betas for L in latent_dims]
    if not grid:
        raise ValueError("empty grid")
    if len(proxy_outliers) == 0:
        raise ValueError("grid search needs a nonempty proxy outlier set")
    val = _masked(_stack(val_set), mask)
    proxy = _masked(_stack(proxy_outliers), mask)
    table = []
    for beta, L in grid:
        cfg = replace(base, beta=beta, latent_dim=L)
        model, _ = train(cfg, train_set, val_set, mask)
        codes = np.concatenate([encode(model, val)[0], encode(model, proxy)[0]])
        labels = np.r_[np.zeros(len(val), int), np.ones(len(proxy), int)]
        roc, _ = linear_svm_cv(codes, labels, k_folds, np.random.default_rng(base.seed))
        row = {"beta": beta, "latent_dim": L, "val_recon": float(reconstruction_error(model, val).mean()), "auc": roc.auc}
        table.append(row)
        if log is not None:
            log(f"beta={beta:g} L={L}: val recon {row['val_recon']:.3f}  AUC {row['auc']:.3f}")
    best = select_config(table, gate)
    return replace(base, beta=best["beta"], latent_dim=best["latent_dim"]), table
