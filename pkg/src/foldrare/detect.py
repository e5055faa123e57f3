"""Outlier detection in latent space (codes) and folding space (reconstructions)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import kolmogorov
from scipy.stats import norm

from foldrare.grid import BoundingBox, VoxelGrid

# exact null distributions below this many (n1 * n2) sample pairs
EXACT_PAIRS = 10_000


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float


@dataclass(frozen=True)
class TestResult:
    name: str
    statistic: float
    p_value: float
    n1: int
    n2: int

    def to_json(self) -> dict:
        return {"test": self.name, "statistic": self.statistic, "p_value": self.p_value, "n1": self.n1, "n2": self.n2}


@dataclass
class ScoredSample:
    id: str
    group: str
    mu: np.ndarray
    recon_error: float
    scores: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ResidualMaps:
    omissions: VoxelGrid
    additions: VoxelGrid
    threshold: float


def _binary_labels(labels) -> np.ndarray:
    y = np.asarray(labels).astype(int)
    if set(np.unique(y)) != {0, 1}:
        raise ValueError("both classes (0 and 1) must be present")
    return y


# ---------------------------------------------------------------- ROC / AUC


def auc(scores, labels) -> float:
    """Probability a positive outscores a negative; ties count 1/2."""
    y = _binary_labels(labels)
    s = np.asarray(scores, dtype=float)
    ranks = _midranks(s)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def roc_curve(scores, labels) -> RocCurve:
    y = _binary_labels(labels)
    s = np.asarray(scores, dtype=float)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # one point per distinct threshold
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    tpr = np.r_[0.0, tp / y.sum()]
    fpr = np.r_[0.0, fp / (len(y) - y.sum())]
    return RocCurve(fpr, tpr, auc(scores, labels))


def stratified_folds(labels, k: int, rng: np.random.Generator) -> np.ndarray:
    """Fold index per sample; each class is dealt round-robin after a shuffle."""
    y = np.asarray(labels)
    folds = np.empty(len(y), dtype=int)
    for cls in np.unique(y):
        idx = np.flatnonzero(y == cls)
        folds[rng.permutation(idx)] = np.arange(len(idx)) % k
    return folds


def _pegasos(x, y_pm, lam, epochs, rng):
    """Hinge + L2 linear SVM by epoch-shuffled subgradient steps (bias as a constant feature)."""
    xa = np.hstack([x, np.ones((len(x), 1))])
    w = np.zeros(xa.shape[1])
    avg = np.zeros_like(w)
    n_avg = 0
    t = 0
    for epoch in range(epochs):
        for i in rng.permutation(len(xa)):
            t += 1
            eta = 1.0 / (lam * t)
            margin = y_pm[i] * (xa[i] @ w)
            w *= 1.0 - eta * lam
            if margin < 1:
                w += eta * y_pm[i] * xa[i]
            if epoch >= epochs // 2:
                avg += w
                n_avg += 1
    return avg / n_avg


def linear_svm_cv(codes, labels, k_folds: int = 5, rng: np.random.Generator | None = None,
                  lam: float = 1e-2, epochs: int = 40) -> tuple[RocCurve, np.ndarray]:
    """Stratified k-fold linear SVM; pooled out-of-fold decision values give one ROC.

    Returns the ROC and the fold-averaged |weight| per input dimension, in
    per-fold standardized units.
    """
    x = np.asarray(codes, dtype=float)
    y = _binary_labels(labels)
    if k_folds < 2:
        raise ValueError("k_folds must be >= 2")
    if len(y) < 2 * k_folds or min(y.sum(), len(y) - y.sum()) < k_folds:
        raise ValueError(f"need at least {k_folds} samples of each class")
    rng = rng or np.random.default_rng(0)
    folds = stratified_folds(y, k_folds, rng)
    decision = np.zeros(len(y))
    weights = np.zeros(x.shape[1])
    for f in range(k_folds):
        tr, te = folds != f, folds == f
        mean = x[tr].mean(axis=0)
        sd = x[tr].std(axis=0)
        sd[sd == 0] = 1.0
        w = _pegasos((x[tr] - mean) / sd, 2.0 * y[tr] - 1, lam, epochs, rng)
        decision[te] = ((x[te] - mean) / sd) @ w[:-1] + w[-1]
        weights += np.abs(w[:-1]) / k_folds
    return roc_curve(decision, y), weights


# ---------------------------------------------------------------- projection


def pca2d(codes) -> np.ndarray:
    x = np.asarray(codes, dtype=float)
    if x.ndim != 2 or len(x) < 3:
        raise ValueError("pca2d needs at least 3 codes")
    xc = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    if s[0] <= 1e-12 * max(1.0, np.abs(x).max()):
        raise ValueError("degenerate (rank-0) data")
    comps = vt[:2]
    if comps.shape[0] < 2:
        comps = np.vstack([comps, np.zeros(x.shape[1])])
    for c in comps:
        if c[np.argmax(np.abs(c))] < 0:
            c *= -1
    return xc @ comps.T


# ---------------------------------------------------------------- isolation forest


def _c(n: int) -> float:
    """Average unsuccessful-search path length in a binary search tree of n nodes."""
    if n <= 1:
        return 0.0
    if n == 2:
        return 1.0
    return 2.0 * (math.log(n - 1) + np.euler_gamma) - 2.0 * (n - 1) / n


def _grow(x, depth, limit, rng):
    if depth >= limit or len(x) <= 1:
        return ("leaf", len(x))
    lo, hi = x.min(axis=0), x.max(axis=0)
    dims = np.flatnonzero(hi > lo)
    if len(dims) == 0:
        return ("leaf", len(x))
    d = dims[rng.integers(len(dims))]
    split = rng.uniform(lo[d], hi[d])
    left = x[:, d] < split
    return ("node", d, split, _grow(x[left], depth + 1, limit, rng), _grow(x[~left], depth + 1, limit, rng))


def _path(node, p, depth=0):
    while node[0] == "node":
        node = node[3] if p[node[1]] < node[2] else node[4]
        depth += 1
    return depth + _c(node[1])


def isolation_forest(points, n_trees: int = 100, subsample: int | None = None,
                     rng: np.random.Generator | None = None) -> np.ndarray:
    """Anomaly score 2**(-E[path] / c(subsample)) in (0, 1); higher is more isolated."""
    x = np.asarray(points, dtype=float)
    if len(x) < 8:
        raise ValueError("isolation_forest needs at least 8 points")
    rng = rng or np.random.default_rng(0)
    psi = min(len(x), 256) if subsample is None else min(subsample, len(x))
    limit = math.ceil(math.log2(psi))
    depth = np.zeros(len(x))
    for _ in range(n_trees):
        tree = _grow(x[rng.choice(len(x), psi, replace=False)], 0, limit, rng)
        depth += [_path(tree, p) for p in x]
    return 2.0 ** (-(depth / n_trees) / _c(psi))


# ---------------------------------------------------------------- one-class SVM


def median_gamma(points) -> float:
    x = np.asarray(points, dtype=float)
    d2 = np.sum((x[:, None] - x[None]) ** 2, axis=-1)[np.triu_indices(len(x), 1)]
    med = np.median(d2)
    return 1.0 / (2.0 * med) if med > 0 else 1.0


def _rbf(a, b, gamma):
    d2 = np.sum(a**2, 1)[:, None] + np.sum(b**2, 1)[None] - 2 * a @ b.T
    return np.exp(-gamma * np.maximum(d2, 0.0))


@dataclass(frozen=True)
class OneClassModel:
    support: np.ndarray
    alpha: np.ndarray
    rho: float
    gamma: float

    def decision(self, points) -> np.ndarray:
        return _rbf(np.asarray(points, float), self.support, self.gamma) @ self.alpha - self.rho


def fit_one_class(points, nu: float = 0.1, gamma: float | None = None, tol: float = 1e-6,
                  max_iter: int = 100_000) -> OneClassModel:
    """nu-one-class SVM dual, SMO on the maximal violating pair.

    min 1/2 a'Ka  s.t.  0 <= a_i <= 1/(nu n),  sum a = 1.
    """
    x = np.asarray(points, dtype=float)
    n = len(x)
    if n < 4:
        raise ValueError("one_class_svm needs at least 4 points")
    if not 0 < nu <= 1:
        raise ValueError("nu must lie in (0, 1]")
    gamma = median_gamma(x) if gamma is None else float(gamma)
    if gamma <= 0:
        raise ValueError("gamma must be > 0")
    k = _rbf(x, x, gamma)
    c = 1.0 / (nu * n)
    a = np.zeros(n)
    full = int(nu * n)
    a[:full] = c
    if full < n:
        a[full] = 1.0 - full * c
    g = k @ a
    for it in range(max_iter):
        up = a < c - 1e-15
        down = a > 1e-15
        i = np.flatnonzero(up)[np.argmin(g[up])]
        j = np.flatnonzero(down)[np.argmax(g[down])]
        gap = g[j] - g[i]
        if gap < tol:
            break
        curv = max(k[i, i] + k[j, j] - 2 * k[i, j], 1e-12)
        delta = min(gap / curv, c - a[i], a[j])
        a[i] += delta
        a[j] -= delta
        g += delta * (k[:, i] - k[:, j])
    else:
        raise RuntimeError(f"OCSVM did not converge in {max_iter} iterations (KKT gap {gap:.3g})")
    free = (a > 1e-12) & (a < c - 1e-12)
    rho = float(g[free].mean()) if free.any() else float((g[i] + g[j]) / 2)
    keep = a > 0
    return OneClassModel(x[keep], a[keep], rho, gamma)


def one_class_svm(points, nu: float = 0.1, gamma: float | None = None, tol: float = 1e-6):
    """Decision values and outlier flags (decision below -tol) on the training points."""
    model = fit_one_class(points, nu, gamma, tol)
    decision = model.decision(points)
    return decision, decision < -tol


def repeated_outlier_controls(flags, ids) -> list[tuple[str, float]]:
    """Per-id flag frequency over repeats (rows), most frequent first, ties by id."""
    f = np.asarray(flags, dtype=bool)
    if f.ndim != 2 or f.shape[0] < 2:
        raise ValueError("need a (repeats >= 2, n) flag matrix")
    if f.shape[1] != len(ids):
        raise ValueError("one id per column")
    freq = f.mean(axis=0)
    return sorted(((str(i), float(q)) for i, q in zip(ids, freq)), key=lambda t: (-t[1], t[0]))


# ---------------------------------------------------------------- two-sample tests


def _samples(a, b):
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if len(a) == 0 or len(b) == 0:
        raise ValueError("both samples must be nonempty")
    return a, b


def _midranks(v: np.ndarray) -> np.ndarray:
    order = np.argsort(v, kind="stable")
    sv = v[order]
    ranks = np.empty(len(v))
    start = 0
    for end in np.r_[np.nonzero(np.diff(sv))[0] + 1, len(v)]:
        ranks[order[start:end]] = (start + end + 1) / 2.0
        start = end
    return ranks


def _ks_exact_sf(n1: int, n2: int, d: float) -> float:
    """P(D >= d) over all equally likely interleavings of two tie-free samples."""
    # a path visits (i, j) = counts taken from each sample; it exits once |i/n1 - j/n2| >= d
    eps = 1e-12
    prob = np.zeros(n2 + 1)
    prob[0] = 1.0
    exited = 0.0
    for i in range(n1 + 1):
        nxt = np.zeros(n2 + 1)
        for j in range(n2 + 1):
            m = prob[j]
            if m == 0.0 or (i, j) == (n1, n2):
                continue
            left = n1 + n2 - i - j
            for di, dj, w in ((1, 0, (n1 - i) / left), (0, 1, (n2 - j) / left)):
                if w == 0.0:
                    continue
                ii, jj = i + di, j + dj
                if abs(ii / n1 - jj / n2) >= d - eps:
                    exited += m * w
                elif di:
                    nxt[jj] += m * w
                else:
                    prob[jj] += m * w
        prob = nxt
    return min(1.0, exited)


def ks_test(a, b) -> TestResult:
    """Two-sample Kolmogorov-Smirnov; exact null for small samples, asymptotic otherwise."""
    a, b = _samples(a, b)
    n1, n2 = len(a), len(b)
    pooled = np.concatenate([a, b])
    f1 = np.searchsorted(np.sort(a), pooled, side="right") / n1
    f2 = np.searchsorted(np.sort(b), pooled, side="right") / n2
    d = float(np.max(np.abs(f1 - f2)))
    if d == 0:
        p = 1.0
    elif n1 * n2 <= EXACT_PAIRS:
        p = _ks_exact_sf(n1, n2, d)
    else:
        p = float(kolmogorov(math.sqrt(n1 * n2 / (n1 + n2)) * d))
    return TestResult("ks", d, float(min(max(p, 0.0), 1.0)), n1, n2)


def _u_distribution(n1: int, n2: int) -> np.ndarray:
    """P(U = u), u = 0..n1*n2, for tie-free samples."""
    # counts[m][u] for growing n1, built up one sample-2 element at a time
    table = np.zeros((n1 + 1, n1 * n2 + 1))
    table[:, 0] = 1.0
    for j in range(1, n2 + 1):
        new = np.zeros_like(table)
        new[0, 0] = 1.0
        for i in range(1, n1 + 1):
            # largest element belongs to sample 1 (adds j to U) or to sample 2
            new[i, j:] += new[i - 1, : new.shape[1] - j]
            new[i] += table[i]
        table = new
    counts = table[n1]
    return counts / counts.sum()


def mwu_test(a, b) -> TestResult:
    """Mann-Whitney U of sample a, two-sided.

    Exact null for small tie-free samples, else the normal approximation with
    tie and continuity corrections.
    """
    a, b = _samples(a, b)
    n1, n2 = len(a), len(b)
    pooled = np.concatenate([a, b])
    ranks = _midranks(pooled)
    u = float(ranks[:n1].sum() - n1 * (n1 + 1) / 2)
    mean = n1 * n2 / 2
    tied = len(np.unique(pooled)) < len(pooled)
    if not tied and n1 * n2 <= EXACT_PAIRS:
        pmf = _u_distribution(n1, n2)
        k = int(round(u))
        p = 2 * min(pmf[: k + 1].sum(), pmf[k:].sum())
    else:
        _, counts = np.unique(pooled, return_counts=True)
        n = n1 + n2
        var = n1 * n2 / 12 * ((n + 1) - np.sum(counts**3 - counts) / (n * (n - 1)))
        if var <= 0:
            p = 1.0
        else:
            z = max(abs(u - mean) - 0.5, 0.0) / math.sqrt(var)
            p = 2 * norm.sf(z)
    return TestResult("mwu", u, float(min(max(p, 0.0), 1.0)), n1, n2)


# ---------------------------------------------------------------- residuals


def residual_maps(x: VoxelGrid, x_hat: VoxelGrid, noise_floor: float = 0.1) -> ResidualMaps:
    if x.dims != x_hat.dims:
        raise ValueError(f"dims differ: {x.dims} vs {x_hat.dims}")
    diff = np.asarray(x.data, float) - np.asarray(x_hat.data, float)
    om = np.where(diff >= noise_floor, diff, 0.0)
    ad = np.where(-diff >= noise_floor, -diff, 0.0)
    return ResidualMaps(x.replace(om), x.replace(ad), float(noise_floor))


def gap_fill_fraction(res: ResidualMaps, gap_box: BoundingBox) -> float:
    """Share of total additions mass that falls inside the gap box."""
    total = float(res.additions.data.sum())
    if total == 0:
        return 0.0
    return float(res.additions.data[gap_box.slices()].sum()) / total
