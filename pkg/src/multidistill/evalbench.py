"""Evaluation and diagnostics over frozen models.

Four read-only analyses (nearest-neighbor classification, closed-form linear
probe, position-bias estimation, PCA feature visualization) plus a wall-clock
attention benchmark with pinned threads. Everything here is deterministic
given its seed arguments; nothing mutates a model.
"""

from __future__ import annotations

import csv
import os
import statistics
import time
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .geometry import FeatureGrid, PatchGrid
from .student import DivisibilityError, StudentConfig, attention_flops, forward, init_params, resolve_schedule

BENCH_HEADER = ("variant", "resolution", "window", "warmup", "trials", "median_s", "flops")
SKIP_HEADER = ("variant", "resolution", "window", "reason")
EVAL_HEADER = ("task", "metric", "value", "seed")

# Eigenvalues at or below this fraction of the leading one count as zero when
# deciding whether a principal component carries signal.
_PCA_RANK_TOL = 1e-10


# ---------------------------------------------------------------------------
# k-nearest-neighbor classification


def knn_classify(
    train_x: np.ndarray, train_y: np.ndarray, query: np.ndarray, k: int = 20
) -> int:
    """Majority label among the k training vectors nearest in cosine distance.

    Vote ties break by smallest mean distance within the k set, then by
    smallest label index, so the decision is total and deterministic.
    """
    train_x = np.asarray(train_x, dtype=float)
    train_y = np.asarray(train_y)
    if train_x.ndim != 2 or len(train_x) == 0:
        raise ValueError("training set must be a nonempty (N, C) array")
    if len(train_x) != len(train_y):
        raise ValueError("training vectors and labels disagree in length")
    if not 1 <= k <= len(train_x):
        raise ValueError(f"k must lie in [1, {len(train_x)}], got {k}")
    q = np.asarray(query, dtype=float)
    qn = q / max(float(np.linalg.norm(q)), 1e-12)
    tn = train_x / np.maximum(np.linalg.norm(train_x, axis=1, keepdims=True), 1e-12)
    dist = 1.0 - tn @ qn
    order = np.argsort(dist, kind="stable")[:k]
    candidates = {}
    for idx in order:
        label = int(train_y[idx])
        cnt, total = candidates.get(label, (0, 0.0))
        candidates[label] = (cnt + 1, total + float(dist[idx]))
    ranked = sorted(
        ((-cnt, total / cnt, label) for label, (cnt, total) in candidates.items())
    )
    return ranked[0][2]


# ---------------------------------------------------------------------------
# linear probe


def ridge_weights(
    x: np.ndarray, y: np.ndarray, classes: int, l2: float
) -> np.ndarray:
    """One-vs-all ridge solution, (C+1, classes), bias row last.

    Normal equations are normalized by the sample count, so duplicating the
    data set leaves the solution unchanged. The regularizer is floored to
    keep the system invertible.
    """
    x = np.asarray(x, dtype=float)
    n = len(x)
    lam = max(float(l2), 1e-8)
    xb = np.concatenate([x, np.ones((n, 1))], axis=1)
    targets = np.zeros((n, classes))
    targets[np.arange(n), np.asarray(y, dtype=int)] = 1.0
    gram = xb.T @ xb / n + lam * np.eye(xb.shape[1])
    rhs = xb.T @ targets / n
    return np.linalg.solve(gram, rhs)


def probe_predict(weights: np.ndarray, x: np.ndarray) -> np.ndarray:
    xb = np.concatenate([np.asarray(x, float), np.ones((len(x), 1))], axis=1)
    return np.argmax(xb @ weights, axis=1)


def linear_probe(
    x: np.ndarray,
    y: np.ndarray,
    l2: float = 1e-3,
    train_frac: float = 0.8,
    seed: int = 0,
) -> float:
    """Held-out accuracy of a closed-form one-vs-all ridge classifier.

    The split is a seeded shuffle, so the number is reproducible run to run.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=int)
    if len(x) != len(y):
        raise ValueError("features and labels disagree in length")
    classes = int(y.max()) + 1 if len(y) else 0
    if classes < 2 or len(np.unique(y)) < 2:
        raise ValueError("probe needs at least 2 classes")
    if not 0.0 < train_frac < 1.0:
        raise ValueError("train_frac must lie strictly between 0 and 1")
    order = np.random.default_rng(seed).permutation(len(x))
    cut = max(int(round(train_frac * len(x))), 1)
    if cut >= len(x):
        cut = len(x) - 1
    tr, te = order[:cut], order[cut:]
    w = ridge_weights(x[tr], y[tr], classes, l2)
    pred = probe_predict(w, x[te])
    return float(np.mean(pred == y[te]))


# ---------------------------------------------------------------------------
# position-bias estimation


def fpn_from_features(grids: Sequence[FeatureGrid]) -> tuple[np.ndarray, float]:
    """Estimate the position-locked component of a feature producer.

    g_hat at each position is the across-image mean feature minus the global
    mean over positions; the energy is the positional mean of ||g_hat||^2.
    Content that moves freely with the input averages toward zero as the
    image count grows, so what remains is the frame-locked part.
    """
    grids = list(grids)
    if len(grids) < 2:
        raise ValueError("bias estimation needs at least 2 images")
    shape = grids[0].data.shape
    for g in grids[1:]:
        if g.data.shape != shape:
            raise ValueError(f"feature shape mismatch: {g.data.shape} vs {shape}")
    stack = np.stack([g.data for g in grids])
    pos_mean = stack.mean(axis=0)
    g_hat = pos_mean - pos_mean.mean(axis=(0, 1))
    energy = float(np.mean(np.sum(g_hat * g_hat, axis=2)))
    return g_hat, energy


def fpn_estimate(
    feature_fn: Callable[[np.ndarray], FeatureGrid], images: Iterable[np.ndarray]
) -> tuple[np.ndarray, float]:
    """Run a feature producer over an image set and estimate its position bias."""
    return fpn_from_features([feature_fn(img) for img in images])


# ---------------------------------------------------------------------------
# PCA visualization


def pca_components(
    vectors: np.ndarray, n: int = 3
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Top-n principal directions of a vector cloud, via SVD.

    Returns (mean, components (n, C), variances (n,)). Each component's
    largest-magnitude loading is made positive, fixing the sign so repeated
    runs and platforms agree.
    """
    v = np.asarray(vectors, dtype=float)
    if v.ndim != 2:
        raise ValueError("expected an (N, C) vector array")
    if v.shape[0] < n or v.shape[1] < n:
        raise ValueError(f"need at least {n} vectors and {n} channels, got {v.shape}")
    mean = v.mean(axis=0)
    centered = v - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:n].copy()
    variances = (s[:n] ** 2) / v.shape[0]
    if len(variances) < n:
        variances = np.pad(variances, (0, n - len(variances)))
        comps = np.pad(comps, ((0, n - comps.shape[0]), (0, 0)))
    for row in comps:
        i = int(np.argmax(np.abs(row)))
        if row[i] < 0:
            row *= -1.0
    return mean, comps, variances


def pca_map(grids: Sequence[FeatureGrid]) -> list[np.ndarray]:
    """Project each grid onto the pooled top-3 components, scaled to RGB.

    Scaling is per-component min-max over the whole set, so the same color
    means the same projection value in every output. Components whose
    variance is numerically zero render as mid-gray.
    """
    grids = list(grids)
    if not grids:
        raise ValueError("no feature grids given")
    pooled = np.concatenate([g.data.reshape(-1, g.channels) for g in grids])
    mean, comps, variances = pca_components(pooled, n=3)
    lead = max(float(variances[0]), 1e-300)
    alive = variances > _PCA_RANK_TOL * lead
    projs = [(g.data - mean) @ comps.T for g in grids]
    pooled_proj = np.concatenate([p.reshape(-1, 3) for p in projs])
    lo = pooled_proj.min(axis=0)
    hi = pooled_proj.max(axis=0)
    span = hi - lo
    out = []
    for p in projs:
        img = np.full(p.shape[:2] + (3,), 128, dtype=np.uint8)
        for c in range(3):
            if alive[c] and span[c] > 0:
                img[:, :, c] = np.round((p[:, :, c] - lo[c]) / span[c] * 255).astype(np.uint8)
        out.append(img)
    return out


def write_ppm(path: str, img: np.ndarray) -> None:
    """Binary 8-bit P6 image, bit-exact across platforms."""
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("P6 wants a (H, W, 3) uint8 array")
    h, w, _ = img.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def pca_rgb(grids: Sequence[FeatureGrid], out_dir: str, prefix: str = "pca") -> list[str]:
    """Write one PPM per input grid; returns the paths written."""
    import os

    images = pca_map(grids)
    paths = []
    for i, img in enumerate(images):
        path = os.path.join(out_dir, f"{prefix}_{i:03d}.ppm")
        write_ppm(path, img)
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# attention latency benchmark


@dataclass(frozen=True)
class BenchRecord:
    variant: str
    resolution: int
    window: str  # "global", a window size, or "mixed"
    warmup: int
    trials: int
    median_s: float
    flops: int

    def __post_init__(self):
        if self.trials < 5:
            raise ValueError("latency medians need at least 5 trials")
        if self.median_s <= 0:
            raise ValueError("latency must be positive")


@dataclass(frozen=True)
class BenchSkip:
    variant: str
    resolution: int
    window: str
    reason: str


def _window_desc(cfg: StudentConfig) -> str:
    sizes = sorted({s.window for s in cfg.schedule if s.window is not None})
    if not sizes:
        return "global"
    if len(sizes) == 1:
        return str(sizes[0])
    return "mixed"


def bench_attention(
    variants: Sequence[tuple[str, StudentConfig]],
    resolutions: Sequence[int],
    warmup: int = 2,
    trials: int = 5,
    threads: int = 1,
    seed: int = 0,
) -> tuple[list[BenchRecord], list[BenchSkip]]:
    """Median wall-clock of a full forward per (variant, resolution).

    Thread count is pinned for the whole measurement so medians compare
    across machines with different BLAS defaults. Pairs that violate the
    window/resolution divisibility constraint are skipped, with the reason
    recorded rather than raised: a sweep should survive an incompatible cell.
    """
    if warmup < 2:
        raise ValueError("need at least 2 warmup runs")
    if trials < 5:
        raise ValueError("need at least 5 trials")
    rng = np.random.default_rng(seed)
    records: list[BenchRecord] = []
    skips: list[BenchSkip] = []
    params_cache: dict[int, dict] = {}
    for label, cfg in variants:
        wdesc = _window_desc(cfg)
        if id(cfg) not in params_cache:
            params_cache[id(cfg)] = init_params(cfg, np.random.default_rng(seed))
        params = params_cache[id(cfg)]
        for res in resolutions:
            if res % cfg.patch:
                skips.append(
                    BenchSkip(label, res, wdesc, f"divisibility: {res}px is not a multiple of patch {cfg.patch}")
                )
                continue
            side = res // cfg.patch
            try:
                resolve_schedule(cfg, PatchGrid(side, side, cfg.patch))
            except DivisibilityError as exc:
                skips.append(BenchSkip(label, res, wdesc, f"divisibility: {exc}"))
                continue
            image = rng.random((res, res, 3))
            times = []
            with threadpool_limits(limits=threads):
                for _ in range(warmup):
                    forward(cfg, params, image)
                for _ in range(trials):
                    t0 = time.perf_counter()
                    forward(cfg, params, image)
                    times.append(time.perf_counter() - t0)
            records.append(
                BenchRecord(
                    variant=label,
                    resolution=res,
                    window=wdesc,
                    warmup=warmup,
                    trials=trials,
                    median_s=float(statistics.median(times)),
                    flops=attention_flops(cfg, PatchGrid(side, side, cfg.patch)),
                )
            )
    return records, skips


# ---------------------------------------------------------------------------
# CSV emission


def write_bench_csv(path: str, records: Sequence[BenchRecord]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(BENCH_HEADER)
        for r in records:
            w.writerow([r.variant, r.resolution, r.window, r.warmup, r.trials, repr(r.median_s), r.flops])


def write_bench_skips_csv(path: str, skips: Sequence[BenchSkip]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SKIP_HEADER)
        for s in skips:
            w.writerow([s.variant, s.resolution, s.window, s.reason])


def write_eval_csv(path: str, rows: Sequence[tuple[str, str, float, int]]) -> None:
    """Rows are (task, metric, value, seed). Appends so successive
    evaluation commands aimed at one output directory accumulate."""
    fresh = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as f:
        w = csv.writer(f)
        if fresh:
            w.writerow(EVAL_HEADER)
        for task, metric, value, seed in rows:
            w.writerow([task, metric, repr(float(value)), seed])
