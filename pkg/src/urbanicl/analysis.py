"""Evaluation metrics and the analysis tools used around the model.

MAE / RMSE / PCC, the composite scaling metric, Epanechnikov KDE, an
exponential scaling-law fit, k-means over region embeddings, and the
two-stage ridge probe on frozen embeddings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError, NumericalError


@dataclass(frozen=True)
class MetricReport:
    mae: float
    rmse: float
    pcc: float
    n: int
    task: str = ""

    def to_json(self) -> dict:
        return {"task": self.task, "mae": self.mae, "rmse": self.rmse, "pcc": self.pcc, "n": self.n}


@dataclass(frozen=True)
class ScalingFit:
    a: float
    b: float
    r_squared: float

    def __call__(self, x):
        return self.a * np.exp(self.b * np.asarray(x, dtype=np.float64))

    def to_json(self) -> dict:
        return {"a": self.a, "b": self.b, "r2": self.r_squared}


def _pair(pred, truth):
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.shape != truth.shape:
        raise DataError(f"prediction and truth lengths differ: {pred.size} vs {truth.size}")
    if pred.size == 0:
        raise DataError("cannot score empty vectors")
    return pred, truth


def mae(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    return float(np.mean(np.abs(pred - truth)))


def rmse(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    d = pred - truth
    return float(np.sqrt(np.mean(d * d)))


def pcc(pred, truth) -> float:
    """Pearson correlation; raises when either vector is constant."""
    pred, truth = _pair(pred, truth)
    dp = pred - pred.mean()
    dt = truth - truth.mean()
    sp = math.sqrt(float(np.dot(dp, dp)))
    st = math.sqrt(float(np.dot(dt, dt)))
    if sp == 0 or st == 0:
        which = "prediction" if sp == 0 else "truth"
        raise NumericalError(f"PCC is undefined: the {which} vector is constant")
    return float(np.clip(np.dot(dp, dt) / (sp * st), -1.0, 1.0))


def evaluate(pred, truth, task: str = "") -> MetricReport:
    pred, truth = _pair(pred, truth)
    return MetricReport(mae(pred, truth), rmse(pred, truth), pcc(pred, truth), int(pred.size), task)


def composite_loss(reports: Sequence[MetricReport]) -> float:
    """``sum(MAE) + sum(RMSE) - sum(PCC)`` over tasks."""
    if not reports:
        raise DataError("composite loss needs at least one report")
    return float(sum(r.mae for r in reports) + sum(r.rmse for r in reports) - sum(r.pcc for r in reports))


def mean_report(reports: Sequence[MetricReport], task: str = "") -> MetricReport:
    """Average several runs (e.g. seeds) of the same task."""
    if not reports:
        raise DataError("nothing to aggregate")
    return MetricReport(
        float(np.mean([r.mae for r in reports])),
        float(np.mean([r.rmse for r in reports])),
        float(np.mean([r.pcc for r in reports])),
        reports[0].n,
        task or reports[0].task,
    )


# density estimation ---------------------------------------------------------


def epanechnikov(u):
    u = np.asarray(u, dtype=np.float64)
    return np.where(np.abs(u) <= 1.0, 0.75 * (1.0 - u * u), 0.0)


def default_bandwidth(samples) -> float:
    """Rule-of-thumb ``1.06 * std * n^(-1/5)``; falls back to 1 for degenerate samples."""
    s = np.asarray(samples, dtype=np.float64).ravel()
    sd = float(np.std(s, ddof=1)) if s.size > 1 else 0.0
    h = 1.06 * sd * s.size ** (-0.2)
    return h if h > 0 else 1.0


def epanechnikov_kde(samples, bandwidth: float, query_points) -> np.ndarray:
    s = np.asarray(samples, dtype=np.float64).ravel()
    x = np.asarray(query_points, dtype=np.float64)
    if not bandwidth > 0:
        raise ConfigError(f"bandwidth must be > 0, got {bandwidth}")
    if s.size == 0:
        raise DataError("KDE needs at least one sample")
    flat = x.ravel()
    out = np.empty(flat.size)
    step = max(1, 2**20 // s.size)
    for start in range(0, flat.size, step):
        chunk = flat[start : start + step]
        out[start : start + step] = epanechnikov((chunk[:, None] - s[None, :]) / bandwidth).sum(axis=1)
    return (out / (s.size * bandwidth)).reshape(x.shape)


def kde_grid(samples, bandwidth: float, n_points: int = 512) -> np.ndarray:
    """Evenly spaced grid covering the full kernel support of the samples."""
    s = np.asarray(samples, dtype=np.float64).ravel()
    return np.linspace(s.min() - bandwidth, s.max() + bandwidth, n_points)


# scaling law ---------------------------------------------------------------


def fit_scaling_law(x, y) -> ScalingFit:
    """Fit ``y = a * exp(b * x)`` by least squares on ``log y``; R^2 in log space."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise DataError(f"x and y lengths differ: {x.size} vs {y.size}")
    if x.size < 3:
        raise DataError(f"scaling fit needs at least 3 points, got {x.size}")
    if np.any(y <= 0):
        raise DataError("scaling fit needs y > 0 everywhere (log-space fit)")
    ly = np.log(y)
    xc = x - x.mean()
    sxx = float(np.dot(xc, xc))
    if sxx == 0:
        raise DataError("scaling fit needs at least two distinct x values")
    b = float(np.dot(xc, ly - ly.mean()) / sxx)
    log_a = float(ly.mean() - b * x.mean())
    resid = ly - (log_a + b * x)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    ss_res = float(np.dot(resid, resid))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return ScalingFit(math.exp(log_a), b, r2)


# clustering ----------------------------------------------------------------


def _sq_dists(points, centroids):
    d = (points * points).sum(1)[:, None] - 2.0 * points @ centroids.T + (centroids * centroids).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeanspp(points, k, rng):
    n = len(points)
    centroids = [points[rng.integers(n)]]
    closest = _sq_dists(points, centroids[0][None])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centroids.append(points[idx])
        closest = np.minimum(closest, _sq_dists(points, points[idx][None])[:, 0])
    return np.array(centroids)


def kmeans(points, k: int, seed: int = 0, max_iter: int = 300, return_history: bool = False):
    """Lloyd's algorithm from k-means++ seeds.

    Stops when assignments stop changing or after ``max_iter`` rounds. An
    emptied cluster keeps its previous centroid. With ``return_history`` the
    within-cluster sum of squares after every update is returned as well.
    """
    X = np.asarray(points, dtype=np.float64)
    if X.ndim != 2:
        raise DataError(f"points must be an (N, D) matrix, got shape {X.shape}")
    if not 1 <= k <= len(X):
        raise ConfigError(f"k must be in [1, N={len(X)}], got {k}")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp(X, k, rng)
    labels = np.argmin(_sq_dists(X, centroids), axis=1)
    history = []
    for _ in range(max_iter):
        for j in range(k):
            members = X[labels == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
        d = _sq_dists(X, centroids)
        history.append(float(d[np.arange(len(X)), labels].sum()))
        new_labels = np.argmin(d, axis=1)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    if return_history:
        return labels, centroids, history
    return labels, centroids


def within_cluster_ss(points, labels, centroids) -> float:
    X = np.asarray(points, dtype=np.float64)
    diff = X - centroids[labels]
    return float((diff * diff).sum())


# two-stage baseline --------------------------------------------------------


def linear_probe_baseline(embeddings, y_train, train_idx, test_idx, ridge: float = 1e-3) -> np.ndarray:
    """Ridge regression from frozen region embeddings to indicator values.

    Fits on ``train_idx`` rows with an unpenalised intercept and predicts the
    ``test_idx`` rows.
    """
    E = np.asarray(getattr(embeddings, "matrix", embeddings), dtype=np.float64)
    train_idx = np.asarray(train_idx, dtype=np.int64)
    test_idx = np.asarray(test_idx, dtype=np.int64)
    y = np.asarray(y_train, dtype=np.float64).ravel()
    if ridge < 0:
        raise ConfigError(f"ridge must be >= 0, got {ridge}")
    if len(y) != len(train_idx):
        raise DataError(f"{len(y)} training values for {len(train_idx)} training regions")
    if len(train_idx) == 0:
        raise DataError("linear probe needs at least one training region")
    for idx in (train_idx, test_idx):
        if np.any(idx < 0) or np.any(idx >= len(E)):
            raise DataError("region index out of range")
    if np.intersect1d(train_idx, test_idx).size:
        raise DataError("train and test regions overlap")
    X = E[train_idx]
    x_mean, y_mean = X.mean(axis=0), y.mean()
    Xc = X - x_mean
    gram = Xc.T @ Xc
    if ridge == 0 and np.linalg.matrix_rank(Xc) < X.shape[1]:
        raise NumericalError("probe design is singular with ridge=0; use ridge > 0")
    w = np.linalg.solve(gram + ridge * np.eye(X.shape[1]), Xc.T @ (y - y_mean))
    return (E[test_idx] - x_mean) @ w + y_mean
