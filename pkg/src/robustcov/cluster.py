"""K-means on correlation distances, silhouette-based choice of K and nested
clustered optimization."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.spatial.distance import cdist

from .errors import EmptyClusterUnrecoverable, SingleCluster
from .estimators import CovEstimate
from .spectral import denoise as denoise_cov

__all__ = [
    "Clustering",
    "NcoAllocation",
    "correlation_distance",
    "kmeans",
    "silhouette",
    "quality_z",
    "choose_k",
    "nco_allocate",
]

MAX_ITER = 300
WCSS_RTOL = 1e-9
MAX_RESEEDS = 3


@dataclass(frozen=True)
class Clustering:
    labels: np.ndarray
    K: int
    silhouette: np.ndarray
    quality_z: float
    wcss: float = float("nan")
    scores: dict = field(default_factory=dict)  # K -> quality_z for every K tried

    def members(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.labels == k)

    def to_dict(self) -> dict:
        return {
            "K": int(self.K),
            "labels": [int(v) for v in self.labels],
            "silhouette": [float(v) for v in self.silhouette],
            "quality_z": _json_float(self.quality_z),
            "quality_z_by_k": {str(k): _json_float(v) for k, v in sorted(self.scores.items())},
        }


def _json_float(v: float):
    v = float(v)
    if np.isnan(v):
        return None
    if np.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def correlation_distance(corr) -> np.ndarray:
    c = np.clip(np.asarray(corr, dtype=float), -1.0, 1.0)
    return np.sqrt(0.5 * (1.0 - c))


def _canonical(labels: np.ndarray) -> np.ndarray:
    """Relabel clusters in order of first appearance."""
    _, first = np.unique(labels, return_index=True)
    order = labels[np.sort(first)]
    remap = np.empty(labels.max() + 1, dtype=int)
    remap[order] = np.arange(len(order))
    return remap[labels]


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centers)


def _lloyd(x: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, float]:
    k = centers.shape[0]
    prev = np.inf
    reseeds = 0
    for _ in range(MAX_ITER):
        d2 = cdist(x, centers, "sqeuclidean")
        labels = np.argmin(d2, axis=1)
        counts = np.bincount(labels, minlength=k)
        if np.any(counts == 0):
            reseeds += 1
            if reseeds > MAX_RESEEDS:
                raise EmptyClusterUnrecoverable(f"cluster stayed empty after {MAX_RESEEDS} re-seeds")
            # move each empty centre onto the point worst served by its own centre
            far = np.argsort(-d2[np.arange(len(x)), labels], kind="stable")
            for j, e in enumerate(np.flatnonzero(counts == 0)):
                centers[e] = x[far[j]]
            continue
        centers = np.array([x[labels == j].mean(axis=0) for j in range(k)])
        wcss = float(np.sum((x - centers[labels]) ** 2))
        if prev - wcss <= WCSS_RTOL * max(prev, 1e-300) or wcss == 0.0:
            break
        prev = wcss
    d2 = cdist(x, centers, "sqeuclidean")
    labels = np.argmin(d2, axis=1)
    return labels, float(np.sum(d2[np.arange(len(x)), labels]))


def kmeans(points, K: int, seed: int = 0, restarts: int = 10) -> Clustering:
    """Best-of-``restarts`` Lloyd runs from k-means++ seeds (lowest WCSS, then
    earliest restart)."""
    x = np.asarray(points, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if not 1 <= K <= n:
        raise ValueError(f"K must lie in [1, {n}], got {K}")
    best = None
    for child in np.random.SeedSequence(seed).spawn(restarts):
        rng = np.random.default_rng(child)
        labels, wcss = _lloyd(x, _kmeanspp(x, K, rng))
        if len(np.unique(labels)) < K:
            continue
        if best is None or wcss < best[1]:
            best = (labels, wcss)
    if best is None:
        raise EmptyClusterUnrecoverable("every restart ended with an empty cluster")
    labels = _canonical(best[0])
    if K >= 2 and K < n:
        s = silhouette(x, labels)
    else:
        s = np.zeros(n)
    return Clustering(labels, K, s, quality_z(s) if K >= 2 else float("nan"), best[1])


def silhouette(points, labels) -> np.ndarray:
    """Per-point silhouette; points in singleton clusters score 0."""
    x = np.asarray(points, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    labels = np.asarray(labels)
    ks = np.unique(labels)
    if len(ks) < 2:
        raise SingleCluster("silhouette needs at least two clusters")
    d = cdist(x, x)
    n = len(labels)
    member = labels[:, None] == ks[None, :]  # n x K
    sizes = member.sum(axis=0)
    sums = d @ member  # distance from each point to every cluster, summed
    own = np.searchsorted(ks, labels)
    own_size = sizes[own]
    a = np.divide(sums[np.arange(n), own], own_size - 1, out=np.zeros(n), where=own_size > 1)
    mean_other = sums / sizes
    mean_other[np.arange(n), own] = np.inf
    b = mean_other.min(axis=1)
    denom = np.maximum(a, b)
    s = np.divide(b - a, denom, out=np.zeros(n), where=denom > 0)
    s[own_size == 1] = 0.0
    return s


def quality_z(scores) -> float:
    """Mean silhouette over its standard error."""
    s = np.asarray(scores, dtype=float)
    m = s.mean()
    sd = s.std(ddof=1) if s.size > 1 else 0.0
    if sd == 0:
        return float("inf") if m > 0 else (float("-inf") if m < 0 else 0.0)
    return float(m / (sd / np.sqrt(s.size)))


def choose_k(corr, k_min: int = 2, k_max: int = 4, seed: int = 0, restarts: int = 10) -> Clustering:
    """Cluster assets on correlation-distance rows; keep the K with the largest
    silhouette z-score (smaller K on ties)."""
    feats = correlation_distance(corr)
    n = feats.shape[0]
    k_max = min(k_max, n - 1)
    if k_min > k_max:
        if k_min == 1 or n <= 2:
            return Clustering(np.zeros(n, dtype=int), 1, np.zeros(n), float("nan"))
        raise ValueError(f"no K in [{k_min}, {k_max}] for {n} assets")
    if k_min == 1 and k_max == 1:
        return Clustering(np.zeros(n, dtype=int), 1, np.zeros(n), float("nan"))
    best = None
    scores = {}
    for K in range(max(k_min, 2), k_max + 1):
        c = kmeans(feats, K, seed=seed, restarts=restarts)
        scores[K] = c.quality_z
        if best is None or c.quality_z > best.quality_z:
            best = c
    return Clustering(best.labels, best.K, best.silhouette, best.quality_z, best.wcss, scores)


@dataclass(frozen=True)
class NcoAllocation:
    intra: np.ndarray  # N x K
    inter: np.ndarray  # K
    final: np.ndarray  # N
    clustering: Clustering
    covariance: CovEstimate  # matrix the optimisation ran on


def nco_allocate(
    cov: CovEstimate,
    q: float,
    inner: Callable[[np.ndarray], np.ndarray] | None = None,
    seed: int = 0,
    k_min: int = 2,
    k_max: int = 4,
    restarts: int = 10,
    denoise: bool = True,
    intra: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None,
) -> NcoAllocation:
    """Nested clustered optimization.

    De-noise, cluster the de-noised correlation, optimise inside each cluster,
    collapse clusters into synthetic funds and optimise across them. ``inner``
    maps a covariance block to weights summing to one (default: closed-form
    minimum variance). ``intra``, if given, replaces ``inner`` inside the
    clusters and also receives the member indices.
    """
    if inner is None:
        from .solver import minvar_closed_form as inner
    if denoise:
        v_hat, c_hat = denoise_cov(cov, q)
    else:
        from .estimators import cov_to_corr
        v_hat, c_hat = cov, cov_to_corr(cov.matrix)
    v = v_hat.matrix
    n = v.shape[0]
    clustering = choose_k(c_hat, k_min=k_min, k_max=k_max, seed=seed, restarts=restarts)
    intra_w = np.zeros((n, clustering.K))
    for k in range(clustering.K):
        idx = clustering.members(k)
        if len(idx) == 1:
            intra_w[idx, k] = 1.0
        elif intra is not None:
            intra_w[idx, k] = intra(v[np.ix_(idx, idx)], idx)
        else:
            intra_w[idx, k] = inner(v[np.ix_(idx, idx)])
    v_reduced = intra_w.T @ v @ intra_w
    v_reduced = 0.5 * (v_reduced + v_reduced.T)
    inter = np.ones(1) if clustering.K == 1 else np.asarray(inner(v_reduced), dtype=float)
    final = intra_w @ inter
    return NcoAllocation(intra_w, inter, final, clustering, v_hat)
