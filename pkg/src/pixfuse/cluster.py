"""Per-scene k-means overclustering and marker-cluster selection.

Each scene's optical pixels are overclustered with k=8 and its SAR pixels
with k=4 (configurable); the per-cluster mean index values then pick out the
extreme clusters (highest NDVI/NDWI/BI, highest/lowest backscatter) and the
medium-rank NDVI/BI clusters that the sample-collection rules use.  Feature
vectors are standardized per scene and per channel since band scales differ
by orders of magnitude.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .scenes import Scene
from .spectral import IndexMaps


@dataclass(frozen=True)
class ClusterAssignment:
    labels: np.ndarray     # [H, W] (or [N]) int32 cluster ids in [0, k)
    centroids: np.ndarray  # [k, D] float64, in the (standardized) feature space
    inertia: float
    inertia_history: tuple[float, ...] = ()

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


@dataclass(frozen=True)
class ClusterStats:
    mean_ndvi: np.ndarray
    mean_ndwi: np.ndarray
    mean_bi: np.ndarray
    mean_bs: np.ndarray
    pixel_count: np.ndarray

    @property
    def k(self) -> int:
        return len(self.pixel_count)


@dataclass(frozen=True)
class MarkerClusters:
    h_ndvi: int
    h_ndwi: int
    h_bi: int
    m_ndvi: int
    m_bi: int
    h_bs: int
    l_bs: int


def kmeans(
    pixels: np.ndarray,
    k: int,
    seed: int,
    max_iters: int = 100,
    tol: float = 1e-4,
) -> ClusterAssignment:
    """Lloyd's algorithm with k-means++ seeding, deterministic given seed.

    Stops when the largest centroid movement drops below `tol` or after
    `max_iters`.  An emptied cluster is re-seeded at the point farthest from
    its nearest centroid so every cluster stays populated.
    """
    x = np.asarray(pixels, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 1:
        raise ConfigError(f"pixels must be [N, D], got {x.shape}")
    n = x.shape[0]
    if n < k:
        raise ConfigError(f"need at least k={k} points, got {n}")

    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(x, k, rng)
    history: list[float] = []
    for _ in range(max_iters):
        d2 = _sq_dists(x, centroids)
        labels = d2.argmin(axis=1)
        nearest = d2[np.arange(n), labels]
        history.append(float(nearest.sum()))
        new_centroids = centroids.copy()
        for c in range(k):
            members = labels == c
            if members.any():
                new_centroids[c] = x[members].mean(axis=0)
            else:
                far = int(nearest.argmax())
                new_centroids[c] = x[far]
                nearest[far] = 0.0
        move = np.sqrt(((new_centroids - centroids) ** 2).sum(axis=1)).max()
        centroids = new_centroids
        if move < tol:
            break
    d2 = _sq_dists(x, centroids)
    labels = d2.argmin(axis=1)
    inertia = float(d2[np.arange(n), labels].sum())
    history.append(inertia)
    return ClusterAssignment(
        labels=labels.astype(np.int32),
        centroids=centroids,
        inertia=inertia,
        inertia_history=tuple(history),
    )


def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # ||x - c||^2 without forming the [N, k, D] intermediate
    d2 = (
        (x * x).sum(axis=1)[:, None]
        - 2.0 * x @ centers.T
        + (centers * centers).sum(axis=1)[None, :]
    )
    return np.maximum(d2, 0.0)


def _kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]), dtype=np.float64)
    centers[0] = x[rng.integers(n)]
    d2 = _sq_dists(x, centers[:1]).ravel()
    for c in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[c:] = x[rng.integers(n, size=k - c)]
            break
        probs = d2 / total
        idx = int(rng.choice(n, p=probs))
        centers[c] = x[idx]
        d2 = np.minimum(d2, _sq_dists(x, centers[c:c + 1]).ravel())
    return centers


def standardize(feats: np.ndarray) -> np.ndarray:
    """Zero-mean unit-variance per channel; constant channels stay zero."""
    mu = feats.mean(axis=0)
    sd = feats.std(axis=0)
    sd = np.where(sd < 1e-12, 1.0, sd)
    return (feats - mu) / sd


def overcluster_scene(
    scene: Scene,
    k_s2: int = 8,
    k_s1: int = 4,
    seed: int = 0,
    max_iters: int = 100,
    tol: float = 1e-4,
) -> tuple[ClusterAssignment, ClusterAssignment]:
    """k-means on the optical bands and on the SAR dB channels of one scene."""
    h, w = scene.height, scene.width
    opt = standardize(scene.optical.reshape(scene.optical.shape[0], -1).T)
    sar = standardize(scene.sar.reshape(2, -1).T)
    a2 = kmeans(opt, k_s2, seed=seed, max_iters=max_iters, tol=tol)
    a1 = kmeans(sar, k_s1, seed=seed + 1, max_iters=max_iters, tol=tol)
    return (
        ClusterAssignment(a2.labels.reshape(h, w), a2.centroids, a2.inertia, a2.inertia_history),
        ClusterAssignment(a1.labels.reshape(h, w), a1.centroids, a1.inertia, a1.inertia_history),
    )


def cluster_stats(assign: ClusterAssignment, idx: IndexMaps) -> ClusterStats:
    labels = assign.labels.ravel()
    k = assign.k
    if labels.size != idx.ndvi.size:
        raise ConfigError("assignment and index maps disagree on pixel count")
    counts = np.bincount(labels, minlength=k).astype(np.int64)
    safe = np.maximum(counts, 1)

    def mean_of(v: np.ndarray) -> np.ndarray:
        return np.bincount(labels, weights=v.ravel().astype(np.float64), minlength=k) / safe

    return ClusterStats(
        mean_ndvi=mean_of(idx.ndvi),
        mean_ndwi=mean_of(idx.ndwi),
        mean_bi=mean_of(idx.bi),
        mean_bs=mean_of(idx.bs),
        pixel_count=counts,
    )


def _argmax_low_id(values: np.ndarray) -> int:
    return int(values.argmax())  # argmax already prefers the lowest index on ties


def _argmin_low_id(values: np.ndarray) -> int:
    return int(values.argmin())


def _medium_rank(values: np.ndarray) -> int:
    """Cluster id at ascending rank floor(k/2); ties broken by lower id."""
    k = len(values)
    order = np.lexsort((np.arange(k), values))
    return int(order[k // 2])


def select_markers(stats_s2: ClusterStats, stats_s1: ClusterStats) -> MarkerClusters:
    if stats_s2.k < 3:
        raise ConfigError("optical clustering needs k >= 3 for a medium rank")
    if stats_s1.k < 2:
        raise ConfigError("SAR clustering needs k >= 2")
    return MarkerClusters(
        h_ndvi=_argmax_low_id(stats_s2.mean_ndvi),
        h_ndwi=_argmax_low_id(stats_s2.mean_ndwi),
        h_bi=_argmax_low_id(stats_s2.mean_bi),
        m_ndvi=_medium_rank(stats_s2.mean_ndvi),
        m_bi=_medium_rank(stats_s2.mean_bi),
        h_bs=_argmax_low_id(stats_s1.mean_bs),
        l_bs=_argmin_low_id(stats_s1.mean_bs),
    )
