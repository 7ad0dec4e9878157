"""Segmentation metrics and cluster-separability analysis."""
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_is_fitted

from ._rng import generator
from .errors import ArgumentError, ShapeError


@dataclass
class LabelMap:
    labels: np.ndarray
    background_id: Optional[int] = None

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.size and not np.issubdtype(labels.dtype, np.integer):
            if not np.all(np.isfinite(labels)) or not np.all(labels == np.round(labels)):
                raise ArgumentError("label maps must hold finite integers")
            labels = labels.astype(np.int64)
        if labels.size and labels.min() < 0:
            raise ArgumentError("label maps must be non-negative")
        self.labels = labels


class SeparabilityReport(NamedTuple):
    inter_cluster: float
    intra_cluster: float
    n_clusters: int

    def ratio(self):
        return self.inter_cluster / self.intra_cluster if self.intra_cluster > 0 else float("inf")


def _labels(x):
    return x.labels if isinstance(x, LabelMap) else np.asarray(x)


def _pair(pred, gt):
    p, g = _labels(pred), _labels(gt)
    if p.shape != g.shape:
        raise ShapeError(f"prediction shape {p.shape} differs from ground truth shape {g.shape}")
    return p.ravel(), g.ravel()


def contingency(pred, gt):
    """Contingency table (pred segments x gt segments)."""
    p, g = _pair(pred, gt)
    _, pi = np.unique(p, return_inverse=True)
    _, gi = np.unique(g, return_inverse=True)
    table = np.zeros((pi.max() + 1 if p.size else 0, gi.max() + 1 if g.size else 0), dtype=np.int64)
    np.add.at(table, (pi, gi), 1)
    return table


def _comb2(x):
    x = np.asarray(x, dtype=np.float64)
    return x * (x - 1) / 2


def ari(pred, gt):
    """Adjusted Rand index; 1.0 when chance correction is undefined."""
    table = contingency(pred, gt)
    n = table.sum()
    total = n * (n - 1) / 2
    if total == 0:
        return 1.0
    index = _comb2(table).sum()
    sum_a = _comb2(table.sum(axis=1)).sum()
    sum_b = _comb2(table.sum(axis=0)).sum()
    expected = sum_a * sum_b / total
    denom = 0.5 * (sum_a + sum_b) - expected
    if denom == 0:
        return 1.0
    return float((index - expected) / denom)


def ari_fg(pred, gt, background_id=None):
    """ARI over pixels whose ground truth is not the background."""
    if background_id is None:
        background_id = gt.background_id if isinstance(gt, LabelMap) else None
    if background_id is None:
        raise ArgumentError("ari_fg needs a background id on the ground truth")
    p, g = _pair(pred, gt)
    fg = g != background_id
    if not fg.any():
        return float("nan")
    return ari(p[fg], g[fg])


def iou_matrix(pred, gt):
    """IoU of every (pred segment, gt segment) pair."""
    table = contingency(pred, gt).astype(np.float64)
    union = table.sum(axis=1)[:, None] + table.sum(axis=0)[None, :] - table
    return table / union


def miou(pred, gt):
    """Mean IoU over gt segments under the optimal one-to-one matching."""
    iou = iou_matrix(pred, gt)
    rows, cols = linear_sum_assignment(iou, maximize=True)
    # per-gt vector reduced like mbo's, so mbo >= miou holds exactly in floats
    matched = np.zeros(iou.shape[1])
    matched[cols] = iou[rows, cols]
    return float(matched.mean())


def mbo(pred, gt):
    """Mean over gt segments of the best IoU with any pred segment."""
    return float(iou_matrix(pred, gt).max(axis=0).mean())


def _features_and_labels(features, labels):
    f = np.asarray(features, dtype=np.float64)
    lab = _labels(labels)
    if f.size == 0 or lab.size == 0:
        raise ArgumentError("cluster separability needs nonempty features and labels")
    if f.shape[:-1] != lab.shape:
        raise ShapeError(f"features {f.shape} do not match labels {lab.shape}")
    return f.reshape(-1, f.shape[-1]), lab.ravel()


def cluster_separability(features, labels):
    """Mean between-centroid distance and mean member-to-centroid distance."""
    f, lab = _features_and_labels(features, labels)
    ids, inv = np.unique(lab, return_inverse=True)
    k = len(ids)
    counts = np.bincount(inv, minlength=k).astype(np.float64)
    sums = np.zeros((k, f.shape[1]))
    np.add.at(sums, inv, f)
    centroids = sums / counts[:, None]
    member = np.linalg.norm(f - centroids[inv], axis=1)
    per_cluster = np.bincount(inv, weights=member, minlength=k) / counts
    intra = float(per_cluster.mean())
    if k < 2:
        return SeparabilityReport(float("nan"), intra, k)
    a, b = np.triu_indices(k, 1)
    inter = float(np.linalg.norm(centroids[a] - centroids[b], axis=1).mean())
    return SeparabilityReport(inter, intra, k)


def _farthest_point_init(x, k, rng):
    first = int(rng.integers(len(x)))
    centers = [first]
    d = np.linalg.norm(x - x[first], axis=1)
    for _ in range(1, k):
        nxt = int(d.argmax())
        centers.append(nxt)
        d = np.minimum(d, np.linalg.norm(x - x[nxt], axis=1))
    return x[centers].copy()


def _lloyd(x, centroids, max_iter, tol):
    for _ in range(max_iter):
        d = np.linalg.norm(x[:, None, :] - centroids[None, :, :], axis=-1)
        assign = d.argmin(axis=1)
        k = len(centroids)
        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, x)
        new = np.where(counts[:, None] > 0, sums / np.maximum(counts, 1)[:, None], centroids)
        shift = np.abs(new - centroids).max()
        centroids = new
        if shift < tol:
            break
    d = np.linalg.norm(x[:, None, :] - centroids[None, :, :], axis=-1)
    return d.argmin(axis=1), centroids


def kmeans_cluster(features, k, seed=0, max_iter=100, tol=1e-6):
    """Lloyd's k-means with seeded farthest-point initialization.

    Returns a label map with the spatial shape of ``features``.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim < 2:
        raise ShapeError(f"features need a channel axis, got shape {f.shape}")
    x = f.reshape(-1, f.shape[-1])
    if int(k) != k or k < 1:
        raise ArgumentError(f"k must be a positive integer, got {k!r}")
    if k > len(x):
        raise ArgumentError(f"k={k} exceeds the {len(x)} available super-pixels")
    centroids = _farthest_point_init(x, int(k), generator(seed, "kmeans"))
    labels, _ = _lloyd(x, centroids, max_iter, tol)
    return LabelMap(labels.reshape(f.shape[:-1]))


class SeededKMeans(BaseEstimator, ClusterMixin):
    def __init__(self, n_clusters=8, random_state=0, max_iter=100, tol=1e-6):
        self.n_clusters = n_clusters
        self.random_state = random_state
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, y=None):
        f = np.asarray(X, dtype=np.float64)
        x = f.reshape(-1, f.shape[-1])
        if self.n_clusters > len(x):
            raise ArgumentError(f"k={self.n_clusters} exceeds the {len(x)} available samples")
        init = _farthest_point_init(x, self.n_clusters, generator(self.random_state, "kmeans"))
        labels, self.cluster_centers_ = _lloyd(x, init, self.max_iter, self.tol)
        self.labels_ = labels.reshape(f.shape[:-1])
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        f = np.asarray(X, dtype=np.float64)
        x = f.reshape(-1, f.shape[-1])
        d = np.linalg.norm(x[:, None, :] - self.cluster_centers_[None], axis=-1)
        return d.argmin(axis=1).reshape(f.shape[:-1])


def evaluate(pred, gt, features=None, background_id=0):
    """All segmentation metrics plus separability of ``features`` under ``pred``."""
    report = {
        "ari": ari(pred, gt),
        "ari_fg": ari_fg(pred, gt, background_id),
        "miou": miou(pred, gt),
        "mbo": mbo(pred, gt),
    }
    if features is not None:
        sep = cluster_separability(features, pred)
        report.update(inter_cluster=sep.inter_cluster, intra_cluster=sep.intra_cluster,
                      n_clusters=sep.n_clusters)
    else:
        report.update(inter_cluster=None, intra_cluster=None, n_clusters=None)
    return report
