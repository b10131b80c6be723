"""Autonomous labeling of discovered packets.

Feature maps from the classifier's 128-wide dense layer are min-max
normalized per packet, reduced with PCA, and clustered with K-means for every
k up to k_max. The k whose BIC drops the most relative to k - 1 wins.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import nn
from .errors import NothingToLabelError, ValidationError

log = logging.getLogger(__name__)

R_FLOOR = 1e-12
CONVERGENCE_TOL = 1e-9


@dataclass
class FeatureMatrix:
    columns: np.ndarray  # (W, V): one column per packet
    packet_index: np.ndarray

    @property
    def width(self) -> int:
        return self.columns.shape[0]

    def __len__(self) -> int:
        return self.columns.shape[1]


@dataclass
class PrincipalComponents:
    points: np.ndarray  # (V, q) projections of the centered samples
    eigenvalues: np.ndarray  # all W, descending, negatives clamped to 0
    explained_ratio: np.ndarray
    components: np.ndarray  # (W, W) eigenvectors as columns
    mean: np.ndarray
    q: int


@dataclass
class ClusterModel:
    centroids: np.ndarray  # (k, q)
    assignment: np.ndarray
    r: float  # sum over points of the Euclidean distance to their centroid
    objective: float  # sum of squared distances
    iterations: int = 0
    objective_history: list = field(default_factory=list, repr=False)

    @property
    def k(self) -> int:
        return len(self.centroids)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.k)


@dataclass
class AutoClusterResult:
    model: ClusterModel
    labels: np.ndarray
    k: int
    bic_table: list  # [{"k", "bic", "r", "objective", "delta_bic"}]
    degenerate: bool = False

    def report(self) -> dict:
        return {"chosen_k": self.k, "degenerate_input": self.degenerate,
                "cluster_sizes": self.model.sizes().tolist(), "bic_table": self.bic_table}


def assemble_features(model: nn.NeuralModel, vectors: np.ndarray, packet_index=None) -> FeatureMatrix:
    """Stack the tapped feature map of each packet as a column."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if len(vectors) == 0:
        raise NothingToLabelError("no discovered packets to label")
    _, feats = nn.forward(model, vectors.reshape(len(vectors), -1))
    index = np.arange(len(vectors)) if packet_index is None else np.asarray(packet_index)
    return FeatureMatrix(np.ascontiguousarray(feats.T), index)


def mapminmax(y: np.ndarray) -> np.ndarray:
    """Scale a vector to [0, 1]; zero or constant vectors map to all zeros."""
    y = np.asarray(y, dtype=np.float64)
    lo, hi = y.min(), y.max()
    if hi - lo <= 0:
        return np.zeros_like(y)
    return (y - lo) / (hi - lo)


def mapminmax_columns(matrix: np.ndarray) -> np.ndarray:
    m = np.asarray(matrix, dtype=np.float64)
    lo = m.min(axis=0, keepdims=True)
    span = m.max(axis=0, keepdims=True) - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (m - lo) / safe, 0.0)


def _fix_signs(vectors: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    out = vectors.copy()
    for j in range(out.shape[1]):
        nz = np.flatnonzero(np.abs(out[:, j]) > tol)
        if nz.size and out[nz[0], j] < 0:
            out[:, j] = -out[:, j]
    return out


def pca(matrix: np.ndarray, variance_target: float = 0.95) -> PrincipalComponents:
    """PCA over the columns (samples) of a (W, V) matrix.

    Keeps the fewest leading components whose cumulative explained variance
    reaches ``variance_target``.
    """
    y = np.asarray(matrix, dtype=np.float64)
    if y.ndim != 2 or y.shape[1] < 2:
        raise ValidationError("PCA needs at least two samples (columns)")
    if not (0.0 < variance_target <= 1.0):
        raise ValidationError("variance_target must lie in (0, 1]")
    mean = y.mean(axis=1)
    centered = y - mean[:, None]
    cov = centered @ centered.T / (y.shape[1] - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals, kind="stable")[::-1]
    vals = np.clip(vals[order], 0.0, None)
    vecs = _fix_signs(vecs[:, order])
    total = vals.sum()
    if total <= 0:
        ratio = np.zeros_like(vals)
        q = 1
    else:
        # numerically-zero eigenvalues carry no variance
        vals = np.where(vals > vals[0] * 1e-12, vals, 0.0)
        ratio = vals / vals.sum()
        cumulative = np.cumsum(ratio)
        q = int(np.searchsorted(cumulative, variance_target - 1e-12) + 1)
        q = min(q, int(np.count_nonzero(vals)))
    points = centered.T @ vecs[:, :q]
    return PrincipalComponents(points, vals, ratio, vecs, mean, q)


def _sq_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("vkq,vkq->vk", diff, diff)


def cluster_r(points: np.ndarray, centroids: np.ndarray, assignment: np.ndarray) -> float:
    """Sum of Euclidean distances from each point to its assigned centroid."""
    d = points - centroids[assignment]
    return float(np.sqrt(np.einsum("vq,vq->v", d, d)).sum())


def kmeans(points: np.ndarray, k: int, seed, max_iters: int = 300) -> ClusterModel:
    """Lloyd's algorithm from ``k`` distinct randomly chosen points.

    An emptied cluster keeps its previous centroid. Stops once centroids move
    less than 1e-9 and assignments are stable, or after ``max_iters``.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    v = len(pts)
    if k < 1 or k > v:
        raise ValidationError(f"k={k} must lie in [1, {v}]")
    rng = np.random.default_rng(seed)
    _, first_idx = np.unique(pts, axis=0, return_index=True)
    pool = np.sort(first_idx) if len(first_idx) >= k else np.arange(v)
    centroids = pts[np.sort(rng.choice(pool, size=k, replace=False))].copy()

    assignment = _sq_distances(pts, centroids).argmin(axis=1)
    history = []
    iterations = 0
    for iterations in range(1, max_iters + 1):
        new = centroids.copy()
        for c in range(k):
            members = assignment == c
            if members.any():
                new[c] = pts[members].mean(axis=0)
        shift = float(np.sqrt(((new - centroids) ** 2).sum(axis=1)).max())
        centroids = new
        sq = _sq_distances(pts, centroids)
        new_assign = sq.argmin(axis=1)
        history.append(float(sq[np.arange(v), new_assign].sum()))
        stable = np.array_equal(new_assign, assignment)
        assignment = new_assign
        if shift < CONVERGENCE_TOL and stable:
            break
    sq = _sq_distances(pts, centroids)
    objective = float(sq[np.arange(v), assignment].sum())
    return ClusterModel(centroids, assignment, cluster_r(pts, centroids, assignment), objective, iterations, history)


def bic(r: float, v: int, k: int) -> float:
    """V ln(R / V) + k ln V, with R floored at 1e-12."""
    if v < 1:
        raise ValidationError("BIC needs at least one sample")
    return v * np.log(max(r, R_FLOOR) / v) + k * np.log(v)


def model_bic(model: ClusterModel, v: Optional[int] = None) -> float:
    return bic(model.r, len(model.assignment) if v is None else v, model.k)


def _order_by_size(model: ClusterModel) -> tuple[ClusterModel, np.ndarray]:
    sizes = model.sizes()
    order = sorted(range(model.k), key=lambda c: (-sizes[c], c))
    remap = np.empty(model.k, dtype=np.int64)
    remap[order] = np.arange(model.k)
    assignment = remap[model.assignment]
    reordered = ClusterModel(model.centroids[order], assignment, model.r, model.objective,
                             model.iterations, model.objective_history)
    return reordered, assignment


def best_of_restarts(points: np.ndarray, k: int, seed: int, n_restarts: int = 5, max_iters: int = 300) -> ClusterModel:
    best = None
    for r in range(n_restarts):
        m = kmeans(points, k, np.random.SeedSequence([seed, k, r]), max_iters)
        if best is None or m.objective < best.objective:
            best = m
    return best


def autocluster(points: np.ndarray, k_max: int = 10, seed: int = 0, n_restarts: int = 5,
                max_iters: int = 300) -> AutoClusterResult:
    """Choose the cluster count by the largest BIC decrease between consecutive k."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    v = len(pts)
    if v == 0:
        raise NothingToLabelError("no points to cluster")
    if k_max < 2:
        raise ValidationError("k_max must be at least 2")
    if k_max > v:
        raise ValidationError(f"k_max={k_max} exceeds the number of points {v}")
    if np.all(pts == pts[0]):
        log.warning("all %d points are identical; forcing a single cluster", v)
        model = kmeans(pts, 1, seed, max_iters)
        table = [{"k": 1, "bic": model_bic(model), "r": model.r, "objective": model.objective, "delta_bic": None}]
        return AutoClusterResult(model, np.zeros(v, dtype=np.int64), 1, table, degenerate=True)

    models, table = [], []
    for k in range(1, k_max + 1):
        m = best_of_restarts(pts, k, seed, n_restarts, max_iters)
        b = model_bic(m)
        delta = b - table[-1]["bic"] if table else None
        models.append(m)
        table.append({"k": k, "bic": b, "r": m.r, "objective": m.objective, "delta_bic": delta})
    deltas = [row["delta_bic"] for row in table[1:]]
    chosen = int(np.argmin(deltas)) + 2
    model, labels = _order_by_size(models[chosen - 1])
    return AutoClusterResult(model, labels, chosen, table)


@dataclass
class LabelingResult:
    features: FeatureMatrix
    components: PrincipalComponents
    clustering: AutoClusterResult

    @property
    def labels(self) -> np.ndarray:
        return self.clustering.labels

    def report(self) -> dict:
        return {"q": self.components.q, "explained_variance": float(self.components.explained_ratio[:self.components.q].sum()),
                **self.clustering.report()}


def label_packets(model: nn.NeuralModel, vectors: np.ndarray, k_max: int = 10, variance_target: float = 0.95,
                  seed: int = 0, packet_index=None, n_restarts: int = 5) -> LabelingResult:
    """Feature maps -> mapminmax -> PCA -> BIC-selected K-means labels."""
    fm = assemble_features(model, vectors, packet_index)
    normalized = mapminmax_columns(fm.columns)
    if len(fm) < 2:
        raise NothingToLabelError("need at least two discovered packets to cluster")
    pcs = pca(normalized, variance_target)
    clustering = autocluster(pcs.points, min(k_max, len(fm)), seed, n_restarts)
    return LabelingResult(fm, pcs, clustering)
