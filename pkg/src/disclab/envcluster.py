"""Unsupervised environment construction.

Training data is stratified into environments in two stages: a one-time
per-class GMM clustering of reference-model features (encoder output
concatenated with class probabilities, variance-screened and standardized
per dimension), and a per-epoch re-pairing that unions one randomly chosen
cluster per class into each environment. Clustering reads labels only to
split by class and never touches ground-truth environment ids.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .model import Classifier, class_probabilities, encode

GMM_MAX_ITER = 200
GMM_REL_TOL = 1e-6
GMM_VAR_FLOOR = 1e-6
GMM_MAX_REINITS = 10
STD_FLOOR = 1e-12
# z-score margin for the per-dimension variance screen: a dimension takes
# part in clustering only when its variance exceeds the class median by
# more than this many standard errors of a variance estimate.
SCREEN_Z = 4.0


@dataclass(frozen=True)
class EnvironmentPartition:
    """Per-class clusters plus the current epoch's pairing into environments.

    per_class_clusters maps class label -> list of k index arrays (global
    dataset indices); environments is the list of k index arrays G_j, each
    the union of exactly one cluster per class.
    """

    per_class_clusters: dict[int, list[np.ndarray]]
    environments: list[np.ndarray]
    k: int

    def __post_init__(self) -> None:
        class_pools: dict[int, set[int]] = {}
        for label, clusters in self.per_class_clusters.items():
            if len(clusters) != self.k:
                raise ValueError(f"class {label} has {len(clusters)} clusters, want {self.k}")
            stacked = np.concatenate(clusters) if clusters else np.array([], dtype=int)
            if len(np.unique(stacked)) != len(stacked):
                raise ValueError(f"class {label} clusters overlap")
            class_pools[label] = set(map(int, stacked))
        if len(self.environments) != self.k:
            raise ValueError(f"want {self.k} environments, got {len(self.environments)}")
        for j, env in enumerate(self.environments):
            env_set = set(map(int, env))
            covered = 0
            for label, clusters in self.per_class_clusters.items():
                slice_ = env_set & class_pools[label]
                if not any(slice_ == set(map(int, c)) for c in clusters):
                    raise ValueError(
                        f"environment {j} does not hold exactly one cluster of class {label}"
                    )
                covered += len(slice_)
            if covered != len(env_set):
                raise ValueError(f"environment {j} holds indices outside every class")


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = a.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def _log_densities(points: np.ndarray, means: np.ndarray, variances: np.ndarray) -> np.ndarray:
    """(N, k) diagonal-Gaussian log densities."""
    diff2 = (points[:, None, :] - means[None, :, :]) ** 2
    return -0.5 * (np.log(2.0 * np.pi * variances)[None, :, :] + diff2 / variances[None, :, :]).sum(axis=2)


def _kmeans_pp_centers(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centers = [points[int(rng.integers(n))]]
    for _ in range(k - 1):
        d2 = ((points[:, None, :] - np.asarray(centers)[None, :, :]) ** 2).sum(axis=2).min(axis=1)
        total = d2.sum()
        if total > 0:
            idx = rng.choice(n, p=d2 / total)
        else:
            idx = rng.integers(n)
        centers.append(points[int(idx)])
    return np.asarray(centers)


def _e_step(
    points: np.ndarray, means: np.ndarray, variances: np.ndarray, weights: np.ndarray
) -> tuple[np.ndarray, float]:
    """Responsibilities (rows sum to 1) and total log-likelihood."""
    log_joint = np.log(weights)[None, :] + _log_densities(points, means, variances)
    log_norm = _logsumexp(log_joint, axis=1)
    resp = np.exp(log_joint - log_norm[:, None])
    return resp, float(log_norm.sum())


def fit_gmm(
    points: np.ndarray, k: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, list[float]]:
    """Diagonal-covariance GMM via EM with k-means++ initialization.

    Runs at most GMM_MAX_ITER iterations, stopping when the total
    log-likelihood improves by less than a 1e-6 relative tolerance. Component
    variances are floored at 1e-6. If the converged hard assignment leaves a
    component empty the fit restarts from a fresh initialization, a bounded
    number of times.

    Returns (assignments, means, variances, weights, loglik_trajectory); the
    trajectory is the per-iteration total log-likelihood, final value last.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[1] < 1:
        raise ValueError("points must be a (N, q) matrix")
    n = len(points)
    if n < k:
        raise ValueError(f"need at least k={k} points, got {n}")
    if k < 1:
        raise ValueError("k must be >= 1")
    for _ in range(GMM_MAX_REINITS):
        means = _kmeans_pp_centers(points, k, rng)
        variances = np.tile(np.maximum(points.var(axis=0), GMM_VAR_FLOOR), (k, 1))
        weights = np.full(k, 1.0 / k)
        trajectory: list[float] = []
        prev = -np.inf
        for _ in range(GMM_MAX_ITER):
            resp, loglik = _e_step(points, means, variances, weights)
            trajectory.append(loglik)
            if np.isfinite(prev) and abs(loglik - prev) <= GMM_REL_TOL * max(1.0, abs(loglik)):
                break
            prev = loglik
            mass = resp.sum(axis=0)
            weights = mass / n
            means = (resp.T @ points) / mass[:, None]
            second = (resp.T @ (points**2)) / mass[:, None]
            variances = np.maximum(second - means**2, GMM_VAR_FLOOR)
        resp, _ = _e_step(points, means, variances, weights)
        assignments = resp.argmax(axis=1)
        if len(np.unique(assignments)) == k:
            return assignments, means, variances, weights, trajectory
    raise RuntimeError(f"empty cluster after {GMM_MAX_REINITS} reinitializations")


def _clustering_features(classifier: Classifier, X: np.ndarray) -> np.ndarray:
    return np.column_stack([encode(classifier, X), class_probabilities(classifier, X)])


def _standardize(features: np.ndarray) -> np.ndarray:
    centered = features - features.mean(axis=0)
    std = features.std(axis=0)
    out = np.zeros_like(centered)
    live = std > STD_FLOOR
    out[:, live] = centered[:, live] / std[live]
    return out


def _screen_dimensions(features: np.ndarray) -> np.ndarray:
    """Indices of dimensions that look structured rather than homogeneous.

    Dimensions that only carry homogeneous noise drown the mixture fit: their
    component-mean estimation error accumulates into the responsibilities and
    washes out whatever low-dimensional structure exists. Structure leaves one
    of two marks on a marginal. Either the scale is off (a spread of component
    means inflates variance above the bulk, a tight low-noise coordinate sits
    below it), or the shape is off (a balanced well-separated mixture is
    platykurtic even at bulk variance). The screen keeps a dimension when its
    variance deviates from the median by more than SCREEN_Z standard errors
    (the variance of a sample variance is about 2 sigma^4 / n), or when its
    excess kurtosis falls below -SCREEN_Z standard errors (se about
    sqrt(24 / n) under normality). Both reads are ground-truth-free: nothing
    but the feature matrix is consulted. When nothing clears either bar, every
    dimension is kept, so featureless data degrades to unscreened behavior.
    """
    n = len(features)
    if n < 2:
        return np.arange(features.shape[1])
    variances = features.var(axis=0)
    floor = np.median(variances)
    scale_off = np.abs(variances - floor) > floor * SCREEN_Z * np.sqrt(2.0 / n)
    centered = features - features.mean(axis=0)
    m2 = np.maximum((centered**2).mean(axis=0), STD_FLOOR)
    kurtosis = (centered**4).mean(axis=0) / m2**2 - 3.0
    shape_off = kurtosis < -SCREEN_Z * np.sqrt(24.0 / n)
    selected = np.flatnonzero(scale_off | shape_off)
    if selected.size == 0:
        return np.arange(features.shape[1])
    return selected


def cluster_per_class(
    dataset, classifier: Classifier, k: int, rng: np.random.Generator
) -> dict[int, list[np.ndarray]]:
    """Cluster each class's instances into k groups on reference-model features.

    The clustering feature of an instance is the reference classifier's
    encoder output concatenated with its class probabilities. Within each
    class, dimensions are screened by variance (see _screen_dimensions) and
    the survivors standardized to zero mean and unit variance (constant
    dimensions are dropped to zero) before the mixture fit. Classes are
    processed in ascending label order, each on its own child RNG stream, so
    per-class fits are independent of one another.

    Returns {class label: [k arrays of global dataset indices]}.
    """
    view = dataset.train_view()
    features = _clustering_features(classifier, view.features)
    labels = np.unique(view.labels)
    streams = rng.spawn(len(labels))
    clusters: dict[int, list[np.ndarray]] = {}
    for label, stream in zip(labels, streams):
        idx = np.flatnonzero(view.labels == label)
        if len(idx) < k:
            raise ValueError(f"class {label} has {len(idx)} instances, fewer than k={k}")
        class_features = features[idx]
        keep = _screen_dimensions(class_features)
        standardized = _standardize(class_features[:, keep])
        assignments, *_ = fit_gmm(standardized, k, stream)
        clusters[int(label)] = [idx[assignments == j] for j in range(k)]
    return clusters


def build_environments(
    per_class_clusters: dict[int, list[np.ndarray]], rng: np.random.Generator
) -> list[np.ndarray]:
    """Union one uniformly chosen cluster per class into each environment.

    Each class's cluster indices are put through an independent uniform
    permutation (classes visited in ascending label order), and environment
    G_j takes every class's j-th permuted cluster. Every environment
    therefore holds instances of every class whose clusters are all nonempty.
    """
    labels = sorted(per_class_clusters)
    sizes = {len(per_class_clusters[label]) for label in labels}
    if len(sizes) != 1:
        raise ValueError("every class must have the same number of clusters")
    k = sizes.pop()
    permutations = {label: rng.permutation(k) for label in labels}
    environments = []
    for j in range(k):
        parts = [per_class_clusters[label][permutations[label][j]] for label in labels]
        environments.append(np.sort(np.concatenate(parts)).astype(int))
    return environments


def silhouette_score(points: np.ndarray, assignments: np.ndarray) -> float:
    """Mean silhouette (b - a) / max(a, b) under the Euclidean metric.

    a is the mean distance to other points of the same cluster, b the
    smallest mean distance to any other cluster; singleton-cluster points
    score 0 by convention.
    """
    points = np.asarray(points, dtype=float)
    assignments = np.asarray(assignments)
    cluster_ids = np.unique(assignments)
    if len(cluster_ids) < 2:
        raise ValueError("silhouette needs at least 2 clusters")
    sq = (points**2).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (points @ points.T)
    dist = np.sqrt(np.maximum(d2, 0.0))
    n = len(points)
    scores = np.zeros(n)
    masks = {c: assignments == c for c in cluster_ids}
    for c in cluster_ids:
        mask = masks[c]
        size = int(mask.sum())
        rows = dist[mask]
        if size == 1:
            continue  # silhouette 0 for singletons
        a = rows[:, mask].sum(axis=1) / (size - 1)
        b = np.full(size, np.inf)
        for other in cluster_ids:
            if other == c:
                continue
            b = np.minimum(b, rows[:, masks[other]].mean(axis=1))
        scores[mask] = (b - a) / np.maximum(a, b)
    return float(scores.mean())


def write_cluster_csv(per_class_clusters: dict[int, list[np.ndarray]], path: str) -> None:
    """Assignment export, one row per instance: index,class,cluster."""
    rows = []
    for label in sorted(per_class_clusters):
        for j, cluster in enumerate(per_class_clusters[label]):
            rows.extend((int(i), label, j) for i in cluster)
    rows.sort()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "class", "cluster"])
        writer.writerows(rows)


def write_ksweep_csv(rows: list[tuple[int, float, float]], path: str) -> None:
    """k-search report: k,silhouette,worst_group_acc."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "silhouette", "worst_group_acc"])
        for k, silhouette, worst in rows:
            writer.writerow([k, repr(float(silhouette)), repr(float(worst))])
