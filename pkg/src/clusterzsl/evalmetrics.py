"""Classification and clusterability metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ndcore import child_seeds, make_rng


@dataclass
class MetricsReport:
    per_class_accuracy: dict[int, float] = field(default_factory=dict)
    mean_accuracy: float = float("nan")
    nmi: float = float("nan")
    intra_class_variance: float = float("nan")
    inter_class_mean_distance: float = float("nan")


def per_class_top1(predictions, labels) -> tuple[dict[int, float], float]:
    """Accuracy within each true class, then the unweighted mean over classes."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("per-class accuracy needs at least one sample")
    if predictions.shape != labels.shape:
        raise ValueError(f"{predictions.size} predictions for {labels.size} labels")
    acc = {int(c): float(np.mean(predictions[labels == c] == c)) for c in np.unique(labels)}
    return acc, float(np.mean(list(acc.values())))


def harmonic_mean(s: float, u: float) -> float:
    if s < 0 or u < 0:
        raise ValueError(f"accuracies must be >= 0, got s={s}, u={u}")
    if s + u == 0:
        raise ValueError("harmonic mean undefined when both accuracies are zero")
    return 2.0 * s * u / (s + u)


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    history: list[float]
    n_iter: int


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    closest = _sq_dists(x, centers[0][None, :])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.uniform(0, total)))
            idx = min(idx, n - 1)
        centers.append(x[idx])
        closest = np.minimum(closest, _sq_dists(x, x[idx][None, :])[:, 0])
    return np.array(centers)


def _lloyd(x: np.ndarray, centroids: np.ndarray, max_iter: int, tol: float) -> KMeansResult:
    history = []
    assign = np.argmin(_sq_dists(x, centroids), axis=1)
    for it in range(1, max_iter + 1):
        new = centroids.copy()
        for j in range(centroids.shape[0]):
            members = x[assign == j]
            if len(members):
                new[j] = members.mean(axis=0)
        centroids = new
        d = _sq_dists(x, centroids)
        new_assign = np.argmin(d, axis=1)
        history.append(float(d[np.arange(x.shape[0]), new_assign].sum()))
        if np.array_equal(new_assign, assign) or (len(history) > 1 and history[-2] - history[-1] <= tol):
            assign = new_assign
            break
        assign = new_assign
    # recompute centroids for the final assignment so they match it
    for j in range(centroids.shape[0]):
        members = x[assign == j]
        if len(members):
            centroids[j] = members.mean(axis=0)
    inertia = float(_sq_dists(x, centroids)[np.arange(x.shape[0]), assign].sum())
    return KMeansResult(assign, centroids, inertia, history, it)


def kmeans(features: np.ndarray, k: int, seed: int = 0, n_init: int = 10, max_iter: int = 300,
           tol: float = 0.0) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding; the best of ``n_init`` restarts is kept."""
    x = np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of points n={n}")
    best = None
    for s in child_seeds(seed, n_init):
        res = _lloyd(x, _kmeans_pp(x, k, make_rng(s)), max_iter, tol)
        if best is None or res.inertia < best.inertia:
            best = res
    return best


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def normalized_mutual_information(assignments, labels, average: str = "arithmetic") -> float:
    """Mutual information divided by the arithmetic (or geometric) mean of the two entropies.

    When either labeling has a single value, the score is 1.0 if the
    partitions are identical and 0.0 otherwise.
    """
    a = np.asarray(assignments)
    b = np.asarray(labels)
    if a.size == 0 or a.shape != b.shape:
        raise ValueError("labelings must be non-empty and of equal length")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1.0)
    ha, hb = _entropy(table.sum(1)), _entropy(table.sum(0))
    if ha == 0.0 or hb == 0.0:
        return 1.0 if ha == hb else 0.0
    n = a.size
    nz = table > 0
    outer = np.outer(table.sum(1), table.sum(0))
    mi = float((table[nz] / n * np.log(table[nz] * n / outer[nz])).sum())
    if average == "arithmetic":
        denom = 0.5 * (ha + hb)
    elif average == "geometric":
        denom = np.sqrt(ha * hb)
    else:
        raise ValueError(f"unknown normalization {average!r}")
    return float(min(max(mi / denom, 0.0), 1.0))


def clustering_nmi(features: np.ndarray, labels, seed: int = 0, n_init: int = 10) -> float:
    """K-means with one cluster per ground-truth class, scored by NMI."""
    k = np.unique(labels).size
    return normalized_mutual_information(kmeans(features, k, seed, n_init=n_init).assignments, labels)


@dataclass
class VarianceStats:
    intra_class_variance: float
    inter_class_mean_distance: float
    skipped_classes: list[int]


def variance_stats(features: np.ndarray, labels) -> VarianceStats:
    """Intra: mean over classes of the mean squared distance to the class mean.
    Inter: mean Euclidean distance over pairs of class means.

    Singleton classes are left out of the intra term and listed in ``skipped_classes``.
    """
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    means, intra, skipped = [], [], []
    for c in classes:
        rows = x[labels == c]
        mu = rows.mean(axis=0)
        means.append(mu)
        if rows.shape[0] < 2:
            skipped.append(int(c))
            continue
        intra.append(float(((rows - mu) ** 2).sum(axis=1).mean()))
    means = np.array(means)
    iu = np.triu_indices(len(means), 1)
    diff = means[:, None, :] - means[None, :, :]
    pair = np.sqrt((diff * diff).sum(-1))[iu]
    return VarianceStats(float(np.mean(intra)) if intra else float("nan"),
                         float(pair.mean()) if pair.size else 0.0, skipped)


def pca_project_2d(features: np.ndarray) -> np.ndarray:
    """Scores on the top two principal components, each axis signed so its
    largest-magnitude loading is positive."""
    x = np.asarray(features, dtype=np.float64)
    if x.shape[0] < 2:
        raise ValueError("PCA needs at least two rows")
    xc = x - x.mean(axis=0)
    if not np.any(xc):
        return np.zeros((x.shape[0], 2))
    cov = xc.T @ xc / (x.shape[0] - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:2]
    comps = vecs[:, order]
    for j in range(comps.shape[1]):
        if comps[np.argmax(np.abs(comps[:, j])), j] < 0:
            comps[:, j] = -comps[:, j]
    out = xc @ comps
    if out.shape[1] < 2:
        out = np.hstack([out, np.zeros((x.shape[0], 2 - out.shape[1]))])
    return out


def write_projection(path, points: np.ndarray, labels, sources) -> None:
    """Tab-separated ``x, y, label, source`` rows for external plotting."""
    lines = [f"{float(x)!r}\t{float(y)!r}\t{int(lab)}\t{src}" for (x, y), lab, src in zip(points, labels, sources)]
    Path(path).write_text("\n".join(lines) + "\n")
