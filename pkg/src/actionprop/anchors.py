"""K-means selection of anchor widths and their mapping onto pyramid levels.

Clustering runs on normalized durations under the co-centered segment IoU
distance d(w, c) = 1 - min(w, c) / max(w, c), with a seeded k-means++ style
initialization and arithmetic-mean centroid updates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ClusteringError, ContractError


@dataclass
class AnchorSet:
    """Per-level anchor widths, finest level first."""

    levels: list[list[float]]

    def __post_init__(self):
        if not self.levels or not all(self.levels):
            raise ContractError("anchor set needs at least one width per level")
        sizes = {len(level) for level in self.levels}
        if len(sizes) != 1:
            raise ContractError(f"levels carry unequal anchor counts: {sorted(sizes)}")
        flat = [w for level in self.levels for w in level]
        if any(not (0.0 < w <= 1.0) for w in flat):
            raise ContractError("anchor widths must lie in (0, 1]")
        if any(b <= a for a, b in zip(flat, flat[1:])):
            raise ContractError("anchor widths must be strictly increasing across levels")

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    @property
    def anchors_per_level(self) -> int:
        return len(self.levels[0])

    def to_json_dict(self) -> dict:
        return {
            "k": self.num_levels * self.anchors_per_level,
            "levels": [[float(w) for w in level] for level in self.levels],
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "AnchorSet":
        return cls([list(map(float, level)) for level in doc["levels"]])


def width_distance(widths: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """1 - IoU of co-centered segments, for widths [n] against centroids [k]."""
    w = widths[:, None]
    c = centroids[None, :]
    return 1.0 - np.minimum(w, c) / np.maximum(w, c)


def lloyd_iterations(widths, k: int, seed: int = 0, max_iter: int = 100):
    """Run seeded k-means++ init plus Lloyd updates; return (centroids, objective trace).

    The input width list is canonicalized by sorting first, which makes the
    result invariant to input permutation.
    """
    arr = np.sort(np.asarray(widths, dtype=np.float64))
    if arr.size == 0 or np.any(arr <= 0) or np.any(arr > 1):
        raise ClusteringError("widths must be normalized durations in (0, 1]")
    if k < 1:
        raise ClusteringError(f"k must be >= 1, got {k}")
    if np.unique(arr).size < k:
        raise ClusteringError(
            f"need at least {k} distinct widths, got {np.unique(arr).size}"
        )

    rng = np.random.default_rng(seed)
    centroids = [float(arr[rng.integers(arr.size)])]
    while len(centroids) < k:
        d = width_distance(arr, np.asarray(centroids)).min(axis=1)
        probs = d * d
        probs /= probs.sum()
        centroids.append(float(arr[rng.choice(arr.size, p=probs)]))
    centroids = np.asarray(centroids)

    def objective(cents):
        dist = width_distance(arr, cents)
        assign = dist.argmin(axis=1)
        return assign, float(dist[np.arange(arr.size), assign].sum())

    def mean_update(cents, assign):
        out = cents.copy()
        for j in range(k):
            members = arr[assign == j]
            if members.size:
                # mean of identical widths must stay exactly that width
                out[j] = members[0] if members[0] == members[-1] else members.mean()
            else:
                # empty-cluster repair: reseed at the width farthest from it
                out[j] = arr[width_distance(arr, out[j : j + 1])[:, 0].argmax()]
        return out

    assignment, obj = objective(centroids)
    trace = [obj]
    for _ in range(max_iter):
        candidate = mean_update(centroids, assignment)
        new_assignment, new_obj = objective(candidate)
        if new_obj > trace[-1] + 1e-12:
            # the mean step stopped improving this metric; keep previous state
            break
        stable = np.array_equal(new_assignment, assignment)
        centroids, assignment = candidate, new_assignment
        trace.append(new_obj)
        if stable:
            break
    order = np.argsort(centroids)
    return centroids[order], trace


def kmeans_anchors(widths, k: int, seed: int = 0, max_iter: int = 100) -> list[float]:
    """Cluster normalized durations into k anchor widths, sorted ascending."""
    centroids, _ = lloyd_iterations(widths, k, seed=seed, max_iter=max_iter)
    return [float(c) for c in centroids]


def assign_anchors_to_levels(sorted_widths, n_levels: int) -> AnchorSet:
    """Chunk ascending widths into n_levels groups; smallest go to the finest level."""
    k = len(sorted_widths)
    if n_levels < 1 or k % n_levels != 0:
        raise ContractError(f"{k} anchors cannot be split evenly over {n_levels} levels")
    m = k // n_levels
    ordered = sorted(float(w) for w in sorted_widths)
    return AnchorSet([ordered[i * m : (i + 1) * m] for i in range(n_levels)])


def annotation_widths(annotations) -> list[float]:
    """Collect normalized instance widths from training-subset annotations."""
    widths = [
        seg.width
        for ann in annotations.values()
        if ann.subset == "training"
        for seg in ann.segments
    ]
    if not widths:
        raise ClusteringError("no training-subset instances to cluster")
    return widths
