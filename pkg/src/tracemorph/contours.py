"""Basic content / contour maps from unsupervised pixel clustering.

A contour map assigns every pixel to an intensity cluster (1-D k-means with
k-means++ seeding) and renders each pixel at its cluster's mean intensity, so
the map lives in the same intensity space as the image. For conditioning the
translation model there is also a canonical rendering that paints clusters at
fixed levels ordered by area, which makes the conditioning signal comparable
across domains whose absolute intensities differ.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tracemorph.grid import Image2D

KMEANS_MAX_ITER = 100
KMEANS_TOL = 1e-6


class DegenerateImageError(ValueError):
    """Raised when an image has no intensity spread to cluster."""


@dataclass(frozen=True)
class ContourMap:
    labels: np.ndarray  # (H, W) int cluster ids, levels sorted ascending
    levels: np.ndarray  # (n_clusters,) representative intensity per cluster

    def __post_init__(self) -> None:
        lv = np.asarray(self.levels, dtype=np.float64)
        if np.any(np.diff(lv) < 0):
            raise ValueError("cluster levels must be sorted ascending")
        lb = np.asarray(self.labels)
        if lb.min() < 0 or lb.max() >= lv.size:
            raise ValueError("labels outside [0, n_clusters)")
        object.__setattr__(self, "levels", lv)
        object.__setattr__(self, "labels", lb.astype(np.int64))

    @property
    def n_clusters(self) -> int:
        return int(self.levels.size)

    def render(self) -> Image2D:
        """Each pixel at its cluster's mean intensity."""
        return Image2D.from_array(self.levels[self.labels].astype(np.float32))

    def cluster_areas(self) -> np.ndarray:
        return np.bincount(self.labels.ravel(), minlength=self.n_clusters)

    def render_canonical(self) -> Image2D:
        """Clusters painted at fixed levels by ascending area: the largest
        cluster at 0, the smallest at 1, intermediates evenly spaced."""
        order = np.argsort(-self.cluster_areas(), kind="stable")
        canon = np.empty(self.n_clusters, dtype=np.float32)
        if self.n_clusters == 1:
            canon[:] = 0.0
        else:
            for rank, cluster in enumerate(order):
                canon[cluster] = rank / (self.n_clusters - 1)
        return Image2D.from_array(canon[self.labels])


def _kmeans_pp_init(values: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = np.empty(k)
    centers[0] = values[rng.integers(values.size)]
    d2 = (values - centers[0]) ** 2
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j:] = values[rng.integers(values.size, size=k - j)]
            break
        probs = d2 / total
        centers[j] = values[rng.choice(values.size, p=probs)]
        d2 = np.minimum(d2, (values - centers[j]) ** 2)
    return np.sort(centers)


def cluster_to_contours(img: Image2D, n_clusters: int = 2, seed: int = 0) -> ContourMap:
    """1-D k-means over pixel intensities; deterministic given the seed."""
    if n_clusters < 1:
        raise ValueError("need at least one cluster")
    values = img.numpy().astype(np.float64).ravel()
    if n_clusters >= 2 and values.var() < 1e-8:
        raise DegenerateImageError("image intensity variance too small to cluster")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp_init(values, n_clusters, rng)
    labels = np.zeros(values.size, dtype=np.int64)
    for _ in range(KMEANS_MAX_ITER):
        labels = np.argmin(np.abs(values[:, None] - centers[None, :]), axis=1)
        new_centers = centers.copy()
        for j in range(n_clusters):
            sel = labels == j
            if sel.any():
                new_centers[j] = values[sel].mean()
        new_centers = np.sort(new_centers)
        shift = np.abs(new_centers - centers).max()
        centers = new_centers
        if shift < KMEANS_TOL:
            break
    labels = np.argmin(np.abs(values[:, None] - centers[None, :]), axis=1)
    # drop empty clusters so every label is populated and levels stay sorted
    used = np.unique(labels)
    remap = {int(c): i for i, c in enumerate(used)}
    labels = np.vectorize(remap.get)(labels) if used.size < n_clusters else labels
    centers = centers[used] if used.size < n_clusters else centers
    return ContourMap(labels=labels.reshape(img.height, img.width), levels=centers)


def condition_map(img: Image2D, n_clusters: int = 2, seed: int = 0) -> tuple[Image2D, ContourMap]:
    """Contour map plus its canonical render used as the translation condition."""
    contours = cluster_to_contours(img, n_clusters, seed)
    return contours.render_canonical(), contours
