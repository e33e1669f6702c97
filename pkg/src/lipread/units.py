"""Discrete speech units: K-means codebooks over feature frames.

Frames are quantized to their nearest centroid (squared euclidean, ties to
the lowest index). Codebooks can be refit on a trained encoder's hidden
features to produce refined units.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import DataError, ShapeError


@dataclass
class UnitCodebook:
    centroids: np.ndarray  # (C, d_feat)
    source_tag: str = "mfcc-like"
    inertia_trace: list = field(default_factory=list, repr=False)

    @property
    def n_units(self):
        return self.centroids.shape[0]

    @property
    def feature_dim(self):
        return self.centroids.shape[1]


def _sq_distances(points, centroids):
    # (N, C) squared euclidean via expansion; centroids is small
    return (
        (points * points).sum(axis=1)[:, None]
        - 2.0 * points @ centroids.T
        + (centroids * centroids).sum(axis=1)[None, :]
    )


def _kmeans_pp_init(points, c, rng):
    n = points.shape[0]
    centroids = np.empty((c, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, c):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centroids[i] = points[idx]
        d2 = np.minimum(d2, ((points - centroids[i]) ** 2).sum(axis=1))
    return centroids


def kmeans_fit(points, n_clusters, max_iters=50, seed=0, source_tag="mfcc-like"):
    """Lloyd iterations from a k-means++ start; deterministic per seed.

    Empty clusters are repaired by stealing the point currently farthest
    from its assigned centroid. The per-iteration inertia trace (starting
    at the seed initialization) is recorded on the returned codebook.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ShapeError(f"kmeans_fit: points must be 2-D, got {points.shape}")
    n = points.shape[0]
    if n < n_clusters:
        raise DataError(f"kmeans_fit: {n} points < {n_clusters} clusters")
    if max_iters < 1:
        raise DataError(f"kmeans_fit: max_iters must be >= 1, got {max_iters}")
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 0x6B6D])
    centroids = _kmeans_pp_init(points, n_clusters, rng)

    trace = []
    assign = None
    for _ in range(max_iters + 1):
        d2 = _sq_distances(points, centroids)
        new_assign = d2.argmin(axis=1)
        dist_own = d2[np.arange(n), new_assign]
        trace.append(float(np.maximum(dist_own, 0.0).sum()))
        if assign is not None and np.array_equal(assign, new_assign):
            break
        assign = new_assign
        if len(trace) > max_iters:
            break
        counts = np.bincount(assign, minlength=n_clusters)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, points)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        if not nonempty.all():
            steal_dist = dist_own.copy()
            for c in np.flatnonzero(~nonempty):
                far = int(steal_dist.argmax())
                centroids[c] = points[far]
                steal_dist[far] = -np.inf
    return UnitCodebook(centroids=centroids, source_tag=source_tag, inertia_trace=trace)


def quantize(features, codebook: UnitCodebook):
    """Nearest-centroid unit ids for (T, d_feat) frames; ties -> lowest id."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != codebook.feature_dim:
        raise ShapeError(
            f"quantize: features {features.shape} vs codebook dim {codebook.feature_dim}"
        )
    if features.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    return _sq_distances(features, codebook.centroids).argmin(axis=1).astype(np.int64)


def refine_codebook(model, corpus, n_clusters, seed, input_fn=None, max_iters=50):
    """Refit the codebook on encoder hidden features over ``corpus``.

    ``input_fn(utt) -> (T, in_dim)`` builds encoder inputs (defaults to the
    multimodal video+audio layout). Returns a codebook tagged
    "learned-iter-k" whose feature space is the encoder output dim.
    """
    if not corpus:
        raise DataError("refine_codebook: empty corpus")
    if input_fn is None:
        from .masked_pretrain import refine_inputs

        input_fn = refine_inputs
    feats = []
    with ad.no_grad():
        for utt in corpus:
            feats.append(model.encode(input_fn(utt)).data)
    points = np.concatenate(feats, axis=0)
    return kmeans_fit(points, n_clusters, max_iters=max_iters, seed=seed, source_tag="learned-iter-k")


def cluster_purity(units, labels):
    """Fraction of frames whose cluster's dominant true label matches theirs."""
    units = np.asarray(units)
    labels = np.asarray(labels)
    if units.shape != labels.shape or units.size == 0:
        raise DataError("cluster_purity: need equal-length non-empty unit/label arrays")
    total = 0
    for u in np.unique(units):
        _, counts = np.unique(labels[units == u], return_counts=True)
        total += counts.max()
    return total / units.size
