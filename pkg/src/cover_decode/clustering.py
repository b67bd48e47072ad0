"""Distribution-aware token clustering per step bucket.

Tokens are embedded by the empirical quantiles of their per-step score
distribution; a weighted k-means (weight = sqrt of sample support) groups
tokens with similar distributions.  Tokens with too little support go to a
designated null cluster that shares a global step threshold.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ValidationError
from .traces import ScoreTrace, quantile

__all__ = [
    "QuantileEmbedding",
    "ClusterAssignment",
    "bucket_steps",
    "quantile_embedding",
    "cluster_bucket",
    "build_assignment",
    "weighted_kmeans",
]

DEFAULT_TAU_GRID = (0.5, 0.6, 0.7, 0.8, 0.9)
DEFAULT_MIN_COUNT = 20
DEFAULT_CLUSTERS = 4
_KMEANS_RESTARTS = 10
_KMEANS_MAX_ITERS = 100


@dataclass(frozen=True)
class QuantileEmbedding:
    """Quantile-grid embedding of one token's score distribution in one
    step bucket; ``support`` counts the contributing samples."""

    token: int
    bucket: int
    vector: tuple[float, ...]
    support: int


@dataclass(frozen=True)
class ClusterAssignment:
    """Per-bucket map from token id to cluster id.

    Cluster ids are ``0..M-1``; the null cluster is the integer ``M``.
    Tokens unseen during clustering resolve to null.
    """

    buckets: tuple[tuple[int, ...], ...]
    maps: tuple[dict, ...]
    n_clusters: int
    bucket_width: int

    @property
    def null_id(self) -> int:
        return self.n_clusters

    def bucket_index(self, step: int) -> int:
        return (step - 1) // self.bucket_width

    def cluster_of(self, step: int, token: int) -> int:
        b = self.bucket_index(step)
        if b >= len(self.maps):
            return self.null_id
        return self.maps[b].get(token, self.null_id)


def bucket_steps(max_len: int, width: int) -> list[tuple[int, ...]]:
    """Consecutive fixed-width step groups covering 1..L; the last bucket
    may be short."""
    if width < 1:
        raise ValidationError("bucket_steps: width must be >= 1")
    return [
        tuple(range(start, min(start + width, max_len + 1)))
        for start in range(1, max_len + 1, width)
    ]


def quantile_embedding(
    traces: Sequence[ScoreTrace],
    token: int,
    bucket: Sequence[int],
    tau_grid: Sequence[float] = DEFAULT_TAU_GRID,
) -> QuantileEmbedding | None:
    """Quantiles of the token's pooled step scores over the bucket.

    Returns None when the token never occurs in the bucket (routed to the
    null cluster by the caller).
    """
    for tau in tau_grid:
        if not 0.0 < tau < 1.0:
            raise ValidationError(f"tau={tau} outside (0, 1)")
    if list(tau_grid) != sorted(tau_grid):
        raise ValidationError("tau grid must be sorted")
    samples = [
        t.prefix_scores[l - 1]
        for t in traces
        for l in bucket
        if l <= len(t) and t.tokens[l - 1] == token
    ]
    if not samples:
        return None
    return QuantileEmbedding(
        token=token,
        bucket=min(bucket),
        vector=tuple(quantile(tau, samples) for tau in tau_grid),
        support=len(samples),
    )


def weighted_kmeans(
    points: np.ndarray,
    weights: np.ndarray,
    n_clusters: int,
    seed: int,
    restarts: int = _KMEANS_RESTARTS,
    max_iters: int = _KMEANS_MAX_ITERS,
):
    """Weighted Lloyd iterations with weighted k-means++ seeding.

    Runs ``restarts`` seeded initializations and keeps the assignment with
    the lowest weighted within-cluster sum of squares.  Returns
    ``(labels, centers, inertia_history)`` for the winning run; the history
    is non-increasing by construction.
    """
    points = np.asarray(points, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    n = points.shape[0]
    if n_clusters < 1 or n_clusters > n:
        raise ValidationError("weighted_kmeans: invalid cluster count")
    best = None
    for r in range(restarts):
        rng = np.random.default_rng(np.random.SeedSequence([seed, r]))
        labels, centers, history = _lloyd(points, weights, n_clusters, rng, max_iters)
        if best is None or history[-1] < best[2][-1] - 1e-12:
            best = (labels, centers, history)
    return best


def _kmeanspp_init(points, weights, k, rng):
    centers = np.empty((k, points.shape[1]))
    idx = rng.choice(points.shape[0], p=weights / weights.sum())
    centers[0] = points[idx]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        w = weights * d2
        if w.sum() <= 0:
            idx = rng.choice(points.shape[0])
        else:
            idx = rng.choice(points.shape[0], p=w / w.sum())
        centers[c] = points[idx]
        d2 = np.minimum(d2, ((points - centers[c]) ** 2).sum(axis=1))
    return centers


def _lloyd(points, weights, k, rng, max_iters):
    centers = _kmeanspp_init(points, weights, k, rng)
    history = []
    labels = None
    for _ in range(max_iters):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = d2.argmin(axis=1)
        inertia = float((weights * d2[np.arange(len(points)), labels]).sum())
        if history and inertia >= history[-1] - 1e-12:
            history.append(inertia)
            break
        history.append(inertia)
        for c in range(k):
            mask = labels == c
            if not mask.any():
                # reseed an empty cluster to the point farthest from its center
                far = d2[np.arange(len(points)), labels].argmax()
                centers[c] = points[far]
            else:
                w = weights[mask]
                centers[c] = (points[mask] * w[:, None]).sum(axis=0) / w.sum()
    return labels, centers, history


def cluster_bucket(
    embeddings: Sequence[QuantileEmbedding],
    n_clusters: int,
    min_count: int,
    seed: int,
) -> dict:
    """Token -> cluster map for one bucket.

    Tokens whose support falls below ``min_count`` go to the null cluster
    (id ``n_clusters``).  If fewer eligible tokens than requested clusters
    remain, the cluster count shrinks with a warning (ids stay in
    ``0..n_clusters-1``).
    """
    if n_clusters < 1:
        raise ValidationError("cluster_bucket: M must be >= 1")
    mapping: dict[int, int] = {}
    eligible = []
    for e in embeddings:
        if e.support < min_count:
            mapping[e.token] = n_clusters
        else:
            eligible.append(e)
    if not eligible:
        return mapping
    eligible.sort(key=lambda e: e.token)
    m_eff = min(n_clusters, len(eligible))
    if m_eff < n_clusters:
        warnings.warn(
            f"cluster_bucket: only {len(eligible)} eligible tokens, "
            f"reducing M from {n_clusters} to {m_eff}"
        )
    points = np.array([e.vector for e in eligible])
    weights = np.sqrt(np.array([e.support for e in eligible], dtype=np.float64))
    labels, _, _ = weighted_kmeans(points, weights, m_eff, seed)
    for e, lab in zip(eligible, labels):
        mapping[e.token] = int(lab)
    return mapping


def build_assignment(
    traces: Sequence[ScoreTrace],
    max_len: int,
    bucket_width: int,
    n_clusters: int = DEFAULT_CLUSTERS,
    min_count: int = DEFAULT_MIN_COUNT,
    tau_grid: Sequence[float] = DEFAULT_TAU_GRID,
    seed: int = 0,
) -> ClusterAssignment:
    """Cluster every token observed in the clustering split, bucket by
    bucket."""
    buckets = bucket_steps(max_len, bucket_width)
    maps = []
    for bi, bucket in enumerate(buckets):
        observed = sorted(
            {t.tokens[l - 1] for t in traces for l in bucket if l <= len(t)}
        )
        embeddings = []
        for tok in observed:
            emb = quantile_embedding(traces, tok, bucket, tau_grid)
            if emb is not None:
                embeddings.append(emb)
        maps.append(cluster_bucket(embeddings, n_clusters, min_count,
                                   seed=seed * 1000003 + bi))
    return ClusterAssignment(
        buckets=tuple(buckets),
        maps=tuple(maps),
        n_clusters=n_clusters,
        bucket_width=bucket_width,
    )
