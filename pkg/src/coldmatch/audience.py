"""Audience targeting: pool recent reactors, cluster, score, take top-m.

Users who recently red-hearted any of the retrieved songs form the
candidate pool. Bagged K-means over their embeddings yields weak
classifiers (centroids weighted by cluster mass); each candidate is scored
by weighted cosine relevance to the ensemble and the top-m win.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .datagen import BehaviorEvent
from .errors import ContractError, DimensionError

log = logging.getLogger(__name__)

DEFAULT_K = 8
DEFAULT_RUNS = 4
DEFAULT_SUBSAMPLE = 0.8
DEFAULT_MAX_ITERS = 50
DEFAULT_WINDOW_FRACTION = 0.25


@dataclass
class AudienceCandidate:
    user_id: str
    embedding: np.ndarray
    source_song_ids: set[str]

    def __post_init__(self):
        self.embedding = np.asarray(self.embedding, dtype=np.float64)
        if not np.all(np.isfinite(self.embedding)):
            raise ContractError(f"user {self.user_id}: non-finite embedding")
        if not self.source_song_ids:
            raise ContractError(f"user {self.user_id}: empty source song set")


@dataclass(frozen=True)
class WeakClassifier:
    centroid: np.ndarray
    weight: float
    run_index: int

    def __post_init__(self):
        if not 0.0 < self.weight <= 1.0:
            raise ContractError(f"classifier weight {self.weight} outside (0, 1]")


@dataclass
class TargetSet:
    """Ranked audience selection; underfilled marks a pool smaller than m."""

    entries: list[tuple[str, float]]
    m: int
    underfilled: bool = False

    def to_json_obj(self) -> list[dict]:
        return [{"user_id": uid, "score": score} for uid, score in self.entries]


def recency_window(
    events: Sequence[BehaviorEvent], fraction: float = DEFAULT_WINDOW_FRACTION
) -> tuple[int, int]:
    """(start, end) covering the trailing ``fraction`` of the event span."""
    if not events:
        raise ContractError("no events to derive a window from")
    if not 0.0 < fraction <= 1.0:
        raise ContractError(f"window fraction {fraction} outside (0, 1]")
    lo = min(e.timestamp for e in events)
    hi = max(e.timestamp for e in events)
    start = hi - fraction * (hi - lo)
    return (int(math.ceil(start)), hi)


def candidate_pool(
    events: Sequence[BehaviorEvent],
    retrieved_ids: Iterable[str],
    user_embeddings: Mapping[str, np.ndarray],
    window: tuple[int, int] | None = None,
) -> list[AudienceCandidate]:
    """Users with a red-heart on a retrieved song inside the window.

    Event order does not matter; the default window is derived from the
    min/max timestamps. Users without an embedding are skipped and counted
    in the log rather than failing the whole pool.
    """
    retrieved = set(retrieved_ids)
    if window is None:
        window = recency_window(events)
    start, end = window
    hits: dict[str, set[str]] = {}
    for ev in events:
        if ev.behavior != "red_heart":
            continue
        if ev.song_id not in retrieved:
            continue
        if not start <= ev.timestamp <= end:
            continue
        hits.setdefault(ev.user_id, set()).add(ev.song_id)
    pool: list[AudienceCandidate] = []
    skipped = 0
    for user_id in sorted(hits):
        emb = user_embeddings.get(user_id)
        if emb is None:
            skipped += 1
            continue
        pool.append(AudienceCandidate(user_id, emb, hits[user_id]))
    if skipped:
        log.warning("candidate pool: %d users skipped for missing embeddings", skipped)
    return pool


# K-means ---------------------------------------------------------------------


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    inertia_history: list[float] = field(default_factory=list)
    n_iter: int = 0
    converged: bool = False


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # (n, K) squared distances; the explicit diff keeps it exact for ties
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _plus_plus_seed(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]), dtype=np.float64)
    centers[0] = points[int(rng.integers(n))]
    d2 = np.einsum("nd,nd->n", points - centers[0], points - centers[0])
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            pick = int(rng.integers(n))  # all mass at the chosen centers already
        else:
            pick = int(rng.choice(n, p=d2 / total))
        centers[j] = points[pick]
        cand = np.einsum("nd,nd->n", points - centers[j], points - centers[j])
        np.minimum(d2, cand, out=d2)
    return centers


def kmeans(
    points: np.ndarray,
    k: int,
    max_iters: int = DEFAULT_MAX_ITERS,
    rng: np.random.Generator | None = None,
) -> KMeansResult:
    """Lloyd iterations from k-means++ seeds until the assignment fixpoint.

    An empty cluster claims the point currently farthest from its own
    centroid, so every final cluster is non-empty when n >= k.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise DimensionError(f"points must be (n, d), got {points.shape}")
    n = points.shape[0]
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    if n < k:
        raise ContractError(f"{n} points cannot fill {k} clusters")
    if rng is None:
        rng = np.random.default_rng()
    centroids = _plus_plus_seed(points, k, rng)
    assignments = np.full(n, -1, dtype=np.int64)
    result = KMeansResult(assignments=assignments, centroids=centroids, inertia=np.inf)
    for it in range(1, max_iters + 1):
        d2 = _sq_dists(points, centroids)
        new_assign = d2.argmin(axis=1)
        point_d2 = d2[np.arange(n), new_assign]
        for j in range(k):
            if not np.any(new_assign == j):
                grab = int(point_d2.argmax())
                new_assign[grab] = j
                point_d2[grab] = 0.0
        changed = not np.array_equal(new_assign, assignments)
        assignments = new_assign
        for j in range(k):
            centroids[j] = points[assignments == j].mean(axis=0)
        d2 = _sq_dists(points, centroids)
        inertia = float(d2[np.arange(n), assignments].sum())
        result.inertia_history.append(inertia)
        result.n_iter = it
        if not changed:
            result.converged = True
            break
    result.assignments = assignments
    result.centroids = centroids
    result.inertia = result.inertia_history[-1]
    return result


def bagged_centroids(
    pool: Sequence[AudienceCandidate],
    k: int = DEFAULT_K,
    runs: int = DEFAULT_RUNS,
    subsample: float = DEFAULT_SUBSAMPLE,
    rng: np.random.Generator | None = None,
    max_iters: int = DEFAULT_MAX_ITERS,
) -> list[WeakClassifier]:
    """Weak classifiers from ``runs`` K-means fits on fresh subsamples.

    Every run draws ceil(subsample * n) candidates without replacement and
    contributes k centroids weighted by cluster size over subsample size,
    so each run's weights sum to 1.
    """
    if not pool:
        raise ContractError("empty candidate pool")
    if runs < 1:
        raise ContractError(f"runs must be >= 1, got {runs}")
    if not 0.0 < subsample <= 1.0:
        raise ContractError(f"subsample fraction {subsample} outside (0, 1]")
    n = len(pool)
    m_sub = math.ceil(subsample * n)
    if m_sub < k:
        raise ContractError(
            f"subsample of {m_sub} candidates cannot fill {k} clusters (pool {n})"
        )
    if rng is None:
        rng = np.random.default_rng()
    points = np.stack([c.embedding for c in pool])
    classifiers: list[WeakClassifier] = []
    for run in range(runs):
        rows = rng.choice(n, size=m_sub, replace=False) if m_sub < n else np.arange(n)
        fit = kmeans(points[rows], k, max_iters=max_iters, rng=rng)
        sizes = np.bincount(fit.assignments, minlength=k)
        for j in range(k):
            classifiers.append(
                WeakClassifier(
                    centroid=fit.centroids[j].copy(),
                    weight=float(sizes[j]) / m_sub,
                    run_index=run,
                )
            )
    return classifiers


# Scoring ----------------------------------------------------------------------


def _cosine_rows(matrix: np.ndarray, vec: np.ndarray) -> np.ndarray:
    norms = np.sqrt(np.einsum("nd,nd->n", matrix, matrix))
    vnorm = float(np.sqrt(vec @ vec))
    out = np.zeros(matrix.shape[0], dtype=np.float64)
    if vnorm == 0.0:
        return out
    nonzero = norms > 0.0
    out[nonzero] = (matrix[nonzero] @ vec) / (norms[nonzero] * vnorm)
    return out


def score_audiences(
    pool: Sequence[AudienceCandidate], classifiers: Sequence[WeakClassifier]
) -> dict[str, float]:
    """score(u) = mean over runs of sum_c weight_c * cos(e_u, centroid_c)."""
    if not classifiers:
        raise ContractError("no weak classifiers to score against")
    if not pool:
        return {}
    d = pool[0].embedding.shape[0]
    for c in classifiers:
        if c.centroid.shape != (d,):
            raise DimensionError(
                f"centroid shape {c.centroid.shape} does not match embeddings ({d},)"
            )
    points = np.stack([c.embedding for c in pool])
    n_runs = len({c.run_index for c in classifiers})
    totals = np.zeros(len(pool), dtype=np.float64)
    for c in classifiers:
        totals += c.weight * _cosine_rows(points, np.asarray(c.centroid, dtype=np.float64))
    totals /= n_runs
    return {cand.user_id: float(totals[i]) for i, cand in enumerate(pool)}


def target(
    pool: Sequence[AudienceCandidate],
    classifiers: Sequence[WeakClassifier],
    m: int,
) -> TargetSet:
    """Top-m audiences by ensemble score, ties broken by ascending user_id."""
    if m < 1:
        raise ContractError(f"m must be >= 1, got {m}")
    if not pool:
        log.warning("target: empty candidate pool, returning empty set")
        return TargetSet(entries=[], m=m, underfilled=True)
    scores = score_audiences(pool, classifiers)
    ranked = sorted(scores.items(), key=lambda t: (-t[1], t[0]))
    return TargetSet(entries=ranked[:m], m=m, underfilled=len(ranked) < m)
