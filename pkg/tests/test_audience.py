"""Audience targeting tests: pooling, k-means, bagging, scoring, top-m."""

import math

import numpy as np
import pytest

from coldmatch.audience import (
    AudienceCandidate,
    TargetSet,
    WeakClassifier,
    bagged_centroids,
    candidate_pool,
    kmeans,
    recency_window,
    score_audiences,
    target,
)
from coldmatch.datagen import BehaviorEvent
from coldmatch.errors import ContractError, DimensionError


def ev(user, song, t, behavior="red_heart"):
    return BehaviorEvent(user_id=user, song_id=song, timestamp=t, behavior=behavior)


def cand(uid, vec, sources=("s0",)):
    return AudienceCandidate(user_id=uid, embedding=np.asarray(vec, float),
                             source_song_ids=set(sources))


class TestRecencyWindow:
    def test_last_quarter_of_span(self):
        events = [ev("u0", "s0", t) for t in range(1, 101)]
        start, end = recency_window(events)
        # span 1..100, fraction 0.25 -> start at ceil(100 - 24.75) = 76
        assert (start, end) == (76, 100)

    def test_single_timestamp_collapses(self):
        events = [ev("u0", "s0", 7)]
        assert recency_window(events) == (7, 7)

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            recency_window([])


class TestCandidatePool:
    EMB = {"u0": np.ones(3), "u1": np.full(3, 2.0), "u2": np.full(3, 3.0)}

    def test_red_heart_on_retrieved_in_window(self):
        events = [
            ev("u0", "s0", 90),
            ev("u1", "s0", 10),          # outside window
            ev("u2", "s9", 95),          # not retrieved
            ev("u1", "s1", 99, "play"),  # wrong behavior
            ev("u0", "s0", 1, "play"),   # stretches the span
        ]
        pool = candidate_pool(events, {"s0", "s1"}, self.EMB, window=(75, 100))
        assert [c.user_id for c in pool] == ["u0"]
        assert pool[0].source_song_ids == {"s0"}

    def test_two_songs_one_candidate(self):
        events = [ev("u1", "s0", 50), ev("u1", "s1", 60)]
        pool = candidate_pool(events, {"s0", "s1"}, self.EMB, window=(0, 100))
        assert len(pool) == 1
        assert pool[0].source_song_ids == {"s0", "s1"}

    def test_no_red_hearts_gives_empty_pool(self):
        events = [ev("u0", "s0", 50, "play"), ev("u1", "s0", 60, "songmark")]
        assert candidate_pool(events, {"s0"}, self.EMB, window=(0, 100)) == []

    def test_missing_embedding_skipped_not_fatal(self, caplog):
        events = [ev("u0", "s0", 50), ev("zz", "s0", 55)]
        with caplog.at_level("WARNING"):
            pool = candidate_pool(events, {"s0"}, self.EMB, window=(0, 100))
        assert [c.user_id for c in pool] == ["u0"]
        assert "1 users skipped" in caplog.text

    def test_default_window_derived_from_span(self):
        # span 0..100: default window starts at 75
        events = [ev("u0", "s0", 0, "play"), ev("u1", "s0", 74),
                  ev("u2", "s0", 80), ev("u0", "s0", 100, "play")]
        pool = candidate_pool(events, {"s0"}, self.EMB)
        assert [c.user_id for c in pool] == ["u2"]

    def test_sorted_by_user_id(self):
        events = [ev("u2", "s0", 50), ev("u0", "s0", 51), ev("u1", "s0", 52)]
        pool = candidate_pool(events, {"s0"}, self.EMB, window=(0, 100))
        assert [c.user_id for c in pool] == ["u0", "u1", "u2"]


class TestCandidateInvariants:
    def test_non_finite_embedding_rejected(self):
        with pytest.raises(ContractError):
            cand("u0", [1.0, np.nan])

    def test_empty_sources_rejected(self):
        with pytest.raises(ContractError):
            AudienceCandidate("u0", np.ones(2), set())


class TestKMeans:
    def test_k1_is_mean_and_total_variance(self):
        rng = np.random.default_rng(0)
        pts = rng.normal(size=(40, 3))
        fit = kmeans(pts, 1, rng=np.random.default_rng(1))
        np.testing.assert_allclose(fit.centroids[0], pts.mean(axis=0), rtol=1e-12)
        want = float(((pts - pts.mean(axis=0)) ** 2).sum())
        assert fit.inertia == pytest.approx(want, rel=1e-12)

    def test_two_separated_pairs(self):
        pts = np.array([[0.0, 0.0], [0.2, 0.0], [10.0, 10.0], [10.2, 10.0]])
        fit = kmeans(pts, 2, rng=np.random.default_rng(3))
        got = sorted(map(tuple, np.round(fit.centroids, 6).tolist()))
        assert got == [(0.1, 0.0), (10.1, 10.0)]
        assert fit.converged

    def test_inertia_monotone_on_random_instances(self):
        rng = np.random.default_rng(5)
        for trial in range(100):
            n = int(rng.integers(8, 40))
            d = int(rng.integers(1, 5))
            k = int(rng.integers(1, min(n, 6)))
            pts = rng.normal(size=(n, d))
            fit = kmeans(pts, k, max_iters=30, rng=rng)
            hist = fit.inertia_history
            assert all(b <= a + 1e-9 for a, b in zip(hist, hist[1:])), trial

    def test_fixpoint_when_converged(self):
        rng = np.random.default_rng(8)
        pts = rng.normal(size=(30, 2))
        fit = kmeans(pts, 3, rng=rng)
        if fit.converged:
            d2 = ((pts[:, None, :] - fit.centroids[None, :, :]) ** 2).sum(axis=2)
            np.testing.assert_array_equal(d2.argmin(axis=1), fit.assignments)

    def test_every_cluster_non_empty(self):
        # identical points force empty clusters without the repair step
        pts = np.zeros((6, 2))
        pts[5] = [1.0, 0.0]
        fit = kmeans(pts, 3, rng=np.random.default_rng(2))
        assert set(fit.assignments.tolist()) == {0, 1, 2}

    def test_n_below_k_rejected(self):
        with pytest.raises(ContractError):
            kmeans(np.zeros((2, 2)), 3, rng=np.random.default_rng(0))

    def test_deterministic_under_seed(self):
        pts = np.random.default_rng(1).normal(size=(25, 3))
        a = kmeans(pts, 4, rng=np.random.default_rng(7))
        b = kmeans(pts, 4, rng=np.random.default_rng(7))
        np.testing.assert_array_equal(a.assignments, b.assignments)
        np.testing.assert_array_equal(a.centroids, b.centroids)


class TestBaggedCentroids:
    def make_pool(self, n=30, d=4, seed=0):
        rng = np.random.default_rng(seed)
        return [cand(f"u{i:03d}", rng.normal(size=d)) for i in range(n)]

    def test_count_is_runs_times_k(self):
        pool = self.make_pool()
        out = bagged_centroids(pool, k=8, runs=4, subsample=0.8,
                               rng=np.random.default_rng(1))
        assert len(out) == 32
        assert {c.run_index for c in out} == {0, 1, 2, 3}

    def test_per_run_weights_sum_to_one(self):
        pool = self.make_pool()
        out = bagged_centroids(pool, k=5, runs=3, subsample=0.7,
                               rng=np.random.default_rng(2))
        for run in range(3):
            total = sum(c.weight for c in out if c.run_index == run)
            assert total == pytest.approx(1.0, abs=1e-9)

    def test_single_full_run_reduces_to_plain_kmeans(self):
        pool = self.make_pool(n=20)
        points = np.stack([c.embedding for c in pool])
        bag = bagged_centroids(pool, k=3, runs=1, subsample=1.0,
                               rng=np.random.default_rng(9))
        fit = kmeans(points, 3, rng=np.random.default_rng(9))
        np.testing.assert_array_equal(
            np.stack([c.centroid for c in bag]), fit.centroids
        )
        sizes = np.bincount(fit.assignments, minlength=3)
        for j, c in enumerate(bag):
            assert c.weight == pytest.approx(sizes[j] / 20)

    def test_too_small_pool_rejected(self):
        pool = self.make_pool(n=5)
        with pytest.raises(ContractError):
            bagged_centroids(pool, k=8, runs=2, subsample=0.8,
                             rng=np.random.default_rng(0))

    def test_empty_pool_rejected(self):
        with pytest.raises(ContractError):
            bagged_centroids([], k=2, rng=np.random.default_rng(0))


class TestScoreAudiences:
    def test_single_classifier_ranks_by_cosine(self):
        pool = [cand("u0", [1.0, 0.0]), cand("u1", [1.0, 1.0]), cand("u2", [0.0, 1.0])]
        clf = [WeakClassifier(np.array([1.0, 0.0]), 1.0, 0)]
        scores = score_audiences(pool, clf)
        assert scores["u0"] == pytest.approx(1.0)
        assert scores["u1"] == pytest.approx(1 / math.sqrt(2))
        assert scores["u2"] == pytest.approx(0.0)

    def test_orthogonal_centroid_hand_value(self):
        # u0 sits exactly on the first centroid; the other two centroids are
        # orthogonal to it, so only the matching weight survives: w / B
        clf = [
            WeakClassifier(np.array([2.0, 0.0, 0.0]), 0.5, 0),
            WeakClassifier(np.array([0.0, 3.0, 0.0]), 0.5, 0),
            WeakClassifier(np.array([0.0, 0.0, 1.0]), 1.0, 1),
        ]
        pool = [cand("u0", [4.0, 0.0, 0.0])]
        scores = score_audiences(pool, clf)
        assert scores["u0"] == pytest.approx(0.5 / 2, rel=1e-12)

    def test_rescaling_embedding_preserves_score(self):
        rng = np.random.default_rng(3)
        clf = [WeakClassifier(rng.normal(size=4), 0.6, 0),
               WeakClassifier(rng.normal(size=4), 0.4, 0)]
        v = rng.normal(size=4)
        a = score_audiences([cand("u0", v)], clf)["u0"]
        b = score_audiences([cand("u0", 2.0 * v)], clf)["u0"]
        assert a == pytest.approx(b, rel=1e-12)

    def test_zero_norm_embedding_scores_zero(self):
        clf = [WeakClassifier(np.array([1.0, 0.0]), 1.0, 0)]
        scores = score_audiences([cand("u0", [0.0, 0.0])], clf)
        assert scores["u0"] == 0.0

    def test_zero_norm_centroid_contributes_zero(self):
        clf = [WeakClassifier(np.array([0.0, 0.0]), 1.0, 0)]
        scores = score_audiences([cand("u0", [1.0, 0.0])], clf)
        assert scores["u0"] == 0.0

    def test_dimension_mismatch_rejected(self):
        clf = [WeakClassifier(np.ones(3), 1.0, 0)]
        with pytest.raises(DimensionError):
            score_audiences([cand("u0", [1.0, 0.0])], clf)

    def test_no_classifiers_rejected(self):
        with pytest.raises(ContractError):
            score_audiences([cand("u0", [1.0])], [])


class TestTarget:
    def make_scored_pool(self, n=12, seed=4):
        rng = np.random.default_rng(seed)
        pool = [cand(f"u{i:02d}", rng.normal(size=3)) for i in range(n)]
        clf = [WeakClassifier(rng.normal(size=3), 0.7, 0),
               WeakClassifier(rng.normal(size=3), 0.3, 0)]
        return pool, clf

    def test_matches_naive_sort_truncate(self):
        pool, clf = self.make_scored_pool()
        scores = score_audiences(pool, clf)
        want = sorted(scores.items(), key=lambda t: (-t[1], t[0]))[:5]
        got = target(pool, clf, 5)
        assert got.entries == want
        assert not got.underfilled

    def test_m1_is_argmax(self):
        pool, clf = self.make_scored_pool()
        scores = score_audiences(pool, clf)
        best = max(scores.items(), key=lambda t: (t[1], t[0]))[0]
        # unique maximum in random data; tie rule untested here
        assert target(pool, clf, 1).entries[0][0] == best

    def test_nesting_in_m(self):
        pool, clf = self.make_scored_pool()
        for m in range(1, len(pool)):
            small = {u for u, _ in target(pool, clf, m).entries}
            big = {u for u, _ in target(pool, clf, m + 1).entries}
            assert small <= big

    def test_oversized_m_returns_all_flagged(self):
        pool, clf = self.make_scored_pool(n=4)
        ts = target(pool, clf, 10)
        assert len(ts.entries) == 4
        assert ts.underfilled
        scores = [s for _, s in ts.entries]
        assert scores == sorted(scores, reverse=True)

    def test_tie_breaks_ascending_user_id(self):
        pool = [cand("ub", [1.0, 0.0]), cand("ua", [2.0, 0.0])]
        clf = [WeakClassifier(np.array([1.0, 0.0]), 1.0, 0)]
        ts = target(pool, clf, 2)  # cosine 1.0 for both
        assert [u for u, _ in ts.entries] == ["ua", "ub"]

    def test_empty_pool_flagged(self):
        clf = [WeakClassifier(np.ones(2), 1.0, 0)]
        ts = target([], clf, 3)
        assert ts.entries == [] and ts.underfilled

    def test_no_duplicate_users(self):
        pool, clf = self.make_scored_pool()
        ts = target(pool, clf, len(pool))
        ids = [u for u, _ in ts.entries]
        assert len(ids) == len(set(ids))

    def test_json_shape(self):
        ts = TargetSet(entries=[("u0", 0.5)], m=1)
        assert ts.to_json_obj() == [{"user_id": "u0", "score": 0.5}]

    def test_bad_m_rejected(self):
        pool, clf = self.make_scored_pool()
        with pytest.raises(ContractError):
            target(pool, clf, 0)
