"""Synthetic world generator tests: catalog, behavior, mining, split."""

from __future__ import annotations

import json

import numpy as np
import pytest

from coldmatch.datagen import (
    BehaviorEvent,
    GenConfig,
    ScoredPair,
    dataset_stats,
    generate_behavior,
    generate_catalog,
    generate_world,
    load_events,
    load_pairs,
    load_user_embeddings,
    mine_cooccurrence,
    popularity_weights,
    sample_user_events,
    save_pairs,
    song_sampling_probs,
    split,
    threshold_filter,
)
from coldmatch.encoder import load_catalog
from coldmatch.errors import ContractError, FormatError


def gini(values):
    """Standard Gini coefficient from the sorted cumulative-share formula."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    n = v.size
    total = v.sum()
    if n == 0 or total == 0:
        return 0.0
    cum = np.cumsum(v) / total
    return float((n + 1 - 2 * cum.sum()) / n)


def small_cfg(**over):
    base = dict(n_songs=120, n_users=40, n_genres=4, n_attrs=3, d=6,
                attr_vocab=10, events_per_user=60, user_dim=5, seed=1)
    base.update(over)
    return GenConfig(**base)


def ev(user, song, ts, behavior="play"):
    return BehaviorEvent(user, song, ts, behavior)


class TestCatalog:
    def test_counts_and_genre_coverage(self, tmp_path):
        cfg = small_cfg()
        rng = np.random.default_rng(3)
        path = str(tmp_path / "catalog.jsonl")
        songs = generate_catalog(cfg, rng, path)
        assert len(songs) == cfg.n_songs
        genres = {s.genre for s in songs}
        assert genres == {f"g{i}" for i in range(cfg.n_genres)}
        loaded = load_catalog(path)
        assert len(loaded) == cfg.n_songs
        assert all(len(s.attrs) == cfg.n_attrs for s in loaded)

    def test_attrs_lean_genre_typical(self, tmp_path):
        # with 0.2 resampling, the modal value per (slot, genre) should
        # cover roughly 80% of that genre's songs
        cfg = small_cfg(n_songs=600)
        songs = generate_catalog(cfg, np.random.default_rng(5), str(tmp_path / "c.jsonl"))
        by_genre: dict[str, list] = {}
        for s in songs:
            by_genre.setdefault(s.genre, []).append(s)
        fractions = []
        for members in by_genre.values():
            values = [m.attrs[0] for m in members]
            top = max(set(values), key=values.count)
            fractions.append(values.count(top) / len(values))
        assert min(fractions) > 0.6

    def test_vectors_cluster_by_genre(self, tmp_path):
        cfg = small_cfg(n_songs=300)
        songs = generate_catalog(cfg, np.random.default_rng(7), str(tmp_path / "c.jsonl"))
        by_genre: dict[str, list] = {}
        for s in songs:
            by_genre.setdefault(s.genre, []).append(s.audio)
        centroids = {g: np.mean(v, axis=0) for g, v in by_genre.items()}
        # a song sits closer to its own genre centroid than to others
        hits = 0
        for s in songs:
            dists = {g: np.linalg.norm(s.audio - c) for g, c in centroids.items()}
            hits += min(dists, key=dists.get) == s.genre
        assert hits / len(songs) > 0.9

    def test_same_seed_byte_identical(self, tmp_path):
        cfg = small_cfg()
        p1, p2 = str(tmp_path / "a.jsonl"), str(tmp_path / "b.jsonl")
        generate_catalog(cfg, np.random.default_rng(11), p1)
        generate_catalog(cfg, np.random.default_rng(11), p2)
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_attrs_serialized_as_integers(self, tmp_path):
        cfg = small_cfg()
        path = str(tmp_path / "c.jsonl")
        generate_catalog(cfg, np.random.default_rng(0), path)
        first = json.loads(open(path).readline())
        assert all(isinstance(a, int) for a in first["attrs"])


class TestPopularity:
    def test_zipf_head_mass(self):
        # harmonic-sum oracle: top 1% of 2000 songs under gamma=1
        w = popularity_weights(2000, 1.0)
        head = float(w[:20].sum())
        oracle = sum(1.0 / r for r in range(1, 21)) / sum(1.0 / r for r in range(1, 2001))
        assert abs(head - oracle) < 1e-12
        assert head >= 0.15

    def test_weights_normalized_and_decreasing(self):
        w = popularity_weights(50, 1.3)
        assert abs(w.sum() - 1.0) < 1e-12
        assert np.all(np.diff(w) < 0)


class TestBehavior:
    def test_event_count_exact(self, tmp_path):
        cfg = small_cfg(n_users=10, events_per_user=25)
        rng = np.random.default_rng(2)
        songs = generate_catalog(cfg, rng, str(tmp_path / "c.jsonl"))
        events, prefs = generate_behavior(songs, cfg, rng, str(tmp_path / "e.tsv"))
        assert len(events) == 250
        assert len(prefs) == 10
        assert len(load_events(str(tmp_path / "e.tsv"))) == 250

    def test_timestamps_strictly_increase_per_user(self, tmp_path):
        cfg = small_cfg(n_users=8)
        rng = np.random.default_rng(4)
        songs = generate_catalog(cfg, rng, str(tmp_path / "c.jsonl"))
        events, _ = generate_behavior(songs, cfg, rng, str(tmp_path / "e.tsv"))
        by_user: dict[str, list[int]] = {}
        for e in events:
            by_user.setdefault(e.user_id, []).append(e.timestamp)
        for ts in by_user.values():
            assert all(b > a for a, b in zip(ts, ts[1:]))

    def test_single_genre_user_stays_in_genre(self, tmp_path):
        cfg = small_cfg(n_songs=400)
        rng = np.random.default_rng(6)
        songs = generate_catalog(cfg, rng, str(tmp_path / "c.jsonl"))
        genre_index = {g: i for i, g in enumerate(sorted({s.genre for s in songs}))}
        genres = np.array([genre_index[s.genre] for s in songs])
        pop = popularity_weights(len(songs), cfg.popularity_exponent)
        prefs = np.zeros(cfg.n_genres)
        prefs[2] = 1.0  # all preference mass on one genre
        probs = song_sampling_probs(genres, pop, prefs)
        ids = [s.song_id for s in songs]
        genre_of = {s.song_id: s.genre for s in songs}
        events = sample_user_events("u", ids, probs, 2000, np.random.default_rng(8))
        in_genre = sum(genre_of[e.song_id] == "g2" for e in events) / len(events)
        assert in_genre >= 0.7

    def test_behavior_mixture_roughly_matches(self, tmp_path):
        cfg = small_cfg(n_users=30, events_per_user=200)
        rng = np.random.default_rng(9)
        songs = generate_catalog(cfg, rng, str(tmp_path / "c.jsonl"))
        events, _ = generate_behavior(songs, cfg, rng, str(tmp_path / "e.tsv"))
        kinds = [e.behavior for e in events]
        n = len(kinds)
        assert abs(kinds.count("play") / n - 0.85) < 0.03
        assert abs(kinds.count("red_heart") / n - 0.10) < 0.03
        assert abs(kinds.count("songmark") / n - 0.05) < 0.03

    def test_unknown_behavior_rejected(self):
        with pytest.raises(ContractError):
            BehaviorEvent("u", "s", 1, "skip")


class TestMining:
    def test_two_users_adjacent_plays(self):
        events = [
            ev("u1", "A", 1), ev("u1", "B", 2),
            ev("u2", "A", 1), ev("u2", "B", 2),
        ]
        pairs = mine_cooccurrence(events, 1, {"play": 1.0, "red_heart": 2.0, "songmark": 2.0})
        assert pairs == [ScoredPair("A", "B", 2.0)]

    def test_red_heart_pair_counts_quadruple(self):
        events = [ev("u", "A", 1, "red_heart"), ev("u", "B", 2, "red_heart")]
        pairs = mine_cooccurrence(events, 1, {"play": 1.0, "red_heart": 2.0, "songmark": 2.0})
        assert pairs == [ScoredPair("A", "B", 4.0)]

    def test_window_zero_yields_nothing(self):
        events = [ev("u", "A", 1), ev("u", "B", 2)]
        assert mine_cooccurrence(events, 0, {"play": 1.0}) == []

    def test_window_limits_reach(self):
        events = [ev("u", "A", 1), ev("u", "B", 2), ev("u", "C", 3), ev("u", "D", 4)]
        pairs = {(p.song_i, p.song_j): p.score for p in mine_cooccurrence(events, 2, {"play": 1.0})}
        assert ("A", "D") not in pairs  # 3 positions apart
        assert pairs[("A", "C")] == 1.0 and pairs[("B", "D")] == 1.0

    def test_same_song_never_pairs_with_itself(self):
        events = [ev("u", "A", 1), ev("u", "A", 2), ev("u", "B", 3)]
        pairs = mine_cooccurrence(events, 2, {"play": 1.0})
        assert all(p.song_i != p.song_j for p in pairs)
        got = {(p.song_i, p.song_j): p.score for p in pairs}
        assert got == {("A", "B"): 2.0}  # both A events within reach of B

    def test_score_symmetric_under_sequence_reversal(self):
        rng = np.random.default_rng(13)
        songs = [f"s{i}" for i in range(20)]
        fwd = []
        for t in range(50):
            fwd.append(ev("u", songs[int(rng.integers(20))], t + 1,
                          ("play", "red_heart", "songmark")[int(rng.integers(3))]))
        rev = [BehaviorEvent("u", e.song_id, 51 - e.timestamp, e.behavior) for e in reversed(fwd)]
        weights = {"play": 1.0, "red_heart": 2.0, "songmark": 2.0}
        a = {(p.song_i, p.song_j): p.score for p in mine_cooccurrence(fwd, 3, weights)}
        b = {(p.song_i, p.song_j): p.score for p in mine_cooccurrence(rev, 3, weights)}
        assert a == b

    def test_unsorted_events_raise(self):
        events = [ev("u", "A", 5), ev("u", "B", 2)]
        with pytest.raises(ContractError):
            mine_cooccurrence(events, 2, {"play": 1.0})


class TestThresholdAndSplit:
    def make_pairs(self):
        return [ScoredPair("a", "b", 5.0), ScoredPair("a", "c", 2.0),
                ScoredPair("b", "c", 2.0), ScoredPair("c", "d", 9.0)]

    def test_theta_zero_keeps_all(self):
        assert len(threshold_filter(self.make_pairs(), 0.0)) == 4

    def test_above_max_empties(self):
        assert threshold_filter(self.make_pairs(), 10.0) == []

    def test_sorted_descending_stable_ties(self):
        out = threshold_filter(self.make_pairs(), 2.0)
        assert [(p.song_i, p.song_j) for p in out] == [
            ("c", "d"), ("a", "b"), ("a", "c"), ("b", "c")]

    def test_split_disjoint_and_seeded(self):
        rng = np.random.default_rng(17)
        pairs = [ScoredPair(f"s{i:03d}", f"s{i + 1:03d}", float(i + 1)) for i in range(500)]
        tr1, te1 = split(pairs, 0.2, np.random.default_rng(5))
        tr2, te2 = split(pairs, 0.2, np.random.default_rng(5))
        assert tr1 == tr2 and te1 == te2
        assert set((p.song_i, p.song_j) for p in tr1).isdisjoint(
            (p.song_i, p.song_j) for p in te1)

    def test_split_size_binomial_window(self):
        pairs = [ScoredPair(f"a{i:04d}", f"b{i:04d}", 1.0) for i in range(1000)]
        # disjoint endpoints mean every test pair is dropped (no train
        # support), so count the Bernoulli assignment before filtering
        rng = np.random.default_rng(23)
        tr, te = split(pairs, 0.1, rng)
        assert abs((1000 - len(tr)) - 100) <= 30

    def test_test_pairs_keep_train_support(self):
        rng = np.random.default_rng(29)
        songs = [f"s{i}" for i in range(40)]
        pairs = []
        seen = set()
        for _ in range(300):
            i, j = rng.integers(40, size=2)
            if i == j:
                continue
            a, b = sorted((songs[int(i)], songs[int(j)]))
            if (a, b) in seen:
                continue
            seen.add((a, b))
            pairs.append(ScoredPair(a, b, 1.0))
        train, test = split(pairs, 0.3, rng)
        train_songs = {p.song_i for p in train} | {p.song_j for p in train}
        for p in test:
            assert p.song_i in train_songs and p.song_j in train_songs

    def test_bad_fraction_raises(self):
        with pytest.raises(ContractError):
            split([], 0.0, np.random.default_rng(0))


class TestStatsAndFiles:
    def test_stats_arithmetic(self):
        pairs = [ScoredPair("a", "b", 1.0)]
        stats = dataset_stats(10, pairs)
        assert stats == {"songs": 10, "pairs": 1,
                         "avg_pairs_per_song": 0.1, "density": 0.01}

    def test_pairs_round_trip(self, tmp_path):
        pairs = [ScoredPair("a", "b", 1.5), ScoredPair("b", "c", 0.125)]
        path = str(tmp_path / "p.tsv")
        save_pairs(path, pairs)
        assert load_pairs(path) == pairs

    def test_pairs_bad_column_count(self, tmp_path):
        path = tmp_path / "p.tsv"
        path.write_text("a\tb\n")
        with pytest.raises(FormatError, match=":1"):
            load_pairs(str(path))

    def test_events_round_trip(self, tmp_path):
        events = [ev("u1", "s1", 1), ev("u1", "s2", 2, "red_heart")]
        path = str(tmp_path / "e.tsv")
        with open(path, "w") as fh:
            for e in events:
                fh.write(f"{e.user_id}\t{e.song_id}\t{e.timestamp}\t{e.behavior}\n")
        assert load_events(path) == events

    def test_events_bad_behavior_raises(self, tmp_path):
        path = tmp_path / "e.tsv"
        path.write_text("u\ts\t1\tskip\n")
        with pytest.raises(FormatError):
            load_events(str(path))

    def test_user_embeddings_round_trip(self, tmp_path):
        path = tmp_path / "u.tsv"
        path.write_text("u1\t0.5\t-1.25\nu2\t2.0\t0.0\n")
        users = load_user_embeddings(str(path))
        np.testing.assert_array_equal(users["u1"], [0.5, -1.25])
        np.testing.assert_array_equal(users["u2"], [2.0, 0.0])

    def test_user_embeddings_ragged_raises(self, tmp_path):
        path = tmp_path / "u.tsv"
        path.write_text("u1\t0.5\t1.0\nu2\t2.0\n")
        with pytest.raises(FormatError):
            load_user_embeddings(str(path))


class TestWorld:
    def test_world_emits_all_files(self, tmp_path):
        cfg = small_cfg(n_songs=300, n_users=120, events_per_user=120, threshold=2.0)
        out = generate_world(cfg, str(tmp_path / "world"))
        for key in ("catalog", "events", "users", "pairs", "pairs_test", "stats"):
            assert (tmp_path / "world").joinpath(out[key].split("/")[-1]).exists()
        pairs = load_pairs(out["pairs_all"])
        stats = json.load(open(out["stats"]))
        assert stats["pairs"] == len(pairs)

    def test_default_world_long_tail_and_density(self, tmp_path):
        # the skew claim is about the default scale; small worlds saturate
        cfg = GenConfig()
        out = generate_world(cfg, str(tmp_path / "world"))
        pairs = load_pairs(out["pairs_all"])
        degree: dict[str, int] = {}
        for p in pairs:
            degree[p.song_i] = degree.get(p.song_i, 0) + 1
            degree[p.song_j] = degree.get(p.song_j, 0) + 1
        counts = [degree.get(f"s{i:05d}", 0) for i in range(cfg.n_songs)]
        assert gini(counts) > 0.5
        assert 10 <= out["summary"]["avg_pairs_per_song"] <= 25

    def test_world_reproducible(self, tmp_path):
        cfg = small_cfg()
        out1 = generate_world(cfg, str(tmp_path / "w1"))
        out2 = generate_world(cfg, str(tmp_path / "w2"))
        for key in ("catalog", "events", "users", "pairs", "pairs_test", "stats"):
            b1 = open(out1[key], "rb").read()
            b2 = open(out2[key], "rb").read()
            assert b1 == b2, f"{key} differs between identical seeds"
