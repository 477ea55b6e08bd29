"""Synthetic world generator.

Stands in for a production interaction log: a catalog with power-law song
popularity and genre-structured content, simulated user listening sessions,
co-occurrence mining into scored song pairs, thresholding into the positive
set, and a train/test split. Everything is reproducible from one seed.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .encoder import SongContent
from .errors import ContractError, FormatError

log = logging.getLogger(__name__)

BEHAVIORS = ("play", "red_heart", "songmark")


@dataclass
class GenConfig:
    """Knobs for the synthetic world.

    Defaults are desk scale: large enough for ranking metrics to separate
    models, small enough to regenerate in seconds.
    """

    n_songs: int = 2000
    n_users: int = 500
    n_genres: int = 5
    n_attrs: int = 7
    d: int = 32
    attr_vocab: int = 24  # values per attribute slot, shared across genres
    popularity_exponent: float = 1.0
    events_per_user: int = 250
    window: int = 3
    behavior_weights: dict[str, float] = field(
        default_factory=lambda: {"play": 1.0, "red_heart": 2.0, "songmark": 2.0}
    )
    threshold: float = 3.0
    test_fraction: float = 0.1
    user_dim: int = 32
    seed: int = 42

    def validate(self) -> None:
        for name in ("n_songs", "n_users", "n_genres", "n_attrs", "d", "attr_vocab",
                     "events_per_user", "user_dim"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")
        if self.popularity_exponent <= 0:
            raise ContractError("popularity_exponent must be positive")
        if self.threshold < 0:
            raise ContractError("threshold must be >= 0")
        if self.window < 0:
            raise ContractError("window must be >= 0")
        if not 0.0 < self.test_fraction < 1.0:
            raise ContractError("test_fraction must be in (0, 1)")
        unknown = set(self.behavior_weights) - set(BEHAVIORS)
        if unknown:
            raise ContractError(f"unknown behaviors in weights: {sorted(unknown)}")


@dataclass(frozen=True)
class BehaviorEvent:
    user_id: str
    song_id: str
    timestamp: int
    behavior: str

    def __post_init__(self) -> None:
        if self.behavior not in BEHAVIORS:
            raise ContractError(f"unknown behavior {self.behavior!r}")


@dataclass(frozen=True)
class ScoredPair:
    """Unordered song pair with a co-occurrence score; i < j canonically."""

    song_i: str
    song_j: str
    score: float

    def __post_init__(self) -> None:
        if self.song_i == self.song_j:
            raise ContractError(f"self-pair {self.song_i!r}")
        if self.song_j < self.song_i:
            raise ContractError("pair not in canonical order (song_i < song_j)")
        if self.score < 0:
            raise ContractError("score must be >= 0")


def popularity_weights(n_songs: int, gamma: float) -> np.ndarray:
    """Normalized Zipf-style mass: song at rank i gets (i+1)^-gamma."""
    raw = np.power(np.arange(1, n_songs + 1, dtype=np.float64), -gamma)
    return raw / raw.sum()


# Catalog ----------------------------------------------------------------------


def generate_catalog(cfg: GenConfig, rng: np.random.Generator, path: str) -> list[SongContent]:
    """Write the catalog JSON-lines file and return the songs.

    Song index doubles as popularity rank (song 0 most popular). Attribute
    values lean toward a genre-typical value, resampled uniformly with
    probability 0.2; audio/lyric vectors are genre centroids plus jitter.
    """
    cfg.validate()
    genre_names = [f"g{g}" for g in range(cfg.n_genres)]
    genres = rng.integers(cfg.n_genres, size=cfg.n_songs)
    typical = rng.integers(cfg.attr_vocab, size=(cfg.n_attrs, cfg.n_genres))
    audio_centroids = rng.normal(size=(cfg.n_genres, cfg.d))
    lyric_centroids = rng.normal(size=(cfg.n_genres, cfg.d))

    songs: list[SongContent] = []
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(cfg.n_songs):
            g = int(genres[i])
            attrs = []
            for f in range(cfg.n_attrs):
                if rng.uniform() < 0.2:
                    attrs.append(int(rng.integers(cfg.attr_vocab)))
                else:
                    attrs.append(int(typical[f, g]))
            audio = audio_centroids[g] + rng.normal(scale=0.3, size=cfg.d)
            lyric = lyric_centroids[g] + rng.normal(scale=0.3, size=cfg.d)
            rec = {
                "song_id": f"s{i:05d}",
                "attrs": attrs,
                "audio": [float(v) for v in audio],
                "lyric": [float(v) for v in lyric],
                "genre": genre_names[g],
            }
            fh.write(json.dumps(rec) + "\n")
            songs.append(
                SongContent(
                    song_id=rec["song_id"],
                    attrs=[str(a) for a in attrs],
                    audio=audio,
                    lyric=lyric,
                    genre=rec["genre"],
                )
            )
    return songs


# Behavior ---------------------------------------------------------------------


def song_sampling_probs(
    genres: np.ndarray, popularity: np.ndarray, prefs: np.ndarray
) -> np.ndarray:
    """Per-song pick probability for one user: popularity x genre affinity.

    The 0.05 floor keeps every genre reachable so sessions are not pure
    single-genre streaks even for concentrated preferences.
    """
    affinity = 0.05 + prefs[genres]
    w = popularity * affinity
    return w / w.sum()


def sample_user_events(
    user_id: str,
    song_ids: Sequence[str],
    probs: np.ndarray,
    n_events: int,
    rng: np.random.Generator,
) -> list[BehaviorEvent]:
    """One user's session: songs ~ probs, behavior kinds fixed mixture."""
    picks = rng.choice(len(song_ids), size=n_events, p=probs)
    kinds = rng.choice(len(BEHAVIORS), size=n_events, p=[0.85, 0.10, 0.05])
    return [
        BehaviorEvent(
            user_id=user_id,
            song_id=song_ids[int(s)],
            timestamp=t + 1,
            behavior=BEHAVIORS[int(k)],
        )
        for t, (s, k) in enumerate(zip(picks, kinds))
    ]


def generate_behavior(
    catalog: Sequence[SongContent],
    cfg: GenConfig,
    rng: np.random.Generator,
    path: str,
) -> tuple[list[BehaviorEvent], dict[str, np.ndarray]]:
    """Write the event log TSV: user_id, song_id, timestamp, behavior.

    Also returns each user's drawn genre preferences, which seed the user
    embedding file downstream.
    """
    cfg.validate()
    song_ids = [s.song_id for s in catalog]
    genre_index = {g: idx for idx, g in enumerate(sorted({s.genre for s in catalog}))}
    genres = np.array([genre_index[s.genre] for s in catalog], dtype=np.int64)
    popularity = popularity_weights(len(catalog), cfg.popularity_exponent)

    events: list[BehaviorEvent] = []
    prefs_by_user: dict[str, np.ndarray] = {}
    with open(path, "w", encoding="utf-8") as fh:
        for u in range(cfg.n_users):
            user_id = f"u{u:04d}"
            prefs = rng.dirichlet(np.full(len(genre_index), 0.3))
            prefs_by_user[user_id] = prefs
            probs = song_sampling_probs(genres, popularity, prefs)
            user_events = sample_user_events(user_id, song_ids, probs, cfg.events_per_user, rng)
            for ev in user_events:
                fh.write(f"{ev.user_id}\t{ev.song_id}\t{ev.timestamp}\t{ev.behavior}\n")
            events.extend(user_events)
    return events, prefs_by_user


def generate_user_embeddings(
    cfg: GenConfig, prefs_by_user: dict[str, np.ndarray], rng: np.random.Generator, path: str
) -> None:
    """Lift genre preferences to user_dim by one fixed random projection."""
    projection = rng.normal(size=(cfg.n_genres, cfg.user_dim))
    with open(path, "w", encoding="utf-8") as fh:
        for user_id in sorted(prefs_by_user):
            emb = prefs_by_user[user_id] @ projection
            fh.write(user_id + "\t" + "\t".join(repr(float(v)) for v in emb) + "\n")


def generate_world(cfg: GenConfig, out_dir: str, rng: np.random.Generator | None = None) -> dict:
    """Full pipeline: catalog, events, user embeddings, pairs, split, stats.

    Returns the file paths plus summary counts. A single rng drives every
    stage in a fixed order, so one seed pins all artifacts.
    """
    cfg.validate()
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 6]))
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "catalog": os.path.join(out_dir, "catalog.jsonl"),
        "events": os.path.join(out_dir, "events.tsv"),
        "users": os.path.join(out_dir, "users.tsv"),
        "pairs": os.path.join(out_dir, "pairs_train.tsv"),
        "pairs_test": os.path.join(out_dir, "pairs_test.tsv"),
        "pairs_all": os.path.join(out_dir, "pairs_all.tsv"),
        "stats": os.path.join(out_dir, "stats.json"),
    }
    catalog = generate_catalog(cfg, rng, paths["catalog"])
    events, prefs_by_user = generate_behavior(catalog, cfg, rng, paths["events"])
    generate_user_embeddings(cfg, prefs_by_user, rng, paths["users"])

    mined = mine_cooccurrence(events, cfg.window, cfg.behavior_weights)
    kept = threshold_filter(mined, cfg.threshold)
    save_pairs(paths["pairs_all"], kept)
    train, test = split(kept, cfg.test_fraction, rng)
    save_pairs(paths["pairs"], train)
    save_pairs(paths["pairs_test"], test)
    stats = dataset_stats(cfg.n_songs, kept)
    with open(paths["stats"], "w", encoding="utf-8") as fh:
        json.dump(stats, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return {**paths, "n_events": len(events), "n_pairs": len(kept),
            "n_train": len(train), "n_test": len(test), "summary": stats}


# Mining -----------------------------------------------------------------------


def mine_cooccurrence(
    events: Sequence[BehaviorEvent], window: int, weights: dict[str, float]
) -> list[ScoredPair]:
    """Score song pairs that appear near each other in a user's sequence.

    For every pair of one user's events at most ``window`` positions apart,
    the pair of (distinct) songs gains weight(b1) * weight(b2). Output is in
    canonical (song_i < song_j) order, sorted by pair for determinism.
    """
    by_user: dict[str, list[BehaviorEvent]] = {}
    for ev in events:
        by_user.setdefault(ev.user_id, []).append(ev)
    scores: dict[tuple[str, str], float] = {}
    for user_id, seq in by_user.items():
        for a, b in zip(seq, seq[1:]):
            if b.timestamp <= a.timestamp:
                raise ContractError(
                    f"events for user {user_id} not sorted by timestamp "
                    f"({a.timestamp} then {b.timestamp})"
                )
        for p in range(len(seq)):
            wp = weights.get(seq[p].behavior, 0.0)
            for q in range(p + 1, min(p + window + 1, len(seq))):
                if seq[p].song_id == seq[q].song_id:
                    continue
                key = (seq[p].song_id, seq[q].song_id)
                if key[1] < key[0]:
                    key = (key[1], key[0])
                scores[key] = scores.get(key, 0.0) + wp * weights.get(seq[q].behavior, 0.0)
    return [ScoredPair(i, j, s) for (i, j), s in sorted(scores.items())]


def threshold_filter(pairs: Iterable[ScoredPair], theta: float) -> list[ScoredPair]:
    """Keep pairs scoring >= theta, best first, ties by pair id."""
    if theta < 0:
        raise ContractError("theta must be >= 0")
    kept = [p for p in pairs if p.score >= theta]
    return sorted(kept, key=lambda p: (-p.score, p.song_i, p.song_j))


def split(
    pairs: Sequence[ScoredPair], fraction: float, rng: np.random.Generator
) -> tuple[list[ScoredPair], list[ScoredPair]]:
    """Bernoulli split into train/test.

    A held-out pair is only useful if both endpoint songs keep at least one
    training pair (otherwise a query song has nothing learned to stand on),
    so test pairs failing that are dropped, with a logged count.
    """
    if not 0.0 < fraction < 1.0:
        raise ContractError(f"test fraction must be in (0, 1), got {fraction}")
    draws = rng.uniform(size=len(pairs))
    train = [p for p, u in zip(pairs, draws) if u >= fraction]
    test_raw = [p for p, u in zip(pairs, draws) if u < fraction]
    train_songs: set[str] = set()
    for p in train:
        train_songs.add(p.song_i)
        train_songs.add(p.song_j)
    test = [p for p in test_raw if p.song_i in train_songs and p.song_j in train_songs]
    dropped = len(test_raw) - len(test)
    if dropped:
        log.info("split: dropped %d test pairs with an endpoint absent from train", dropped)
    return train, test


def dataset_stats(n_songs: int, pairs: Sequence[ScoredPair]) -> dict:
    """Summary in the shape used for interaction-dataset tables."""
    n_pairs = len(pairs)
    return {
        "songs": n_songs,
        "pairs": n_pairs,
        "avg_pairs_per_song": n_pairs / n_songs if n_songs else 0.0,
        "density": n_pairs / (n_songs * n_songs) if n_songs else 0.0,
    }


# File formats ------------------------------------------------------------------


def save_pairs(path: str, pairs: Iterable[ScoredPair]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(f"{p.song_i}\t{p.song_j}\t{repr(p.score)}\n")


def load_pairs(path: str) -> list[ScoredPair]:
    pairs: list[ScoredPair] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise FormatError(f"{path}:{lineno}: expected 3 columns, got {len(parts)}")
            try:
                pairs.append(ScoredPair(parts[0], parts[1], float(parts[2])))
            except (ValueError, ContractError) as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    return pairs


def save_events(path: str, events: Iterable[BehaviorEvent]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ev in events:
            fh.write(f"{ev.user_id}\t{ev.song_id}\t{ev.timestamp}\t{ev.behavior}\n")


def load_events(path: str) -> list[BehaviorEvent]:
    events: list[BehaviorEvent] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise FormatError(f"{path}:{lineno}: expected 4 columns, got {len(parts)}")
            try:
                events.append(BehaviorEvent(parts[0], parts[1], int(parts[2]), parts[3]))
            except (ValueError, ContractError) as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    return events


def load_user_embeddings(path: str) -> dict[str, np.ndarray]:
    users: dict[str, np.ndarray] = {}
    width: int | None = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) < 2:
                raise FormatError(f"{path}:{lineno}: expected user_id plus vector")
            if width is None:
                width = len(parts) - 1
            elif len(parts) - 1 != width:
                raise FormatError(
                    f"{path}:{lineno}: vector width {len(parts) - 1} differs from {width}"
                )
            if parts[0] in users:
                raise FormatError(f"{path}:{lineno}: duplicate user {parts[0]!r}")
            try:
                users[parts[0]] = np.array([float(v) for v in parts[1:]], dtype=np.float64)
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    return users
