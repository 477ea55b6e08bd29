"""Song pool indexing, exact top-k retrieval, and ranking metrics.

The pool is small enough that retrieval is a dense dot-product scan plus a
full sort. The scan is exact by construction, so metric numbers carry no
approximation error; the interface would let an ANN backend slot in later
without touching the evaluation code.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .encoder import EncoderConfig, EncoderModel, SongContent, load_catalog
from .errors import ContractError, DimensionError, FormatError
from .numerics import ParamStore
from .training import Checkpoint, load_checkpoint, model_params_from_checkpoint

log = logging.getLogger(__name__)

INDEX_MAGIC = b"BCLIDX1"


@dataclass
class SongPoolIndex:
    """Immutable id-aligned representation matrix for the whole catalog."""

    song_ids: list[str]
    matrix: np.ndarray  # (n_songs, d_r) float64
    fingerprint: str  # sha256 of the generating checkpoint bytes

    def __post_init__(self):
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.song_ids):
            raise DimensionError(
                f"matrix shape {self.matrix.shape} does not cover {len(self.song_ids)} ids"
            )
        self._pos = {sid: i for i, sid in enumerate(self.song_ids)}
        if len(self._pos) != len(self.song_ids):
            raise ContractError("duplicate song ids in index")
        self._ids_arr = np.array(self.song_ids)

    @property
    def n_songs(self) -> int:
        return len(self.song_ids)

    @property
    def d_r(self) -> int:
        return self.matrix.shape[1]

    def vector(self, song_id: str) -> np.ndarray:
        try:
            return self.matrix[self._pos[song_id]]
        except KeyError:
            raise ContractError(f"song {song_id!r} not in index") from None

    def __contains__(self, song_id: str) -> bool:
        return song_id in self._pos


@dataclass(frozen=True)
class Ranking:
    """Ranked (id, score) list; truncated marks a k larger than the pool."""

    items: list[tuple[str, float]]
    truncated: bool = False

    @property
    def ids(self) -> list[str]:
        return [sid for sid, _ in self.items]


def model_from_checkpoint(ckpt: Checkpoint) -> EncoderModel:
    params = model_params_from_checkpoint(ckpt)
    store = ParamStore(tensors=params)
    return EncoderModel(config=ckpt.encoder_config, vocabs=ckpt.vocabs, store=store)


def build_index(checkpoint_path: str, catalog_path: str) -> SongPoolIndex:
    """Encode every catalog song with the checkpointed encoder.

    Row order follows the catalog; the fingerprint ties the index to the
    exact checkpoint bytes that produced it.
    """
    with open(checkpoint_path, "rb") as fh:
        fingerprint = hashlib.sha256(fh.read()).hexdigest()
    ckpt = load_checkpoint(checkpoint_path)
    songs = load_catalog(catalog_path)
    if not songs:
        raise ContractError(f"{catalog_path}: empty catalog")
    model = model_from_checkpoint(ckpt)
    _check_content_dims(model.config, songs[0])
    matrix = model.encode_batch([model.assemble_input(s) for s in songs])
    return SongPoolIndex(
        song_ids=[s.song_id for s in songs], matrix=matrix, fingerprint=fingerprint
    )


def _check_content_dims(config: EncoderConfig, probe: SongContent) -> None:
    want_audio = config.audio_dim if config.audio_dim is not None else config.d
    want_lyric = config.lyric_dim if config.lyric_dim is not None else config.d
    got_audio, got_lyric = probe.audio.shape[0], probe.lyric.shape[0]
    if (got_audio, got_lyric) != (want_audio, want_lyric):
        raise DimensionError(
            f"catalog content dims (audio {got_audio}, lyric {got_lyric}) do not match "
            f"checkpoint encoder (audio {want_audio}, lyric {want_lyric})"
        )


def top_k(
    index: SongPoolIndex,
    query: np.ndarray,
    k: int,
    exclude: Iterable[str] = (),
) -> Ranking:
    """Exact dot-product retrieval: descending score, ties by ascending id."""
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (index.d_r,):
        raise DimensionError(f"query shape {query.shape} does not match d_r={index.d_r}")
    scores = index.matrix @ query
    excluded = set(exclude)
    if excluded:
        keep = np.array([sid not in excluded for sid in index.song_ids])
        scores = scores[keep]
        ids = index._ids_arr[keep]
    else:
        ids = index._ids_arr
    # lexsort's last key is primary: ascending -score, then ascending id
    order = np.lexsort((ids, -scores))
    n = min(k, ids.shape[0])
    items = [(str(ids[i]), float(scores[i])) for i in order[:n]]
    return Ranking(items=items, truncated=k > ids.shape[0])


def recall_at_k(ranked_ids: Sequence[str], ground_truth: set[str], k: int) -> float:
    if not ground_truth:
        raise ContractError("ground truth is empty")
    hits = sum(1 for sid in ranked_ids[:k] if sid in ground_truth)
    return hits / len(ground_truth)


def ndcg_at_k(ranked_ids: Sequence[str], ground_truth: set[str], k: int) -> float:
    """Binary-relevance NDCG with the standard 1/log2(rank+1) discount."""
    if not ground_truth:
        raise ContractError("ground truth is empty")
    dcg = 0.0
    for p, sid in enumerate(ranked_ids[:k], start=1):
        if sid in ground_truth:
            dcg += 1.0 / math.log2(p + 1)
    ideal_hits = min(len(ground_truth), k)
    idcg = sum(1.0 / math.log2(p + 1) for p in range(1, ideal_hits + 1))
    return dcg / idcg


@dataclass
class EvalReport:
    k: int
    query_count: int
    recall: float
    ndcg: float
    per_genre: dict[str, dict[str, float]] = field(default_factory=dict)
    tail: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "query_count": self.query_count,
            "recall_at_k": self.recall,
            "ndcg_at_k": self.ndcg,
            "per_genre": self.per_genre,
            "tail": self.tail,
        }


def evaluate(
    index: SongPoolIndex,
    songs: Sequence[SongContent],
    test_pairs: Sequence[tuple[str, str]],
    train_pairs: Sequence[tuple[str, str]] = (),
    k: int = 50,
) -> EvalReport:
    """Rank the whole pool for every held-out query and average the metrics.

    Each test pair contributes both directions. A query's candidates are
    the pool minus itself minus its training positives; the ground truth is
    its held-out partners. The tail slice re-averages over queries in the
    bottom quartile of training-pair degree, where cold-start bites.
    """
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    gt: dict[str, set[str]] = {}
    for a, b in test_pairs:
        gt.setdefault(a, set()).add(b)
        gt.setdefault(b, set()).add(a)
    missing = sorted(q for q in gt if q not in index)
    if missing:
        raise ContractError(
            f"{len(missing)} test songs missing from the index: {missing[:10]}"
        )
    train_partners: dict[str, set[str]] = {}
    degree: dict[str, int] = {}
    for a, b in train_pairs:
        train_partners.setdefault(a, set()).add(b)
        train_partners.setdefault(b, set()).add(a)
    for sid, partners in train_partners.items():
        degree[sid] = len(partners)
    genre_of = {s.song_id: (s.genre if s.genre is not None else "") for s in songs}

    queries = sorted(gt)
    recalls = np.empty(len(queries))
    ndcgs = np.empty(len(queries))
    for qi, q in enumerate(queries):
        exclude = {q} | train_partners.get(q, set())
        ranked = top_k(index, index.vector(q), k, exclude=exclude)
        recalls[qi] = recall_at_k(ranked.ids, gt[q], k)
        ndcgs[qi] = ndcg_at_k(ranked.ids, gt[q], k)

    report = EvalReport(
        k=k,
        query_count=len(queries),
        recall=float(recalls.mean()),
        ndcg=float(ndcgs.mean()),
    )

    by_genre: dict[str, list[int]] = {}
    for qi, q in enumerate(queries):
        by_genre.setdefault(genre_of.get(q, ""), []).append(qi)
    for genre in sorted(by_genre):
        rows = by_genre[genre]
        report.per_genre[genre] = {
            "recall": float(recalls[rows].mean()),
            "ndcg": float(ndcgs[rows].mean()),
            "queries": len(rows),
        }

    degrees = np.array([degree.get(q, 0) for q in queries], dtype=np.float64)
    cutoff = float(np.quantile(degrees, 0.25))
    tail_rows = np.flatnonzero(degrees <= cutoff)
    report.tail = {
        "recall": float(recalls[tail_rows].mean()),
        "ndcg": float(ndcgs[tail_rows].mean()),
        "queries": int(tail_rows.size),
        "degree_cutoff": cutoff,
    }
    return report


def export_representations(
    index: SongPoolIndex, songs: Sequence[SongContent], path: str
) -> None:
    """TSV of song_id, genre, and the d_r representation coordinates."""
    genre_of = {s.song_id: (s.genre if s.genre is not None else "") for s in songs}
    unknown = [sid for sid in index.song_ids if sid not in genre_of]
    if unknown:
        raise ContractError(f"{len(unknown)} indexed songs missing from catalog: {unknown[:5]}")
    with open(path, "w", encoding="utf-8") as fh:
        header = ["song_id", "genre"] + [f"r_{i + 1}" for i in range(index.d_r)]
        fh.write("\t".join(header) + "\n")
        for row, sid in enumerate(index.song_ids):
            coords = "\t".join(repr(float(v)) for v in index.matrix[row])
            fh.write(f"{sid}\t{genre_of[sid]}\t{coords}\n")


# Index file format -----------------------------------------------------------


def save_index(index: SongPoolIndex, path: str) -> None:
    """Magic, header length, JSON header, little-endian float32 payload."""
    header = {
        "count": index.n_songs,
        "d_r": index.d_r,
        "fingerprint": index.fingerprint,
        "song_ids": index.song_ids,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(index.matrix, dtype="<f4").tobytes())


def load_index(path: str) -> SongPoolIndex:
    with open(path, "rb") as fh:
        magic = fh.read(len(INDEX_MAGIC))
        if magic != INDEX_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, not an index file")
        raw_len = fh.read(4)
        if len(raw_len) != 4:
            raise FormatError(f"{path}: truncated header length")
        (header_len,) = struct.unpack("<I", raw_len)
        raw = fh.read(header_len)
        if len(raw) != header_len:
            raise FormatError(f"{path}: truncated header (wanted {header_len} bytes)")
        try:
            header = json.loads(raw.decode("utf-8"))
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise FormatError(f"{path}: header is not valid JSON ({exc})") from None
        count, d_r = int(header["count"]), int(header["d_r"])
        payload = fh.read(4 * count * d_r)
        if len(payload) != 4 * count * d_r:
            raise FormatError(
                f"{path}: truncated payload (wanted {4 * count * d_r} bytes, got {len(payload)})"
            )
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after payload")
    matrix = np.frombuffer(payload, dtype="<f4").reshape(count, d_r).astype(np.float64)
    return SongPoolIndex(
        song_ids=[str(s) for s in header["song_ids"]],
        matrix=matrix,
        fingerprint=str(header["fingerprint"]),
    )
