"""Song content encoder.

A song arrives as categorical attributes plus audio and lyric vectors. The
attributes go through learned embedding tables, the dense vectors through
linear adapters when their width differs from the embedding size, and the
resulting (n_attrs + 2, d) stack is flattened row-major into a three-layer
MLP that yields the retrieval representation r. A small projection head maps
r to the space used by the contrastive objective.

Forward/backward passes are pure functions of a parameter dict so the
trainer can re-run them under perturbed parameters; EncoderModel wraps them
with vocab handling and the user-facing API.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, FormatError, VocabError
from .numerics import ParamStore, dense_backward, dense_forward, xavier_init


@dataclass
class SongContent:
    """One catalog entry: identifiers plus raw content features."""

    song_id: str
    attrs: list[str]
    audio: np.ndarray
    lyric: np.ndarray
    genre: str | None = None

    def __post_init__(self) -> None:
        self.audio = np.asarray(self.audio, dtype=np.float64)
        self.lyric = np.asarray(self.lyric, dtype=np.float64)
        if self.audio.ndim != 1 or self.lyric.ndim != 1:
            raise DimensionError(
                f"audio and lyric must be 1-D vectors (song {self.song_id})"
            )


@dataclass
class FeatureStack:
    """Assembled encoder input for one song.

    ``x`` is the (n_attrs + 2, d) matrix fed to the backbone. The index and
    raw-vector fields are kept so gradients can be routed back into the
    embedding tables and adapters.
    """

    x: np.ndarray
    attr_indices: np.ndarray
    audio: np.ndarray
    lyric: np.ndarray


@dataclass
class EncoderConfig:
    n_attrs: int = 7
    d: int = 128
    hidden1: int = 512
    hidden2: int = 256
    d_r: int = 128
    projection_hidden: int | None = 128
    d_z: int = 64
    audio_dim: int | None = None  # None means already width d, no adapter
    lyric_dim: int | None = None

    @property
    def k(self) -> int:
        return self.n_attrs + 2

    def validate(self) -> None:
        for name in ("n_attrs", "d", "hidden1", "hidden2", "d_r", "d_z"):
            if getattr(self, name) <= 0:
                raise ContractError(f"{name} must be positive")
        if self.projection_hidden is not None and self.projection_hidden <= 0:
            raise ContractError("projection_hidden must be positive or None")


def build_vocabs(songs: Iterable[SongContent], n_attrs: int) -> list[dict[str, int]]:
    """Per-slot attribute vocabularies, indices assigned in sorted order."""
    seen: list[set[str]] = [set() for _ in range(n_attrs)]
    for song in songs:
        if len(song.attrs) != n_attrs:
            raise DimensionError(
                f"song {song.song_id} has {len(song.attrs)} attrs, expected {n_attrs}"
            )
        for f, value in enumerate(song.attrs):
            seen[f].add(str(value))
    return [{v: i for i, v in enumerate(sorted(s))} for s in seen]


# Parameter construction ------------------------------------------------------


def init_params(
    config: EncoderConfig,
    vocab_sizes: Sequence[int],
    rng: np.random.Generator,
) -> ParamStore:
    """Xavier-initialize every tensor, in a fixed registration order."""
    config.validate()
    if len(vocab_sizes) != config.n_attrs:
        raise DimensionError(
            f"got {len(vocab_sizes)} vocab sizes for {config.n_attrs} attribute slots"
        )
    store = ParamStore()
    for f, size in enumerate(vocab_sizes):
        if size <= 0:
            raise ContractError(f"attribute slot {f} has empty vocabulary")
        store.add(f"emb_{f}", xavier_init((size, config.d), rng))
    if config.audio_dim is not None and config.audio_dim != config.d:
        store.add("audio_w", xavier_init((config.audio_dim, config.d), rng))
        store.add("audio_b", xavier_init((config.d,), rng))
    if config.lyric_dim is not None and config.lyric_dim != config.d:
        store.add("lyric_w", xavier_init((config.lyric_dim, config.d), rng))
        store.add("lyric_b", xavier_init((config.d,), rng))
    flat = config.k * config.d
    store.add("backbone_w1", xavier_init((flat, config.hidden1), rng))
    store.add("backbone_b1", xavier_init((config.hidden1,), rng))
    store.add("backbone_w2", xavier_init((config.hidden1, config.hidden2), rng))
    store.add("backbone_b2", xavier_init((config.hidden2,), rng))
    store.add("backbone_w3", xavier_init((config.hidden2, config.d_r), rng))
    store.add("backbone_b3", xavier_init((config.d_r,), rng))
    if config.projection_hidden is None:
        store.add("head_w1", xavier_init((config.d_r, config.d_z), rng))
        store.add("head_b1", xavier_init((config.d_z,), rng))
    else:
        store.add("head_w1", xavier_init((config.d_r, config.projection_hidden), rng))
        store.add("head_b1", xavier_init((config.projection_hidden,), rng))
        store.add("head_w2", xavier_init((config.projection_hidden, config.d_z), rng))
        store.add("head_b2", xavier_init((config.d_z,), rng))
    return store


# Pure forward/backward passes ------------------------------------------------


def backbone_forward(
    params: dict[str, np.ndarray], stacks: np.ndarray
) -> tuple[np.ndarray, list]:
    """Map (n, k, d) stacks to (n, d_r) representations.

    Flattening is row-major, so each attribute row occupies a contiguous
    block of backbone input features.
    """
    stacks = np.asarray(stacks, dtype=np.float64)
    if stacks.ndim != 3:
        raise DimensionError(f"expected (n, k, d) stacks, got shape {stacks.shape}")
    n = stacks.shape[0]
    flat = stacks.reshape(n, -1)
    h1, c1 = dense_forward(flat, params["backbone_w1"], params["backbone_b1"], "relu")
    h2, c2 = dense_forward(h1, params["backbone_w2"], params["backbone_b2"], "relu")
    r, c3 = dense_forward(h2, params["backbone_w3"], params["backbone_b3"], "identity")
    return r, [stacks.shape, c1, c2, c3]


def backbone_backward(
    d_r: np.ndarray, cache: list
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Gradients of the backbone: returns (d_stacks, parameter grads)."""
    shape, c1, c2, c3 = cache
    dh2, dw3, db3 = dense_backward(d_r, c3)
    dh1, dw2, db2 = dense_backward(dh2, c2)
    dflat, dw1, db1 = dense_backward(dh1, c1)
    grads = {
        "backbone_w1": dw1,
        "backbone_b1": db1,
        "backbone_w2": dw2,
        "backbone_b2": db2,
        "backbone_w3": dw3,
        "backbone_b3": db3,
    }
    return dflat.reshape(shape), grads


def head_forward(
    params: dict[str, np.ndarray], r: np.ndarray
) -> tuple[np.ndarray, list]:
    """Projection head: one hidden relu layer when head_w2 exists."""
    r = np.asarray(r, dtype=np.float64)
    if "head_w2" in params:
        h, c1 = dense_forward(r, params["head_w1"], params["head_b1"], "relu")
        z, c2 = dense_forward(h, params["head_w2"], params["head_b2"], "identity")
        return z, [c1, c2]
    z, c1 = dense_forward(r, params["head_w1"], params["head_b1"], "identity")
    return z, [c1]


def head_backward(
    d_z: np.ndarray, cache: list
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    if len(cache) == 2:
        dh, dw2, db2 = dense_backward(d_z, cache[1])
        dr, dw1, db1 = dense_backward(dh, cache[0])
        return dr, {"head_w1": dw1, "head_b1": db1, "head_w2": dw2, "head_b2": db2}
    dr, dw1, db1 = dense_backward(d_z, cache[0])
    return dr, {"head_w1": dw1, "head_b1": db1}


def adapt_vector(
    params: dict[str, np.ndarray], kind: str, vec: np.ndarray, d: int
) -> np.ndarray:
    """Pass a raw audio/lyric vector through its adapter, or through as-is."""
    w_name = f"{kind}_w"
    if w_name in params:
        return vec @ params[w_name] + params[f"{kind}_b"]
    if vec.shape[0] != d:
        raise DimensionError(
            f"{kind} vector has width {vec.shape[0]} but no adapter exists; expected {d}"
        )
    return vec


def scatter_stack_grads(
    d_stacks: np.ndarray,
    attr_indices: np.ndarray,
    audios: np.ndarray,
    lyrics: np.ndarray,
    params: dict[str, np.ndarray],
) -> dict[str, np.ndarray]:
    """Route (n, k, d) input gradients into embeddings and adapters.

    Row layout per stack: attribute rows 0..n_attrs-1, then audio, then
    lyric. Embedding rows accumulate because a batch can repeat an index.
    """
    n, k, d = d_stacks.shape
    n_attrs = k - 2
    grads: dict[str, np.ndarray] = {}
    for f in range(n_attrs):
        g = np.zeros_like(params[f"emb_{f}"])
        np.add.at(g, attr_indices[:, f], d_stacks[:, f, :])
        grads[f"emb_{f}"] = g
    d_audio_row = d_stacks[:, n_attrs, :]
    d_lyric_row = d_stacks[:, n_attrs + 1, :]
    if "audio_w" in params:
        grads["audio_w"] = audios.T @ d_audio_row
        grads["audio_b"] = d_audio_row.sum(axis=0)
    if "lyric_w" in params:
        grads["lyric_w"] = lyrics.T @ d_lyric_row
        grads["lyric_b"] = d_lyric_row.sum(axis=0)
    return grads


def assemble_batch(
    params: dict[str, np.ndarray],
    config: EncoderConfig,
    vocabs: list[dict[str, int]],
    songs: Sequence[SongContent],
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Build (n, k, d) stacks for a batch of songs from raw parameters.

    Returns (stacks, attr_indices, audios, lyrics); the last three are what
    scatter_stack_grads needs to push gradients back. Pure in ``params`` so
    gradient checks can re-run it under perturbations.
    """
    n = len(songs)
    stacks = np.empty((n, config.k, config.d), dtype=np.float64)
    indices = np.empty((n, config.n_attrs), dtype=np.int64)
    audios = np.empty((n, songs[0].audio.shape[0]), dtype=np.float64) if n else np.empty((0, 0))
    lyrics = np.empty((n, songs[0].lyric.shape[0]), dtype=np.float64) if n else np.empty((0, 0))
    for i, song in enumerate(songs):
        if len(song.attrs) != config.n_attrs:
            raise DimensionError(
                f"song {song.song_id} has {len(song.attrs)} attrs, expected {config.n_attrs}"
            )
        for f, value in enumerate(song.attrs):
            try:
                idx = vocabs[f][str(value)]
            except KeyError:
                raise VocabError(
                    f"attribute slot {f} value {value!r} not in vocabulary"
                ) from None
            indices[i, f] = idx
            stacks[i, f] = params[f"emb_{f}"][idx]
        stacks[i, config.n_attrs] = adapt_vector(params, "audio", song.audio, config.d)
        stacks[i, config.n_attrs + 1] = adapt_vector(params, "lyric", song.lyric, config.d)
        audios[i] = song.audio
        lyrics[i] = song.lyric
    return stacks, indices, audios, lyrics


# Model wrapper ---------------------------------------------------------------


@dataclass
class EncoderModel:
    config: EncoderConfig
    vocabs: list[dict[str, int]]
    store: ParamStore = field(repr=False)

    @classmethod
    def build(
        cls,
        config: EncoderConfig,
        vocabs: list[dict[str, int]],
        rng: np.random.Generator,
    ) -> "EncoderModel":
        store = init_params(config, [len(v) for v in vocabs], rng)
        return cls(config=config, vocabs=vocabs, store=store)

    def assemble_input(self, song: SongContent) -> FeatureStack:
        stacks, indices, _, _ = assemble_batch(
            self.store.tensors, self.config, self.vocabs, [song]
        )
        return FeatureStack(
            x=stacks[0], attr_indices=indices[0], audio=song.audio, lyric=song.lyric
        )

    def encode(self, stack: FeatureStack | np.ndarray) -> np.ndarray:
        x = stack.x if isinstance(stack, FeatureStack) else np.asarray(stack)
        if x.shape != (self.config.k, self.config.d):
            raise DimensionError(
                f"stack shape {x.shape} does not match ({self.config.k}, {self.config.d})"
            )
        r, _ = backbone_forward(self.store.tensors, x[None, :, :])
        return r[0]

    def project(self, r: np.ndarray) -> np.ndarray:
        r = np.asarray(r, dtype=np.float64)
        if r.shape != (self.config.d_r,):
            raise DimensionError(
                f"representation shape {r.shape} does not match ({self.config.d_r},)"
            )
        z, _ = head_forward(self.store.tensors, r[None, :])
        return z[0]

    def encode_batch(self, stacks: Sequence[FeatureStack | np.ndarray]) -> np.ndarray:
        # one row at a time on purpose: BLAS batches round differently, and
        # the contract is that batch output equals stacked single encodes
        if len(stacks) == 0:
            return np.zeros((0, self.config.d_r), dtype=np.float64)
        return np.stack([self.encode(s) for s in stacks])


# Catalog files ---------------------------------------------------------------


def load_catalog(path: str) -> list[SongContent]:
    """Read a JSON-lines catalog.

    Each line holds song_id, attrs, audio, lyric, and optionally genre.
    Raises FormatError with the offending line number on any bad record.
    """
    songs: list[SongContent] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: not valid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise FormatError(f"{path}:{lineno}: record is not an object")
            missing = [k for k in ("song_id", "attrs", "audio", "lyric") if k not in rec]
            if missing:
                raise FormatError(f"{path}:{lineno}: missing fields {missing}")
            sid = str(rec["song_id"])
            if sid in seen:
                raise FormatError(f"{path}:{lineno}: duplicate song_id {sid!r}")
            seen.add(sid)
            try:
                songs.append(
                    SongContent(
                        song_id=sid,
                        attrs=[str(a) for a in rec["attrs"]],
                        audio=np.asarray(rec["audio"], dtype=np.float64),
                        lyric=np.asarray(rec["lyric"], dtype=np.float64),
                        genre=str(rec["genre"]) if rec.get("genre") is not None else None,
                    )
                )
            except (TypeError, ValueError, DimensionError) as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    return songs


def save_catalog(path: str, songs: Iterable[SongContent]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for song in songs:
            rec = {
                "song_id": song.song_id,
                "attrs": list(song.attrs),
                "audio": [float(v) for v in song.audio],
                "lyric": [float(v) for v in song.lyric],
            }
            if song.genre is not None:
                rec["genre"] = song.genre
            fh.write(json.dumps(rec) + "\n")
