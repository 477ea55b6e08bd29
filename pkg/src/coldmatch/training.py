"""Training loop: pairwise ranking loss, contrastive regularization, Adam.

The supervised signal is co-occurrence pairs; each (query, partner) pair is
scored against a sampled negative with a BPR objective. A second, uniformly
sampled song batch feeds the contrastive path so the long tail is not
drowned out by the popularity skew of the pair data. Each optimizer step
draws all of its randomness up front into a StepPlan, which makes the
combined objective a deterministic function of the parameters — that is
what the gradient checks differentiate.
"""

from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .contrast import (
    AUGMENTATION_KINDS,
    AugmentedGroupPair,
    CorrelationMatrix,
    correlation_snapshot,
    draw_view_batch,
    ema_update,
    info_nce,
    sample_groups,
)
from .encoder import (
    EncoderConfig,
    SongContent,
    backbone_backward,
    backbone_forward,
    build_vocabs,
    head_backward,
    head_forward,
    init_params,
    load_catalog,
    scatter_stack_grads,
)
from .errors import ContractError, FormatError, NumericError, SamplingError, VocabError
from .numerics import ParamStore, adam_step
from .rng import RngStream

log = logging.getLogger(__name__)

ABLATIONS = ("full_bcl", "base", "feature_dropout", "static_corr_mask_only")

CHECKPOINT_MAGIC = b"BCL1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainTriple:
    """One ranking constraint: query i should score j above k."""

    i: str
    j: str
    k: str


@dataclass
class TrainConfig:
    lr: float = 0.001
    batch_size_bpr: int = 256
    batch_size_cl: int = 256
    lambda1: float = 0.1
    lambda2: float = 1e-4
    tau: float = 0.2
    rho: float = 0.3
    eps: float = 0.05
    alpha: float = 0.9
    refresh_interval: int = 100
    epochs: int = 30
    negatives_per_positive: int = 1
    ablation: str = "full_bcl"
    seed: int = 42

    def validate(self) -> None:
        if self.ablation not in ABLATIONS:
            raise ContractError(f"unknown ablation {self.ablation!r}, expected one of {ABLATIONS}")
        for name in ("lr", "tau"):
            if getattr(self, name) <= 0:
                raise ContractError(f"{name} must be positive")
        for name in ("batch_size_bpr", "batch_size_cl", "refresh_interval",
                     "epochs", "negatives_per_positive"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")
        for name in ("lambda1", "lambda2", "eps"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be >= 0")
        if not 0.0 <= self.rho <= 1.0:
            raise ContractError("rho must be in [0, 1]")
        if not 0.0 <= self.alpha <= 1.0:
            raise ContractError("alpha must be in [0, 1]")

    @property
    def cl_enabled(self) -> bool:
        return self.ablation in ("full_bcl", "static_corr_mask_only")

    @property
    def cl_weight(self) -> float:
        # the contrastive term simply does not exist for the non-CL ablations
        return self.lambda1 if self.cl_enabled else 0.0

    @property
    def view_kinds(self) -> tuple[str, ...]:
        if self.ablation == "static_corr_mask_only":
            return ("random_mask", "span_mask")
        return AUGMENTATION_KINDS


# Dataset wiring ----------------------------------------------------------------


@dataclass
class TrainData:
    """Catalog resolved into flat arrays so batch assembly is pure indexing."""

    songs: list[SongContent]
    song_ids: list[str]
    id_to_pos: dict[str, int]
    attr_idx: np.ndarray  # (n_songs, n_attrs) int64
    audio: np.ndarray
    lyric: np.ndarray
    pairs: list[tuple[str, str]]

    @classmethod
    def build(
        cls,
        songs: Sequence[SongContent],
        vocabs: list[dict[str, int]],
        pairs: Sequence[tuple[str, str]],
    ) -> "TrainData":
        n_attrs = len(vocabs)
        attr_idx = np.empty((len(songs), n_attrs), dtype=np.int64)
        for i, song in enumerate(songs):
            for f, value in enumerate(song.attrs):
                try:
                    attr_idx[i, f] = vocabs[f][str(value)]
                except KeyError:
                    raise VocabError(
                        f"song {song.song_id} attr slot {f} value {value!r} not in vocabulary"
                    ) from None
        audio = np.stack([s.audio for s in songs])
        lyric = np.stack([s.lyric for s in songs])
        ids = [s.song_id for s in songs]
        id_to_pos = {sid: i for i, sid in enumerate(ids)}
        for a, b in pairs:
            if a not in id_to_pos or b not in id_to_pos:
                raise VocabError(f"pair ({a}, {b}) references a song missing from the catalog")
        return cls(list(songs), ids, id_to_pos, attr_idx, audio, lyric, list(pairs))

    @property
    def n_songs(self) -> int:
        return len(self.songs)


def assemble_positions(
    params: dict[str, np.ndarray],
    config: EncoderConfig,
    data: TrainData,
    positions: np.ndarray,
) -> np.ndarray:
    """(B, k, d) input stacks for catalog positions, pure in ``params``."""
    b = positions.shape[0]
    stacks = np.empty((b, config.k, config.d), dtype=np.float64)
    for f in range(config.n_attrs):
        stacks[:, f, :] = params[f"emb_{f}"][data.attr_idx[positions, f]]
    audio_rows = data.audio[positions]
    lyric_rows = data.lyric[positions]
    if "audio_w" in params:
        stacks[:, config.n_attrs, :] = audio_rows @ params["audio_w"] + params["audio_b"]
    else:
        stacks[:, config.n_attrs, :] = audio_rows
    if "lyric_w" in params:
        stacks[:, config.n_attrs + 1, :] = lyric_rows @ params["lyric_w"] + params["lyric_b"]
    else:
        stacks[:, config.n_attrs + 1, :] = lyric_rows
    return stacks


# Losses -------------------------------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def bpr_loss(
    r_i: np.ndarray, r_j: np.ndarray, r_k: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Mean -log sigma(r_i.r_j - r_i.r_k) plus gradients for all three banks."""
    r_i = np.asarray(r_i, dtype=np.float64)
    r_j = np.asarray(r_j, dtype=np.float64)
    r_k = np.asarray(r_k, dtype=np.float64)
    if not (r_i.shape == r_j.shape == r_k.shape) or r_i.ndim != 2:
        raise ContractError(
            f"expected three equal (B, d_r) banks, got {r_i.shape}, {r_j.shape}, {r_k.shape}"
        )
    n = r_i.shape[0]
    gap = np.einsum("bd,bd->b", r_i, r_j - r_k)
    loss = float(np.logaddexp(0.0, -gap).mean())
    # d/dgap of softplus(-gap) = sigma(gap) - 1
    coeff = (_sigmoid(gap) - 1.0)[:, None] / n
    d_i = coeff * (r_j - r_k)
    d_j = coeff * r_i
    d_k = -coeff * r_i
    return loss, d_i, d_j, d_k


def multitask_loss(
    bpr: float, cl: float, params: dict[str, np.ndarray], lambda1: float, lambda2: float
) -> float:
    """Combined objective: ranking + weighted contrastive + L2 penalty."""
    if lambda1 < 0 or lambda2 < 0:
        raise ContractError("penalty weights must be >= 0")
    l2 = sum(float((v * v).sum()) for v in params.values())
    return bpr + lambda1 * cl + lambda2 * l2


# Negative sampling ---------------------------------------------------------------


def sample_negatives(
    positives: Sequence[tuple[str, str]],
    catalog_ids: Sequence[str],
    per_positive: int,
    rng: np.random.Generator,
) -> list[TrainTriple]:
    """Uniform negatives with rejection of the query's known partners.

    Each directed positive (i, j) yields ``per_positive`` triples; the
    negative is redrawn until it is neither i itself nor any listed
    partner of i.
    """
    n = len(catalog_ids)
    partners: dict[str, set[str]] = {}
    for i, j in positives:
        partners.setdefault(i, set()).add(j)
    for i, linked in partners.items():
        if len(linked | {i}) >= n:
            raise SamplingError(f"song {i} is linked to the entire catalog; no negative exists")
    triples: list[TrainTriple] = []
    draws = rng.integers(n, size=len(positives) * per_positive)
    t = 0
    for i, j in positives:
        blocked = partners[i]
        for _ in range(per_positive):
            k = catalog_ids[draws[t]]
            t += 1
            while k == i or k in blocked:
                k = catalog_ids[int(rng.integers(n))]
            triples.append(TrainTriple(i=i, j=j, k=k))
    return triples


# Step plan -----------------------------------------------------------------------


@dataclass
class StepPlan:
    """All randomness for one optimizer step, drawn before any math."""

    triple_pos: np.ndarray  # (B, 3) catalog positions of (i, j, k)
    cl_pos: np.ndarray | None = None
    pair: AugmentedGroupPair | None = None
    view_masks: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray] | None = None
    drop_keep: np.ndarray | None = None  # (3B, k) row keep mask, feature_dropout only


@dataclass
class TrainState:
    config: TrainConfig
    encoder_config: EncoderConfig
    vocabs: list[dict[str, int]]
    data: TrainData
    store: ParamStore
    rngs: RngStream
    correlation: CorrelationMatrix | None = None
    step: int = 0
    consecutive_bad: int = 0


def resolve_triples(data: TrainData, triples: Sequence[TrainTriple]) -> np.ndarray:
    pos = np.empty((len(triples), 3), dtype=np.int64)
    for t, tr in enumerate(triples):
        try:
            pos[t, 0] = data.id_to_pos[tr.i]
            pos[t, 1] = data.id_to_pos[tr.j]
            pos[t, 2] = data.id_to_pos[tr.k]
        except KeyError as exc:
            raise VocabError(f"triple references unknown song {exc.args[0]!r}") from None
    return pos


def refresh_correlation(state: TrainState, cl_pos: np.ndarray) -> None:
    """Maintain the slow-moving correlation matrix before group sampling.

    The first snapshot is adopted wholesale; afterwards it is folded in by
    EMA every refresh_interval steps. The static ablation freezes the first
    snapshot forever.
    """
    cfg = state.config
    step_number = state.step + 1
    if state.correlation is None:
        stacks = assemble_positions(state.store.tensors, state.encoder_config, state.data, cl_pos)
        state.correlation = CorrelationMatrix(
            correlation_snapshot(stacks), last_refresh_step=step_number
        )
        return
    if cfg.ablation == "static_corr_mask_only":
        return
    if step_number % cfg.refresh_interval == 0:
        stacks = assemble_positions(state.store.tensors, state.encoder_config, state.data, cl_pos)
        ema_update(state.correlation, correlation_snapshot(stacks), cfg.alpha, step=step_number)


def build_step_plan(state: TrainState, triples: Sequence[TrainTriple],
                    cl_pos: np.ndarray | None) -> StepPlan:
    """Draw grouping, views, and dropout for one step from the labeled streams."""
    cfg = state.config
    enc = state.encoder_config
    plan = StepPlan(triple_pos=resolve_triples(state.data, triples))
    if cfg.cl_enabled and cl_pos is not None and cl_pos.size >= 2:
        refresh_correlation(state, cl_pos)
        plan.cl_pos = cl_pos
        plan.pair = sample_groups(state.correlation, state.rngs.stream("grouping"))
        plan.view_masks = draw_view_batch(
            cl_pos.size, enc.k, enc.d, plan.pair, state.rngs.stream("augmentation"),
            rho=cfg.rho, eps=cfg.eps, kinds=cfg.view_kinds,
        )
    if cfg.ablation == "feature_dropout":
        u = state.rngs.stream("augmentation").random(size=(3 * len(triples), enc.k))
        plan.drop_keep = (u >= cfg.rho).astype(np.float64)
    return plan


@dataclass
class StepResult:
    loss_total: float
    loss_bpr: float
    loss_cl: float
    grads: dict[str, np.ndarray] = field(repr=False)


def step_forward(
    params: dict[str, np.ndarray],
    plan: StepPlan,
    config: TrainConfig,
    encoder_config: EncoderConfig,
    data: TrainData,
) -> StepResult:
    """Loss and gradients for one plan; pure in ``params``."""
    grads = {name: np.zeros_like(value) for name, value in params.items()}
    n_attrs = encoder_config.n_attrs

    # ranking path: one stacked forward over the three roles
    b = plan.triple_pos.shape[0]
    flat_pos = plan.triple_pos.T.reshape(-1)  # i-block, j-block, k-block
    stacks = assemble_positions(params, encoder_config, data, flat_pos)
    if plan.drop_keep is not None:
        stacks = stacks * plan.drop_keep[:, :, None]
    r_all, bb_cache = backbone_forward(params, stacks)
    r_i, r_j, r_k = r_all[:b], r_all[b : 2 * b], r_all[2 * b :]
    loss_bpr, d_i, d_j, d_k = bpr_loss(r_i, r_j, r_k)
    d_r = np.concatenate([d_i, d_j, d_k], axis=0)
    d_stacks, bb_grads = backbone_backward(d_r, bb_cache)
    if plan.drop_keep is not None:
        d_stacks = d_stacks * plan.drop_keep[:, :, None]
    for name, g in bb_grads.items():
        grads[name] += g
    emb_grads = scatter_stack_grads(
        d_stacks, data.attr_idx[flat_pos], data.audio[flat_pos], data.lyric[flat_pos], params
    )
    for name, g in emb_grads.items():
        grads[name] += g

    # contrastive path over the uniform batch, both views in one forward
    loss_cl = 0.0
    weight = config.cl_weight
    if plan.cl_pos is not None and plan.pair is not None and weight >= 0 and config.cl_enabled:
        mask_a, noise_a, mask_b, noise_b = plan.view_masks
        clean = assemble_positions(params, encoder_config, data, plan.cl_pos)
        views = np.concatenate([clean * mask_a + noise_a, clean * mask_b + noise_b], axis=0)
        r_views, cl_bb_cache = backbone_forward(params, views)
        z, head_cache = head_forward(params, r_views)
        n_cl = plan.cl_pos.size
        loss_cl, d_za, d_zb = info_nce(z[:n_cl], z[n_cl:], config.tau)
        d_z = np.concatenate([d_za, d_zb], axis=0) * weight
        d_r_views, head_grads = head_backward(d_z, head_cache)
        for name, g in head_grads.items():
            grads[name] += g
        d_views, cl_bb_grads = backbone_backward(d_r_views, cl_bb_cache)
        for name, g in cl_bb_grads.items():
            grads[name] += g
        d_clean = d_views[:n_cl] * mask_a + d_views[n_cl:] * mask_b
        cl_emb_grads = scatter_stack_grads(
            d_clean, data.attr_idx[plan.cl_pos], data.audio[plan.cl_pos],
            data.lyric[plan.cl_pos], params,
        )
        for name, g in cl_emb_grads.items():
            grads[name] += g

    # L2 acts on every tensor, including ones untouched this step
    for name, theta in params.items():
        grads[name] += 2.0 * config.lambda2 * theta
    loss_total = multitask_loss(loss_bpr, loss_cl, params, weight, config.lambda2)
    return StepResult(loss_total=loss_total, loss_bpr=loss_bpr, loss_cl=loss_cl, grads=grads)


def train_step(
    state: TrainState, triples: Sequence[TrainTriple], cl_pos: np.ndarray | None
) -> dict:
    """One optimizer step; skips the update if the loss or grads blow up."""
    if len(triples) == 0:
        raise ContractError("empty ranking batch")
    plan = build_step_plan(state, triples, cl_pos)
    result = step_forward(state.store.tensors, plan, state.config, state.encoder_config, state.data)
    finite = np.isfinite(result.loss_total) and all(
        np.all(np.isfinite(g)) for g in result.grads.values()
    )
    if not finite:
        state.consecutive_bad += 1
        log.warning("step %d produced non-finite loss/gradients; update skipped (%d in a row)",
                    state.step + 1, state.consecutive_bad)
        if state.consecutive_bad >= 3:
            raise NumericError(
                f"training diverged: 3 consecutive non-finite steps ending at step {state.step + 1}"
            )
    else:
        state.consecutive_bad = 0
        adam_step(state.store, result.grads, lr=state.config.lr)
    state.step += 1
    return {
        "step": state.step,
        "loss_total": result.loss_total,
        "loss_bpr": result.loss_bpr,
        "loss_cl": result.loss_cl,
        "skipped": not finite,
    }


# Checkpoints ---------------------------------------------------------------------


@dataclass
class Checkpoint:
    version: int
    config: TrainConfig
    encoder_config: EncoderConfig
    vocabs: list[dict[str, int]]
    tensors: dict[str, np.ndarray]  # float32 payloads
    correlation: CorrelationMatrix | None
    log_summary: list[dict]


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    """Binary layout: magic, version byte, header length, JSON header, payloads.

    All payloads are little-endian float32 in the header's declared order.
    """
    tensor_names = sorted(ckpt.tensors)
    header = {
        "config": asdict(ckpt.config),
        "encoder": asdict(ckpt.encoder_config),
        "vocabs": ckpt.vocabs,
        "tensors": [
            {"name": n, "shape": list(ckpt.tensors[n].shape)} for n in tensor_names
        ],
        "correlation": None
        if ckpt.correlation is None
        else {
            "shape": list(ckpt.correlation.values.shape),
            "last_refresh_step": ckpt.correlation.last_refresh_step,
        },
        "log_summary": ckpt.log_summary,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<B", ckpt.version))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name in tensor_names:
            fh.write(np.ascontiguousarray(ckpt.tensors[name], dtype="<f4").tobytes())
        if ckpt.correlation is not None:
            fh.write(np.ascontiguousarray(ckpt.correlation.values, dtype="<f4").tobytes())


def _read_exact(fh, count: int, path: str, what: str) -> bytes:
    offset = fh.tell()
    chunk = fh.read(count)
    if len(chunk) != count:
        raise FormatError(
            f"{path}: truncated while reading {what} at offset {offset} "
            f"(wanted {count} bytes, got {len(chunk)})"
        )
    return chunk


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, not a checkpoint file")
        version = struct.unpack("<B", _read_exact(fh, 1, path, "version"))[0]
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        (header_len,) = struct.unpack("<I", _read_exact(fh, 4, path, "header length"))
        try:
            header = json.loads(_read_exact(fh, header_len, path, "header").decode("utf-8"))
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise FormatError(f"{path}: header is not valid JSON ({exc})") from None
        tensors: dict[str, np.ndarray] = {}
        for entry in header["tensors"]:
            shape = tuple(int(v) for v in entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            chunk = _read_exact(fh, 4 * count, path, f"tensor {entry['name']}")
            tensors[entry["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(shape).copy()
        correlation = None
        if header["correlation"] is not None:
            shape = tuple(int(v) for v in header["correlation"]["shape"])
            count = int(np.prod(shape))
            chunk = _read_exact(fh, 4 * count, path, "correlation matrix")
            correlation = CorrelationMatrix(
                np.frombuffer(chunk, dtype="<f4").reshape(shape).astype(np.float64),
                last_refresh_step=int(header["correlation"]["last_refresh_step"]),
            )
        trailing = fh.read(1)
        if trailing:
            raise FormatError(f"{path}: trailing bytes after declared payloads")
    config = TrainConfig(**header["config"])
    encoder_config = EncoderConfig(**header["encoder"])
    vocabs = [{str(k): int(v) for k, v in vocab.items()} for vocab in header["vocabs"]]
    return Checkpoint(
        version=version,
        config=config,
        encoder_config=encoder_config,
        vocabs=vocabs,
        tensors=tensors,
        correlation=correlation,
        log_summary=header["log_summary"],
    )


def model_params_from_checkpoint(ckpt: Checkpoint) -> dict[str, np.ndarray]:
    """Float64 copies of the stored tensors, ready for the forward passes."""
    return {name: arr.astype(np.float64) for name, arr in ckpt.tensors.items()}


# Full loop -----------------------------------------------------------------------


def directed_pairs(pairs: Sequence[tuple[str, str]]) -> list[tuple[str, str]]:
    """Each undirected positive is trained from both sides."""
    out: list[tuple[str, str]] = []
    for a, b in pairs:
        out.append((a, b))
        out.append((b, a))
    return out


def train(
    config: TrainConfig,
    catalog_path: str,
    pairs_path: str,
    encoder_config: EncoderConfig | None = None,
    log_path: str | None = None,
) -> Checkpoint:
    """Run the full loop over a catalog and mined positive pairs.

    Epoch logs go to ``log_path`` as JSON lines (with wall-clock times); the
    returned Checkpoint embeds the same numbers minus timings, so identical
    seeds produce identical checkpoint bytes.
    """
    from .datagen import load_pairs

    config.validate()
    enc = encoder_config if encoder_config is not None else EncoderConfig()
    songs = load_catalog(catalog_path)
    if not songs:
        raise ContractError(f"{catalog_path}: empty catalog")
    pairs = [(p.song_i, p.song_j) for p in load_pairs(pairs_path)]
    if not pairs:
        raise ContractError(f"{pairs_path}: no positive pairs to train on")

    # adapters kick in when the content vectors are not embedding width
    audio_dim = songs[0].audio.shape[0]
    lyric_dim = songs[0].lyric.shape[0]
    enc = replace(
        enc,
        audio_dim=None if audio_dim == enc.d else audio_dim,
        lyric_dim=None if lyric_dim == enc.d else lyric_dim,
    )
    enc.validate()

    vocabs = build_vocabs(songs, enc.n_attrs)
    rngs = RngStream(config.seed)
    store = init_params(enc, [len(v) for v in vocabs], rngs.stream("init"))
    data = TrainData.build(songs, vocabs, pairs)
    state = TrainState(
        config=config, encoder_config=enc, vocabs=vocabs, data=data, store=store, rngs=rngs
    )

    directed = directed_pairs(pairs)
    bpr_rows = np.arange(len(directed))
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    summary: list[dict] = []
    try:
        for epoch in range(1, config.epochs + 1):
            t0 = time.monotonic()
            order = rngs.stream("shuffle").permutation(bpr_rows)
            shuffled = [directed[i] for i in order]
            triples = sample_negatives(
                shuffled, data.song_ids, config.negatives_per_positive, rngs.stream("negatives")
            )
            totals = np.zeros(3)
            n_steps = 0
            for start in range(0, len(triples), config.batch_size_bpr):
                chunk = triples[start : start + config.batch_size_bpr]
                cl_pos = None
                if config.cl_enabled:
                    n_draw = min(config.batch_size_cl, data.n_songs)
                    cl_pos = rngs.stream("grouping").choice(
                        data.n_songs, size=n_draw, replace=False
                    )
                record = train_step(state, chunk, cl_pos)
                totals += (record["loss_total"], record["loss_bpr"], record["loss_cl"])
                n_steps += 1
            wall_ms = (time.monotonic() - t0) * 1000.0
            entry = {
                "epoch": epoch,
                "loss_total": float(totals[0] / n_steps),
                "loss_bpr": float(totals[1] / n_steps),
                "loss_cl": float(totals[2] / n_steps),
            }
            summary.append(entry)
            if log_fh:
                log_fh.write(json.dumps({**entry, "wall_ms": wall_ms}) + "\n")
                log_fh.flush()
            log.info("epoch %d: total %.5f bpr %.5f cl %.5f (%.0f ms)",
                     epoch, entry["loss_total"], entry["loss_bpr"], entry["loss_cl"], wall_ms)
    finally:
        if log_fh:
            log_fh.close()

    return Checkpoint(
        version=CHECKPOINT_VERSION,
        config=config,
        encoder_config=enc,
        vocabs=vocabs,
        tensors={name: arr.astype("<f4") for name, arr in store.tensors.items()},
        correlation=state.correlation,
        log_summary=summary,
    )
