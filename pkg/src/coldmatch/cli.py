"""Command-line pipeline: generate, train, index, evaluate, match, serve.

Results print to stdout as JSON (or TSV where noted); logs go to stderr.
Every subcommand is reproducible from its seed, and the serve loop answers
one line per request line so transcripts diff cleanly.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import math
import sys
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import __version__
from .audience import (
    DEFAULT_K,
    DEFAULT_MAX_ITERS,
    DEFAULT_RUNS,
    DEFAULT_SUBSAMPLE,
    DEFAULT_WINDOW_FRACTION,
    TargetSet,
    bagged_centroids,
    candidate_pool,
    recency_window,
    score_audiences,
    target,
)
from .datagen import (
    BehaviorEvent,
    GenConfig,
    generate_world,
    load_events,
    load_pairs,
    load_user_embeddings,
)
from .encoder import EncoderConfig, EncoderModel, SongContent, load_catalog
from .errors import ColdMatchError, ContractError, FormatError
from .retrieval import (
    SongPoolIndex,
    build_index,
    evaluate,
    export_representations,
    load_index,
    model_from_checkpoint,
    save_index,
    top_k,
)
from .rng import RngStream
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

log = logging.getLogger(__name__)


# Match pipeline ----------------------------------------------------------------


@dataclass
class MatchRequest:
    content: SongContent
    k_songs: int = 50
    m_audiences: int = 100

    def validate(self) -> None:
        if self.k_songs < 1:
            raise ContractError(f"k_songs must be >= 1, got {self.k_songs}")
        if self.m_audiences < 1:
            raise ContractError(f"m_audiences must be >= 1, got {self.m_audiences}")


@dataclass
class MatchResponse:
    retrieved: list[tuple[str, float]]
    pool_size: int
    targets: TargetSet
    timings_ms: dict[str, float]
    reason: str | None = None

    def to_json_obj(self) -> dict:
        return {
            "retrieved": [{"song_id": sid, "score": score} for sid, score in self.retrieved],
            "pool_size": self.pool_size,
            "targets": self.targets.to_json_obj(),
            "timings_ms": self.timings_ms,
            "reason": self.reason,
        }


@dataclass
class CatParams:
    kmeans_k: int = DEFAULT_K
    runs: int = DEFAULT_RUNS
    subsample: float = DEFAULT_SUBSAMPLE
    max_iters: int = DEFAULT_MAX_ITERS
    window_fraction: float = DEFAULT_WINDOW_FRACTION
    seed: int = 42


def parse_match_request(obj: dict) -> MatchRequest:
    if not isinstance(obj, dict):
        raise ContractError("request must be a JSON object")
    try:
        content = obj["content"]
        attrs = [str(a) for a in content["attrs"]]
        audio = np.asarray(content["audio"], dtype=np.float64)
        lyric = np.asarray(content["lyric"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise ContractError(f"bad request content: {exc}") from None
    if audio.ndim != 1 or lyric.ndim != 1:
        raise ContractError("audio and lyric must be flat numeric arrays")
    song = SongContent(
        song_id=str(content.get("song_id", "request")),
        attrs=attrs,
        audio=audio,
        lyric=lyric,
        genre=content.get("genre"),
    )
    req = MatchRequest(
        content=song,
        k_songs=int(obj.get("k_songs", 50)),
        m_audiences=int(obj.get("m_audiences", 100)),
    )
    req.validate()
    return req


def run_match(
    request: MatchRequest,
    model: EncoderModel,
    index: SongPoolIndex,
    events: Sequence[BehaviorEvent],
    user_embeddings: dict[str, np.ndarray],
    cat: CatParams | None = None,
    omit_timings: bool = False,
) -> MatchResponse:
    """Cold song in, target audiences out: encode, retrieve, pool, cluster.

    Randomness restarts from the seed on every call, so identical requests
    produce identical responses even mid-serve. An empty candidate pool is
    a valid outcome, reported with a reason instead of an error.
    """
    cat = cat or CatParams()
    timings: dict[str, float] = {}

    t0 = time.perf_counter()
    r = model.encode(model.assemble_input(request.content))
    timings["encode"] = (time.perf_counter() - t0) * 1000.0

    t0 = time.perf_counter()
    ranked = top_k(index, r, request.k_songs)
    timings["retrieve"] = (time.perf_counter() - t0) * 1000.0

    t0 = time.perf_counter()
    window = recency_window(events, cat.window_fraction) if events else None
    pool = candidate_pool(events, ranked.ids, user_embeddings, window=window) if events else []
    timings["pool"] = (time.perf_counter() - t0) * 1000.0

    reason = None
    if not pool:
        reason = "empty_candidate_pool"
        targets = TargetSet(entries=[], m=request.m_audiences, underfilled=True)
        timings["cluster"] = 0.0
        timings["score"] = 0.0
    else:
        t0 = time.perf_counter()
        rng = RngStream(cat.seed).stream("clustering")
        # shrink K to what the subsample can fill rather than failing a
        # small pool; the targets are still meaningful, just coarser
        k_eff = min(cat.kmeans_k, math.ceil(cat.subsample * len(pool)))
        if k_eff < cat.kmeans_k:
            log.warning("match: pool of %d shrinks kmeans K from %d to %d",
                        len(pool), cat.kmeans_k, k_eff)
        classifiers = bagged_centroids(
            pool, k=k_eff, runs=cat.runs, subsample=cat.subsample, rng=rng,
            max_iters=cat.max_iters,
        )
        timings["cluster"] = (time.perf_counter() - t0) * 1000.0

        t0 = time.perf_counter()
        targets = target(pool, classifiers, request.m_audiences)
        timings["score"] = (time.perf_counter() - t0) * 1000.0

    if omit_timings:
        timings = {name: 0.0 for name in timings}
    return MatchResponse(
        retrieved=[(sid, score) for sid, score in ranked.items],
        pool_size=len(pool),
        targets=targets,
        timings_ms=timings,
        reason=reason,
    )


# Config plumbing ----------------------------------------------------------------


def resolve_config(cls, file_path: str | None, cli_values: dict):
    """Merge defaults <- config file <- explicit CLI flags, in that order."""
    merged = dataclasses.asdict(cls())
    source = {name: "default" for name in merged}
    if file_path:
        with open(file_path, "r", encoding="utf-8") as fh:
            try:
                from_file = json.load(fh)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{file_path}: not valid JSON ({exc})") from None
        unknown = set(from_file) - set(merged)
        if unknown:
            raise ContractError(f"{file_path}: unknown config keys {sorted(unknown)}")
        merged.update(from_file)
        for name in from_file:
            source[name] = "file"
    for name, value in cli_values.items():
        if value is not None:
            if name not in merged:
                raise ContractError(f"unknown config field {name!r}")
            merged[name] = value
            source[name] = "cli"
    cfg = cls(**merged)
    if hasattr(cfg, "validate"):
        cfg.validate()
    overridden = {n: s for n, s in source.items() if s != "default"}
    log.info("%s resolved (cli > file > default); non-default: %s",
             cls.__name__, overridden or "none")
    return cfg


def _checkpoint_fingerprint(path: str) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _check_fingerprint(index: SongPoolIndex, ckpt_path: str) -> None:
    got = _checkpoint_fingerprint(ckpt_path)
    if got != index.fingerprint:
        raise ContractError(
            f"index fingerprint {index.fingerprint[:12]}... does not match "
            f"checkpoint {got[:12]}...; rebuild the index from this checkpoint"
        )


def _emit(obj: dict, out_path: str | None = None) -> None:
    text = json.dumps(obj, sort_keys=True)
    print(text)
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")


# Subcommands --------------------------------------------------------------------


def cmd_gen(args) -> int:
    cfg = resolve_config(
        GenConfig,
        args.config,
        {"n_songs": args.songs, "n_users": args.users, "n_genres": args.genres,
         "seed": args.seed},
    )
    result = generate_world(cfg, args.out)
    files = {name: result[name] for name in
             ("catalog", "events", "users", "pairs", "pairs_test", "pairs_all", "stats")}
    _emit({"out": args.out, "files": files, **result["summary"]})
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(
        TrainConfig,
        args.config,
        {
            "epochs": args.epochs, "seed": args.seed, "ablation": args.ablation,
            "lr": args.lr, "lambda1": args.lambda1, "lambda2": args.lambda2,
            "tau": args.tau, "rho": args.rho, "eps": args.eps, "alpha": args.alpha,
            "refresh_interval": args.refresh_interval,
            "batch_size_bpr": args.batch_bpr, "batch_size_cl": args.batch_cl,
        },
    )
    enc = None
    if args.encoder_config:
        enc = resolve_config(EncoderConfig, args.encoder_config, {})
    ckpt = train(cfg, args.catalog, args.pairs, encoder_config=enc, log_path=args.log)
    save_checkpoint(ckpt, args.out)
    last = ckpt.log_summary[-1] if ckpt.log_summary else {}
    _emit({"checkpoint": args.out, "epochs": cfg.epochs, "ablation": cfg.ablation,
           "final": last})
    return 0


def cmd_index(args) -> int:
    index = build_index(args.ckpt, args.catalog)
    save_index(index, args.out)
    _emit({"index": args.out, "count": index.n_songs, "d_r": index.d_r,
           "fingerprint": index.fingerprint})
    return 0


def cmd_eval(args) -> int:
    catalog = args.catalog or f"{args.data}/catalog.jsonl"
    test_path = args.test_pairs or f"{args.data}/pairs_test.tsv"
    train_path = args.train_pairs
    if train_path is None and args.data:
        train_path = f"{args.data}/pairs_train.tsv"
    index = build_index(args.ckpt, catalog)
    songs = load_catalog(catalog)
    test_pairs = [(p.song_i, p.song_j) for p in load_pairs(test_path)]
    train_pairs = [(p.song_i, p.song_j) for p in load_pairs(train_path)] if train_path else []
    report = evaluate(index, songs, test_pairs, train_pairs=train_pairs, k=args.k)
    _emit(report.to_dict(), args.out)
    return 0


def _load_match_stack(args):
    index = load_index(args.index)
    _check_fingerprint(index, args.ckpt)
    model = model_from_checkpoint(load_checkpoint(args.ckpt))
    events = load_events(args.events)
    users = load_user_embeddings(args.users)
    cat = CatParams(
        kmeans_k=args.kmeans_k, runs=args.runs, subsample=args.subsample,
        max_iters=args.max_iters, window_fraction=args.window_fraction,
        seed=args.seed,
    )
    return index, model, events, users, cat


def cmd_match(args) -> int:
    index, model, events, users, cat = _load_match_stack(args)
    if args.request:
        with open(args.request, "r", encoding="utf-8") as fh:
            raw = fh.read()
    else:
        raw = sys.stdin.read()
    try:
        obj = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise FormatError(f"request is not valid JSON ({exc})") from None
    request = parse_match_request(obj)
    response = run_match(request, model, index, events, users, cat,
                         omit_timings=args.omit_timings)
    print(json.dumps(response.to_json_obj(), sort_keys=True))
    return 0


def cmd_target(args) -> int:
    index = load_index(args.index)
    events = load_events(args.events)
    users = load_user_embeddings(args.users)
    ranked = top_k(index, index.vector(args.song_id), args.k_songs,
                   exclude={args.song_id})
    window = recency_window(events, args.window_fraction) if events else None
    pool = candidate_pool(events, ranked.ids, users, window=window) if events else []
    if not pool:
        _emit({"song_id": args.song_id, "pool_size": 0, "targets": [],
               "reason": "empty_candidate_pool"})
        return 0
    k_eff = min(args.kmeans_k, math.ceil(args.subsample * len(pool)))
    rng = RngStream(args.seed).stream("clustering")
    classifiers = bagged_centroids(pool, k=k_eff, runs=args.runs,
                                   subsample=args.subsample, rng=rng,
                                   max_iters=args.max_iters)
    ts = target(pool, classifiers, args.m)
    _emit({"song_id": args.song_id, "pool_size": len(pool),
           "targets": ts.to_json_obj(), "reason": None})
    return 0


def cmd_export(args) -> int:
    index = build_index(args.ckpt, args.catalog)
    songs = load_catalog(args.catalog)
    export_representations(index, songs, args.out)
    _emit({"export": args.out, "rows": index.n_songs, "d_r": index.d_r})
    return 0


def cmd_serve(args) -> int:
    index, model, events, users, cat = _load_match_stack(args)
    log.info("serve: index of %d songs, %d events, %d users; reading stdin",
             index.n_songs, len(events), len(users))
    for line in sys.stdin:
        line = line.strip()
        try:
            if not line:
                raise FormatError("empty request line")
            request = parse_match_request(json.loads(line))
            response = run_match(request, model, index, events, users, cat,
                                 omit_timings=args.omit_timings)
            out = response.to_json_obj()
        except json.JSONDecodeError as exc:
            out = {"error": "FormatError", "message": f"not valid JSON: {exc}"}
        except ColdMatchError as exc:
            out = {"error": type(exc).__name__, "message": str(exc)}
        sys.stdout.write(json.dumps(out, sort_keys=True) + "\n")
        sys.stdout.flush()
    return 0


# Parser -------------------------------------------------------------------------


def _add_cat_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--kmeans-k", type=int, default=DEFAULT_K)
    p.add_argument("--runs", type=int, default=DEFAULT_RUNS)
    p.add_argument("--subsample", type=float, default=DEFAULT_SUBSAMPLE)
    p.add_argument("--max-iters", type=int, default=DEFAULT_MAX_ITERS)
    p.add_argument("--window-fraction", type=float, default=DEFAULT_WINDOW_FRACTION)
    p.add_argument("--seed", type=int, default=42)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="coldmatch",
        description="Content-based cold-start song matching pipeline.",
    )
    parser.add_argument("--version", action="version", version=f"coldmatch {__version__}")
    parser.add_argument("--quiet", action="store_true", help="only warnings and errors")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic world")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON file of generator settings")
    p.add_argument("--songs", type=int, dest="songs")
    p.add_argument("--users", type=int, dest="users")
    p.add_argument("--genres", type=int, dest="genres")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train an encoder on mined pairs")
    p.add_argument("--catalog", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="epoch losses as JSON lines")
    p.add_argument("--config", help="JSON file of training settings")
    p.add_argument("--encoder-config", help="JSON file of encoder dimensions")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--ablation", choices=("full_bcl", "base", "feature_dropout",
                                          "static_corr_mask_only"))
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--rho", type=float)
    p.add_argument("--eps", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--refresh-interval", type=int, dest="refresh_interval")
    p.add_argument("--batch-bpr", type=int, dest="batch_bpr")
    p.add_argument("--batch-cl", type=int, dest="batch_cl")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("index", help="encode the catalog into a pool index")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--catalog", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("eval", help="Recall@k / NDCG@k over held-out pairs")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", help="world directory with conventional filenames")
    p.add_argument("--catalog")
    p.add_argument("--test-pairs", dest="test_pairs")
    p.add_argument("--train-pairs", dest="train_pairs")
    p.add_argument("--k", type=int, default=50)
    p.add_argument("--out", help="also write the report JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("match", help="cold song request to target audiences")
    p.add_argument("--index", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--events", required=True)
    p.add_argument("--users", required=True)
    p.add_argument("--request", help="JSON request file (default: stdin)")
    p.add_argument("--omit-timings", action="store_true",
                   help="zero the timing block for byte-stable output")
    _add_cat_flags(p)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("target", help="audiences for a song already in the pool")
    p.add_argument("--index", required=True)
    p.add_argument("--events", required=True)
    p.add_argument("--users", required=True)
    p.add_argument("--song-id", required=True, dest="song_id")
    p.add_argument("--k-songs", type=int, default=50, dest="k_songs")
    p.add_argument("--m", type=int, default=100)
    _add_cat_flags(p)
    p.set_defaults(func=cmd_target)

    p = sub.add_parser("export", help="dump representations as TSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--catalog", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("serve", help="NDJSON request/response loop on stdio")
    p.add_argument("--index", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--events", required=True)
    p.add_argument("--users", required=True)
    p.add_argument("--omit-timings", action="store_true")
    _add_cat_flags(p)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.command == "eval" and not (args.data or (args.catalog and args.test_pairs)):
        parser.error("eval needs --data or explicit --catalog/--test-pairs")
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(json.dumps({"error": "FileNotFoundError",
                          "message": f"{exc.filename}: no such file"}), file=sys.stderr)
        return 2
    except ColdMatchError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1
    except Exception as exc:  # contract: one line, machine-parsable, nonzero
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
