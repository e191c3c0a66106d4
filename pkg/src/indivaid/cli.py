"""Command line entry point: prepare, train, eval, embed, rank.

Every command exits 0 on success, 2 on input or validation problems, and 1 on
runtime failures, printing a one-line ``error: ...`` message to stderr. All
randomness flows from ``--seed`` (default 0).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

from .data import DatasetError, load_image, scan_dataset, split_records
from .encoders import EncoderConfig, image_to_tensor, make_encoders
from .merge import AttentionMerge
from .metrics import evaluate_retrieval, rank_gallery, write_per_query_ap, write_report
from .prompts import init_prompt_state
from .train import (
    ConfigError,
    TrainConfig,
    load_pipeline,
    run_baseline,
    run_stage1,
    run_stage2,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

_CONFIG_FLAGS = [f.name for f in dataclasses.fields(TrainConfig)]


def write_embeddings(path, features: np.ndarray, paths: list[str]) -> None:
    """Binary embedding file: one JSON header line, then raw float64 rows."""
    feats = np.ascontiguousarray(features, dtype="<f8")
    raw = feats.tobytes()
    header = {
        "dim": int(feats.shape[1]),
        "count": int(feats.shape[0]),
        "checksum": hashlib.sha256(raw).hexdigest(),
        "paths": list(paths),
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(raw)


def read_embeddings(path) -> tuple[np.ndarray, list[str]]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        raw = fh.read()
    if hashlib.sha256(raw).hexdigest() != header["checksum"]:
        raise ValueError(f"embedding file {path} is corrupt (checksum mismatch)")
    feats = np.frombuffer(raw, dtype="<f8").reshape(header["count"], header["dim"])
    return feats.copy(), list(header.get("paths", []))


def _encoder_config(args) -> EncoderConfig:
    if args.backend == "pretrained":
        cfg = EncoderConfig.pretrained_defaults()
        cfg.toy_seed = args.toy_seed
        return cfg
    return EncoderConfig(
        backend="toy",
        embed_dim=args.embed_dim,
        toy_seed=args.toy_seed,
    )


def _embed_records(encoders, records, batch_size: int = 32) -> np.ndarray:
    resolution = encoders.config.resolution
    rows = []
    with torch.no_grad():
        for start in range(0, len(records), batch_size):
            chunk = records[start : start + batch_size]
            images = torch.stack(
                [image_to_tensor(load_image(r.path, resolution)) for r in chunk]
            )
            feats = encoders.encode_image(images, trainable=False)
            feats = feats / torch.linalg.vector_norm(feats, dim=1, keepdim=True)
            rows.append(feats.cpu().numpy())
    return np.concatenate(rows)


def cmd_prepare(args) -> int:
    records, index = scan_dataset(args.root)
    splits = {}
    for split in ("train", "gallery", "query"):
        recs = split_records(records, split)
        per_identity = {}
        for r in recs:
            per_identity[r.source_id] = per_identity.get(r.source_id, 0) + 1
        splits[split] = {
            "images": len(recs),
            "identities": len(per_identity),
            "per_identity": dict(sorted(per_identity.items())),
        }
    summary = {
        "splits": splits,
        "total": {
            "images": len(records),
            "identities": len({r.source_id for r in records}),
        },
    }
    Path(args.out).write_text(json.dumps(summary, indent=2, sort_keys=True))
    print(f"wrote {args.out} (train identities: {index.n})")
    return EXIT_OK


def _config_from_args(args) -> TrainConfig:
    config = TrainConfig.from_yaml(args.config) if args.config else TrainConfig()
    overrides = {}
    for name in _CONFIG_FLAGS:
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if overrides:
        config = dataclasses.replace(config, **overrides)
    return config


def _write_manifest(out_dir: Path, args, config: TrainConfig, checkpoint: Path) -> None:
    manifest = {
        "command": " ".join(sys.argv) if sys.argv else "indivaid train",
        "config": dataclasses.asdict(config),
        "config_hash": config.config_hash(),
        "dataset_root": str(args.root),
        "checkpoint": str(checkpoint),
        "stage1_checkpoint": str(args.stage1_checkpoint) if args.stage1_checkpoint else None,
        "seed": config.seed,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
    }
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def cmd_train(args) -> int:
    config = _config_from_args(args)
    if config.mode == "clip_zs":
        raise ConfigError("zero-shot mode has no training")
    records, index = scan_dataset(args.root)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.jsonl"

    if config.stage == 1:
        if config.mode == "clip_ft":
            raise ConfigError("clip_ft skips the first stage; train with --stage 2")
        encoders = make_encoders(_encoder_config(args))
        state = init_prompt_state(
            index, config.species, encoders,
            num_context=config.num_context, seed=config.seed,
        )
        result = run_stage1(config, records, encoders, state, out_dir, log_path)
    elif config.mode == "clip_ft":
        encoders = make_encoders(_encoder_config(args))
        result = run_baseline(config, records, encoders, out_dir, log_path)
    else:
        if not args.stage1_checkpoint:
            raise ConfigError(
                "stage 2 needs --stage1-checkpoint (the trained description generator)"
            )
        pipeline = load_pipeline(args.stage1_checkpoint)
        if pipeline.prompt_state is None:
            raise ConfigError(f"{args.stage1_checkpoint} holds no description generator")
        attention = AttentionMerge(pipeline.encoders.config.embed_dim)
        result = run_stage2(
            config, records, pipeline.encoders, pipeline.prompt_state,
            attention, out_dir, log_path,
        )

    _write_manifest(out_dir, args, config, result.checkpoint_dir)
    print(f"checkpoint: {result.checkpoint_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.checkpoint:
        pipeline = load_pipeline(args.checkpoint)
        encoders = pipeline.encoders
    elif args.mode == "clip_zs":
        encoders = make_encoders(_encoder_config(args))
    else:
        raise ConfigError("eval needs --checkpoint (or --mode clip_zs for the frozen baseline)")

    runs = args.runs
    if runs > 1:
        logger.warning(
            "a fixed checkpoint is deterministic; forcing runs=1 (got runs=%d)", runs
        )
        runs = 1

    records, _ = scan_dataset(args.root)
    gallery = split_records(records, "gallery")
    query = split_records(records, "query")
    if not gallery or not query:
        raise DatasetError("evaluation needs nonempty gallery and query splits")

    gallery_feats = _embed_records(encoders, gallery)
    query_feats = _embed_records(encoders, query)
    report = evaluate_retrieval(
        query_feats,
        [r.identity for r in query],
        gallery_feats,
        [r.identity for r in gallery],
    )
    write_report(report, args.out)
    if args.per_query_ap:
        write_per_query_ap(report, args.per_query_ap)
    cmc = " ".join(f"top{k}={v:.4f}" for k, v in sorted(report.cmc.items()))
    print(f"mAP={report.map:.4f} {cmc} (report: {args.out})")
    return EXIT_OK


def _gather_image_paths(args) -> list[Path]:
    paths = [Path(p) for p in args.images]
    if args.list:
        paths.extend(Path(line.strip()) for line in Path(args.list).read_text().splitlines() if line.strip())
    if not paths:
        raise ValueError("no images given (positional paths or --list)")
    return paths


def cmd_embed(args) -> int:
    pipeline = load_pipeline(args.checkpoint)
    encoders = pipeline.encoders
    resolution = encoders.config.resolution
    paths = _gather_image_paths(args)

    rows, kept, failed = [], [], []
    with torch.no_grad():
        for path in paths:
            try:
                image = image_to_tensor(load_image(path, resolution))
            except Exception:
                failed.append(str(path))
                continue
            feat = encoders.encode_image(image, trainable=False).normalize()
            rows.append(feat.values.cpu().numpy())
            kept.append(str(path))
    for path in failed:
        print(f"unreadable image: {path}", file=sys.stderr)
    if not rows:
        print("error: no readable images", file=sys.stderr)
        return EXIT_RUNTIME
    write_embeddings(args.out, np.stack(rows), kept)
    print(f"wrote {args.out} ({len(rows)} embeddings, {len(failed)} skipped)")
    return EXIT_OK


def cmd_rank(args) -> int:
    query_feats, query_paths = read_embeddings(args.query)
    gallery_feats, gallery_paths = read_embeddings(args.gallery)
    if query_feats.shape[1] != gallery_feats.shape[1]:
        raise ValueError(
            f"embedding dims differ: {query_feats.shape[1]} vs {gallery_feats.shape[1]}"
        )
    top = min(args.top, gallery_feats.shape[0])
    rankings = rank_gallery(query_feats, gallery_feats)
    with open(args.out, "w") as fh:
        fh.write("query,rank,gallery,score\n")
        for ranking in rankings:
            qname = query_paths[ranking.query_index] if query_paths else str(ranking.query_index)
            for rank in range(top):
                gi = ranking.ordered_gallery[rank]
                gname = gallery_paths[gi] if gallery_paths else str(gi)
                fh.write(f"{qname},{rank + 1},{gname},{ranking.scores[rank]:.8f}\n")
    print(f"wrote {args.out} (top {top} of {gallery_feats.shape[0]} gallery items)")
    return EXIT_OK


def _add_backend_flags(parser):
    parser.add_argument("--backend", choices=("toy", "pretrained"), default="toy")
    parser.add_argument("--embed-dim", type=int, default=32, help="toy backend feature width")
    parser.add_argument("--toy-seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="indivaid",
        description="Two-stage animal re-identification training and retrieval toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="scan a dataset tree and write a summary")
    p.add_argument("--root", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="run a training stage or baseline")
    p.add_argument("--root", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="YAML file mirroring the training config fields")
    p.add_argument("--stage1-checkpoint", help="generator checkpoint required for stage 2")
    _add_backend_flags(p)
    p.add_argument("--stage", type=int, choices=(1, 2))
    p.add_argument("--epochs", type=int)
    p.add_argument("--stage1_lr", "--stage1-lr", type=float, dest="stage1_lr")
    p.add_argument("--stage1_batch_size", type=int)
    p.add_argument("--stage2_lr_start", type=float)
    p.add_argument("--stage2_lr_peak", type=float)
    p.add_argument("--warmup_epochs", type=int)
    p.add_argument("--decay_factor", type=float)
    p.add_argument("--decay_epochs", type=lambda s: tuple(int(x) for x in s.split(",") if x))
    p.add_argument("--tau", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--I", type=int)
    p.add_argument("--K", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--loss_flags", type=lambda s: tuple(x for x in s.split(",") if x))
    p.add_argument("--mode", choices=("indivaid", "clip_ft", "clip_zs"))
    p.add_argument("--species")
    p.add_argument("--num_context", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="rank gallery against queries and report mAP/CMC")
    p.add_argument("--root", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--mode", choices=("indivaid", "clip_ft", "clip_zs"), default="indivaid")
    p.add_argument("--runs", type=int, default=1)
    p.add_argument("--per-query-ap", help="optional CSV of per-query average precision")
    _add_backend_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("embed", help="export unit-norm image embeddings")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--list", help="file with one image path per line")
    p.add_argument("images", nargs="*")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("rank", help="rank gallery embeddings for query embeddings")
    p.add_argument("--query", required=True)
    p.add_argument("--gallery", required=True)
    p.add_argument("--top", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rank)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DatasetError, ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports, not raises
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
