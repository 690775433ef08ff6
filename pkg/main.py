"""
WEATHERDA Command-line Entry Point
==================================
Single command: python main.py <subcommand> [flags]

Subcommands: prepare-manifest, embed-cache, score-prior, train, evaluate, report.
Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

import torch
from dotenv import dotenv_values
from pydantic import ValidationError

from src.config.settings import settings
from src.engine.curriculum import prior_score
from src.engine.data_domains import (
    DomainManifest,
    ImageLoader,
    class_histogram,
    imbalance_ratio,
    load_manifest,
    write_manifest,
)
from src.engine.errors import AdaptationError, CheckpointError, ManifestError
from src.engine.eval_report import (
    compare_runs,
    domain_separability,
    evaluate,
    load_result,
    write_comparison,
    write_result,
)
from src.engine.model_core import load_checkpoint, model_from_checkpoint
from src.engine.toy_benchmark import build_toy_benchmark
from src.engine.trainer import DomainAdaptationTrainer, seed_fanout
from src.engine.vlm_bridge import (
    EmbeddingCache,
    PromptQualityProvider,
    build_provider,
    image_embedding,
    text_embedding_table,
)
from src.models.models import AblationMode, DomainTag, WeatherCondition
from src.models.schemas import TrainConfig
from src.telemetry.metrics import MetricsLog

logging.basicConfig(
    level=getattr(logging, settings.LOG_LEVEL.upper(), logging.INFO),
    format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
    datefmt="%H:%M:%S",
)
logger = logging.getLogger("weatherda")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

_PATH_KEYS = ("manifest", "eval_manifest", "embedding_cache")


class UsageError(Exception):
    """Bad flags, unreadable config, or missing inputs (exit 2)."""


# ── Config resolution ───────────────────────────────────────────────────────

def _parse_overrides(pairs: Sequence[str]) -> dict[str, str]:
    out = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"--set expects key=value, got '{pair}'")
        out[key.strip()] = value.strip()
    return out


def resolve_config(
    config_path: Optional[str],
    seed: Optional[int] = None,
    ablation: Optional[str] = None,
    overrides: Sequence[str] = (),
) -> TrainConfig:
    """File values, then the ablation preset, then ``--set`` pairs, then ``--seed``.

    Relative paths inside the config file are taken relative to the file.
    """
    if config_path is None:
        raise UsageError("--config is required")
    path = Path(config_path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")

    values: dict[str, Any] = {k.lower(): v for k, v in dotenv_values(path).items() if v is not None}
    for key in _PATH_KEYS:
        if values.get(key) and not Path(values[key]).is_absolute():
            values[key] = str(path.parent / values[key])

    try:
        config = TrainConfig.model_validate(values)
        if ablation:
            config = config.with_ablation(ablation)
        extra = _parse_overrides(overrides)
        if seed is not None:
            extra["seed"] = seed
        if extra:
            config = TrainConfig.model_validate({**config.model_dump(), **extra})
    except ValidationError as exc:
        raise UsageError(f"invalid configuration in {path}: {exc}") from exc
    return config


def _load_manifest(path: Optional[str | Path]) -> DomainManifest:
    if path is None:
        raise UsageError("a manifest path is required")
    try:
        return load_manifest(path)
    except (FileNotFoundError, ManifestError) as exc:
        raise UsageError(str(exc)) from exc


def _out_dir(args: argparse.Namespace, default: str) -> Path:
    out = Path(args.out_dir or Path(settings.OUTPUT_DIR) / default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_invocation(out_dir: Path, args: argparse.Namespace, argv: Sequence[str],
                     config: Optional[TrainConfig] = None, name: str = settings.INVOCATION_FILE) -> Path:
    seed = config.seed if config is not None else (args.seed or 0)
    record = {
        "command": args.command,
        "argv": list(argv),
        "seed": seed,
        "seeds": seed_fanout(seed),
        "config": config.model_dump(mode="json") if config is not None else None,
        "args": {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "handler"},
    }
    path = out_dir / name
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# ── Subcommands ─────────────────────────────────────────────────────────────

def cmd_prepare_manifest(args: argparse.Namespace, argv: Sequence[str]) -> int:
    out_dir = _out_dir(args, "manifest")
    if args.toy:
        path = build_toy_benchmark(
            out_dir, n_source=args.n_source, n_target=args.n_target,
            seed=args.seed or 0, image_size=args.image_size, imbalance=args.imbalance,
        )
        manifest = _load_manifest(path)
    elif args.manifest:
        manifest = _load_manifest(args.manifest)
    else:
        raise UsageError("prepare-manifest needs --toy or --manifest")

    summary = {}
    for domain in DomainTag:
        hist = class_histogram(manifest, domain)
        named = {manifest.label_space[k]: v for k, v in hist.items()}
        ratio = imbalance_ratio(hist)
        summary[domain.value] = {"histogram": named, "imbalance_ratio": ratio}
        logger.info("%s histogram: %s (imbalance %.2f)", domain.value, named, ratio)
    summary["n_source"] = manifest.n_s
    summary["n_target"] = manifest.n_t
    (out_dir / "manifest_summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    write_invocation(out_dir, args, argv)
    print(f"manifest ok: {manifest.n_s} source, {manifest.n_t} target, K={manifest.num_classes}")
    return EXIT_OK


def cmd_embed_cache(args: argparse.Namespace, argv: Sequence[str]) -> int:
    config = resolve_config(args.config, args.seed, args.ablation, args.set)
    manifest = _load_manifest(config.manifest)
    out_dir = _out_dir(args, "embed-cache")
    write_invocation(out_dir, args, argv, config)

    provider = build_provider(config.provider, config.embedding_dim, config.provider_model,
                              config.provider_pretrained, config.device)
    cache = EmbeddingCache(config.embedding_cache or settings.EMBEDDING_CACHE_PATH, provider.identifier, provider.d_e)
    try:
        table = text_embedding_table(provider, manifest.label_space, list(WeatherCondition), config.template, cache)
        n_images = 0
        if args.images:
            loader = ImageLoader(manifest.base_dir, config.image_size)
            records = manifest.source_records
            for start in range(0, len(records), config.batch_size):
                chunk = records[start:start + config.batch_size]
                image_embedding(provider, loader.batch(chunk), [r.id for r in chunk], cache)
                n_images += len(chunk)
    finally:
        cache.close()
    print(f"cached {len(table)} prompt embeddings and {n_images} image embeddings in {cache.path}")
    return EXIT_OK


def cmd_score_prior(args: argparse.Namespace, argv: Sequence[str]) -> int:
    manifest = _load_manifest(args.manifest)
    missing = [r for r in manifest.source_records if r.prior_quality is None]
    if missing and not args.iqa_provider:
        raise UsageError(
            f"{len(missing)} source record(s) lack prior_quality and no --iqa-provider was given"
        )

    quality: dict[str, float] = {r.id: r.prior_quality for r in manifest.source_records if r.prior_quality is not None}
    if missing:
        provider = build_provider(args.iqa_provider, args.embedding_dim, device=settings.DEVICE)
        iqa = PromptQualityProvider(provider)
        loader = ImageLoader(manifest.base_dir, args.image_size)
        for start in range(0, len(missing), 32):
            chunk = missing[start:start + 32]
            for rec, q in zip(chunk, iqa.score(loader.batch(chunk)).tolist()):
                quality[rec.id] = round(float(q), 6)

    src_path = Path(args.manifest)
    out_path = Path(args.out) if args.out else src_path.with_name(src_path.stem + ".scored.jsonl")
    if out_path.resolve() == src_path.resolve():
        raise UsageError("refusing to overwrite the input manifest")
    relocate = out_path.resolve().parent != manifest.base_dir.resolve()

    updated = []
    for rec in manifest.records:
        changes: dict[str, Any] = {}
        if relocate:
            changes["image_ref"] = str((manifest.base_dir / rec.image_ref).resolve())
        if rec.domain is DomainTag.SOURCE:
            changes["prior_quality"] = quality[rec.id]
            changes["prior_score"] = prior_score(quality[rec.id], rec.weather)
        updated.append(rec.model_copy(update=changes))
    write_manifest(manifest.with_records(updated), out_path)
    load_manifest(out_path)

    if args.out_dir:
        write_invocation(_out_dir(args, "score-prior"), args, argv)
    else:
        write_invocation(out_path.parent, args, argv, name=f"{out_path.stem}.invocation.json")
    print(f"scored {manifest.n_s} source records -> {out_path}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace, argv: Sequence[str]) -> int:
    config = resolve_config(args.config, args.seed, args.ablation, args.set)
    manifest = _load_manifest(config.manifest)
    eval_manifest = _load_manifest(config.eval_manifest) if config.eval_manifest else None
    out_dir = _out_dir(args, f"train-seed{config.seed}")
    write_invocation(out_dir, args, argv, config)

    provider = build_provider(config.provider, config.embedding_dim, config.provider_model,
                              config.provider_pretrained, config.device)
    cache = (
        EmbeddingCache(config.embedding_cache, provider.identifier, provider.d_e)
        if config.embedding_cache else None
    )
    metrics = MetricsLog(out_dir / settings.METRICS_FILE, append=bool(args.resume))
    try:
        trainer = DomainAdaptationTrainer(
            config, manifest, provider,
            loader=ImageLoader(manifest.base_dir, config.image_size),
            metrics=metrics, cache=cache,
            score_dump=out_dir / settings.SCORES_FILE if config.use_curriculum else None,
        )
        result = trainer.fit(out_dir, resume=args.resume)
        if eval_manifest is not None:
            ev = evaluate(
                trainer.model, eval_manifest, ImageLoader(eval_manifest.base_dir, config.image_size),
                batch_size=config.batch_size, device=config.device,
                predictions_path=out_dir / settings.PREDICTIONS_FILE,
            )
            write_result(ev, out_dir / settings.RESULTS_FILE)
            separability = domain_separability(
                trainer.model, manifest, trainer.loader, seed=config.seed,
                batch_size=config.batch_size, device=config.device,
            )
            metrics.record_eval(
                overall_acc=ev.overall_acc, macro_acc=ev.macro_acc, n_eval=ev.n_eval,
                domain_separability=separability,
            )
            print(f"overall accuracy: {ev.overall_acc:.4f}")
    finally:
        if cache is not None:
            cache.close()
    print(f"final checkpoint: {result.checkpoint}")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace, argv: Sequence[str]) -> int:
    manifest = _load_manifest(args.manifest)
    out_dir = _out_dir(args, "evaluate")
    write_invocation(out_dir, args, argv)

    payload = load_checkpoint(args.checkpoint)
    model, config = model_from_checkpoint(payload)
    if list(payload["label_space"]) != list(manifest.label_space):
        raise CheckpointError("checkpoint and manifest label spaces differ")
    result = evaluate(
        model, manifest, ImageLoader(manifest.base_dir, config.image_size),
        batch_size=args.batch_size, device=settings.DEVICE,
        predictions_path=out_dir / settings.PREDICTIONS_FILE,
    )
    write_result(result, out_dir / settings.RESULTS_FILE)
    print(f"overall accuracy: {result.overall_acc:.4f}")
    return EXIT_OK


def cmd_report(args: argparse.Namespace, argv: Sequence[str]) -> int:
    if not args.results:
        raise UsageError("report needs at least one --results name=path")
    runs = []
    for name, path in _parse_overrides(args.results).items():
        if not Path(path).is_file():
            raise UsageError(f"results file not found: {path}")
        runs.append((name, load_result(path)))
    try:
        table = compare_runs(runs)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out_dir = _out_dir(args, "report")
    write_invocation(out_dir, args, argv)
    csv_path, md_path = write_comparison(table, out_dir)
    print(f"comparison written: {csv_path}, {md_path}")
    return EXIT_OK


# ── Parser ──────────────────────────────────────────────────────────────────

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value run configuration")
    common.add_argument("--seed", type=int, help="master seed (overrides the config file)")
    common.add_argument("--ablation", choices=[m.value for m in AblationMode], help="ablation preset")
    common.add_argument("--out-dir", help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")

    parser = argparse.ArgumentParser(prog="weatherda", description=__doc__.splitlines()[1])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-manifest", parents=[common], help="validate a manifest or render the toy benchmark")
    p.add_argument("--manifest")
    p.add_argument("--toy", action="store_true")
    p.add_argument("--n-source", type=int, default=1000)
    p.add_argument("--n-target", type=int, default=1000)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--imbalance", type=float, default=10.0)
    p.set_defaults(handler=cmd_prepare_manifest)

    p = sub.add_parser("embed-cache", parents=[common], help="precompute VLM embeddings")
    p.add_argument("--images", action="store_true", help="also embed source images")
    p.set_defaults(handler=cmd_embed_cache)

    p = sub.add_parser("score-prior", parents=[common], help="write a manifest copy with prior scores")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out")
    p.add_argument("--iqa-provider", choices=["hash", "open_clip"])
    p.add_argument("--embedding-dim", type=int, default=512)
    p.add_argument("--image-size", type=int, default=224)
    p.set_defaults(handler=cmd_score_prior)

    p = sub.add_parser("train", parents=[common], help="train an adaptation model")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="evaluate a checkpoint on target labels")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--batch-size", type=int, default=64)
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("report", parents=[common], help="compare evaluation results")
    p.add_argument("--results", action="append", default=[], metavar="NAME=PATH")
    p.set_defaults(handler=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    if settings.NUM_THREADS > 0:
        torch.set_num_threads(settings.NUM_THREADS)

    try:
        return args.handler(args, argv)
    except UsageError as exc:
        logger.error("%s", exc)
        return EXIT_USAGE
    except (AdaptationError, RuntimeError, ValueError, OSError) as exc:
        logger.error("%s failed: %s", args.command, exc)
        return EXIT_RUNTIME


# ═══════════════════════════════════════════════════════════════════════════
#  Entry Point
# ═══════════════════════════════════════════════════════════════════════════

if __name__ == "__main__":
    sys.exit(main())
