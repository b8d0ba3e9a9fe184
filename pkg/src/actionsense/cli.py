"""``actionsense`` command line: prepare, extract, train, evaluate, predict, report.

Exit codes: 0 success, 1 validation/usage errors, 2 I/O or subprocess failures.
"""

from __future__ import annotations

import argparse
import json
import sys
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from . import config as cfgmod
from .backbone import (
    Backbone,
    FeatureVector,
    extract_features,
    fit_feature_normalizer,
    load_backbone,
    load_registry,
    normalize_matrix,
    resolve_spec,
)
from .dataset import DatasetManifest, load_manifest, save_manifest, split_dataset
from .errors import (
    ActionSenseError,
    PipelineIOError,
    UnknownSubcommand,
    ValidationError,
)
from .evaluator import (
    classify_video_raw,
    confusion_csv,
    evaluate_videos,
    load_report,
    render_report,
    save_report,
)
from .featcache import FeatureCache
from .framepipe import DecoderConfig, preprocess_video
from .mlp import HeadConfig, load_model, save_model
from .trainer import TrainConfig, train

SUBCOMMANDS = ("prepare", "extract", "train", "evaluate", "predict", "report")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UnknownSubcommand(f"{self.prog}: {message}")


def _ratios(text: str) -> tuple[float, float, float]:
    parts = [p for p in text.split(",") if p.strip()]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated fractions, e.g. 0.7,0.15,0.15")
    try:
        return tuple(float(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid ratios {text!r}") from None


def _size(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WIDTHxHEIGHT, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    g = common.add_argument_group("shared options")
    g.add_argument("--config", help="TOML config file")
    g.add_argument("--manifest", help="JSON-lines manifest path")
    g.add_argument("--backbone", help="backbone name (stub is built in)")
    g.add_argument("--registry", help="backbone registry (JSON or TOML)")
    g.add_argument("--features", help="feature cache directory")
    g.add_argument("--model", help="model bundle directory")
    g.add_argument("--report-dir", dest="report_dir", help="directory for report artifacts")
    g.add_argument("--seed", type=int, help="global seed (unsigned 64-bit)")
    g.add_argument("--ratios", type=_ratios, help="train,val,test fractions")
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", dest="batch_size", type=int)
    g.add_argument("--lr", type=float, help="learning rate")
    g.add_argument("--patience", type=int, help="early-stopping patience in epochs (0 disables)")
    g.add_argument("--fps", type=int, help="decode rate; one frame per second is kept (default 30)")
    g.add_argument("--format", choices=("text", "json"))
    g.add_argument("--workers", type=int, help="parallel videos during extract")
    g.add_argument("--decoder", help="decoder command template with {input} {fps} {width} {height}")
    g.add_argument("--decode-size", dest="decode_size", type=_size, help="decoder output WIDTHxHEIGHT")
    g.add_argument("--quiet", action="store_true", help="suppress progress lines")

    parser = _Parser(prog="actionsense", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")
    sub.add_parser("prepare", parents=[common], help="validate and split the manifest in place")
    sub.add_parser("extract", parents=[common], help="decode, sample and cache backbone features")
    sub.add_parser("train", parents=[common], help="fit normaliser and head on cached features")
    sub.add_parser("evaluate", parents=[common], help="classify test videos and write a report")
    p = sub.add_parser("predict", parents=[common], help="classify one video with a model bundle")
    p.add_argument("--input", required=True, help="video file or frame directory")
    p.add_argument("--input-fps", dest="input_fps", type=int, help="frame rate of a frame directory")
    r = sub.add_parser("report", parents=[common], help="re-render a saved report")
    r.add_argument("--report", help="report.json path (default <report-dir>/report.json)")
    r.add_argument("--csv", help="also write the confusion matrix as CSV here")
    return parser


def _resolve(args: argparse.Namespace) -> cfgmod.RunConfig:
    flags = {
        name: getattr(args, name, None)
        for name in (
            "manifest", "backbone", "registry", "features", "model", "report_dir", "seed",
            "ratios", "epochs", "batch_size", "lr", "patience", "fps", "format", "workers", "decoder",
        )
    }
    if getattr(args, "decode_size", None):
        flags["decode_width"], flags["decode_height"] = args.decode_size
    return cfgmod.resolve(flags, config_path=args.config)


def _log(args, message: str) -> None:
    if not args.quiet:
        print(message, file=sys.stderr, flush=True)


def _decoder(cfg: cfgmod.RunConfig) -> DecoderConfig:
    return DecoderConfig(cfg.decoder, cfg.decode_width, cfg.decode_height, cfg.probe or None)


def _load_split_manifest(cfg: cfgmod.RunConfig) -> DatasetManifest:
    path = Path(cfg.manifest)
    if not path.is_file():
        raise ValidationError(f"manifest {path} not found; create it and run `prepare` first")
    manifest = load_manifest(path)
    if not manifest.is_split:
        raise ValidationError(f"manifest {path} has unassigned videos; run `prepare` first")
    return manifest


def _load_cache(cfg: cfgmod.RunConfig) -> FeatureCache:
    if not FeatureCache.exists(cfg.features):
        raise ValidationError(f"no feature cache in {cfg.features}; run `extract` first")
    return FeatureCache.load(cfg.features)


def _registry(cfg: cfgmod.RunConfig):
    return load_registry(cfg.registry) if cfg.registry else None


# -- subcommands ---------------------------------------------------------------


def cmd_prepare(args, cfg: cfgmod.RunConfig) -> int:
    manifest = load_manifest(cfg.manifest)
    split = split_dataset(manifest, cfg.ratios, cfgmod.derive_seed(cfg.seed, "split"))
    save_manifest(split, cfg.manifest)
    counts: dict[str, dict[str, int]] = defaultdict(lambda: defaultdict(int))
    for rec in split.records:
        counts[rec.label][rec.split] += 1
    for label in split.vocabulary.labels:
        c = counts[label]
        print(f"{label}: train={c['train']} val={c['val']} test={c['test']}")
    return 0


def _extract_video(backbone: Backbone, manifest: DatasetManifest, rec, cfg) -> tuple[str, list[np.ndarray], list[int]]:
    frames = preprocess_video(
        manifest.resolve_source(rec), cfg.fps, fps_hint=rec.fps_hint, decoder=_decoder(cfg), video_id=rec.video_id
    )
    feats = [extract_features(backbone, f) for f in frames]
    return rec.video_id, [f.values for f in feats], [f.frame_index for f in feats]


def cmd_extract(args, cfg: cfgmod.RunConfig) -> int:
    manifest = load_manifest(cfg.manifest)
    backbone = load_backbone(resolve_spec(cfg.backbone, _registry(cfg)))
    meta = {**backbone.cache_key, "fps": cfg.fps, "dim": backbone.flat_length}

    rows: dict[tuple[str, int], np.ndarray] = {}
    if FeatureCache.exists(cfg.features):
        old = FeatureCache.load(cfg.features)
        if old.meta == meta:
            for row, values in zip(old.index, old.matrix):
                rows[(row["video_id"], int(row["frame_index"]))] = values
        else:
            _log(args, f"extract: cache in {cfg.features} was built with {old.meta}; rebuilding")

    cached_ids = {vid for vid, _ in rows}
    todo = [r for r in manifest.records if r.video_id not in cached_ids]
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        for vid, values, indices in pool.map(lambda r: _extract_video(backbone, manifest, r, cfg), todo):
            for v, i in zip(values, indices):
                rows[(vid, i)] = v

    wanted = {r.video_id: r for r in manifest.records}
    keys = sorted(k for k in rows if k[0] in wanted)
    index = [
        {
            "video_id": vid,
            "frame_index": fi,
            "label_index": manifest.vocabulary.index(wanted[vid].label),
            "split": wanted[vid].split,
        }
        for vid, fi in keys
    ]
    matrix = np.stack([rows[k] for k in keys]) if keys else np.zeros((0, backbone.flat_length), np.float32)
    FeatureCache(matrix.astype(np.float32), index, meta).save(cfg.features)
    cfg.write(cfg.features)
    print(
        f"extract: videos={len(manifest.records)} extracted={len(todo)} "
        f"cached={len(manifest.records) - len(todo)} frames={len(keys)} "
        f"inferences={backbone.inference_count}"
    )
    return 0


def _features_for(cache: FeatureCache, manifest: DatasetManifest, split: str) -> list[FeatureVector]:
    """Cache rows for videos the current manifest assigns to ``split``."""
    members = {r.video_id: r for r in manifest.by_split(split)}
    missing = set(members) - cache.video_ids()
    if missing:
        raise ValidationError(
            f"{len(missing)} {split} videos have no cached features (e.g. {sorted(missing)[0]!r}); "
            "run `extract` again"
        )
    out = []
    for row, values in zip(cache.index, cache.matrix):
        rec = members.get(row["video_id"])
        if rec is None:
            continue
        out.append(
            FeatureVector(values, rec.video_id, int(row["frame_index"]),
                          manifest.vocabulary.index(rec.label), split, cache.backbone)
        )
    return out


def cmd_train(args, cfg: cfgmod.RunConfig) -> int:
    manifest = _load_split_manifest(cfg)
    cache = _load_cache(cfg)
    train_feats = _features_for(cache, manifest, "train")
    val_feats = _features_for(cache, manifest, "val")
    stats = fit_feature_normalizer(train_feats)

    def normed(feats):
        return [
            FeatureVector(normalize_matrix(stats, f.values), f.video_id, f.frame_index,
                          f.label_index, f.split, f.backbone)
            for f in feats
        ]

    head_cfg = HeadConfig(
        input_dim=cache.matrix.shape[1],
        hidden_widths=cfg.hidden_widths,
        output_dim=len(manifest.vocabulary),
        dropout_rate=cfg.dropout_rate,
        seed=cfgmod.derive_seed(cfg.seed, "init"),
    )
    train_cfg = TrainConfig(
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        learning_rate=cfg.lr,
        early_stop_patience=cfg.patience,
        seed=cfgmod.derive_seed(cfg.seed, "train"),
        optimizer=cfg.optimizer,
    )
    model, history = train(
        normed(train_feats),
        normed(val_feats),
        head_cfg,
        train_cfg,
        vocabulary=manifest.vocabulary,
        norm_stats=stats,
        backbone_name=cache.backbone or cfg.backbone,
        verbose=not args.quiet,
    )
    save_model(model, cfg.model)
    history.save(Path(cfg.model) / "history.json")
    cfg.write(cfg.model)
    best = history.records[history.best_epoch - 1] if history.best_epoch else None
    summary = f"train: epochs={len(history)} best_epoch={history.best_epoch}"
    if best is not None:
        summary += f" val_loss={best.val_loss:.6f} val_acc={best.val_accuracy:.4f}"
    print(summary)
    return 0


def cmd_evaluate(args, cfg: cfgmod.RunConfig) -> int:
    manifest = _load_split_manifest(cfg)
    model = load_model(cfg.model)
    cache = _load_cache(cfg)
    if model.backbone_name and cache.backbone and model.backbone_name != cache.backbone:
        raise ValidationError(
            f"model was trained on {model.backbone_name!r} features but the cache holds "
            f"{cache.backbone!r} features"
        )
    test = _features_for(cache, manifest, "test")
    by_video: dict[str, list[FeatureVector]] = defaultdict(list)
    for f in test:
        by_video[f.video_id].append(f)
    videos = [
        (vid, by_video[vid][0].label_index, sorted(by_video[vid], key=lambda f: f.frame_index))
        for vid in sorted(by_video)
    ]
    report = evaluate_videos(model, videos)
    out = Path(cfg.report_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "confusion.csv").write_text(confusion_csv(report), encoding="utf-8")
    except OSError as exc:
        raise PipelineIOError(f"cannot write reports to {out}: {exc}") from exc
    save_report(report, out / "report.json")
    cfg.write(out)
    sys.stdout.write(render_report(report, cfg.format))
    return 0


def cmd_predict(args, cfg: cfgmod.RunConfig) -> int:
    model = load_model(cfg.model)
    name = model.backbone_name or cfg.backbone
    backbone = load_backbone(resolve_spec(name, _registry(cfg)))
    frames = preprocess_video(args.input, cfg.fps, fps_hint=args.input_fps, decoder=_decoder(cfg),
                              video_id=Path(args.input).stem)
    feats = [extract_features(backbone, f) for f in frames]
    decision = classify_video_raw(model, feats, Path(args.input).stem)
    labels = model.vocabulary.labels if model.vocabulary else tuple(map(str, range(len(decision.vote_counts))))
    if cfg.format == "json":
        print(json.dumps({**decision.to_json(), "labels": list(labels)}))
        return 0
    print(decision.predicted_label)
    print("votes: " + "/".join(str(c) for c in decision.vote_counts) + f" ({'/'.join(labels)})")
    print("mean_probabilities: " + " ".join(f"{l}={p:.4f}" for l, p in zip(labels, decision.mean_probabilities)))
    if decision.tie_broken:
        print("tie_broken: true")
    return 0


def cmd_report(args, cfg: cfgmod.RunConfig) -> int:
    path = Path(args.report) if args.report else Path(cfg.report_dir) / "report.json"
    report = load_report(path)
    if args.csv:
        try:
            Path(args.csv).write_text(confusion_csv(report), encoding="utf-8")
        except OSError as exc:
            raise PipelineIOError(f"cannot write {args.csv}: {exc}") from exc
    sys.stdout.write(render_report(report, cfg.format))
    return 0


HANDLERS = {
    "prepare": cmd_prepare,
    "extract": cmd_extract,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "report": cmd_report,
}


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(list(sys.argv[1:] if argv is None else argv))
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise UnknownSubcommand(f"missing subcommand; expected one of {', '.join(SUBCOMMANDS)}")
        cfg = _resolve(args)
        return HANDLERS[args.command](args, cfg)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except PipelineIOError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ActionSenseError as exc:  # pragma: no cover - every subclass is mapped above
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
