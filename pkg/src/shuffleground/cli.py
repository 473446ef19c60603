"""Command-line entry point wiring data generation, training and evaluation.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
Every command writes a config snapshot plus machine-readable JSON reports
into its output directory; tables on stdout are a courtesy.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .data import (
    AnnotationError,
    FeatureIOError,
    load_dataset_dir,
    load_word_embeddings,
    split_statistics,
)
from .evaluation import (
    MetricsReport,
    ModelPredictor,
    bias_histogram,
    compute_metrics,
    distribution_divergence,
    evaluate_predictor,
    randomized_video_test,
    spans_to_ious,
    top_words,
)
from .losses import NonFiniteLossError
from .model import Vocabulary, load_checkpoint, save_checkpoint
from .pseudo import epoch_rng, make_triplet
from .synth import (
    BenchConfig,
    BenchmarkConfigError,
    load_metadata,
    make_oracle,
    write_benchmark,
)
from .training import ConfigError, build_model, config_from_sources, fit, parse_config_file

USAGE_ERROR = 2
NUMERIC_ERROR = 3


def _write_snapshot(out_dir: Path, command: str, args: argparse.Namespace) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    snapshot = {"command": command}
    snapshot.update(
        {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    )
    (out_dir / "config_snapshot.json").write_text(json.dumps(snapshot, indent=2))


def _print_report(report: MetricsReport) -> None:
    print(f"split={report.split} n={report.num_samples}")
    for theta, value in sorted(report.r1.items()):
        print(f"  R@1 IoU={theta:g}: {value:.2f}")
    print(f"  mIoU: {report.miou:.2f}")


_BENCH_KEYS = {
    "seed": int,
    "noise_level": float,
    "signature_strength": float,
    "feature_dim": int,
    "t_min": int,
    "t_max": int,
    "moment_min": int,
    "moment_max": int,
    "training_size": int,
    "val_size": int,
    "test_iid_size": int,
    "test_ood_size": int,
    "vocab": str,
}


def _bench_config(path: str | None, seed_override: int | None) -> BenchConfig:
    kwargs: dict = {}
    if path is not None:
        raw = parse_config_file(path)
        for key, value in raw.items():
            if key not in _BENCH_KEYS:
                raise ConfigError(f"{path}: unknown benchmark key {key!r}")
            try:
                raw[key] = _BENCH_KEYS[key](value)
            except ValueError as exc:
                raise ConfigError(f"{path}: key {key!r}: bad value {value!r}") from exc
        sizes = dict(BenchConfig().split_sizes)
        for file_key, split in (
            ("training_size", "training"),
            ("val_size", "val"),
            ("test_iid_size", "test-iid"),
            ("test_ood_size", "test-ood"),
        ):
            if file_key in raw:
                sizes[split] = raw.pop(file_key)
        kwargs["split_sizes"] = sizes
        if "t_min" in raw or "t_max" in raw:
            default = BenchConfig().t_range
            kwargs["t_range"] = (raw.pop("t_min", default[0]), raw.pop("t_max", default[1]))
        if "moment_min" in raw or "moment_max" in raw:
            default = BenchConfig().moment_len_range
            kwargs["moment_len_range"] = (
                raw.pop("moment_min", default[0]),
                raw.pop("moment_max", default[1]),
            )
        if "vocab" in raw:
            kwargs["vocab"] = tuple(t.strip() for t in raw.pop("vocab").split(",") if t.strip())
        kwargs.update(raw)
    if seed_override is not None:
        kwargs["seed"] = seed_override
    return BenchConfig(**kwargs)


def cmd_generate_data(args: argparse.Namespace) -> int:
    config = _bench_config(args.config, args.seed)
    out_dir = Path(args.out)
    _write_snapshot(out_dir, "generate-data", args)
    splits, _ = write_benchmark(config, out_dir)
    stats = split_statistics(list(splits.values()))
    print(f"wrote benchmark to {out_dir}")
    for row in stats:
        print(
            f"  {row.name}: videos={row.videos} pairs={row.pairs} "
            f"mean_moment={row.mean_moment_sec:.2f}s mean_duration={row.mean_duration_sec:.2f}s"
        )
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    file_values = parse_config_file(args.config) if args.config else None
    overrides = {
        "batch_size": args.batch_size,
        "epochs": args.epochs,
        "learning_rate": args.learning_rate,
        "lambda1": args.lambda1,
        "lambda2": args.lambda2,
        "lambda3": args.lambda3,
        "seed": args.seed,
        "hidden_dim": args.hidden_dim,
        "embed_dim": args.embed_dim,
        "threads": args.threads,
    }
    if args.baseline:
        overrides.update({"lambda1": 0.0, "lambda2": 0.0, "lambda3": 0.0})
    config = config_from_sources(file_values, overrides)

    splits = load_dataset_dir(args.data)
    vocab = Vocabulary.build(s.tokens.tokens for s in splits["training"])
    model = build_model(vocab, splits["training"].samples[0].features.dim, config)
    if args.embeddings:
        hits = model.load_pretrained_embeddings(load_word_embeddings(args.embeddings), vocab)
        print(f"loaded pretrained embeddings for {hits} tokens")

    out_dir = Path(args.out)
    cli_view = {
        k: (str(v) if isinstance(v, Path) else v)
        for k, v in vars(args).items() if k != "func"
    }
    result = fit(
        model, vocab, splits, config, run_dir=out_dir,
        snapshot_extra={"command": "train", "cli_args": cli_view},
    )
    if result.best_state_dict is not None:
        model.load_state_dict(result.best_state_dict)
    save_checkpoint(out_dir / "checkpoint_best.pt", model, vocab,
                    extra={"epoch": result.best_epoch, "train_config": asdict(config)})
    report = evaluate_predictor(ModelPredictor(model, vocab, config.eval_batch_size), splits["val"])
    (out_dir / "val_report.json").write_text(json.dumps(report.to_dict(), indent=2))
    print(f"best epoch: {result.best_epoch} ({config.selection_metric}={result.best_value})")
    _print_report(report)
    return 0


def _load_predictions(path: str) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                records.append(json.loads(line))
    return records


def cmd_evaluate(args: argparse.Namespace) -> int:
    if (args.checkpoint is None) == (args.predictions is None):
        raise ConfigError("provide exactly one of --checkpoint or --predictions")
    splits = load_dataset_dir(args.data)
    if args.split not in splits:
        raise ConfigError(f"unknown split {args.split!r}; have {sorted(splits)}")
    split = splits[args.split]
    out_dir = Path(args.out)
    _write_snapshot(out_dir, "evaluate", args)
    if args.checkpoint is not None:
        model, vocab, _ = load_checkpoint(args.checkpoint)
        spans = ModelPredictor(model, vocab, max_len=args.max_len).predict(split.samples)
    else:
        from .evaluation import align_prediction_records

        spans = align_prediction_records(_load_predictions(args.predictions), split)
    ious = spans_to_ious(spans, split)
    report = compute_metrics(ious, split.name)
    (out_dir / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2))
    if args.per_sample_csv:
        with open(out_dir / "per_sample_ious.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["video_id", "iou", "pred_start", "pred_end", "gt_start", "gt_end"])
            for sample, span, iou in zip(split, spans, ious):
                writer.writerow([
                    sample.video_id, f"{iou:.6f}", span[0], span[1],
                    sample.span.start_sec, sample.span.end_sec,
                ])
    _print_report(report)
    return 0


def cmd_shuffle_test(args: argparse.Namespace) -> int:
    if (args.checkpoint is None) == (args.oracle is None):
        raise ConfigError("provide exactly one of --checkpoint or --oracle")
    splits = load_dataset_dir(args.data)
    if args.split not in splits:
        raise ConfigError(f"unknown split {args.split!r}; have {sorted(splits)}")
    if args.checkpoint is not None:
        model, vocab, _ = load_checkpoint(args.checkpoint)
        predictor = ModelPredictor(model, vocab)
    else:
        metadata = load_metadata(Path(args.data) / "metadata.json")
        predictor = make_oracle(args.oracle, splits["training"], metadata)
    out_dir = Path(args.out)
    _write_snapshot(out_dir, "shuffle-test", args)
    result = randomized_video_test(
        predictor, splits[args.split], segment_len=args.segment_len,
        rng=np.random.default_rng(args.seed),
    )
    (out_dir / "sanity_check.json").write_text(json.dumps(result.to_dict(), indent=2))
    print("raw:")
    _print_report(result.raw)
    print("randomized:")
    _print_report(result.randomized)
    print("drop: " + ", ".join(f"{k}={v:+.2f}" for k, v in result.drop.items()))
    return 0


def cmd_bias_report(args: argparse.Namespace) -> int:
    if (args.word is None) == (args.top_k is None):
        raise ConfigError("provide exactly one of --word or --top-k")
    splits = load_dataset_dir(args.data)
    if args.split not in splits:
        raise ConfigError(f"unknown split {args.split!r}; have {sorted(splits)}")
    training = splits["training"]
    target = splits[args.split]
    words = [args.word] if args.word else top_words(training, args.top_k)

    predictions = None
    if args.predictions:
        from .evaluation import align_prediction_records

        predictions = align_prediction_records(_load_predictions(args.predictions), target)

    out_dir = Path(args.out)
    _write_snapshot(out_dir, "bias-report", args)
    report = []
    for word in words:
        try:
            train_hist = bias_histogram(training, word, bins=args.bins)
            split_hist = bias_histogram(target, word, bins=args.bins)
        except ValueError as exc:
            available = ", ".join(top_words(training, 10))
            raise ConfigError(f"{exc}; frequent tokens: {available}") from exc
        entry = {
            "word": word,
            "training": train_hist.to_dict(),
            args.split: split_hist.to_dict(),
            "divergence_train_vs_split": distribution_divergence(train_hist, split_hist),
        }
        if predictions is not None:
            pred_hist = bias_histogram(target, word, bins=args.bins, spans=predictions)
            entry["predictions"] = pred_hist.to_dict()
            entry["divergence_train_vs_predictions"] = distribution_divergence(
                train_hist, pred_hist
            )
        report.append(entry)
        print(f"{word}: divergence(train, {args.split}) = {entry['divergence_train_vs_split']:.4f}")
        if predictions is not None:
            print(f"{word}: divergence(train, predictions) = {entry['divergence_train_vs_predictions']:.4f}")
    (out_dir / "bias_report.json").write_text(json.dumps(report, indent=2))
    return 0


def cmd_dump_triplets(args: argparse.Namespace) -> int:
    splits = load_dataset_dir(args.data)
    if args.split not in splits:
        raise ConfigError(f"unknown split {args.split!r}; have {sorted(splits)}")
    split = splits[args.split]
    count = len(split) if args.count is None else min(args.count, len(split))
    out_dir = Path(args.out)
    _write_snapshot(out_dir, "dump-triplets", args)
    with open(out_dir / "triplets.jsonl", "w", encoding="utf-8") as fh:
        for idx in range(count):
            sample = split.samples[idx]
            triplet = make_triplet(sample, epoch_rng(args.seed, 0, idx))
            fh.write(
                json.dumps(
                    {
                        "video_id": triplet.video_id,
                        "num_frames": triplet.features.num_frames,
                        "span_frames": [triplet.span.start_frame, triplet.span.end_frame],
                        "pseudo_span_frames": [
                            triplet.pseudo_span.start_frame,
                            triplet.pseudo_span.end_frame,
                        ],
                        "degenerate": triplet.degenerate,
                    }
                )
                + "\n"
            )
    print(f"wrote {count} triplets to {out_dir / 'triplets.jsonl'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shuffleground",
        description="Shuffled-video auxiliary training for temporal grounding",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write a synthetic biased benchmark")
    p.add_argument("--config", help="flat key=value benchmark config file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="train a grounding model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="flat key=value training config file")
    p.add_argument("--baseline", action="store_true", help="grounding loss only")
    p.add_argument("--lambda1", type=float, default=None)
    p.add_argument("--lambda2", type=float, default=None)
    p.add_argument("--lambda3", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p.add_argument("--learning-rate", type=float, default=None, dest="learning_rate")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--hidden-dim", type=int, default=None, dest="hidden_dim")
    p.add_argument("--embed-dim", type=int, default=None, dest="embed_dim")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--embeddings", help="optional pretrained embedding text file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint or a predictions file")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test-ood")
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--predictions", help="JSON-lines {video_id, query_index, start, end}")
    p.add_argument("--max-len", type=int, default=None, dest="max_len")
    p.add_argument(
        "--per-sample-csv", action="store_true", dest="per_sample_csv",
        help="also write per_sample_ious.csv",
    )
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("shuffle-test", help="randomized-video sanity check")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test-ood")
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--oracle", choices=["bias-only", "content-only"])
    p.add_argument("--segment-len", type=int, default=4, dest="segment_len")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_shuffle_test)

    p = sub.add_parser("bias-report", help="temporal distribution histograms per word")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test-ood")
    p.add_argument("--out", required=True)
    p.add_argument("--word")
    p.add_argument("--top-k", type=int, default=None, dest="top_k")
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--predictions")
    p.set_defaults(func=cmd_bias_report)

    p = sub.add_parser("dump-triplets", help="dump pseudo-video spans for inspection")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="training")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=None)
    p.set_defaults(func=cmd_dump_triplets)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    torch.set_num_threads(getattr(args, "threads", None) or 1)
    try:
        return args.func(args)
    except (ConfigError, BenchmarkConfigError, AnnotationError, FeatureIOError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except NonFiniteLossError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return NUMERIC_ERROR


if __name__ == "__main__":
    sys.exit(main())
