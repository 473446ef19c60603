"""Training loop: per-epoch triplet regeneration, padded batching, Adam steps,
gradient clipping, validation-based model selection, reproducible state.

Pseudo videos are regenerated from (seed, epoch, sample_index) streams every
epoch, so runs are bit-reproducible in single-threaded mode and triplets never
repeat across epochs by accident. In baseline mode (all loss weights zero)
the pseudo branch runs only under no_grad, purely for logging.
"""

from __future__ import annotations

import contextlib
import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import IO, Sequence

import numpy as np
import torch

from .data import DatasetSplit
from .evaluation import ModelPredictor, evaluate_predictor
from .losses import (
    LossBundle,
    NonFiniteLossError,
    bce_relevance,
    grounding_loss,
    inter_loss,
    order_loss,
    total_loss,
)
from .model import (
    GroundingNet,
    ModelConfig,
    Vocabulary,
    collate_batch,
    save_checkpoint,
)
from .pseudo import TrainingTriplet, epoch_rng, make_triplet

VALID_METRICS = ("miou", "r1@0.3", "r1@0.5", "r1@0.7")


class ConfigError(ValueError):
    """Invalid training configuration value or file."""


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 30
    learning_rate: float = 0.001
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    seed: int = 0
    hidden_dim: int = 64
    embed_dim: int = 64
    clip_norm: float = 5.0
    selection_metric: str = "miou"
    eval_batch_size: int = 64
    threads: int = 1

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0 or self.eval_batch_size < 1:
            raise ConfigError("batch_size/eval_batch_size must be >= 1, epochs >= 0")
        if self.learning_rate <= 0 or self.clip_norm <= 0:
            raise ConfigError("learning_rate and clip_norm must be positive")
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.selection_metric not in VALID_METRICS:
            raise ConfigError(
                f"unknown selection_metric {self.selection_metric!r}; "
                f"choose one of {VALID_METRICS}"
            )
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")

    @property
    def lambdas(self) -> tuple[float, float, float]:
        return (self.lambda1, self.lambda2, self.lambda3)

    @property
    def baseline(self) -> bool:
        return self.lambdas == (0.0, 0.0, 0.0)

    def enabled_terms(self) -> list[str]:
        terms = ["l_g"]
        for name, lam in zip(("l_intra", "l_inter", "l_d"), self.lambdas):
            if lam > 0:
                terms.append(name)
        return terms


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Flat `key = value` file; '#' starts a comment."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        values[key] = value
    return values


def config_from_sources(
    file_values: dict[str, str] | None = None, overrides: dict | None = None
) -> TrainConfig:
    """Build a TrainConfig from file values with CLI overrides on top."""
    merged: dict = {}
    known = {f.name: f.type for f in fields(TrainConfig)}
    casts = {"int": int, "float": float, "str": str}
    for key, value in (file_values or {}).items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            merged[key] = casts[known[key]](value)
        except ValueError as exc:
            raise ConfigError(f"config key {key!r}: bad value {value!r}") from exc
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        merged[key] = value
    return TrainConfig(**merged)


@dataclass
class TrainState:
    """Counters and selection record; with the optimizer state this is enough
    to resume a run bit-identically in single-threaded mode."""

    epoch: int = 0
    step: int = 0
    best_value: float | None = None
    best_epoch: int | None = None
    pseudo_grad_forwards: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "TrainState":
        return TrainState(**d)


@dataclass
class Batch:
    video_ids: list[str]
    features: torch.Tensor
    pseudo_features: torch.Tensor
    frame_mask: torch.Tensor
    tokens: torch.Tensor
    token_mask: torch.Tensor
    spans: torch.Tensor          # (B, 2) original frame spans
    pseudo_spans: torch.Tensor   # (B, 2)
    degenerate: torch.Tensor     # (B,) bool


def regenerate_triplets(
    split: DatasetSplit, seed: int, epoch: int
) -> list[TrainingTriplet]:
    """Fresh pseudo video per sample, streams derived from (seed, epoch, idx)."""
    return [
        make_triplet(sample, epoch_rng(seed, epoch, idx))
        for idx, sample in enumerate(split)
    ]


def collate_triplets(
    triplets: Sequence[TrainingTriplet],
    vocab: Vocabulary,
    dtype: torch.dtype = torch.float32,
) -> Batch:
    features, frame_mask, tokens, token_mask = collate_batch(
        [t.features.matrix for t in triplets],
        [vocab.encode(t.tokens.tokens) for t in triplets],
        dtype=dtype,
    )
    pseudo_features, _, _, _ = collate_batch(
        [t.pseudo_features.matrix for t in triplets],
        [vocab.encode(t.tokens.tokens) for t in triplets],
        dtype=dtype,
    )
    spans = torch.tensor(
        [[t.span.start_frame, t.span.end_frame] for t in triplets], dtype=torch.long
    )
    pseudo_spans = torch.tensor(
        [[t.pseudo_span.start_frame, t.pseudo_span.end_frame] for t in triplets],
        dtype=torch.long,
    )
    degenerate = torch.tensor([t.degenerate for t in triplets], dtype=torch.bool)
    return Batch(
        video_ids=[t.video_id for t in triplets],
        features=features,
        pseudo_features=pseudo_features,
        frame_mask=frame_mask,
        tokens=tokens,
        token_mask=token_mask,
        spans=spans,
        pseudo_spans=pseudo_spans,
        degenerate=degenerate,
    )


def frame_labels_for_spans(
    spans: torch.Tensor, num_frames: int, dtype: torch.dtype
) -> torch.Tensor:
    """(B, T) moment indicators from (B, 2) inclusive frame spans."""
    idx = torch.arange(num_frames).unsqueeze(0)
    inside = (idx >= spans[:, 0:1]) & (idx <= spans[:, 1:2])
    return inside.to(dtype)


def compute_batch_losses(
    model: GroundingNet,
    batch: Batch,
    lambdas: tuple[float, float, float],
    state: TrainState | None = None,
) -> LossBundle:
    """All four objectives for one triplet batch.

    The grounding loss supervises the original video only; the pseudo video
    contributes through the matching and order terms. When every weight is
    zero the pseudo branch runs under no_grad so the gradient path never
    touches shuffled features.
    """
    out_o = model(
        batch.features, batch.frame_mask, batch.tokens, batch.token_mask, batch.spans
    )
    dtype = out_o.relevance.dtype
    num_frames = batch.features.shape[1]
    labels_o = frame_labels_for_spans(batch.spans, num_frames, dtype)

    l_g = grounding_loss(
        out_o.start_probs, out_o.end_probs, batch.spans[:, 0], batch.spans[:, 1]
    )

    pseudo_in_grad = any(lam > 0 for lam in lambdas) and torch.is_grad_enabled()
    ctx = contextlib.nullcontext() if pseudo_in_grad else torch.no_grad()
    with ctx:
        out_p = model(
            batch.pseudo_features,
            batch.frame_mask,
            batch.tokens,
            batch.token_mask,
            batch.pseudo_spans,
        )
        labels_p = frame_labels_for_spans(batch.pseudo_spans, num_frames, dtype)
        bce_o = bce_relevance(out_o.relevance, labels_o, batch.frame_mask)
        bce_p = bce_relevance(out_p.relevance, labels_p, batch.frame_mask)
        l_intra = 0.5 * (bce_o + bce_p)
        l_inter = inter_loss(
            out_o.relevance, batch.spans, out_p.relevance, batch.pseudo_spans
        )
        l_d = order_loss(out_o.order_logits, out_p.order_logits, batch.degenerate)
    if pseudo_in_grad and state is not None:
        state.pseudo_grad_forwards += 1

    return total_loss(l_g, l_intra, l_inter, l_d, lambdas)


def train_epoch(
    model: GroundingNet,
    optimizer: torch.optim.Optimizer,
    split: DatasetSplit,
    vocab: Vocabulary,
    config: TrainConfig,
    epoch: int,
    state: TrainState,
    log_fh: IO[str] | None = None,
) -> dict[str, float]:
    """One pass over freshly regenerated triplets; returns mean loss values."""
    model.train()
    triplets = regenerate_triplets(split, config.seed, epoch)
    order = np.random.default_rng([config.seed, epoch]).permutation(len(triplets))
    sums: dict[str, float] = {}
    num_batches = 0
    for lo in range(0, len(order), config.batch_size):
        chunk = [triplets[i] for i in order[lo : lo + config.batch_size]]
        batch = collate_triplets(chunk, vocab)
        try:
            bundle = compute_batch_losses(model, batch, config.lambdas, state)
        except NonFiniteLossError as exc:
            raise NonFiniteLossError(
                f"{exc} (epoch {epoch}, batch videos: {batch.video_ids})"
            ) from exc
        optimizer.zero_grad()
        bundle.total.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), config.clip_norm)
        optimizer.step()
        state.step += 1
        record = {"step": state.step, "epoch": epoch, **bundle.as_dict()}
        if log_fh is not None:
            log_fh.write(json.dumps(record) + "\n")
        for key, value in bundle.as_dict().items():
            sums[key] = sums.get(key, 0.0) + value
        num_batches += 1
    state.epoch = epoch + 1
    return {k: v / num_batches for k, v in sums.items()}


@dataclass
class FitResult:
    history: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    best_value: float | None = None
    best_state_dict: dict | None = None
    state: TrainState = field(default_factory=TrainState)


def build_model(
    vocab: Vocabulary, feature_dim: int, config: TrainConfig
) -> GroundingNet:
    """Seeded model construction so runs are reproducible end to end."""
    torch.manual_seed(config.seed)
    return GroundingNet(
        ModelConfig(
            vocab_size=len(vocab),
            feature_dim=feature_dim,
            hidden_dim=config.hidden_dim,
            embed_dim=config.embed_dim,
        )
    )


def fit(
    model: GroundingNet,
    vocab: Vocabulary,
    splits: dict[str, DatasetSplit],
    config: TrainConfig,
    run_dir: str | Path | None = None,
    resume: str | Path | None = None,
    snapshot_extra: dict | None = None,
) -> FitResult:
    """Train with per-epoch validation; keep the checkpoint with the best
    selection metric. Writes config snapshot, JSON-lines log, checkpoints and
    history into run_dir when given."""
    if "training" not in splits or "val" not in splits:
        raise ConfigError("fit requires 'training' and 'val' splits")
    torch.set_num_threads(config.threads)

    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    result = FitResult()
    start_epoch = 0
    if resume is not None:
        payload = torch.load(Path(resume), map_location="cpu", weights_only=True)
        model.load_state_dict(payload["state_dict"])
        optimizer.load_state_dict(payload["extra"]["optimizer"])
        result.state = TrainState.from_dict(payload["extra"]["train_state"])
        result.history = list(payload["extra"].get("history", []))
        start_epoch = result.state.epoch
        result.best_value = result.state.best_value
        result.best_epoch = result.state.best_epoch

    run_dir = Path(run_dir) if run_dir is not None else None
    log_fh = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        snapshot = {"train_config": asdict(config), "enabled_terms": config.enabled_terms()}
        snapshot.update(snapshot_extra or {})
        (run_dir / "config_snapshot.json").write_text(json.dumps(snapshot, indent=2))
        mode = "a" if resume is not None else "w"
        log_fh = open(run_dir / "train_log.jsonl", mode, encoding="utf-8")

    metric_key = config.selection_metric
    try:
        for epoch in range(start_epoch, config.epochs):
            epoch_losses = train_epoch(
                model, optimizer, splits["training"], vocab, config, epoch,
                result.state, log_fh,
            )
            predictor = ModelPredictor(model, vocab, batch_size=config.eval_batch_size)
            report = evaluate_predictor(predictor, splits["val"])
            value = report.metric_values()[metric_key]
            entry = {
                "epoch": epoch,
                "train": epoch_losses,
                "val": report.to_dict(),
                metric_key: value,
            }
            result.history.append(entry)
            if result.best_value is None or value > result.best_value:
                result.best_value = value
                result.best_epoch = epoch
                result.best_state_dict = copy.deepcopy(model.state_dict())
                if run_dir is not None:
                    save_checkpoint(
                        run_dir / "checkpoint_best.pt", model, vocab,
                        extra={"epoch": epoch, metric_key: value},
                    )
            result.state.best_value = result.best_value
            result.state.best_epoch = result.best_epoch
            if run_dir is not None:
                save_checkpoint(
                    run_dir / "checkpoint_last.pt", model, vocab,
                    extra={
                        "optimizer": optimizer.state_dict(),
                        "train_state": result.state.to_dict(),
                        "history": result.history,
                    },
                )
                (run_dir / "history.json").write_text(json.dumps(result.history, indent=2))
            if log_fh is not None:
                log_fh.flush()
    finally:
        if log_fh is not None:
            log_fh.close()
    if result.best_state_dict is None and config.epochs == 0:
        result.best_state_dict = copy.deepcopy(model.state_dict())
    return result
