"""Span decoding, IoU metrics, randomized-video sanity check, bias histograms.

Evaluation runs with frozen parameters and is safe to batch; predicted spans
are clipped to the video extent before scoring.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
import torch

from .data import DatasetSplit, FrameFeatures, GroundingSample, frame_span_to_seconds
from .model import GroundingNet, Vocabulary, collate_batch

DEFAULT_THRESHOLDS = (0.3, 0.5, 0.7)
DEFAULT_SEGMENT_LEN = 4
DEFAULT_BINS = 20


def select_span(
    p_start: np.ndarray,
    p_end: np.ndarray,
    mask: np.ndarray | None = None,
    max_len: int | None = None,
) -> tuple[int, int]:
    """Argmax of P_start(s) * P_end(e) over valid pairs with s <= e.

    Ties break to the smallest start, then the smallest end. ``max_len``
    bounds the span to fewer than ``max_len`` frames end-to-start.
    """
    p_start = np.asarray(p_start, dtype=np.float64)
    p_end = np.asarray(p_end, dtype=np.float64)
    t = p_start.shape[0]
    valid = np.triu(np.ones((t, t), dtype=bool))
    if max_len is not None:
        idx = np.arange(t)
        valid &= (idx[None, :] - idx[:, None]) < max_len
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise ValueError("all frames masked")
        valid &= mask[:, None] & mask[None, :]
    grid = np.where(valid, np.outer(p_start, p_end), -np.inf)
    flat = int(np.argmax(grid))
    return flat // t, flat % t


def temporal_iou(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Intersection over union of two second intervals, in [0, 1]."""
    if a[1] < a[0] or b[1] < b[0]:
        raise ValueError(f"reversed interval: {a} vs {b}")
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    if union <= 0.0:
        return 1.0 if a == b else 0.0
    return inter / union


@dataclass
class MetricsReport:
    """R@1 at each IoU threshold plus mean IoU, as percentages."""

    split: str
    num_samples: int
    r1: dict[float, float]
    miou: float

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "num_samples": self.num_samples,
            "r1": {f"{theta:g}": value for theta, value in self.r1.items()},
            "miou": self.miou,
        }

    def metric_values(self) -> dict[str, float]:
        out = {f"r1@{theta:g}": value for theta, value in self.r1.items()}
        out["miou"] = self.miou
        return out


def compute_metrics(
    ious: Sequence[float],
    split: str,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
) -> MetricsReport:
    """R@1 uses strict inequality: a sample counts only when IoU > theta."""
    ious = np.asarray(ious, dtype=np.float64)
    if ious.size == 0:
        raise ValueError("no IoUs to aggregate")
    r1 = {float(theta): 100.0 * float(np.mean(ious > theta)) for theta in thresholds}
    return MetricsReport(
        split=split, num_samples=int(ious.size), r1=r1, miou=100.0 * float(np.mean(ious))
    )


class Predictor(Protocol):
    def predict(self, samples: Sequence[GroundingSample]) -> list[tuple[float, float]]:
        """Predicted (start_sec, end_sec) per sample."""


class ModelPredictor:
    """Wraps a trained network into the span-prediction interface."""

    def __init__(
        self,
        model: GroundingNet,
        vocab: Vocabulary,
        batch_size: int = 64,
        max_len: int | None = None,
    ):
        self.model = model
        self.vocab = vocab
        self.batch_size = batch_size
        self.max_len = max_len

    def predict(self, samples: Sequence[GroundingSample]) -> list[tuple[float, float]]:
        self.model.eval()
        dtype = next(self.model.parameters()).dtype
        spans: list[tuple[float, float]] = []
        with torch.no_grad():
            for lo in range(0, len(samples), self.batch_size):
                chunk = samples[lo : lo + self.batch_size]
                features, frame_mask, tokens, token_mask = collate_batch(
                    [s.features.matrix for s in chunk],
                    [self.vocab.encode(s.tokens.tokens) for s in chunk],
                    dtype=dtype,
                )
                out = self.model(features, frame_mask, tokens, token_mask)
                for i, sample in enumerate(chunk):
                    t = sample.features.num_frames
                    fs, fe = select_span(
                        out.start_probs[i, :t].numpy(),
                        out.end_probs[i, :t].numpy(),
                        max_len=self.max_len,
                    )
                    spans.append(
                        frame_span_to_seconds(fs, fe, sample.features.duration, t)
                    )
        return spans


def clip_span(span: tuple[float, float], duration: float) -> tuple[float, float]:
    lo = min(max(span[0], 0.0), duration)
    hi = min(max(span[1], 0.0), duration)
    return (lo, hi) if lo <= hi else (hi, lo)


def spans_to_ious(
    spans: Sequence[tuple[float, float]], split: DatasetSplit
) -> list[float]:
    """IoU of each predicted span (clipped to the video) vs ground truth."""
    if len(spans) != len(split):
        raise ValueError(f"{len(spans)} predictions for {len(split)} samples")
    ious = []
    for span, sample in zip(spans, split):
        pred = clip_span(span, sample.features.duration)
        ious.append(temporal_iou(pred, (sample.span.start_sec, sample.span.end_sec)))
    return ious


def evaluate_predictor(
    predictor: Predictor,
    split: DatasetSplit,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
) -> MetricsReport:
    spans = predictor.predict(split.samples)
    return compute_metrics(spans_to_ious(spans, split), split.name, thresholds)


def align_prediction_records(
    records: Sequence[dict], split: DatasetSplit
) -> list[tuple[float, float]]:
    """Match {video_id, query_index, start, end} records to split order.

    query_index counts a video's samples in split order, starting at zero.
    """
    table: dict[tuple[str, int], tuple[float, float]] = {}
    for record in records:
        key = (str(record["video_id"]), int(record["query_index"]))
        if key in table:
            raise ValueError(f"duplicate prediction for {key}")
        table[key] = (float(record["start"]), float(record["end"]))
    spans = []
    seen: dict[str, int] = {}
    for sample in split:
        idx = seen.get(sample.video_id, 0)
        seen[sample.video_id] = idx + 1
        key = (sample.video_id, idx)
        if key not in table:
            raise ValueError(f"missing prediction for {key}")
        spans.append(table[key])
    return spans


def evaluate_predictions(
    records: Sequence[dict],
    split: DatasetSplit,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
) -> MetricsReport:
    spans = align_prediction_records(records, split)
    return compute_metrics(spans_to_ious(spans, split), split.name, thresholds)


def shuffle_segments(
    matrix: np.ndarray, segment_len: int, rng: np.random.Generator
) -> np.ndarray:
    """Randomly reorder consecutive segments of ``segment_len`` frames."""
    if segment_len < 1:
        raise ValueError(f"segment_len must be >= 1, got {segment_len}")
    segments = [
        matrix[lo : lo + segment_len] for lo in range(0, matrix.shape[0], segment_len)
    ]
    order = rng.permutation(len(segments))
    return np.concatenate([segments[i] for i in order], axis=0)


@dataclass
class SanityCheckResult:
    """Metrics on raw vs segment-shuffled inputs and the per-metric drop."""

    raw: MetricsReport
    randomized: MetricsReport
    drop: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "raw": self.raw.to_dict(),
            "randomized": self.randomized.to_dict(),
            "drop": self.drop,
        }


def randomized_video_test(
    predictor: Predictor,
    split: DatasetSplit,
    segment_len: int = DEFAULT_SEGMENT_LEN,
    rng: np.random.Generator | None = None,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
) -> SanityCheckResult:
    """Compare metrics on raw inputs vs segment-shuffled ones.

    Ground truth is left unchanged: a model that actually reads the video
    must lose accuracy, while one that relies on memorized positions won't.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    shuffled_samples = [
        GroundingSample(
            video_id=s.video_id,
            features=FrameFeatures(
                shuffle_segments(s.features.matrix, segment_len, rng),
                s.features.duration,
            ),
            tokens=s.tokens,
            span=s.span,
            query=s.query,
        )
        for s in split
    ]
    raw = evaluate_predictor(predictor, split, thresholds)
    randomized = compute_metrics(
        spans_to_ious(predictor.predict(shuffled_samples), split),
        split.name,
        thresholds,
    )
    raw_vals = raw.metric_values()
    rand_vals = randomized.metric_values()
    drop = {k: raw_vals[k] - rand_vals[k] for k in raw_vals}
    return SanityCheckResult(raw=raw, randomized=randomized, drop=drop)


@dataclass
class BiasHistogram:
    """Normalized (start, end) grid of moment positions for one word."""

    word: str
    bins: int
    counts: np.ndarray
    probs: np.ndarray

    def to_dict(self) -> dict:
        return {
            "word": self.word,
            "bins": self.bins,
            "counts": self.counts.astype(int).tolist(),
            "probs": self.probs.tolist(),
        }


def _bin_index(value: float, bins: int) -> int:
    return min(int(value * bins), bins - 1)


def bias_histogram(
    split: DatasetSplit,
    word: str,
    bins: int = DEFAULT_BINS,
    spans: Sequence[tuple[float, float]] | None = None,
) -> BiasHistogram:
    """Histogram of normalized moment positions for queries containing a word.

    By default the ground-truth spans are binned; passing ``spans`` (aligned
    with the split) bins those instead, e.g. model predictions.
    """
    counts = np.zeros((bins, bins), dtype=np.float64)
    hits = 0
    for i, sample in enumerate(split):
        if word not in sample.tokens.tokens:
            continue
        hits += 1
        duration = sample.features.duration
        if spans is None:
            lo, hi = sample.span.start_sec, sample.span.end_sec
        else:
            lo, hi = clip_span(spans[i], duration)
        b_lo = _bin_index(lo / duration, bins)
        b_hi = _bin_index(hi / duration, bins)
        counts[b_lo, max(b_lo, b_hi)] += 1.0
    if hits == 0:
        raise ValueError(f"word not found: {word!r} occurs in no query")
    return BiasHistogram(word=word, bins=bins, counts=counts, probs=counts / hits)


def distribution_divergence(h_a: BiasHistogram, h_b: BiasHistogram) -> float:
    """Jensen-Shannon divergence between two histograms, in [0, ln 2]."""
    if h_a.word != h_b.word:
        raise ValueError(f"histogram words differ: {h_a.word!r} vs {h_b.word!r}")
    if h_a.bins != h_b.bins:
        raise ValueError(f"histogram binning differs: {h_a.bins} vs {h_b.bins}")
    p = h_a.probs.ravel()
    q = h_b.probs.ravel()
    m = 0.5 * (p + q)

    def half_kl(dist: np.ndarray) -> float:
        support = dist > 0
        return float(np.sum(dist[support] * np.log(dist[support] / m[support])))

    return 0.5 * half_kl(p) + 0.5 * half_kl(q)


def top_words(split: DatasetSplit, k: int) -> list[str]:
    """Most frequent query tokens, ties broken alphabetically."""
    counts: dict[str, int] = {}
    for sample in split:
        for token in sample.tokens.tokens:
            counts[token] = counts.get(token, 0) + 1
    ordered = sorted(counts, key=lambda t: (-counts[t], t))
    return ordered[:k]
