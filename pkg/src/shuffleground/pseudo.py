"""Pseudo-video construction: cut the target moment and reinsert it elsewhere.

The shuffled video keeps the original length and frame content; only the
moment's temporal position changes. Each (original, pseudo, query) triplet is
the unit of training and is regenerated with fresh randomness every epoch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import FrameFeatures, GroundingSample, MomentSpan, TokenSequence


@dataclass(frozen=True)
class TrainingTriplet:
    """Original and shuffled views of one sample, sharing the query."""

    video_id: str
    features: FrameFeatures
    span: MomentSpan
    pseudo_features: FrameFeatures
    pseudo_span: MomentSpan
    tokens: TokenSequence
    query: str
    degenerate: bool

    def __post_init__(self):
        if self.pseudo_features.num_frames != self.features.num_frames:
            raise ValueError("pseudo video length differs from original")
        if self.pseudo_span.num_frames != self.span.num_frames:
            raise ValueError("pseudo span length differs from original")


def enumerate_insertion_points(num_frames: int, span: MomentSpan) -> list[int]:
    """All offsets where the cut moment can be reinserted into the remainder.

    Offsets run over [0, T - L]. The offset that reproduces the original
    ordering (the original start frame) is excluded whenever any alternative
    exists, so order labels on the shuffled video stay truthful.
    """
    length = span.num_frames
    if span.end_frame > num_frames - 1:
        raise ValueError(f"span {span} outside video of {num_frames} frames")
    offsets = [k for k in range(num_frames - length + 1) if k != span.start_frame]
    if not offsets:
        return [span.start_frame]
    return offsets


def generate_pseudo_video(
    features: FrameFeatures, span: MomentSpan, rng: np.random.Generator
) -> tuple[FrameFeatures, MomentSpan, bool]:
    """Cut the moment out and insert it at a random offset of the remainder.

    Returns the shuffled features, the moment's new span, and a degenerate
    flag that is true iff the only candidate reproduces the original order.
    """
    matrix = features.matrix
    t = features.num_frames
    s, e = span.start_frame, span.end_frame
    length = span.num_frames

    candidates = enumerate_insertion_points(t, span)
    degenerate = candidates == [s]
    k = int(candidates[rng.integers(len(candidates))])

    moment = matrix[s : e + 1]
    remainder = np.concatenate([matrix[:s], matrix[e + 1 :]], axis=0)
    shuffled = np.concatenate([remainder[:k], moment, remainder[k:]], axis=0)

    new_span = MomentSpan.from_frames(k, k + length - 1, features.duration, t)
    return FrameFeatures(shuffled, features.duration), new_span, degenerate


def make_triplet(sample: GroundingSample, rng: np.random.Generator) -> TrainingTriplet:
    """Wrap a fresh pseudo video with the sample's query and both spans."""
    pseudo_feats, pseudo_span, degenerate = generate_pseudo_video(
        sample.features, sample.span, rng
    )
    return TrainingTriplet(
        video_id=sample.video_id,
        features=sample.features,
        span=sample.span,
        pseudo_features=pseudo_feats,
        pseudo_span=pseudo_span,
        tokens=sample.tokens,
        query=sample.query,
        degenerate=degenerate,
    )


def epoch_rng(seed: int, epoch: int, sample_index: int) -> np.random.Generator:
    """Independent stream for one (epoch, sample) pair, reproducible by seed."""
    return np.random.default_rng([seed, epoch, sample_index])
