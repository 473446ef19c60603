"""Data model for videos, queries, moment spans and dataset splits.

Covers annotation (JSON-lines) and frame-feature (binary container) I/O,
second<->frame-index conversion, and split-level audit statistics. All types
are plain dataclasses and are treated as immutable after construction.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

FEATURE_MAGIC = b"TGF1"
DEFAULT_FRAME_RATE = 1.0

SPLIT_NAMES = ("training", "val", "test-iid", "test-ood")


class AnnotationError(ValueError):
    """Malformed or inconsistent annotation input."""


class FeatureIOError(ValueError):
    """Corrupt, truncated or inconsistent feature container."""


def timestamp_to_frame(tau: float, duration: float, num_frames: int) -> int:
    """Map a timestamp in seconds to a frame index in [0, num_frames - 1].

    Uses floor(tau / duration * T) with clamping, which is monotone
    non-decreasing in tau and boundary-safe at tau == duration.
    """
    if num_frames < 1:
        raise ValueError(f"num_frames must be >= 1, got {num_frames}")
    if duration <= 0:
        raise ValueError(f"duration must be > 0, got {duration}")
    if not 0.0 <= tau <= duration:
        raise ValueError(f"timestamp {tau} outside [0, {duration}]")
    idx = int(math.floor(tau / duration * num_frames))
    return max(0, min(idx, num_frames - 1))


def frame_to_seconds(frame: int, duration: float, num_frames: int) -> float:
    """Start time of a frame (inverse of timestamp_to_frame on boundaries)."""
    return frame * duration / num_frames


def frame_span_to_seconds(
    start_frame: int, end_frame: int, duration: float, num_frames: int
) -> tuple[float, float]:
    """Second extents of an inclusive frame span: [start of first, end of last]."""
    return (
        frame_to_seconds(start_frame, duration, num_frames),
        frame_to_seconds(end_frame + 1, duration, num_frames),
    )


@dataclass(frozen=True)
class FrameFeatures:
    """Per-frame feature matrix of shape (T, D) plus the video duration."""

    matrix: np.ndarray
    duration: float

    def __post_init__(self):
        m = self.matrix
        if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
            raise ValueError(f"feature matrix must be (T>=1, D>=1), got {m.shape}")
        if not np.isfinite(m).all():
            raise ValueError("feature matrix contains non-finite values")
        if self.duration <= 0:
            raise ValueError(f"duration must be > 0, got {self.duration}")

    @property
    def num_frames(self) -> int:
        return int(self.matrix.shape[0])

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1])

    def check_frame_rate(self, frame_rate: float = DEFAULT_FRAME_RATE) -> None:
        """T must equal ceil(duration * frame_rate) within one frame."""
        expected = math.ceil(self.duration * frame_rate)
        if abs(self.num_frames - expected) > 1:
            raise ValueError(
                f"frame count {self.num_frames} inconsistent with duration "
                f"{self.duration}s at {frame_rate} fps (expected ~{expected})"
            )


@dataclass(frozen=True)
class TokenSequence:
    """Lowercased, whitespace-tokenized query words with optional vocab ids."""

    tokens: tuple[str, ...]
    ids: tuple[int, ...] | None = None

    def __post_init__(self):
        if len(self.tokens) < 1:
            raise ValueError("token sequence must be non-empty")
        for t in self.tokens:
            if t != t.lower() or not t or any(ch.isspace() for ch in t):
                raise ValueError(f"bad token {t!r}: tokens are lowercase and space-free")
        if self.ids is not None and len(self.ids) != len(self.tokens):
            raise ValueError("ids length must match tokens length")

    @staticmethod
    def from_text(text: str) -> "TokenSequence":
        tokens = tuple(text.lower().split())
        if not tokens:
            raise ValueError("query text has no tokens")
        return TokenSequence(tokens)

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class MomentSpan:
    """Target moment extent in seconds and (inclusive) frame indices."""

    start_sec: float
    end_sec: float
    start_frame: int
    end_frame: int

    def __post_init__(self):
        if not 0.0 <= self.start_sec <= self.end_sec:
            raise ValueError(f"bad second span [{self.start_sec}, {self.end_sec}]")
        if not 0 <= self.start_frame <= self.end_frame:
            raise ValueError(f"bad frame span [{self.start_frame}, {self.end_frame}]")

    @staticmethod
    def from_seconds(
        start_sec: float, end_sec: float, duration: float, num_frames: int
    ) -> "MomentSpan":
        if start_sec > end_sec:
            raise ValueError(f"span end {end_sec} before start {start_sec}")
        return MomentSpan(
            start_sec=start_sec,
            end_sec=end_sec,
            start_frame=timestamp_to_frame(start_sec, duration, num_frames),
            end_frame=timestamp_to_frame(end_sec, duration, num_frames),
        )

    @staticmethod
    def from_frames(
        start_frame: int, end_frame: int, duration: float, num_frames: int
    ) -> "MomentSpan":
        start_sec, end_sec = frame_span_to_seconds(
            start_frame, end_frame, duration, num_frames
        )
        return MomentSpan(start_sec, min(end_sec, duration), start_frame, end_frame)

    @property
    def num_frames(self) -> int:
        return self.end_frame - self.start_frame + 1


@dataclass(frozen=True)
class GroundingSample:
    """One annotated video-query pair."""

    video_id: str
    features: FrameFeatures
    tokens: TokenSequence
    span: MomentSpan
    query: str

    def __post_init__(self):
        t = self.features.num_frames
        if self.span.end_frame > t - 1:
            raise ValueError(
                f"{self.video_id}: span frame {self.span.end_frame} outside video (T={t})"
            )
        if self.span.end_sec > self.features.duration + 1e-9:
            raise ValueError(
                f"{self.video_id}: span end {self.span.end_sec}s exceeds duration "
                f"{self.features.duration}s"
            )


@dataclass
class DatasetSplit:
    """Named, non-empty list of grounding samples."""

    name: str
    samples: list[GroundingSample] = field(default_factory=list)

    def __post_init__(self):
        if not self.samples:
            raise AnnotationError(f"empty split {self.name!r}")

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)


def _parse_annotation_line(line: str, lineno: int) -> dict:
    try:
        record = json.loads(line)
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"line {lineno}: malformed JSON ({exc.msg})") from exc
    if not isinstance(record, dict):
        raise AnnotationError(f"line {lineno}: record is not an object")
    for key in ("video_id", "duration", "query", "start", "end"):
        if key not in record:
            raise AnnotationError(f"line {lineno}: missing field {key!r}")
    return record


def load_annotations(
    path: str | Path,
    name: str = "training",
    features: dict[str, np.ndarray] | None = None,
    frame_rate: float = DEFAULT_FRAME_RATE,
) -> DatasetSplit:
    """Load a JSON-lines annotation file into a validated split.

    When ``features`` is given, each sample gets its real feature matrix and
    frame indices are computed against its true frame count. Without it, a
    frame count of ceil(duration * frame_rate) is assumed and a placeholder
    matrix is attached (useful for annotation-only audits).
    """
    path = Path(path)
    samples: list[GroundingSample] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            record = _parse_annotation_line(line, lineno)
            video_id = str(record["video_id"])
            duration = float(record["duration"])
            start = float(record["start"])
            end = float(record["end"])
            if duration <= 0:
                raise AnnotationError(f"{video_id}: non-positive duration {duration}")
            if end < start:
                raise AnnotationError(
                    f"{video_id}: span end {end} before start {start} (line {lineno})"
                )
            if start < 0 or end > duration + 1e-9:
                raise AnnotationError(
                    f"{video_id}: span [{start}, {end}] outside video duration "
                    f"{duration} (line {lineno})"
                )
            if features is not None:
                if video_id not in features:
                    raise FeatureIOError(f"no features for video id {video_id!r}")
                matrix = features[video_id]
            else:
                t = max(1, math.ceil(duration * frame_rate))
                matrix = np.zeros((t, 1), dtype=np.float32)
            feats = FrameFeatures(matrix=matrix, duration=duration)
            feats.check_frame_rate(frame_rate)
            span = MomentSpan.from_seconds(
                start, min(end, duration), duration, feats.num_frames
            )
            samples.append(
                GroundingSample(
                    video_id=video_id,
                    features=feats,
                    tokens=TokenSequence.from_text(str(record["query"])),
                    span=span,
                    query=str(record["query"]),
                )
            )
    if not samples:
        raise AnnotationError(f"empty split: no records in {path}")
    return DatasetSplit(name=name, samples=samples)


def save_annotations(path: str | Path, records: Iterable[dict]) -> None:
    """Write annotation records as JSON-lines."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record) + "\n")


def write_feature_container(
    path: str | Path, features: dict[str, np.ndarray]
) -> None:
    """Write a binary feature container (magic, then per-entry id/T/D/payload)."""
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(FEATURE_MAGIC)
        for video_id, matrix in features.items():
            matrix = np.ascontiguousarray(matrix, dtype=np.float32)
            if matrix.ndim != 2:
                raise FeatureIOError(f"{video_id}: feature matrix must be 2-D")
            id_bytes = video_id.encode("utf-8")
            fh.write(struct.pack("<I", len(id_bytes)))
            fh.write(id_bytes)
            fh.write(struct.pack("<II", matrix.shape[0], matrix.shape[1]))
            fh.write(matrix.tobytes(order="C"))


def read_feature_container(path: str | Path) -> dict[str, np.ndarray]:
    """Read every entry of a feature container, validating sizes and values."""
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != FEATURE_MAGIC:
        raise FeatureIOError(f"{path}: bad magic {data[:4]!r}")
    offset = 4
    out: dict[str, np.ndarray] = {}
    while offset < len(data):
        if offset + 4 > len(data):
            raise FeatureIOError(f"{path}: truncated entry header")
        (id_len,) = struct.unpack_from("<I", data, offset)
        offset += 4
        if offset + id_len + 8 > len(data):
            raise FeatureIOError(f"{path}: truncated entry header")
        video_id = data[offset : offset + id_len].decode("utf-8")
        offset += id_len
        t, d = struct.unpack_from("<II", data, offset)
        offset += 8
        if t < 1 or d < 1:
            raise FeatureIOError(f"{video_id}: invalid dims T={t}, D={d}")
        nbytes = t * d * 4
        if offset + nbytes > len(data):
            raise FeatureIOError(f"{video_id}: truncated payload")
        matrix = np.frombuffer(
            data, dtype="<f4", count=t * d, offset=offset
        ).reshape(t, d)
        offset += nbytes
        if not np.isfinite(matrix).all():
            raise FeatureIOError(f"{video_id}: non-finite feature values")
        out[video_id] = matrix.copy()
    return out


def load_features(path: str | Path, video_id: str) -> np.ndarray:
    """Load the (T, D) float32 matrix of one video from a container."""
    features = read_feature_container(path)
    if video_id not in features:
        raise FeatureIOError(f"no features for video id {video_id!r} in {path}")
    return features[video_id]


def load_word_embeddings(path: str | Path) -> dict[str, np.ndarray]:
    """Read a text embedding dump: one line per word, token then D floats."""
    path = Path(path)
    table: dict[str, np.ndarray] = {}
    dim = None
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split(" ")
            if len(parts) < 2:
                continue
            token, values = parts[0], parts[1:]
            try:
                vec = np.asarray([float(v) for v in values], dtype=np.float32)
            except ValueError as exc:
                raise AnnotationError(f"line {lineno}: bad embedding value") from exc
            if dim is None:
                dim = vec.shape[0]
            elif vec.shape[0] != dim:
                raise AnnotationError(
                    f"line {lineno}: dim {vec.shape[0]} != expected {dim}"
                )
            table[token] = vec
    return table


@dataclass(frozen=True)
class SplitStats:
    """Audit row for one split: counts plus mean moment/video lengths."""

    name: str
    videos: int
    pairs: int
    mean_moment_sec: float
    mean_duration_sec: float


def split_statistics(splits: Sequence[DatasetSplit]) -> list[SplitStats]:
    """Per-split video/pair counts and mean moment/video durations."""
    if not splits:
        raise ValueError("at least one split required")
    rows = []
    for split in splits:
        durations = {}
        moment_lengths = []
        for sample in split:
            durations[sample.video_id] = sample.features.duration
            moment_lengths.append(sample.span.end_sec - sample.span.start_sec)
        rows.append(
            SplitStats(
                name=split.name,
                videos=len(durations),
                pairs=len(split),
                mean_moment_sec=float(np.mean(moment_lengths)),
                mean_duration_sec=float(np.mean(list(durations.values()))),
            )
        )
    return rows


def load_dataset_dir(
    data_dir: str | Path,
    names: Sequence[str] = SPLIT_NAMES,
    frame_rate: float = DEFAULT_FRAME_RATE,
) -> dict[str, DatasetSplit]:
    """Load the standard directory layout: <name>.jsonl files + features.tgf."""
    data_dir = Path(data_dir)
    features = read_feature_container(data_dir / "features.tgf")
    splits = {}
    for name in names:
        ann_path = data_dir / f"{name}.jsonl"
        if not ann_path.exists():
            raise AnnotationError(f"missing annotation file {ann_path}")
        splits[name] = load_annotations(
            ann_path, name=name, features=features, frame_rate=frame_rate
        )
    return splits
