"""Synthetic grounding benchmark with a controllable query-position shortcut.

Each action token gets a signature feature vector (the learnable content) and
a position distribution. Training/val/test-iid place moments per the biased
map, test-ood per a disjoint map, so a model that memorizes query positions
collapses on test-ood while a content-driven model does not. Two oracles
bound the two strategies: bias-only (never reads frames) and content-only
(never reads position statistics).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import (
    DatasetSplit,
    FrameFeatures,
    GroundingSample,
    MomentSpan,
    TokenSequence,
    save_annotations,
    write_feature_container,
)

DEFAULT_VOCAB = (
    "pour", "fold", "sweep", "type", "stretch", "wave",
    "climb", "kneel", "toss", "spin", "clap", "point",
)

QUERY_TEMPLATES = (
    "person {verb} something",
    "a person {verb} slowly",
    "someone {verb} near the door",
    "the person {verb} again",
)

SPLIT_SIZES = {"training": 512, "val": 64, "test-iid": 64, "test-ood": 256}

# annotated timestamps sit strictly inside their end frames so the
# seconds -> frame floor mapping round-trips exactly
START_OFFSET = 0.25
END_OFFSET = 0.75


class BenchmarkConfigError(ValueError):
    """Infeasible or inconsistent benchmark configuration."""


@dataclass(frozen=True)
class PositionDistribution:
    """Truncated Gaussian over the normalized moment start position."""

    mu: float
    sigma: float
    lo: float
    hi: float

    def __post_init__(self):
        if not 0.0 <= self.lo < self.hi <= 1.0:
            raise BenchmarkConfigError(f"bad truncation window [{self.lo}, {self.hi}]")
        if self.sigma <= 0:
            raise BenchmarkConfigError(f"sigma must be positive, got {self.sigma}")

    def sample(self, rng: np.random.Generator, max_tries: int = 1000) -> float:
        for _ in range(max_tries):
            value = rng.normal(self.mu, self.sigma)
            if self.lo <= value <= self.hi:
                return float(value)
        return float(np.clip(rng.uniform(self.lo, self.hi), self.lo, self.hi))

    def mode(self) -> float:
        return float(np.clip(self.mu, self.lo, self.hi))

    def cdf(self, x: float) -> float:
        """CDF of the truncated distribution at x."""
        def phi(v: float) -> float:
            return 0.5 * (1.0 + math.erf((v - self.mu) / (self.sigma * math.sqrt(2.0))))

        denom = phi(self.hi) - phi(self.lo)
        x = min(max(x, self.lo), self.hi)
        return (phi(x) - phi(self.lo)) / denom

    def bin_probs(self, bins: int) -> np.ndarray:
        edges = np.linspace(0.0, 1.0, bins + 1)
        return np.array(
            [self.cdf(edges[i + 1]) - self.cdf(edges[i]) for i in range(bins)]
        )

    def to_dict(self) -> dict:
        return {"mu": self.mu, "sigma": self.sigma, "lo": self.lo, "hi": self.hi}

    @staticmethod
    def from_dict(d: dict) -> "PositionDistribution":
        return PositionDistribution(**d)


def _default_maps(
    vocab: Sequence[str],
) -> tuple[dict[str, PositionDistribution], dict[str, PositionDistribution]]:
    k = len(vocab)
    bias = {}
    ood = {}
    for i, token in enumerate(vocab):
        frac = i / max(k - 1, 1)
        bias[token] = PositionDistribution(
            mu=0.06 + 0.20 * frac, sigma=0.03, lo=0.02, hi=0.30
        )
        ood[token] = PositionDistribution(
            mu=0.70 + 0.02 * frac, sigma=0.03, lo=0.68, hi=0.74
        )
    return bias, ood


@dataclass
class BenchConfig:
    vocab: tuple[str, ...] = DEFAULT_VOCAB
    split_sizes: dict[str, int] = field(default_factory=lambda: dict(SPLIT_SIZES))
    t_range: tuple[int, int] = (48, 64)
    feature_dim: int = 16
    moment_len_range: tuple[int, int] = (6, 12)
    bias_map: dict[str, PositionDistribution] | None = None
    ood_map: dict[str, PositionDistribution] | None = None
    signature_strength: float = 1.0
    noise_level: float = 0.3
    frame_rate: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.bias_map is None or self.ood_map is None:
            bias, ood = _default_maps(self.vocab)
            self.bias_map = self.bias_map or bias
            self.ood_map = self.ood_map or ood
        self.validate()

    def validate(self) -> None:
        if len(self.vocab) < 1:
            raise BenchmarkConfigError("vocabulary must be non-empty")
        if any(n < 1 for n in self.split_sizes.values()) or not self.split_sizes:
            raise BenchmarkConfigError(f"bad split sizes {self.split_sizes}")
        t_lo, t_hi = self.t_range
        l_lo, l_hi = self.moment_len_range
        if not (1 <= t_lo <= t_hi) or not (1 <= l_lo <= l_hi):
            raise BenchmarkConfigError("invalid T or moment length range")
        if l_hi > t_lo:
            raise BenchmarkConfigError(
                f"max moment length {l_hi} exceeds min video length {t_lo}"
            )
        if self.feature_dim < 1 or self.noise_level < 0 or self.frame_rate <= 0:
            raise BenchmarkConfigError("bad feature_dim/noise_level/frame_rate")
        # the start window must fit the moment into every video length
        start_cap = 1.0 - l_hi / t_lo
        for name, pos_map in (("bias", self.bias_map), ("ood", self.ood_map)):
            for token in self.vocab:
                if token not in pos_map:
                    raise BenchmarkConfigError(f"{name} map missing token {token!r}")
                dist = pos_map[token]
                if dist.hi > start_cap + 1e-9:
                    raise BenchmarkConfigError(
                        f"{name} window for {token!r} reaches {dist.hi:.2f}, beyond "
                        f"feasible start {start_cap:.2f} for T>={t_lo}, L<={l_hi}"
                    )
        for token in self.vocab:
            b, o = self.bias_map[token], self.ood_map[token]
            if not (b.hi < o.lo or o.hi < b.lo):
                raise BenchmarkConfigError(
                    f"bias and ood windows overlap for {token!r}"
                )


@dataclass
class BenchMetadata:
    """Generator ground truth: signatures and position maps. Oracles and
    tests read this; the trained model never does."""

    vocab: tuple[str, ...]
    signatures: dict[str, np.ndarray]
    bias_map: dict[str, PositionDistribution]
    ood_map: dict[str, PositionDistribution]
    signature_strength: float
    noise_level: float
    frame_rate: float
    seed: int

    def to_dict(self) -> dict:
        return {
            "vocab": list(self.vocab),
            "signatures": {t: v.tolist() for t, v in self.signatures.items()},
            "bias_map": {t: d.to_dict() for t, d in self.bias_map.items()},
            "ood_map": {t: d.to_dict() for t, d in self.ood_map.items()},
            "signature_strength": self.signature_strength,
            "noise_level": self.noise_level,
            "frame_rate": self.frame_rate,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "BenchMetadata":
        return BenchMetadata(
            vocab=tuple(d["vocab"]),
            signatures={t: np.asarray(v, dtype=np.float64) for t, v in d["signatures"].items()},
            bias_map={t: PositionDistribution.from_dict(p) for t, p in d["bias_map"].items()},
            ood_map={t: PositionDistribution.from_dict(p) for t, p in d["ood_map"].items()},
            signature_strength=float(d["signature_strength"]),
            noise_level=float(d["noise_level"]),
            frame_rate=float(d["frame_rate"]),
            seed=int(d["seed"]),
        )


def make_signatures(config: BenchConfig) -> dict[str, np.ndarray]:
    """One near-orthogonal unit vector per token, fixed by the seed."""
    rng = np.random.default_rng([config.seed, 7919])
    k, d = len(config.vocab), config.feature_dim
    gauss = rng.normal(size=(d, max(k, 1)))
    if k <= d:
        q, _ = np.linalg.qr(gauss)
        vectors = q[:, :k].T
    else:
        vectors = gauss[:, :k].T
        vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
    return {token: vectors[i].copy() for i, token in enumerate(config.vocab)}


def _sample_features(
    config: BenchConfig,
    signatures: dict[str, np.ndarray],
    token: str,
    t: int,
    start: int,
    end: int,
    rng: np.random.Generator,
) -> np.ndarray:
    d = config.feature_dim
    others = [v for v in config.vocab if v != token] or [token]
    matrix = np.empty((t, d), dtype=np.float64)
    for row in range(t):
        if start <= row <= end:
            base = signatures[token]
        else:
            base = signatures[others[int(rng.integers(len(others)))]]
        matrix[row] = config.signature_strength * base
    if config.noise_level > 0:
        matrix += rng.normal(0.0, config.noise_level, size=(t, d))
    return matrix.astype(np.float32)


def annotation_seconds(start: int, end: int, duration: float, t: int) -> tuple[float, float]:
    """Timestamps strictly inside the first/last moment frames."""
    delta = duration / t
    return (start + START_OFFSET) * delta, (end + END_OFFSET) * delta


def generate_benchmark(
    config: BenchConfig,
) -> tuple[dict[str, DatasetSplit], BenchMetadata]:
    """Deterministically generate all four splits plus generator metadata."""
    signatures = make_signatures(config)
    splits: dict[str, DatasetSplit] = {}
    t_lo, t_hi = config.t_range
    l_lo, l_hi = config.moment_len_range
    for split_idx, (split_name, count) in enumerate(sorted(config.split_sizes.items())):
        pos_map = config.ood_map if split_name == "test-ood" else config.bias_map
        samples = []
        for i in range(count):
            token = config.vocab[i % len(config.vocab)]
            rng = np.random.default_rng([config.seed, split_idx, i])
            t = int(rng.integers(t_lo, t_hi + 1))
            length = int(rng.integers(l_lo, l_hi + 1))
            u = pos_map[token].sample(rng)
            start = min(int(round(u * t)), t - length)
            end = start + length - 1
            duration = t / config.frame_rate
            matrix = _sample_features(config, signatures, token, t, start, end, rng)
            start_sec, end_sec = annotation_seconds(start, end, duration, t)
            query = QUERY_TEMPLATES[i % len(QUERY_TEMPLATES)].format(verb=token)
            video_id = f"{split_name}_{i:04d}"
            samples.append(
                GroundingSample(
                    video_id=video_id,
                    features=FrameFeatures(matrix, duration),
                    tokens=TokenSequence.from_text(query),
                    span=MomentSpan(start_sec, end_sec, start, end),
                    query=query,
                )
            )
        splits[split_name] = DatasetSplit(name=split_name, samples=samples)
    metadata = BenchMetadata(
        vocab=config.vocab,
        signatures=signatures,
        bias_map=config.bias_map,
        ood_map=config.ood_map,
        signature_strength=config.signature_strength,
        noise_level=config.noise_level,
        frame_rate=config.frame_rate,
        seed=config.seed,
    )
    return splits, metadata


def write_benchmark(
    config: BenchConfig, out_dir: str | Path
) -> tuple[dict[str, DatasetSplit], BenchMetadata]:
    """Generate and serialize: one JSONL per split, features.tgf, metadata.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    splits, metadata = generate_benchmark(config)
    features: dict[str, np.ndarray] = {}
    for name, split in splits.items():
        records = []
        for sample in split:
            features[sample.video_id] = sample.features.matrix
            records.append(
                {
                    "video_id": sample.video_id,
                    "duration": sample.features.duration,
                    "query": sample.query,
                    "start": sample.span.start_sec,
                    "end": sample.span.end_sec,
                }
            )
        save_annotations(out_dir / f"{name}.jsonl", records)
    write_feature_container(out_dir / "features.tgf", features)
    (out_dir / "metadata.json").write_text(json.dumps(metadata.to_dict(), indent=2))
    return splits, metadata


def load_metadata(path: str | Path) -> BenchMetadata:
    return BenchMetadata.from_dict(json.loads(Path(path).read_text()))


def _query_token(tokens: Sequence[str], known: Sequence[str]) -> str:
    for token in tokens:
        if token in known:
            return token
    raise ValueError(f"no known action token in query {' '.join(tokens)!r}")


class BiasOnlyOracle:
    """Predicts from memorized per-token position statistics; never reads
    frame features."""

    kind = "bias-only"

    def __init__(self, training_split: DatasetSplit, tokens: Sequence[str], bins: int = 50):
        starts: dict[str, list[float]] = {t: [] for t in tokens}
        lengths: dict[str, list[float]] = {t: [] for t in tokens}
        for sample in training_split:
            token = _query_token(sample.tokens.tokens, tokens)
            duration = sample.features.duration
            starts[token].append(sample.span.start_sec / duration)
            lengths[token].append((sample.span.end_sec - sample.span.start_sec) / duration)
        self.mode_start: dict[str, float] = {}
        self.mean_length: dict[str, float] = {}
        for token in tokens:
            if not starts[token]:
                raise ValueError(f"token {token!r} absent from training split")
            counts, edges = np.histogram(starts[token], bins=bins, range=(0.0, 1.0))
            best = int(np.argmax(counts))
            self.mode_start[token] = float(0.5 * (edges[best] + edges[best + 1]))
            self.mean_length[token] = float(np.mean(lengths[token]))
        self.tokens = tuple(tokens)

    def predict(self, samples: Sequence[GroundingSample]) -> list[tuple[float, float]]:
        spans = []
        for sample in samples:
            token = _query_token(sample.tokens.tokens, self.tokens)
            duration = sample.features.duration
            start = self.mode_start[token] * duration
            end = min(start + self.mean_length[token] * duration, duration)
            spans.append((start, end))
        return spans


class ContentOnlyOracle:
    """Predicts the longest run of frames whose nearest signature matches the
    query token; never reads position statistics.

    Per-token similarities are smoothed over a short temporal window before
    classification, which keeps the rule usable at non-trivial noise levels.
    """

    kind = "content-only"

    def __init__(self, metadata: BenchMetadata, smooth: int | None = None):
        self.tokens = tuple(metadata.vocab)
        self.matrix = np.stack([metadata.signatures[t] for t in self.tokens])
        self.frame_rate = metadata.frame_rate
        if smooth is None:
            # clean features classify exactly per frame; noisy ones need the
            # window to keep the single-frame error rate negligible
            smooth = 1 if metadata.noise_level <= 0.25 else 5
        self.smooth = smooth

    def _smoothed_similarities(self, feats: np.ndarray) -> np.ndarray:
        sims = feats @ self.matrix.T  # (T, K)
        if self.smooth <= 1 or feats.shape[0] == 1:
            return sims
        kernel = np.ones(min(self.smooth, feats.shape[0]))
        out = np.empty_like(sims)
        counts = np.convolve(np.ones(sims.shape[0]), kernel, mode="same")
        for k in range(sims.shape[1]):
            out[:, k] = np.convolve(sims[:, k], kernel, mode="same") / counts
        return out

    def predict(self, samples: Sequence[GroundingSample]) -> list[tuple[float, float]]:
        spans = []
        for sample in samples:
            token = _query_token(sample.tokens.tokens, self.tokens)
            token_idx = self.tokens.index(token)
            feats = sample.features.matrix.astype(np.float64)
            sims = self._smoothed_similarities(feats)
            nearest = np.argmax(sims, axis=1)
            start, end = _longest_run(nearest == token_idx)
            if start is None:
                best = int(np.argmax(sims[:, token_idx]))
                start = end = best
            t = sample.features.num_frames
            spans.append(annotation_seconds(start, end, sample.features.duration, t))
        return spans


def _longest_run(flags: np.ndarray) -> tuple[int | None, int | None]:
    best_len, best_start = 0, None
    run_start = None
    for i, flag in enumerate(list(flags) + [False]):
        if flag and run_start is None:
            run_start = i
        elif not flag and run_start is not None:
            if i - run_start > best_len:
                best_len, best_start = i - run_start, run_start
            run_start = None
    if best_start is None:
        return None, None
    return best_start, best_start + best_len - 1


def make_oracle(kind: str, training_split: DatasetSplit, metadata: BenchMetadata):
    if kind == "bias-only":
        return BiasOnlyOracle(training_split, metadata.vocab)
    if kind == "content-only":
        return ContentOnlyOracle(metadata)
    raise ValueError(f"unknown oracle kind {kind!r}")


def run_oracle(oracle, split: DatasetSplit) -> list[dict]:
    """Predictions in the external JSON-lines record format."""
    spans = oracle.predict(split.samples)
    records = []
    seen: dict[str, int] = {}
    for sample, (start, end) in zip(split, spans):
        idx = seen.get(sample.video_id, 0)
        seen[sample.video_id] = idx + 1
        records.append(
            {
                "video_id": sample.video_id,
                "query_index": idx,
                "start": start,
                "end": end,
            }
        )
    return records
