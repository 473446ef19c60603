"""Span-based grounding network with relevance gating and order discrimination.

One shared video encoder feeds three heads: per-frame start/end boundary
predictors (gated by cross-modal relevance), the per-frame relevance MLP, and
a binary discriminator that judges whether the (before, target, after) moment
sequence is in original order. The discriminator sees only pooled content,
never positional encodings, so it cannot shortcut through frame indices.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import Tensor, nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
PAD_ID = 0
UNK_ID = 1

CHECKPOINT_VERSION = 1


class Vocabulary:
    """Token <-> id table with reserved padding and unknown entries."""

    def __init__(self, tokens: Sequence[str]):
        self.tokens = [PAD_TOKEN, UNK_TOKEN] + [
            t for t in tokens if t not in (PAD_TOKEN, UNK_TOKEN)
        ]
        self.index = {t: i for i, t in enumerate(self.tokens)}

    @staticmethod
    def build(token_seqs: Iterable[Sequence[str]]) -> "Vocabulary":
        counts = Counter()
        for seq in token_seqs:
            counts.update(seq)
        # frequency-major, then alphabetical, for a deterministic table
        ordered = sorted(counts, key=lambda t: (-counts[t], t))
        return Vocabulary(ordered)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.index.get(t, UNK_ID) for t in tokens]

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class ModelConfig:
    """Dimensions of the network; hidden_dim must be even (bidirectional)."""

    vocab_size: int
    feature_dim: int
    hidden_dim: int = 64
    embed_dim: int = 64
    query_layers: int = 2

    def __post_init__(self):
        if self.hidden_dim % 2 != 0:
            raise ValueError(f"hidden_dim must be even, got {self.hidden_dim}")
        if min(self.vocab_size, self.feature_dim, self.embed_dim) < 1:
            raise ValueError("all dims must be positive")


@dataclass
class ModelOutputs:
    """Per-frame relevance/boundary outputs plus optional order logits."""

    relevance: Tensor          # (B, T) in (0, 1)
    start_scores: Tensor       # (B, T), -inf at padded frames
    end_scores: Tensor         # (B, T)
    start_probs: Tensor        # (B, T), rows sum to 1 over valid frames
    end_probs: Tensor          # (B, T)
    encoded_video: Tensor      # (B, T, d)
    order_logits: Tensor | None = None  # (B, 2) when spans were supplied


def masked_softmax(scores: Tensor, mask: Tensor, dim: int = -1) -> Tensor:
    """Softmax that assigns exactly zero probability to masked positions."""
    filled = scores.masked_fill(~mask, float("-inf"))
    return torch.softmax(filled, dim=dim)


def invariant_mean(rows: Tensor) -> Tensor:
    """Mean over rows that is bitwise invariant to row permutations.

    Each column is sorted before summation so the accumulation order depends
    only on the multiset of values, not their input order.
    """
    if rows.shape[0] == 0:
        return rows.new_zeros(rows.shape[1])
    ordered = torch.sort(rows, dim=0).values
    return ordered.sum(dim=0) / rows.shape[0]


def pool_moments(v_encoded: Tensor, start: int, end: int) -> tuple[Tensor, Tensor, Tensor]:
    """Average-pool the before/target/after moments of one encoded video.

    Empty before/after moments (span touching a video edge) pool to zero
    vectors, the neutral element under the discriminator's concatenation.
    """
    t = v_encoded.shape[0]
    if not 0 <= start <= end <= t - 1:
        raise ValueError(f"invalid span [{start}, {end}] for T={t}")
    m1 = invariant_mean(v_encoded[:start])
    m2 = invariant_mean(v_encoded[start : end + 1])
    m3 = invariant_mean(v_encoded[end + 1 :])
    return m1, m2, m3


class _FrameMLP(nn.Module):
    """Two-layer per-frame MLP with relu, shared across time steps."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int = 1):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, out_dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(torch.relu(self.fc1(x)))


class GroundingNet(nn.Module):
    """Query encoder, query-guided video encoder, and the three heads."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.hidden_dim
        self.embedding = nn.Embedding(config.vocab_size, config.embed_dim, padding_idx=PAD_ID)
        self.query_lstm = nn.LSTM(
            config.embed_dim,
            d // 2,
            num_layers=config.query_layers,
            bidirectional=True,
            batch_first=True,
        )
        self.sentence_proj = nn.Linear(d, d)
        self.frame_proj = nn.Linear(config.feature_dim, d)
        self.fuse = nn.Linear(2 * d, d)
        self.video_lstm = nn.LSTM(d, d // 2, num_layers=1, bidirectional=True, batch_first=True)
        self.relevance_mlp = _FrameMLP(2 * d, d)
        self.start_head = _FrameMLP(2 * d, d)
        self.end_head = _FrameMLP(2 * d, d)
        self.order_fc1 = nn.Linear(2 * d, d)
        self.order_fc2 = nn.Linear(3 * d, 2)

    def encode_query(self, tokens: Tensor, token_mask: Tensor) -> tuple[Tensor, Tensor]:
        """Word-level outputs (B, N, d) and projected sentence vector (B, d)."""
        lengths = token_mask.sum(dim=1)
        if (lengths < 1).any():
            raise ValueError("every query needs at least one valid token")
        emb = self.embedding(tokens)
        packed = pack_padded_sequence(
            emb, lengths.cpu(), batch_first=True, enforce_sorted=False
        )
        out, (h_n, _) = self.query_lstm(packed)
        words, _ = pad_packed_sequence(out, batch_first=True, total_length=tokens.shape[1])
        sent = torch.cat([h_n[-2], h_n[-1]], dim=-1)
        return words, self.sentence_proj(sent)

    def encode_video(
        self, features: Tensor, frame_mask: Tensor, words: Tensor, token_mask: Tensor
    ) -> Tensor:
        """Query-guided frame encoding (B, T, d); padded rows are zero."""
        lengths = frame_mask.sum(dim=1)
        if (lengths < 1).any():
            raise ValueError("every video needs at least one valid frame")
        proj = self.frame_proj(features)
        scale = float(np.sqrt(self.config.hidden_dim))
        scores = torch.matmul(proj, words.transpose(1, 2)) / scale
        attn = masked_softmax(scores, token_mask.unsqueeze(1), dim=-1)
        context = torch.matmul(attn, words)
        fused = self.fuse(torch.cat([proj, context], dim=-1))
        packed = pack_padded_sequence(
            fused, lengths.cpu(), batch_first=True, enforce_sorted=False
        )
        out, _ = self.video_lstm(packed)
        encoded, _ = pad_packed_sequence(
            out, batch_first=True, total_length=features.shape[1]
        )
        return encoded

    def relevance(self, encoded_video: Tensor, sentence: Tensor) -> Tensor:
        """Per-frame cross-modal relevance in (0, 1), weights shared over time."""
        expanded = sentence.unsqueeze(1).expand(-1, encoded_video.shape[1], -1)
        scores = self.relevance_mlp(torch.cat([encoded_video, expanded], dim=-1))
        return torch.sigmoid(scores.squeeze(-1))

    def predict_boundaries(
        self,
        encoded_video: Tensor,
        sentence: Tensor,
        relevance: Tensor,
        frame_mask: Tensor,
    ) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        """Relevance-gated start/end scores and their softmax over time."""
        expanded = sentence.unsqueeze(1).expand(-1, encoded_video.shape[1], -1)
        gated = relevance.unsqueeze(-1) * torch.cat([encoded_video, expanded], dim=-1)
        start_scores = self.start_head(gated).squeeze(-1)
        end_scores = self.end_head(gated).squeeze(-1)
        start_scores = start_scores.masked_fill(~frame_mask, float("-inf"))
        end_scores = end_scores.masked_fill(~frame_mask, float("-inf"))
        return (
            start_scores,
            end_scores,
            torch.softmax(start_scores, dim=-1),
            torch.softmax(end_scores, dim=-1),
        )

    def order_logits(self, m1: Tensor, m2: Tensor, m3: Tensor) -> Tensor:
        """Binary order logits from the pooled (before, target, after) moments."""
        h1 = torch.relu(self.order_fc1(torch.cat([m1, m2], dim=-1)))
        h2 = torch.relu(self.order_fc1(torch.cat([m2, m3], dim=-1)))
        return self.order_fc2(torch.cat([m2, h1, h2], dim=-1))

    def order_logits_for_spans(
        self, encoded_video: Tensor, spans: Tensor, lengths: Tensor
    ) -> Tensor:
        """Pool each sample's moments at its span and classify, batched."""
        pooled = []
        for i in range(encoded_video.shape[0]):
            rows = encoded_video[i, : int(lengths[i])]
            m1, m2, m3 = pool_moments(rows, int(spans[i, 0]), int(spans[i, 1]))
            pooled.append(torch.stack([m1, m2, m3]))
        stacked = torch.stack(pooled)
        return self.order_logits(stacked[:, 0], stacked[:, 1], stacked[:, 2])

    def forward(
        self,
        features: Tensor,
        frame_mask: Tensor,
        tokens: Tensor,
        token_mask: Tensor,
        spans: Tensor | None = None,
    ) -> ModelOutputs:
        words, sentence = self.encode_query(tokens, token_mask)
        encoded = self.encode_video(features, frame_mask, words, token_mask)
        rel = self.relevance(encoded, sentence)
        s_scores, e_scores, s_probs, e_probs = self.predict_boundaries(
            encoded, sentence, rel, frame_mask
        )
        order = None
        if spans is not None:
            order = self.order_logits_for_spans(encoded, spans, frame_mask.sum(dim=1))
        return ModelOutputs(
            relevance=rel,
            start_scores=s_scores,
            end_scores=e_scores,
            start_probs=s_probs,
            end_probs=e_probs,
            encoded_video=encoded,
            order_logits=order,
        )

    def load_pretrained_embeddings(
        self, table: dict[str, np.ndarray], vocab: Vocabulary
    ) -> int:
        """Copy matching rows from a pretrained embedding table; returns hits."""
        hits = 0
        with torch.no_grad():
            for token, vec in table.items():
                idx = vocab.index.get(token)
                if idx is None:
                    continue
                if vec.shape[0] != self.config.embed_dim:
                    raise ValueError(
                        f"embedding dim {vec.shape[0]} != model embed_dim "
                        f"{self.config.embed_dim}"
                    )
                self.embedding.weight[idx] = torch.as_tensor(
                    vec, dtype=self.embedding.weight.dtype
                )
                hits += 1
        return hits


def collate_batch(
    feature_matrices: Sequence[np.ndarray],
    token_ids: Sequence[Sequence[int]],
    dtype: torch.dtype = torch.float32,
) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Pad variable-length videos/queries into batch tensors with masks."""
    batch = len(feature_matrices)
    max_t = max(m.shape[0] for m in feature_matrices)
    max_n = max(len(ids) for ids in token_ids)
    dim = feature_matrices[0].shape[1]
    features = torch.zeros(batch, max_t, dim, dtype=dtype)
    frame_mask = torch.zeros(batch, max_t, dtype=torch.bool)
    tokens = torch.full((batch, max_n), PAD_ID, dtype=torch.long)
    token_mask = torch.zeros(batch, max_n, dtype=torch.bool)
    for i, (matrix, ids) in enumerate(zip(feature_matrices, token_ids)):
        t, n = matrix.shape[0], len(ids)
        features[i, :t] = torch.as_tensor(matrix, dtype=dtype)
        frame_mask[i, :t] = True
        tokens[i, :n] = torch.as_tensor(list(ids), dtype=torch.long)
        token_mask[i, :n] = True
    return features, frame_mask, tokens, token_mask


def save_checkpoint(
    path: str | Path,
    model: GroundingNet,
    vocab: Vocabulary,
    extra: dict | None = None,
) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": asdict(model.config),
        "vocab": list(vocab.tokens),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, Path(path))


def load_checkpoint(path: str | Path) -> tuple[GroundingNet, Vocabulary, dict]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    model = GroundingNet(ModelConfig(**payload["model_config"]))
    model.load_state_dict(payload["state_dict"])
    vocab = Vocabulary.__new__(Vocabulary)
    vocab.tokens = list(payload["vocab"])
    vocab.index = {t: i for i, t in enumerate(vocab.tokens)}
    return model, vocab, payload["extra"]
