import numpy as np
import pytest
import torch

from shuffleground.model import (
    GroundingNet,
    ModelConfig,
    Vocabulary,
    collate_batch,
    invariant_mean,
    load_checkpoint,
    pool_moments,
    save_checkpoint,
)


def tiny_model(seed=0, d=8, vocab_size=10, feature_dim=5):
    torch.manual_seed(seed)
    return GroundingNet(ModelConfig(vocab_size=vocab_size, feature_dim=feature_dim, hidden_dim=d))


def random_inputs(seed=0, b=2, t=6, n=3, feature_dim=5, vocab_size=10):
    g = torch.Generator().manual_seed(seed)
    features = torch.randn(b, t, feature_dim, generator=g)
    frame_mask = torch.ones(b, t, dtype=torch.bool)
    tokens = torch.randint(2, vocab_size, (b, n), generator=g)
    token_mask = torch.ones(b, n, dtype=torch.bool)
    return features, frame_mask, tokens, token_mask


class TestEncodeQuery:
    def test_single_token_shape(self):
        model = tiny_model()
        words, sent = model.encode_query(
            torch.tensor([[3]]), torch.tensor([[True]])
        )
        assert words.shape == (1, 1, 8)
        assert sent.shape == (1, 8)
        assert torch.isfinite(words).all() and torch.isfinite(sent).all()

    def test_deterministic(self):
        model = tiny_model()
        model.eval()
        tokens = torch.tensor([[2, 3, 4]])
        mask = torch.ones(1, 3, dtype=torch.bool)
        a = model.encode_query(tokens, mask)
        b = model.encode_query(tokens, mask)
        assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])

    def test_reversed_order_differs(self):
        model = tiny_model(seed=3)
        mask = torch.ones(1, 3, dtype=torch.bool)
        _, s_fwd = model.encode_query(torch.tensor([[2, 3, 4]]), mask)
        _, s_rev = model.encode_query(torch.tensor([[4, 3, 2]]), mask)
        assert not torch.allclose(s_fwd, s_rev)

    def test_empty_query_rejected(self):
        model = tiny_model()
        with pytest.raises(ValueError):
            model.encode_query(torch.tensor([[0]]), torch.tensor([[False]]))


class TestEncodeVideo:
    def test_single_frame_shape(self):
        model = tiny_model()
        features, frame_mask, tokens, token_mask = random_inputs(b=1, t=1)
        words, _ = model.encode_query(tokens, token_mask)
        encoded = model.encode_video(features, frame_mask, words, token_mask)
        assert encoded.shape == (1, 1, 8)

    def test_padding_does_not_change_valid_rows(self):
        model = tiny_model()
        model.eval()
        features, frame_mask, tokens, token_mask = random_inputs(b=1, t=5)
        words, sent = model.encode_query(tokens, token_mask)
        base = model.encode_video(features, frame_mask, words, token_mask)

        padded = torch.cat([features, torch.full((1, 3, 5), 9.9)], dim=1)
        padded_mask = torch.cat(
            [frame_mask, torch.zeros(1, 3, dtype=torch.bool)], dim=1
        )
        out = model.encode_video(padded, padded_mask, words, token_mask)
        assert torch.allclose(out[:, :5], base, atol=1e-6)
        assert torch.equal(out[:, 5:], torch.zeros_like(out[:, 5:]))

    def test_zero_features_finite(self):
        model = tiny_model()
        features, frame_mask, tokens, token_mask = random_inputs()
        out = model(torch.zeros_like(features), frame_mask, tokens, token_mask)
        for field in (out.relevance, out.start_probs, out.end_probs):
            assert torch.isfinite(field).all()

    def test_all_masked_rejected(self):
        model = tiny_model()
        features, frame_mask, tokens, token_mask = random_inputs(b=1, t=4)
        words, _ = model.encode_query(tokens, token_mask)
        with pytest.raises(ValueError):
            model.encode_video(features, torch.zeros_like(frame_mask), words, token_mask)


class TestRelevance:
    def test_zero_parameters_give_half(self):
        model = tiny_model()
        with torch.no_grad():
            model.relevance_mlp.fc1.weight.zero_()
            model.relevance_mlp.fc1.bias.zero_()
            model.relevance_mlp.fc2.weight.zero_()
            model.relevance_mlp.fc2.bias.zero_()
        v = torch.randn(2, 6, 8)
        s = torch.randn(2, 8)
        c = model.relevance(v, s)
        assert torch.equal(c, torch.full((2, 6), 0.5))

    def test_frame_permutation_equivariance(self):
        model = tiny_model(seed=5)
        v = torch.randn(1, 7, 8)
        s = torch.randn(1, 8)
        perm = torch.randperm(7)
        c = model.relevance(v, s)
        c_perm = model.relevance(v[:, perm], s)
        assert torch.equal(c[:, perm], c_perm)

    def test_closed_form_single_frame(self):
        # hand-set weights, 1-frame toy, compare against a numpy reimplementation
        model = tiny_model(d=2)
        rng = np.random.default_rng(11)
        w1 = rng.normal(size=(2, 4))
        b1 = rng.normal(size=2)
        w2 = rng.normal(size=(1, 2))
        b2 = rng.normal(size=1)
        with torch.no_grad():
            model.relevance_mlp.fc1.weight.copy_(torch.tensor(w1, dtype=torch.float32))
            model.relevance_mlp.fc1.bias.copy_(torch.tensor(b1, dtype=torch.float32))
            model.relevance_mlp.fc2.weight.copy_(torch.tensor(w2, dtype=torch.float32))
            model.relevance_mlp.fc2.bias.copy_(torch.tensor(b2, dtype=torch.float32))
        v = rng.normal(size=2)
        s = rng.normal(size=2)
        x = np.concatenate([v, s])
        hidden = np.maximum(w1 @ x + b1, 0.0)
        expected = 1.0 / (1.0 + np.exp(-(w2 @ hidden + b2)[0]))
        with torch.no_grad():
            got = model.relevance(
                torch.tensor(v, dtype=torch.float32).view(1, 1, 2),
                torch.tensor(s, dtype=torch.float32).view(1, 2),
            )
        assert float(got[0, 0]) == pytest.approx(expected, rel=1e-5)


class TestPredictBoundaries:
    def test_zero_relevance_uniform(self):
        model = tiny_model()
        v = torch.randn(1, 6, 8)
        s = torch.randn(1, 8)
        mask = torch.ones(1, 6, dtype=torch.bool)
        _, _, p_start, p_end = model.predict_boundaries(v, s, torch.zeros(1, 6), mask)
        assert torch.allclose(p_start, torch.full((1, 6), 1 / 6), atol=1e-6)
        assert torch.allclose(p_end, torch.full((1, 6), 1 / 6), atol=1e-6)

    def test_masked_frames_get_zero_probability(self):
        model = tiny_model()
        v = torch.randn(1, 6, 8)
        s = torch.randn(1, 8)
        c = torch.rand(1, 6)
        mask = torch.tensor([[True, True, True, False, False, False]])
        with torch.no_grad():
            _, _, p_start, p_end = model.predict_boundaries(v, s, c, mask)
        assert torch.equal(p_start[0, 3:], torch.zeros(3))
        assert torch.equal(p_end[0, 3:], torch.zeros(3))
        assert float(p_start.sum()) == pytest.approx(1.0, abs=1e-5)

    def test_gating_is_per_frame_local(self):
        model = tiny_model(seed=9)
        v = torch.randn(1, 6, 8)
        s = torch.randn(1, 8)
        c = torch.rand(1, 6)
        mask = torch.ones(1, 6, dtype=torch.bool)
        s_base, e_base, _, _ = model.predict_boundaries(v, s, c, mask)
        c2 = c.clone()
        c2[0, 2] *= 2.0
        s_mod, e_mod, _, _ = model.predict_boundaries(v, s, c2, mask)
        changed = (s_base[0] != s_mod[0]) | (e_base[0] != e_mod[0])
        assert changed[2]
        assert not changed[[0, 1, 3, 4, 5]].any()


class TestPoolMoments:
    def test_whole_video_span(self):
        v = torch.randn(5, 8)
        m1, m2, m3 = pool_moments(v, 0, 4)
        assert torch.equal(m1, torch.zeros(8))
        assert torch.equal(m3, torch.zeros(8))
        assert torch.allclose(m2, v.mean(dim=0), atol=1e-6)

    def test_identical_rows(self):
        row = torch.randn(8)
        v = row.expand(6, 8).clone()
        m1, m2, m3 = pool_moments(v, 2, 3)
        assert torch.allclose(m1, row, atol=1e-6)
        assert torch.allclose(m2, row, atol=1e-6)
        assert torch.allclose(m3, row, atol=1e-6)

    def test_three_frames_direct(self):
        v = torch.randn(3, 8)
        m1, m2, m3 = pool_moments(v, 1, 1)
        assert torch.equal(m1, v[0])
        assert torch.equal(m2, v[1])
        assert torch.equal(m3, v[2])

    def test_invariant_mean_is_bitwise_permutation_invariant(self):
        g = torch.Generator().manual_seed(4)
        for _ in range(50):
            rows = torch.randn(9, 8, generator=g)
            perm = torch.randperm(9, generator=g)
            assert torch.equal(invariant_mean(rows), invariant_mean(rows[perm]))


class TestOrderLogits:
    def test_zero_parameters(self):
        model = tiny_model()
        with torch.no_grad():
            model.order_fc1.weight.zero_()
            model.order_fc1.bias.zero_()
            model.order_fc2.weight.zero_()
            model.order_fc2.bias.zero_()
        m = torch.randn(3, 8)
        o = model.order_logits(m[0:1], m[1:2], m[2:3])
        assert torch.equal(o, torch.zeros(1, 2))

    def test_swapping_context_moments_changes_logits(self):
        model = tiny_model(seed=21)
        m1, m2, m3 = torch.randn(3, 1, 8).unbind(0)
        o = model.order_logits(m1, m2, m3)
        o_swapped = model.order_logits(m3, m2, m1)
        assert not torch.allclose(o, o_swapped)

    def test_within_moment_shuffle_leaves_logits_bitwise_unchanged(self):
        for seed in range(20):
            model = tiny_model(seed=seed)
            g = torch.Generator().manual_seed(seed)
            t = int(torch.randint(3, 12, (1,), generator=g))
            v = torch.randn(t, 8, generator=g)
            s = int(torch.randint(0, t, (1,), generator=g))
            e = int(torch.randint(s, t, (1,), generator=g))
            o = model.order_logits(*pool_moments(v, s, e))
            which = int(torch.randint(0, 3, (1,), generator=g))
            lo, hi = [(0, s), (s, e + 1), (e + 1, t)][which]
            v_shuffled = v.clone()
            if hi - lo > 1:
                perm = lo + torch.randperm(hi - lo, generator=g)
                v_shuffled[lo:hi] = v[perm]
            o_shuffled = model.order_logits(*pool_moments(v_shuffled, s, e))
            assert torch.equal(o, o_shuffled)


class TestForward:
    def test_eval_determinism(self):
        model = tiny_model()
        model.eval()
        inputs = random_inputs()
        a = model(*inputs)
        b = model(*inputs)
        assert torch.equal(a.start_probs, b.start_probs)
        assert torch.equal(a.relevance, b.relevance)

    def test_probability_normalization(self):
        model = tiny_model(seed=13)
        features, frame_mask, tokens, token_mask = random_inputs(b=3, t=9)
        frame_mask[1, 6:] = False
        frame_mask[2, 4:] = False
        out = model(features, frame_mask, tokens, token_mask)
        sums_s = out.start_probs.sum(dim=1)
        sums_e = out.end_probs.sum(dim=1)
        assert torch.allclose(sums_s, torch.ones(3), atol=1e-5)
        assert torch.allclose(sums_e, torch.ones(3), atol=1e-5)
        assert ((out.relevance > 0) & (out.relevance < 1)).all()

    def test_weight_sharing_one_encoder_for_both_videos(self):
        # gradients from a pseudo-video-only loss reach the shared encoder
        model = tiny_model()
        features, frame_mask, tokens, token_mask = random_inputs()
        pseudo = features.flip(dims=[1])
        out_p = model(pseudo, frame_mask, tokens, token_mask)
        out_p.relevance.sum().backward()
        assert model.video_lstm.weight_ih_l0.grad is not None
        assert model.video_lstm.weight_ih_l0.grad.abs().sum() > 0

    def test_batch_of_one_equals_unbatched_in_padded_batch(self):
        model = tiny_model(seed=17)
        model.eval()
        rng = np.random.default_rng(2)
        short = rng.normal(size=(4, 5)).astype(np.float32)
        long = rng.normal(size=(9, 5)).astype(np.float32)
        ids_short, ids_long = [2, 3], [4, 5, 6, 7]

        f1, m1, t1, tm1 = collate_batch([short], [ids_short])
        alone = model(f1, m1, t1, tm1)
        fb, mb, tb, tmb = collate_batch([short, long], [ids_short, ids_long])
        together = model(fb, mb, tb, tmb)
        assert torch.allclose(together.relevance[0, :4], alone.relevance[0], atol=1e-6)
        assert torch.allclose(
            together.start_probs[0, :4], alone.start_probs[0], atol=1e-6
        )
        assert torch.allclose(together.end_probs[0, :4], alone.end_probs[0], atol=1e-6)

    def test_forward_with_spans_yields_order_logits(self):
        model = tiny_model()
        features, frame_mask, tokens, token_mask = random_inputs(b=2, t=6)
        spans = torch.tensor([[1, 3], [0, 5]])
        out = model(features, frame_mask, tokens, token_mask, spans)
        assert out.order_logits.shape == (2, 2)
        assert torch.isfinite(out.order_logits).all()


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        model = tiny_model(seed=23)
        vocab = Vocabulary(["person", "runs"])
        path = tmp_path / "ckpt.pt"
        save_checkpoint(path, model, vocab, extra={"note": 1})
        loaded, vocab2, extra = load_checkpoint(path)
        assert extra == {"note": 1}
        assert vocab2.tokens == vocab.tokens
        for a, b in zip(model.parameters(), loaded.parameters()):
            assert torch.equal(a, b)
        model.eval(), loaded.eval()
        inputs = random_inputs()
        assert torch.equal(model(*inputs).start_probs, loaded(*inputs).start_probs)

    def test_version_check(self, tmp_path):
        path = tmp_path / "bad.pt"
        torch.save({"format_version": 99}, path)
        with pytest.raises(ValueError, match="version"):
            load_checkpoint(path)
