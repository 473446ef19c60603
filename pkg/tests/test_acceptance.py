"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines; the whole suite targets a laptop-CPU budget (the bias-phenomenon
experiment dominates at roughly ten minutes).
"""

import json
import math

import numpy as np
import pytest
import torch

from gradcheck_util import max_gradient_error, random_instance
from shuffleground.data import DatasetSplit, FrameFeatures, GroundingSample, MomentSpan, TokenSequence
from shuffleground.evaluation import (
    ModelPredictor,
    compute_metrics,
    evaluate_predictor,
    randomized_video_test,
    select_span,
    spans_to_ious,
)
from shuffleground.losses import bce_relevance, grounding_loss, inter_loss, order_loss
from shuffleground.model import GroundingNet, ModelConfig, Vocabulary, pool_moments
from shuffleground.pseudo import enumerate_insertion_points, generate_pseudo_video
from shuffleground.synth import BenchConfig, BiasOnlyOracle, ContentOnlyOracle, generate_benchmark
from shuffleground.training import TrainConfig, build_model, fit

torch.set_num_threads(1)


def passed(criterion: str, detail: str = ""):
    print(f"\nACCEPTANCE {criterion}: PASS {detail}".rstrip())


@pytest.fixture(scope="module")
def default_benchmark():
    return generate_benchmark(BenchConfig(seed=0))


# --- 1. loss analytics ------------------------------------------------------

def test_criterion_1_loss_analytics():
    rel = 1e-9
    c = torch.tensor([0.8, 0.3], dtype=torch.float64)
    p = torch.tensor([1.0, 0.0], dtype=torch.float64)
    assert float(bce_relevance(c, p)) == pytest.approx(-(math.log(0.8) + math.log(0.7)), rel=rel)

    half = torch.full((10,), 0.5, dtype=torch.float64)
    assert float(bce_relevance(half, torch.ones(10, dtype=torch.float64))) == pytest.approx(
        10 * math.log(2), rel=rel
    )

    c_o = torch.log(torch.tensor([0.5, 0.5], dtype=torch.float64))
    c_p = torch.log(torch.tensor([0.9, 0.1], dtype=torch.float64))
    kl = 0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(0.5 / 0.1)
    assert float(inter_loss(c_o, (0, 1), c_p, (0, 1))) == pytest.approx(kl, rel=rel)
    same = torch.tensor([0.2, 1.5, -0.3], dtype=torch.float64)
    assert float(inter_loss(same, (0, 2), same.clone(), (0, 2))) == 0.0

    z = torch.zeros(2, dtype=torch.float64)
    assert float(order_loss(z, z, False)) == pytest.approx(2 * math.log(2), rel=rel)
    assert float(order_loss(z, z, True)) == pytest.approx(0.5 * math.log(2), rel=rel)

    uniform = torch.full((10,), 0.1, dtype=torch.float64)
    assert float(grounding_loss(uniform, uniform, 3, 7)) == pytest.approx(
        2 * math.log(10), rel=rel
    )
    ps = torch.tensor([0.5, 0.5], dtype=torch.float64)
    pe = torch.tensor([0.25, 0.75], dtype=torch.float64)
    assert float(grounding_loss(ps, pe, 0, 0)) == pytest.approx(
        math.log(2) + math.log(4), rel=rel
    )
    passed("1 (loss analytics)", "hand values matched at 1e-9 relative")


# --- 2. gradient suite ------------------------------------------------------

def test_criterion_2_gradient_suite():
    lambda_cycle = [
        (1.0, 1.0, 1.0), (1.0, 1.0, 1.0), (1.0, 1.0, 1.0), (1.0, 1.0, 1.0),
        (0.0, 0.0, 0.0), (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0),
        (0.5, 2.0, 1.0), (1.0, 1.0, 1.0),
    ]
    worst = 0.0
    for seed in range(20):
        lambdas = lambda_cycle[seed % len(lambda_cycle)]
        batch_size = 2 if seed % 7 == 0 else 1
        model, batch = random_instance(seed, d=4, vocab_size=5, batch=batch_size)
        err = max_gradient_error(model, batch, lambdas)
        worst = max(worst, err)
        assert err < 1e-3, f"instance {seed} (lambdas {lambdas}): rel error {err:.3e}"
    passed("2 (gradient suite)", f"20 instances, worst relative error {worst:.2e}")


# --- 3. pseudo-video invariants ---------------------------------------------

def test_criterion_3_pseudo_video_invariants():
    rng = np.random.default_rng(42)
    for _ in range(10_000):
        t = int(rng.integers(1, 20))
        s = int(rng.integers(0, t))
        e = int(rng.integers(s, t))
        matrix = rng.normal(size=(t, 2)).astype(np.float32)
        matrix[:, 0] = np.arange(t)
        feats = FrameFeatures(matrix, float(t))
        span = MomentSpan.from_frames(s, e, float(t), t)
        pseudo, new_span, degenerate = generate_pseudo_video(feats, span, rng)
        k = new_span.start_frame
        assert pseudo.num_frames == t
        assert new_span.num_frames == span.num_frames
        assert np.array_equal(pseudo.matrix[k : new_span.end_frame + 1], matrix[s : e + 1])
        remainder = np.concatenate([matrix[:s], matrix[e + 1 :]])
        expected = np.concatenate([remainder[:k], matrix[s : e + 1], remainder[k:]])
        assert np.array_equal(pseudo.matrix, expected)
        assert np.array_equal(np.sort(pseudo.matrix, axis=0), np.sort(matrix, axis=0))

    # uniformity on a fixed instance, per-cell 3-sigma multinomial bound
    t, s, e = 12, 4, 6
    feats = FrameFeatures(np.arange(24, dtype=np.float32).reshape(12, 2), 12.0)
    span = MomentSpan.from_frames(s, e, 12.0, t)
    candidates = enumerate_insertion_points(t, span)
    n = 10_000
    counts = {k: 0 for k in candidates}
    rng = np.random.default_rng(7)
    for _ in range(n):
        _, new_span, _ = generate_pseudo_video(feats, span, rng)
        counts[new_span.start_frame] += 1
    p = 1.0 / len(candidates)
    sigma = math.sqrt(n * p * (1 - p))
    for k, c in counts.items():
        assert abs(c - n * p) <= 3 * sigma, f"offset {k}: {c} vs {n * p:.0f} +- {3 * sigma:.0f}"
    passed("3 (pseudo-video invariants)", "10,000 randomized calls + uniformity at 3 sigma")


# --- 4. decoding oracle -----------------------------------------------------

def test_criterion_4_decoding_oracle():
    rng = np.random.default_rng(0)
    for trial in range(1000):
        t = int(rng.integers(1, 65))
        p_s = rng.dirichlet(np.ones(t))
        p_e = rng.dirichlet(np.ones(t))
        max_len = int(rng.integers(1, t + 1)) if trial % 4 == 0 else None
        got = select_span(p_s, p_e, max_len=max_len)
        best, best_pair = -1.0, None
        for i in range(t):
            for j in range(i, t):
                if max_len is not None and j - i >= max_len:
                    continue
                v = p_s[i] * p_e[j]
                if v > best:
                    best, best_pair = v, (i, j)
        assert got == best_pair, f"trial {trial}: {got} vs {best_pair}"
    passed("4 (decoding oracle)", "1,000 random pairs vs exhaustive argmax")


# --- 5. metric oracle -------------------------------------------------------

def test_criterion_5_metric_oracle():
    samples = []
    for i in range(3):
        samples.append(
            GroundingSample(
                video_id=f"v{i}",
                features=FrameFeatures(np.zeros((10, 2), dtype=np.float32), 10.0),
                tokens=TokenSequence.from_text("person runs"),
                span=MomentSpan.from_seconds(0.0, 5.0, 10.0, 10),
                query="person runs",
            )
        )
    split = DatasetSplit("test-iid", samples)
    preds = [(0.0, 4.0), (0.0, 2.0), (0.0, 3.0)]  # IoUs 0.8, 0.4, 0.6
    ious = spans_to_ious(preds, split)
    assert ious == [pytest.approx(0.8), pytest.approx(0.4), pytest.approx(0.6)]
    report = compute_metrics(ious, "test-iid")
    assert report.r1[0.3] == 100.0
    assert report.r1[0.5] == pytest.approx(100.0 * 2 / 3, abs=1e-12)
    assert report.r1[0.7] == pytest.approx(100.0 * 1 / 3, abs=1e-12)
    assert report.miou == pytest.approx(60.0, abs=1e-9)

    perfect = [(0.0, 5.0)] * 3
    perfect_report = compute_metrics(spans_to_ious(perfect, split), "test-iid")
    assert perfect_report.miou == 100.0
    assert all(v == 100.0 for v in perfect_report.r1.values())
    passed("5 (metric oracle)", "hand-computed R@1/mIoU reproduced")


# --- 6. sanity-check calibration --------------------------------------------

def test_criterion_6_sanity_check_calibration(default_benchmark):
    splits, meta = default_benchmark
    bias_oracle = BiasOnlyOracle(splits["training"], meta.vocab)
    content_oracle = ContentOnlyOracle(meta)

    bias_result = randomized_video_test(
        bias_oracle, splits["test-iid"], segment_len=4, rng=np.random.default_rng(0)
    )
    content_result = randomized_video_test(
        content_oracle, splits["test-iid"], segment_len=4, rng=np.random.default_rng(0)
    )
    bias_drop = bias_result.drop["r1@0.5"]
    content_drop = content_result.drop["r1@0.5"]
    assert abs(bias_drop) <= 1.0, f"bias-only drop {bias_drop:.2f}"
    assert content_drop >= 30.0, f"content-only drop {content_drop:.2f}"
    passed(
        "6 (sanity-check calibration)",
        f"bias-only drop {bias_drop:+.2f}, content-only drop {content_drop:+.2f}",
    )


# --- 7. bias phenomenon reproduction ----------------------------------------

def _train_and_score(splits, vocab, lambdas, seed):
    config = TrainConfig(
        seed=seed, lambda1=lambdas[0], lambda2=lambdas[1], lambda3=lambdas[2]
    )
    model = build_model(vocab, splits["training"].samples[0].features.dim, config)
    result = fit(model, vocab, splits, config)
    model.load_state_dict(result.best_state_dict)
    predictor = ModelPredictor(model, vocab)
    iid = evaluate_predictor(predictor, splits["test-iid"]).miou
    ood = evaluate_predictor(predictor, splits["test-ood"]).miou
    shuffle = randomized_video_test(
        predictor, splits["test-ood"], segment_len=4, rng=np.random.default_rng(0)
    ).drop["r1@0.5"]
    return iid, ood, shuffle


def test_criterion_7_bias_phenomenon(default_benchmark):
    splits, _ = default_benchmark
    vocab = Vocabulary.build(s.tokens.tokens for s in splits["training"])
    seeds = (0, 1, 2)
    gaps, gains, base_drops, full_drops = [], [], [], []
    for seed in seeds:
        b_iid, b_ood, b_drop = _train_and_score(splits, vocab, (0.0, 0.0, 0.0), seed)
        f_iid, f_ood, f_drop = _train_and_score(splits, vocab, (1.0, 1.0, 1.0), seed)
        gaps.append(b_iid - b_ood)
        gains.append(f_ood - b_ood)
        base_drops.append(b_drop)
        full_drops.append(f_drop)
        print(
            f"\n  seed {seed}: baseline iid/ood {b_iid:.1f}/{b_ood:.1f}, "
            f"full iid/ood {f_iid:.1f}/{f_ood:.1f}, "
            f"drops baseline {b_drop:+.1f} vs full {f_drop:+.1f}"
        )
    mean_gap = float(np.mean(gaps))
    mean_gain = float(np.mean(gains))
    mean_base_drop = float(np.mean(base_drops))
    mean_full_drop = float(np.mean(full_drops))
    assert mean_gap >= 15.0, f"(a) baseline iid-ood gap {mean_gap:.1f} < 15"
    assert mean_gain >= 5.0, f"(b) full-vs-baseline ood gain {mean_gain:.1f} < 5"
    assert mean_full_drop > mean_base_drop, (
        f"(c) full drop {mean_full_drop:.1f} <= baseline drop {mean_base_drop:.1f}"
    )
    passed(
        "7 (bias phenomenon)",
        f"gap {mean_gap:.1f} >= 15, ood gain {mean_gain:.1f} >= 5, "
        f"drop {mean_full_drop:.1f} > {mean_base_drop:.1f} (means over seeds {seeds})",
    )


# --- 8. ablation wiring -----------------------------------------------------

TABLE_COMBOS = [
    (0.0, 0.0, 0.0),
    (1.0, 0.0, 0.0),
    (0.0, 1.0, 0.0),
    (0.0, 0.0, 1.0),
    (1.0, 0.0, 1.0),
    (1.0, 1.0, 0.0),
    (1.0, 1.0, 1.0),
]


def test_criterion_8_ablation_wiring(tmp_path):
    from shuffleground.synth import DEFAULT_VOCAB, PositionDistribution

    bias = {t: PositionDistribution(0.1, 0.05, 0.02, 0.25) for t in DEFAULT_VOCAB}
    ood = {t: PositionDistribution(0.5, 0.04, 0.45, 0.55) for t in DEFAULT_VOCAB}
    splits, _ = generate_benchmark(
        BenchConfig(
            split_sizes={"training": 16, "val": 8, "test-iid": 8, "test-ood": 8},
            t_range=(12, 16), moment_len_range=(3, 5),
            bias_map=bias, ood_map=ood, seed=2,
        )
    )
    vocab = Vocabulary.build(s.tokens.tokens for s in splits["training"])
    names = ("l_intra", "l_inter", "l_d")
    for combo in TABLE_COMBOS:
        config = TrainConfig(
            batch_size=8, epochs=1, hidden_dim=16, embed_dim=16, seed=0,
            lambda1=combo[0], lambda2=combo[1], lambda3=combo[2],
        )
        expected_terms = ["l_g"] + [n for n, lam in zip(names, combo) if lam > 0]
        assert config.enabled_terms() == expected_terms
        run_dir = tmp_path / ("run_" + "".join(str(int(v)) for v in combo))
        model = build_model(vocab, 16, config)
        fit(model, vocab, splits, config, run_dir=run_dir)
        snapshot = json.loads((run_dir / "config_snapshot.json").read_text())
        assert snapshot["enabled_terms"] == expected_terms
        records = [
            json.loads(line)
            for line in (run_dir / "train_log.jsonl").read_text().splitlines()
        ]
        assert records, "no training steps logged"
        for rec in records:
            recomputed = rec["l_g"] + sum(
                lam * rec[name] for name, lam in zip(names, combo)
            )
            assert rec["total"] == pytest.approx(recomputed, rel=1e-6)
    passed("8 (ablation wiring)", f"{len(TABLE_COMBOS)} loss-term combinations wired")


# --- 9. discriminator invariance --------------------------------------------

def test_criterion_9_discriminator_invariance():
    for seed in range(100):
        torch.manual_seed(seed)
        model = GroundingNet(ModelConfig(vocab_size=6, feature_dim=4, hidden_dim=8))
        g = torch.Generator().manual_seed(seed)
        t = int(torch.randint(3, 16, (1,), generator=g))
        v = torch.randn(t, 8, generator=g)
        s = int(torch.randint(0, t, (1,), generator=g))
        e = int(torch.randint(s, t, (1,), generator=g))
        base = model.order_logits(*pool_moments(v, s, e))
        which = int(torch.randint(0, 3, (1,), generator=g))
        lo, hi = [(0, s), (s, e + 1), (e + 1, t)][which]
        shuffled = v.clone()
        if hi - lo > 1:
            perm = lo + torch.randperm(hi - lo, generator=g)
            shuffled[lo:hi] = v[perm]
        permuted = model.order_logits(*pool_moments(shuffled, s, e))
        assert torch.equal(base, permuted), f"seed {seed}: logits changed bitwise"
    passed("9 (discriminator invariance)", "100 random models/inputs, bitwise equal")
