import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mixtrain import dsp, evaluation
from mixtrain.dataio import (
    BACKGROUND,
    GSC_KEYWORDS,
    PROTOCOL_TARGETS,
    SILENCE,
    UNKNOWN,
    ClassMap,
    InterferenceAudio,
    UtteranceRecord,
)
from mixtrain.evaluation import (
    EvalReport,
    MixedTestItem,
    TestItem,
    eer_from_scores,
    masked_top1_weak,
    top_k_accuracy,
)
from mixtrain.model import BCE_SIGMOID

CLASS_MAP = ClassMap(list(GSC_KEYWORDS) + [BACKGROUND], list(PROTOCOL_TARGETS))


def oracle_eer(tar, non):
    """Lowest point of the diagonal inside the convex hull of all operating points.

    Every edge of a convex polygon joins two of its vertices, so scanning all
    segments between operating points finds where the diagonal enters the hull.
    """
    thresholds = sorted(set(tar) | set(non)) + [np.inf]
    pts = [(sum(s >= t for s in non) / len(non), sum(s < t for s in tar) / len(tar)) for t in thresholds]
    pts += [(1.0, 0.0), (0.0, 1.0)]
    best = np.inf
    for (f1, m1), (f2, m2) in itertools.combinations_with_replacement(pts, 2):
        d1, d2 = f1 - m1, f2 - m2
        if d1 == 0:
            best = min(best, m1)
        if d2 == 0:
            best = min(best, m2)
        if d1 * d2 < 0:
            s = d1 / (d1 - d2)
            best = min(best, m1 + s * (m2 - m1))
    return 100.0 * best


def test_eer_examples():
    assert eer_from_scores([0.9, 0.8, 0.7], [0.3, 0.2, 0.1]) == 0.0
    assert eer_from_scores([0.5] * 4, [0.5] * 4) == pytest.approx(50.0)
    assert eer_from_scores([0.8, 0.4], [0.6, 0.2]) == pytest.approx(25.0)
    with pytest.raises(ValueError):
        eer_from_scores([], [0.1])
    with pytest.raises(ValueError):
        eer_from_scores([np.nan], [0.1])


def test_eer_worse_than_chance():
    assert eer_from_scores([0.1, 0.2], [0.8, 0.9]) == pytest.approx(oracle_eer([0.1, 0.2], [0.8, 0.9]))


scores = st.lists(st.integers(0, 8).map(lambda v: v / 8), min_size=1, max_size=7)


@settings(max_examples=150, deadline=None)
@given(scores, scores)
def test_eer_matches_oracle(tar, non):
    assert eer_from_scores(tar, non) == pytest.approx(oracle_eer(tar, non), abs=1e-9)


@settings(max_examples=80, deadline=None)
@given(scores, scores)
def test_eer_invariances(tar, non):
    base = eer_from_scores(tar, non)
    warp = lambda v: np.exp(3 * np.asarray(v)) - 7  # strictly increasing
    assert eer_from_scores(warp(tar), warp(non)) == pytest.approx(base, abs=1e-9)
    # swapping roles and negating scores mirrors the curve onto itself
    assert eer_from_scores(-np.asarray(non), -np.asarray(tar)) == pytest.approx(base, abs=1e-9)
    assert 0.0 <= base <= 100.0


def test_eer_bounds_random(rng):
    tar = rng.normal(1.0, 1.0, 300)
    non = rng.normal(0.0, 1.0, 500)
    eer = eer_from_scores(tar, non)
    # Gaussians one sigma apart: about 30.9%; sampling noise is a few points
    assert 25 < eer < 37


def oracle_top_k(rows, label_sets, k):
    hits = 0
    for row, ls in zip(rows, label_sets):
        order = sorted(range(len(row)), key=lambda c: (-row[c], c))
        hits += set(ls) <= set(order[:k])
    return 100.0 * hits / len(rows)


def test_top_k_matches_oracle(rng):
    rows = rng.integers(0, 5, (50, 12)).astype(float)  # many ties
    singles = [[int(c)] for c in rng.integers(0, 12, 50)]
    pairs = [list(rng.choice(12, 2, replace=False)) for _ in range(50)]
    prev = -1.0
    for k in (1, 2, 3, 12):
        acc = top_k_accuracy(rows, singles, k)
        assert acc == pytest.approx(oracle_top_k(rows, singles, k))
        assert acc >= prev
        prev = acc
    assert top_k_accuracy(rows, singles, 12) == 100.0
    assert top_k_accuracy(rows, pairs, 2) == pytest.approx(oracle_top_k(rows, pairs, 2))
    with pytest.raises(ValueError):
        top_k_accuracy(rows, pairs, 1)


def test_top_k_examples():
    rows = [[0.1, 0.9, 0.05], [0.2, 0.3, 0.5]]
    assert top_k_accuracy(rows, [[1], [0]], 1) == 50.0
    assert top_k_accuracy(rows, [[1, 0], [2, 1]], 2) == 100.0
    assert top_k_accuracy([[0.5, 0.5]], [[0]], 1) == 100.0  # tie goes to the lower index


def test_masked_top1(rng):
    rows = rng.uniform(0, 1, (40, 12))
    strong = rng.integers(0, 10, 40)
    weak = (strong + rng.integers(1, 10, 40)) % 10
    masked = rows.copy()
    masked[np.arange(40), strong] = 0
    oracle = 100.0 * np.mean([np.argmax(m[:10]) == w for m, w in zip(masked, weak)])
    assert masked_top1_weak(rows, strong, weak, candidates=range(10)) == pytest.approx(oracle)
    # when the strong class already scores lowest, masking changes nothing
    rows2 = rows.copy()
    rows2[np.arange(40), strong] = -1.0
    assert masked_top1_weak(rows2, strong, weak) == top_k_accuracy(rows2, [[w] for w in weak], 1)
    with pytest.raises(ValueError):
        masked_top1_weak(rows, strong, strong)


def test_masked_top1_example():
    # strong keyword wins outright; the weak one is second
    row = np.full(12, 0.01)
    row[3], row[7] = 0.99, 0.4
    assert masked_top1_weak([row], [3], [7]) == 100.0
    assert top_k_accuracy([row], [[7]], 1) == 0.0


def test_protocol_scores():
    raw = np.zeros(36)
    raw[CLASS_MAP.index("cat")] = 0.7
    raw[CLASS_MAP.index("dog")] = 0.2
    raw[CLASS_MAP.index(BACKGROUND)] = 0.4
    raw[CLASS_MAP.index("left")] = 0.3
    out = evaluation.protocol_scores(raw, CLASS_MAP)
    names = CLASS_MAP.eval_classes
    assert out.shape == (12,)
    assert out[names.index(UNKNOWN)] == 0.7
    assert out[names.index(SILENCE)] == 0.4
    assert out[names.index("left")] == 0.3
    assert out.argmax() == names.index(UNKNOWN)


def _records(rng, per_label=4):
    recs, waves = [], {}
    for label in list(PROTOCOL_TARGETS[:4]) + ["cat", BACKGROUND]:
        for k in range(per_label):
            uid = f"{label}/s{k}"
            recs.append(UtteranceRecord(uid, f"s{k}", f"/{uid}.wav", label, "test", 1.0))
            waves[uid] = (rng.uniform(-1, 1, 16000) * rng.uniform(0.05, 0.8)).astype(np.float32)
    return recs, lambda r: waves[r.utterance_id]


def test_one_to_ten_mixture(rng):
    recs, loader = _records(rng)
    items = evaluation.build_mixed_test(recs, CLASS_MAP, evaluation.ONE_TO_TEN, 30, seed=3, loader=loader)
    by_id = {r.utterance_id: r for r in recs}
    for it in items:
        assert it.labels[0] != it.labels[1]
        assert set(it.labels) <= set(PROTOCOL_TARGETS)
        weak, strong = (loader(by_id[i]) for i in it.component_ids)
        expect = weak / np.abs(weak).max() / 11 + strong / np.abs(strong).max() * 10 / 11
        np.testing.assert_allclose(it.waveform, expect, atol=1e-6)
        assert it.scale_pair.omega2 / it.scale_pair.omega1 == pytest.approx(10.0, abs=1e-6)
        assert it.weak_label == it.labels[0] and it.strong_label == it.labels[1]


def test_mixed_builder_determinism(rng):
    recs, loader = _records(rng)
    a = evaluation.build_mixed_test(recs, CLASS_MAP, evaluation.EQUAL_SAMPLED, 20, seed=1, loader=loader)
    b = evaluation.build_mixed_test(recs, CLASS_MAP, evaluation.EQUAL_SAMPLED, 20, seed=1, loader=loader)
    assert [x.provenance() for x in a] == [x.provenance() for x in b]
    assert all(x.waveform.tobytes() == y.waveform.tobytes() for x, y in zip(a, b))
    for it in a:
        assert it.scale_pair.omega1 + it.scale_pair.omega2 == pytest.approx(1.0)
        assert dsp.peak(it.waveform) <= 1.0
    assert evaluation.build_mixed_test(recs, CLASS_MAP, evaluation.EQUAL_SAMPLED, 0, seed=1, loader=loader) == []


def test_mixed_builder_needs_two_labels(rng):
    recs, loader = _records(rng)
    one = [r for r in recs if r.label == PROTOCOL_TARGETS[0]]
    with pytest.raises(ValueError, match="two distinct"):
        evaluation.build_mixed_test(one, CLASS_MAP, evaluation.EQUAL_SAMPLED, 5, seed=0, loader=loader)


def test_protocol_test_composition(rng):
    recs, loader = _records(rng)
    items = evaluation.build_protocol_test(recs, CLASS_MAP, seed=0, loader=loader)
    labels = [it.label for it in items]
    # 16 target items over 10 targets: UNKNOWN and SILENCE get 2 each
    assert sum(l in PROTOCOL_TARGETS for l in labels) == 16
    assert labels.count("cat") == 2 and labels.count(BACKGROUND) == 2


def test_noisy_test_uses_given_pool(rng):
    recs, loader = _records(rng)
    clean = evaluation.build_protocol_test(recs, CLASS_MAP, seed=0, loader=loader)
    clean.append(TestItem("silent", np.zeros(16000, np.float32), BACKGROUND))
    pool = InterferenceAudio(arrays=[rng.uniform(-0.3, 0.3, 20000) for _ in range(3)])
    noisy = evaluation.build_noisy_test(clean, pool, seed=5)
    assert len(noisy) == len(clean)
    for c, n in zip(clean, noisy):
        assert n.interference_id in {"array#0", "array#1", "array#2"}
        assert n.label == c.label and n.utterance_id == c.utterance_id
        assert dsp.peak(n.waveform) <= 1.0 + 1e-6
    with pytest.raises(ValueError):
        evaluation.build_noisy_test(clean, InterferenceAudio(arrays=[]), seed=5)


class ConstantModel(torch.nn.Module):
    def forward(self, features):
        return torch.zeros(features.shape[0], 36)


def test_constant_model_is_chance():
    items = []
    for name in CLASS_MAP.eval_classes:
        label = {UNKNOWN: "cat", SILENCE: BACKGROUND}.get(name, name)
        items += [TestItem(f"{name}{k}", np.zeros(16000, np.float32), label) for k in range(3)]
    rep = evaluation.evaluate(ConstantModel(), BCE_SIGMOID, "clean", items, CLASS_MAP)
    assert rep.accuracy_percent == pytest.approx(100 / 12)
    assert rep.eer_percent == pytest.approx(50.0)
    assert rep.n_items == 36 and rep.accuracy_kind == "top1"


def test_evaluate_rejects_mismatched_set():
    item = MixedTestItem(np.zeros(16000, np.float32), ("yes", "no"), evaluation.WEAK_STRONG, ("a", "b"),
                         evaluation.EQUAL_SAMPLED)
    with pytest.raises(ValueError, match="does not match"):
        evaluation.evaluate(ConstantModel(), BCE_SIGMOID, "weak_1_10", [item], CLASS_MAP)
    with pytest.raises(ValueError, match="condition"):
        evaluation.evaluate(ConstantModel(), BCE_SIGMOID, "clean", [item], CLASS_MAP)


def test_report_roundtrip_and_table(tmp_path):
    reports = [EvalReport("clean", 2.0 + i, 95.0 - i, "top1", 100, strategy=s)
               for i, s in enumerate(["clean", "da", "mixup", "mt", "mt_n"])]
    reports.append(EvalReport("mixed", 9.5, 80.25, "top2", 50, strategy="mt"))
    evaluation.write_reports(tmp_path / "r.jsonl", reports)
    assert evaluation.read_reports(tmp_path / "r.jsonl") == reports
    lines = evaluation.format_table(reports).splitlines()
    assert len(lines) == 2 + 5
    assert "clean" in lines[0] and "mixed" in lines[0]
    assert "Top1 Acc" in lines[1] and "Top2 Acc" in lines[1]
    mt = next(ln for ln in lines if ln.startswith("MT "))
    assert "5.00" in mt and "92.00" in mt and "80.25" in mt
    assert lines[2].split()[-2:] == ["-", "-"]


def test_per_class_eer():
    T = evaluation.Trial
    trials = [T("u1", "a", 0.9, True), T("u2", "a", 0.1, False),  # class a separates perfectly
              T("u1", "b", 0.5, True), T("u2", "b", 0.5, False),  # class b is chance
              T("u3", "c", 0.7, True)]  # no non-target trial: left out
    assert evaluation.per_class_eer(trials) == pytest.approx(25.0)
    with pytest.raises(ValueError):
        evaluation.per_class_eer(trials[-1:])
