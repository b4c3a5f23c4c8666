import csv
import itertools
from fractions import Fraction

import numpy as np
import pytest

from fvlm.evaluation import (
    PromptPair,
    ScoreTable,
    MetricReport,
    export_heatmap,
    roc_auc,
    threshold_metrics,
    token_similarity_map,
    zero_shot_score,
)


def _unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


# --- zero-shot readout ---------------------------------------------------------------


def test_equal_prompts_score_half():
    rng = np.random.default_rng(0)
    V, T = _unit(rng.normal(size=8)), _unit(rng.normal(size=8))
    assert zero_shot_score(V, T, T, 0.07) == pytest.approx(0.5, abs=1e-15)


def test_closed_form_score():
    V = _unit([1.0, 0.0])
    assert zero_shot_score(V, V, -V, 1.0) == pytest.approx(1 / (1 + np.exp(-2.0)), abs=1e-12)


def test_score_shift_invariant():
    # only the similarity gap matters
    V = _unit([1.0, 0.0, 0.0])
    a = zero_shot_score(V, _unit([0.3, 1.0, 0.0]), _unit([-0.2, 0.0, 1.0]), 0.5)
    s_pos, s_neg = 0.3 / np.hypot(0.3, 1.0), -0.2 / np.hypot(0.2, 1.0)
    ref = 1.0 / (1.0 + np.exp((s_neg - s_pos) / 0.5))
    assert a == pytest.approx(ref, abs=1e-12)


def test_prompt_pair_templates():
    p = PromptPair.for_finding("Liver", "cyst")
    assert p.positive == "Liver: cyst."
    assert p.negative == "Liver shows no significant abnormalities."
    with pytest.raises(ValueError):
        PromptPair("Liver", "x", "same", "same")


# --- AUC -----------------------------------------------------------------------------------


def brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


def test_auc_examples():
    assert roc_auc([0.9, 0.1], [1, 0]) == 1.0
    assert roc_auc([0.4, 0.4], [1, 0]) == 0.5
    assert roc_auc([0.1, 0.2], [1, 1]) is None


@pytest.mark.parametrize("seed", range(100))
def test_auc_matches_pairwise_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 200))
    labels = rng.integers(0, 2, size=n)
    labels[0], labels[1] = 0, 1
    # coarse grid so ties are common
    scores = np.round(rng.random(n), int(rng.integers(1, 4)))
    assert abs(roc_auc(scores, labels) - brute_auc(scores.tolist(), labels.tolist())) <= 1e-12


def test_auc_monotone_invariance():
    rng = np.random.default_rng(5)
    s = rng.random(80)
    y = rng.integers(0, 2, size=80)
    assert roc_auc(s, y) == roc_auc(np.exp(3 * s) - 7, y)


# --- thresholded metrics --------------------------------------------------------------


def brute_threshold(scores, labels):
    best = None
    for t in sorted(set(scores)):
        tp = sum(1 for s, y in zip(scores, labels) if s >= t and y)
        fp = sum(1 for s, y in zip(scores, labels) if s >= t and not y)
        fn = sum(1 for s, y in zip(scores, labels) if s < t and y)
        tn = sum(1 for s, y in zip(scores, labels) if s < t and not y)
        j = Fraction(tp, tp + fn) + Fraction(tn, tn + fp) - 1
        if best is None or j > best[0]:
            best = (j, t, tp, fp, fn, tn)
    _, t, tp, fp, fn, tn = best
    sens, spec = tp / (tp + fn), tn / (tn + fp)

    def f1(a, b, c):
        return 2 * a / (2 * a + b + c) if a + b + c else 0.0

    n_pos, n_neg = tp + fn, tn + fp
    return {
        "acc": (sens + spec) / 2,
        "sens": sens,
        "spec": spec,
        "prec": tp / (tp + fp) if tp + fp else 0.0,
        "f1": (n_pos * f1(tp, fp, fn) + n_neg * f1(tn, fn, fp)) / (n_pos + n_neg),
        "threshold": t,
    }


@pytest.mark.parametrize("seed", range(100))
def test_threshold_metrics_match_exhaustive_oracle(seed):
    rng = np.random.default_rng(1000 + seed)
    n = int(rng.integers(2, 100))
    labels = rng.integers(0, 2, size=n)
    labels[0], labels[1] = 0, 1
    scores = np.round(rng.random(n), 2)
    got = threshold_metrics(scores, labels)
    want = brute_threshold(scores.tolist(), labels.tolist())
    for k in want:
        assert abs(got[k] - want[k]) <= 1e-12, k


def test_perfect_separation():
    m = threshold_metrics([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])
    assert all(m[k] == 1.0 for k in ("acc", "sens", "spec", "prec", "f1"))


def test_constant_scores_give_half_accuracy():
    m = threshold_metrics([0.3] * 6, [0, 1, 0, 1, 1, 0])
    assert m["acc"] == 0.5
    assert m["acc"] == (m["sens"] + m["spec"]) / 2


def test_single_class_metrics_absent():
    assert threshold_metrics([0.2, 0.4], [1, 1]) is None


def test_report_counts_and_skips():
    t = ScoreTable()
    for i, (s, y) in enumerate([(0.9, 1), (0.2, 0), (0.6, 1), (0.4, 0)]):
        t.rows.append({"patient_id": f"p{i}", "abnormality": "Liver/cyst", "score": s, "label": y})
    t.skipped.append({"patient_id": "p9", "abnormality": "Liver/cyst", "reason": "anatomy absent"})
    rep = MetricReport.from_scores(t, "abc")
    m = rep.per_abnormality["Liver/cyst"]
    assert (m.n_pos, m.n_neg, m.n_skipped, m.auc) == (2, 2, 1, 1.0)
    assert rep.to_dict()["config_hash"] == "abc"


# --- heatmaps -----------------------------------------------------------------------------


class _Identity:
    def __call__(self, x):
        return x


def test_orthogonal_text_gives_zero_map():
    tokens = np.zeros((8, 4))
    tokens[:, :2] = np.random.default_rng(0).normal(size=(8, 2))
    sim = token_similarity_map(tokens, _Identity(), np.array([0.0, 0.0, 1.0, 0.0]))
    assert np.all(sim == 0.0)


def test_heatmap_files(tmp_path):
    rng = np.random.default_rng(1)
    sim = token_similarity_map(rng.normal(size=(2 * 3 * 4, 5)), _Identity(), rng.normal(size=5))
    assert sim.min() >= -1 and sim.max() <= 1
    paths = export_heatmap(sim, (2, 3, 4), tmp_path / "hm", indices=range(10))
    rows = list(csv.reader(open(paths[0])))
    assert rows[0] == ["z", "y", "x", "value"] and len(rows) == 25
    assert [float(r[3]) for r in rows[11:]] == [0.0] * 14
    assert len(paths) == 3
    raw = paths[1].read_bytes()
    assert raw.startswith(b"P5\n4 3\n255\n") and len(raw) == len(b"P5\n4 3\n255\n") + 12


def test_index_order_of_csv_is_row_major(tmp_path):
    sim = np.linspace(-1, 1, 8)
    p = export_heatmap(sim, (2, 2, 2), tmp_path / "o")[0]
    rows = list(csv.reader(open(p)))[1:]
    assert [tuple(map(int, r[:3])) for r in rows] == list(itertools.product(range(2), repeat=3))
