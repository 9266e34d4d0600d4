"""Evaluation metric tests: a brute-force ranking oracle, closed-form
NDCG values, k-monotonicity, and shield interaction."""

import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from grolab.evalmetrics import (MetricsReport, evaluate_model, hr_ndcg,
                                rank_from_scores, rank_of_target,
                                report_to_json)
from grolab.recmodels import init_model
from grolab.seqdata import InteractionDataset, leave_one_out_split
from grolab.shield import DefenseMode

NONE = DefenseMode("none")


def brute_force_rank(scores, prefix, target, k_eval):
    """Sort-and-scan reference: descending score, ties by id."""
    order = sorted((i for i in range(1, len(scores) + 1)
                    if i not in set(prefix)),
                   key=lambda i: (-scores[i - 1], i))
    pos = order.index(target) + 1
    return pos if pos <= k_eval else None


# ----------------------------------------------------------- rank lookup

def test_highest_score_ranks_first():
    scores = np.array([0.1, 0.9, 0.5, 0.2])
    assert rank_from_scores(scores, (), 2, NONE, 3) == 1
    assert rank_from_scores(scores, (), 3, NONE, 3) == 2


def test_reverse_shield_sends_best_to_bottom():
    scores = -np.arange(20, dtype=float)  # item 1 is the raw best
    rank = rank_from_scores(scores, (), 1, DefenseMode("reverse"), 10)
    assert rank == 10


def test_outside_top_k_is_a_miss_under_every_shield():
    scores = -np.arange(20, dtype=float)  # item 15 sits at raw rank 15
    for tag in ("none", "random", "reverse"):
        assert rank_from_scores(scores, (), 15, DefenseMode(tag, 3), 10) is None


def test_prefix_items_are_excluded():
    scores = np.array([5.0, 4.0, 3.0, 2.0])
    assert rank_from_scores(scores, (1, 2), 3, NONE, 2) == 1
    with pytest.raises(ValueError):
        rank_from_scores(scores, (1, 2), 2, NONE, 2)
    with pytest.raises(ValueError):
        rank_from_scores(scores, (), 9, NONE, 2)


def test_matches_brute_force_on_random_vectors():
    rng = np.random.default_rng(17)
    for _ in range(200):
        m = int(rng.integers(5, 60))
        scores = np.round(rng.normal(size=m), 2)  # force some ties
        prefix = tuple(rng.choice(np.arange(1, m + 1),
                                  size=int(rng.integers(0, m // 2)),
                                  replace=False))
        candidates = [i for i in range(1, m + 1) if i not in set(prefix)]
        target = int(rng.choice(candidates))
        k_eval = int(rng.integers(1, len(candidates) + 1))
        assert rank_from_scores(scores, prefix, target, NONE, k_eval) == \
            brute_force_rank(scores, prefix, target, k_eval)


@given(st.integers(0, 2**31), st.integers(2, 30), st.integers(987, 992))
def test_hit_set_is_shield_invariant(seed, m, shield_seed):
    # shields permute within the same top-k window, so hit-or-miss at
    # the window size never changes — only the rank inside it does
    rng = np.random.default_rng(seed)
    scores = rng.normal(size=m)
    target = int(rng.integers(1, m + 1))
    k_eval = int(rng.integers(1, m + 1))
    hits = {tag: rank_from_scores(scores, (), target,
                                  DefenseMode(tag, shield_seed),
                                  k_eval) is not None
            for tag in ("none", "random", "reverse")}
    assert len(set(hits.values())) == 1


# ------------------------------------------------------------ aggregation

def test_hr_ndcg_closed_forms():
    assert hr_ndcg([1, 1, 1], 5) == (1.0, 1.0)
    hr, ndcg = hr_ndcg([3], 10)
    assert hr == 1.0
    assert ndcg == pytest.approx(0.5)  # 1/log2(4)
    hr, ndcg = hr_ndcg([1, None, 4, 11], 10)
    assert hr == pytest.approx(0.5)
    assert ndcg == pytest.approx((1.0 + 1.0 / np.log2(5)) / 4)


def test_hr_ndcg_rejects_degenerate_input():
    with pytest.raises(ValueError):
        hr_ndcg([], 5)
    with pytest.raises(ValueError):
        hr_ndcg([1], 0)


@given(st.lists(st.one_of(st.none(), st.integers(1, 50)), min_size=1,
                max_size=40))
def test_metrics_monotone_in_k(ranks):
    values = [hr_ndcg(ranks, k) for k in (1, 5, 10, 20, 50)]
    hrs = [v[0] for v in values]
    ndcgs = [v[1] for v in values]
    assert hrs == sorted(hrs)
    assert ndcgs == sorted(ndcgs)
    assert all(n <= h for h, n in values)


def test_reverse_shield_costs_ndcg_but_not_hr():
    scores = -np.arange(12, dtype=float)
    plain = [rank_from_scores(scores, (), t, NONE, 10) for t in (1, 2, 3)]
    flipped = [rank_from_scores(scores, (), t, DefenseMode("reverse"), 10)
               for t in (1, 2, 3)]
    assert hr_ndcg(plain, 10)[0] == hr_ndcg(flipped, 10)[0] == 1.0
    assert hr_ndcg(flipped, 10)[1] < hr_ndcg(plain, 10)[1]


# --------------------------------------------------------------- reports

def test_report_validates_bounds():
    MetricsReport({10: (0.5, 0.3)}, 4, "target", "none")
    with pytest.raises(ValueError):
        MetricsReport({10: (0.5, 0.6)}, 4, "target", "none")
    with pytest.raises(ValueError):
        MetricsReport({10: (1.2, 0.6)}, 4, "target", "none")


def test_report_serializes_with_fixed_key_order():
    report = MetricsReport({10: (0.5, 0.25), 1: (0.1, 0.1), 5: (0.3, 0.2)},
                           7, "target", "random")
    text = report_to_json(report)
    payload = json.loads(text)
    assert list(payload) == ["defense", "role", "num_users", "metrics"]
    assert list(payload["metrics"]) == ["1", "5", "10"]
    assert text == report_to_json(report)


def test_evaluate_model_end_to_end():
    data = InteractionDataset(
        {1: (3, 1, 4, 2, 5), 2: (8, 9, 10, 11, 12), 3: (6, 7, 13, 14, 2)},
        num_items=14, num_users=3)
    split = leave_one_out_split(data)
    model = init_model("attn_lite", 14, 8, 6, seed=2)
    report = evaluate_model(model, split, NONE, ks=(1, 5, 10))
    assert report.num_users == 3
    assert sorted(report.metrics) == [1, 5, 10]
    assert report.defense == "none" and report.role == "target"

    again = evaluate_model(model, split, NONE, ks=(1, 5, 10))
    assert report == again

    labeled = evaluate_model(model, split, NONE, ks=(5,), label="gro")
    assert labeled.defense == "gro"

    val_report = evaluate_model(model, split, NONE, ks=(5,),
                                on_validation=True)
    assert val_report.num_users == 3
