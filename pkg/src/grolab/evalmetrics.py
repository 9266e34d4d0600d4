"""Leave-one-out ranking evaluation: HR@k and NDCG@k.

Every item is ranked (no sampled negatives): the model scores all m
items, items already in the user's prefix are excluded, any output
shield is applied to the resulting top list, and the held-out item's
1-based position in that list is the user's rank (a miss if absent).
HR@k is the fraction of users ranked within k; NDCG@k credits a rank r
hit with 1/log2(r + 1) — with a single relevant item the ideal DCG
is 1, so NDCG@k never exceeds HR@k.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .recmodels import SequenceModel, score_next, topk
from .seqdata import SplitDataset
from .shield import DefenseMode, apply_output_defense


@dataclass(frozen=True)
class MetricsReport:
    """Per-k (HR, NDCG) table for one evaluated system."""

    metrics: dict[int, tuple[float, float]]
    num_users: int
    role: str
    defense: str

    def __post_init__(self):
        for k, (hr, ndcg) in self.metrics.items():
            if not 0.0 <= hr <= 1.0:
                raise ValueError(f"HR@{k}={hr} out of [0, 1]")
            if not 0.0 <= ndcg <= 1.0:
                raise ValueError(f"NDCG@{k}={ndcg} out of [0, 1]")
            if ndcg > hr + 1e-12:
                raise ValueError(f"NDCG@{k}={ndcg} exceeds HR@{k}={hr}")

    def hr(self, k: int) -> float:
        return self.metrics[k][0]

    def ndcg(self, k: int) -> float:
        return self.metrics[k][1]


def rank_from_scores(scores, prefix, target: int, mode: DefenseMode,
                     k_eval: int) -> int | None:
    """1-based rank of ``target`` in the shielded top-``k_eval`` list.

    ``scores`` covers all m items; ``prefix`` items are excluded before
    ranking. Returns None when the target misses the list.
    """
    vec = np.asarray(scores, dtype=np.float64)
    m = vec.shape[0]
    if not 1 <= target <= m:
        raise ValueError(f"target id {target} out of range")
    excluded = {int(i) for i in prefix}
    if target in excluded:
        raise ValueError("target item already appears in the prefix")
    depth = min(k_eval, m - len(excluded))
    ranking = apply_output_defense(topk(vec, depth, exclude=excluded), mode)
    try:
        return ranking.index(target) + 1
    except ValueError:
        return None


def rank_of_target(model: SequenceModel, prefix, target: int,
                   mode: DefenseMode, k_eval: int) -> int | None:
    """Rank the held-out item under the deployed (shielded) model."""
    return rank_from_scores(score_next(model, prefix), prefix, target,
                            mode, k_eval)


def hr_ndcg(ranks, k: int) -> tuple[float, float]:
    """(HR@k, NDCG@k) over per-user ranks (None = miss)."""
    ranks = list(ranks)
    if not ranks:
        raise ValueError("no ranks to aggregate")
    if k < 1:
        raise ValueError("k must be >= 1")
    hits = [r for r in ranks if r is not None and r <= k]
    hr = len(hits) / len(ranks)
    ndcg = sum(1.0 / np.log2(r + 1.0) for r in hits) / len(ranks)
    return hr, float(ndcg)


def evaluate_model(model: SequenceModel, split: SplitDataset,
                   mode: DefenseMode, ks, label: str | None = None,
                   on_validation: bool = False) -> MetricsReport:
    """Leave-one-out metrics over every user at each cutoff in ``ks``.

    Scoring prefixes are train ++ [validation item] against the test
    item (or train alone against the validation item when
    ``on_validation``). The shield is applied at depth max(ks).
    """
    ks = sorted(int(k) for k in ks)
    if not ks:
        raise ValueError("ks must be non-empty")
    k_eval = ks[-1]
    ranks = []
    for user in sorted(split.train):
        if on_validation:
            prefix = split.train[user]
            target = split.val_target[user]
        else:
            prefix = split.train[user] + (split.val_target[user],)
            target = split.test_target[user]
        ranks.append(rank_of_target(model, prefix, target, mode, k_eval))
    metrics = {k: hr_ndcg(ranks, k) for k in ks}
    return MetricsReport(metrics, len(ranks), model.role,
                         label if label is not None else mode.tag)


def report_to_json(report: MetricsReport) -> str:
    """Diff-stable serialization: fixed key order, repr'd floats."""
    payload = {
        "defense": report.defense,
        "role": report.role,
        "num_users": report.num_users,
        "metrics": {str(k): {"hr": report.metrics[k][0],
                             "ndcg": report.metrics[k][1]}
                    for k in sorted(report.metrics)},
    }
    return json.dumps(payload, indent=2)
