"""Black-box model extraction against a deployed recommender.

The attacker sees only ranked item lists. ``OracleHandle`` wraps a
frozen target (plus any output shield) behind a query counter;
``generate_queries`` builds a query corpus either autoregressively
(each next item sampled from the oracle's current response) or from
i.i.d. random items; ``train_surrogate`` fits a fresh model to the
logged responses with a margin ranking loss:

* consecutive observed items must be separated by ``margin_pair``, and
* every observed item must beat a sampled unobserved negative by
  ``margin_negative``,

each violation contributing a hinge penalty, summed over positions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import ndiff
from .ndiff import Node
from .recmodels import (SequenceModel, clone_model, ensure_finite,
                        forward_all, init_model, score_next, sgd_step, topk)
from .seeding import derive_seed
from .shield import DefenseMode, apply_output_defense

STRATEGIES = ("autoregressive", "rank_weighted", "random")


@dataclass
class OracleHandle:
    """Query-only access to a deployed recommender.

    The wrapped model is a private snapshot; the only way scores leave
    this handle is as a (possibly shielded) top-``k_response`` id list.
    ``calls`` counts every query ever answered.
    """

    target: SequenceModel
    mode: DefenseMode
    k_response: int
    calls: int = 0

    def __post_init__(self):
        if self.k_response < 1:
            raise ValueError("k_response must be >= 1")
        self.target = clone_model(self.target)


def oracle_query(oracle: OracleHandle, sequence) -> tuple[int, ...]:
    """Top-k response for one query; consumed items never reappear."""
    oracle.calls += 1
    scores = score_next(oracle.target, sequence)
    ranking = topk(scores, oracle.k_response, exclude=set(sequence))
    return apply_output_defense(ranking, oracle.mode)


@dataclass(frozen=True)
class AttackConfig:
    """Budget and hyper-parameters of one extraction attack."""

    n_queries: int = 3000
    k_response: int = 100
    max_query_len: int = 20
    strategy: str = "autoregressive"
    margin_pair: float = 0.1
    margin_negative: float = 0.1
    negatives_per_position: int = 1
    lr: float = 0.01
    epochs: int = 10
    surrogate_dim: int = 32
    surrogate_max_len: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.n_queries < 1:
            raise ValueError("n_queries must be >= 1")
        if self.max_query_len < 1:
            raise ValueError("max_query_len must be >= 1")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.margin_pair < 0 or self.margin_negative < 0:
            raise ValueError("margins must be non-negative")
        if self.negatives_per_position < 1:
            raise ValueError("negatives_per_position must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass(frozen=True)
class QueryLog:
    """Replayable record of an attack's queries and observed rankings."""

    queries: tuple[tuple[int, ...], ...]
    responses: tuple[tuple[int, ...], ...]
    strategy: str
    num_items: int

    def __post_init__(self):
        if len(self.queries) != len(self.responses):
            raise ValueError("queries and responses must pair up")
        lengths = {len(r) for r in self.responses}
        if len(lengths) > 1:
            raise ValueError("all responses must share one length")

    def __len__(self):
        return len(self.queries)


def generate_queries(oracle: OracleHandle, cfg: AttackConfig) -> QueryLog:
    """Build the attack corpus and record the final response per query.

    Autoregressive queries start from a uniformly random item and grow
    by sampling from the oracle's current response (uniformly, or
    favouring early ranks under ``rank_weighted``); ``random`` queries
    are i.i.d. uniform items and cost a single oracle call each.
    """
    rng = np.random.default_rng(derive_seed("queries", cfg.seed))
    m = oracle.target.num_items
    queries, responses = [], []
    for _ in range(cfg.n_queries):
        if cfg.strategy == "random":
            seq = [int(i) for i in rng.integers(1, m + 1,
                                                size=cfg.max_query_len)]
        else:
            seq = [int(rng.integers(1, m + 1))]
            while len(seq) < cfg.max_query_len:
                response = oracle_query(oracle, seq)
                if cfg.strategy == "rank_weighted":
                    weights = 1.0 / np.arange(1, len(response) + 1)
                    probs = weights / weights.sum()
                    pick = int(rng.choice(len(response), p=probs))
                else:
                    pick = int(rng.integers(len(response)))
                seq.append(response[pick])
        queries.append(tuple(seq))
        responses.append(oracle_query(oracle, seq))
    return QueryLog(tuple(queries), tuple(responses), cfg.strategy, m)


def save_query_log(log: QueryLog, path) -> None:
    """One JSON header line, then one JSON record per query."""
    lines = [json.dumps({"strategy": log.strategy,
                         "num_items": log.num_items}, sort_keys=True)]
    for query, response in zip(log.queries, log.responses):
        lines.append(json.dumps({"query": list(query),
                                 "response": list(response)},
                                sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n")


def load_query_log(path) -> QueryLog:
    text = Path(path).read_text().splitlines()
    if not text:
        raise ValueError("empty query log file")
    try:
        header = json.loads(text[0])
        records = [json.loads(line) for line in text[1:] if line.strip()]
    except json.JSONDecodeError as exc:
        raise ValueError(f"malformed query log: {exc}") from exc
    return QueryLog(tuple(tuple(r["query"]) for r in records),
                    tuple(tuple(r["response"]) for r in records),
                    header["strategy"], header["num_items"])


def surrogate_ranking_loss(scores: Node, observed, negatives,
                           margin_pair: float, margin_negative: float) -> Node:
    """Margin ranking loss of one (query, observed ranking) pair.

    ``scores`` is a length-m score node; ``observed`` the oracle's
    ranked ids; ``negatives`` one sampled id per observed position,
    disjoint from the observed list. Hinge terms are summed, not
    averaged.
    """
    obs = np.asarray(observed, dtype=np.intp)
    neg = np.asarray(negatives, dtype=np.intp)
    if obs.size == 0:
        raise ValueError("observed ranking must be non-empty")
    if neg.shape != obs.shape:
        raise ValueError("need exactly one negative per observed position")
    if set(neg.tolist()) & set(obs.tolist()):
        raise ValueError("negatives must avoid the observed list")
    s_obs = ndiff.gather_rows(scores, obs - 1)
    s_neg = ndiff.gather_rows(scores, neg - 1)
    neg_term = ndiff.nsum(ndiff.relu(ndiff.add_const(
        ndiff.sub(s_neg, s_obs), margin_negative)))
    if obs.size == 1:
        return neg_term
    s_prev = ndiff.gather_rows(s_obs, np.arange(obs.size - 1))
    s_next = ndiff.gather_rows(s_obs, np.arange(1, obs.size))
    pair_term = ndiff.nsum(ndiff.relu(ndiff.add_const(
        ndiff.sub(s_next, s_prev), margin_pair)))
    return ndiff.add(pair_term, neg_term)


def _sample_negatives(rng, observed, num_items: int, per_position: int):
    pool = np.setdiff1d(np.arange(1, num_items + 1),
                        np.asarray(observed, dtype=np.intp))
    if pool.size == 0:
        raise ValueError("no items left to sample negatives from")
    return rng.choice(pool, size=(per_position, len(observed)), replace=True)


def train_surrogate(log: QueryLog, architecture: str,
                    cfg: AttackConfig) -> SequenceModel:
    """Fit a fresh surrogate to the logged rankings.

    Negatives are re-drawn each epoch from outside each observed list;
    one SGD step per query. Returns the trained model (with
    ``cfg.epochs == 0``, its untouched initialization).
    """
    if len(log) == 0:
        raise ValueError("query log is empty")
    model = init_model(architecture, log.num_items, cfg.surrogate_dim,
                       cfg.surrogate_max_len,
                       seed=derive_seed("surrogate-init", cfg.seed),
                       role="surrogate")
    for epoch in range(cfg.epochs):
        order = np.random.default_rng(
            derive_seed("surrogate-shuffle", cfg.seed, epoch)).permutation(
                len(log))
        neg_rng = np.random.default_rng(
            derive_seed("surrogate-negatives", cfg.seed, epoch))
        for qi in order:
            query, observed = log.queries[qi], log.responses[qi]
            window = query[-model.max_len:]
            scores, leaves = forward_all(model, window)
            last = ndiff.row(scores, len(window) - 1)
            drawn = _sample_negatives(neg_rng, observed, log.num_items,
                                      cfg.negatives_per_position)
            loss = surrogate_ranking_loss(last, observed, drawn[0],
                                          cfg.margin_pair,
                                          cfg.margin_negative)
            for extra in drawn[1:]:
                loss = ndiff.add(loss, surrogate_ranking_loss(
                    last, observed, extra, cfg.margin_pair,
                    cfg.margin_negative))
            ndiff.backward(loss)
            sgd_step(model.params,
                     {name: node.grad for name, node in leaves.items()},
                     cfg.lr)
            ensure_finite(model, float(loss.value))
    return model


def ranking_overlap(list_a, list_b) -> int:
    """Number of items two ranked lists share (order-insensitive)."""
    return len(set(list_a) & set(list_b))
