"""Ranking-swap defense against extraction attacks (GRO).

A deployed recommender can be cloned by an attacker who trains a
surrogate on observed top-k lists. This defense fine-tunes the deployed
(target) model jointly with an in-house student that plays the role of
such an attacker:

1. the target scores a training prefix and its top-k list becomes a
   k×m one-hot swap matrix ``A`` (row = rank position, column = item);
2. the student is trained on ``A @ student_scores`` with the same
   margin ranking loss an attacker would use, and the loss gradient
   with respect to ``A`` is read off the graph;
3. a proposal matrix ``A'`` puts a 1 on each row's largest-gradient
   column — the per-row ranking swap that would hurt the student most;
4. the swap loss pushes the target's scores toward making each
   proposed swap real: ``mean_i max((A_i - A'_i) . S_target + margin, 0)``.

The target descends its own cross-entropy plus ``swap_weight`` times
the swap loss, so it degrades extraction while keeping its ranking
quality; ``A`` and ``A'`` are constants inside the swap loss. After
fine-tuning the student is discarded and the target is deployed
directly, unshielded.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ndiff
from .ndiff import GraphError, Node
from .recmodels import (SequenceModel, TrainingDivergedError, clone_model,
                        ensure_finite, forward_all, init_model, score_next,
                        sgd_step, topk, _training_windows)
from .seqdata import SplitDataset
from .seeding import derive_seed

LAMBDA_GRID = (0.001, 0.01, 0.1, 1.0)


class UnconvergedTargetError(ValueError):
    """Joint fine-tuning requires a usefully pretrained target."""


# ------------------------------------------------------------ matrices

@dataclass(frozen=True)
class SwapMatrix:
    """k×m one-hot rows with pairwise distinct columns: a ranking."""

    entries: np.ndarray

    def __post_init__(self):
        e = self.entries
        if e.ndim != 2:
            raise ValueError("swap matrix must be 2-D")
        if not np.all((e == 0) | (e == 1)):
            raise ValueError("swap matrix entries must be 0 or 1")
        if not np.all(e.sum(axis=1) == 1):
            raise ValueError("swap matrix rows must be one-hot")
        cols = e.argmax(axis=1)
        if len(set(cols.tolist())) != len(cols):
            raise ValueError("swap matrix rows must rank distinct items")

    @property
    def k(self):
        return self.entries.shape[0]

    @property
    def m(self):
        return self.entries.shape[1]

    def ranking(self) -> tuple[int, ...]:
        """The item ids this matrix ranks, best first."""
        return tuple(int(c) + 1 for c in self.entries.argmax(axis=1))


@dataclass(frozen=True)
class ProposalMatrix:
    """k×m one-hot rows; repeated columns are allowed."""

    entries: np.ndarray

    def __post_init__(self):
        e = self.entries
        if e.ndim != 2:
            raise ValueError("proposal matrix must be 2-D")
        if not np.all((e == 0) | (e == 1)):
            raise ValueError("proposal matrix entries must be 0 or 1")
        if not np.all(e.sum(axis=1) == 1):
            raise ValueError("proposal matrix rows must be one-hot")

    def items(self) -> tuple[int, ...]:
        """Proposed item id per rank position."""
        return tuple(int(c) + 1 for c in self.entries.argmax(axis=1))


@dataclass(frozen=True)
class GradientMatrix:
    """Loss gradient with respect to a swap matrix's entries."""

    entries: np.ndarray

    def __post_init__(self):
        if self.entries.ndim != 2:
            raise ValueError("gradient matrix must be 2-D")
        if not np.all(np.isfinite(self.entries)):
            raise ValueError("gradient matrix entries must be finite")


def topk_to_swap_matrix(ranking, m: int) -> SwapMatrix:
    """One-hot encode a ranked id list; row i marks the i-th item."""
    ids = np.asarray(ranking, dtype=np.intp)
    if ids.size == 0 or ids.size > m:
        raise ValueError("ranking length must be in [1, m]")
    if len(set(ids.tolist())) != ids.size:
        raise ValueError("ranking must not repeat items")
    if ids.min() < 1 or ids.max() > m:
        raise ValueError("item id out of range")
    entries = np.zeros((ids.size, m))
    entries[np.arange(ids.size), ids - 1] = 1.0
    return SwapMatrix(entries)


def swapped_scores(swap: SwapMatrix, scores) -> np.ndarray:
    """Student scores rearranged into the target's rank order."""
    vec = np.asarray(scores, dtype=np.float64)
    if vec.shape != (swap.m,):
        raise ValueError(f"scores must have length {swap.m}")
    return swap.entries @ vec


# ------------------------------------------------------------- losses

def _as_swap_node(swap) -> Node:
    if isinstance(swap, Node):
        return swap
    return ndiff.leaf(swap.entries)


def student_loss_on_swap(swap, student_scores: Node, negatives,
                         margin_pair: float, margin_negative: float) -> Node:
    """Margin ranking loss of the student against the target's ranking.

    ``swap`` may be a SwapMatrix or a leaf node of its entries; pass a
    node to read the gradient with respect to the matrix afterwards.
    The ranked scores enter through ``swap @ student_scores`` so that
    gradient exists. Negatives must avoid the ranked items.
    """
    swap_node = _as_swap_node(swap)
    k, m = swap_node.value.shape
    ranked_cols = set(swap_node.value.argmax(axis=1).tolist())
    neg = np.asarray(negatives, dtype=np.intp)
    if neg.shape != (k,):
        raise ValueError("need exactly one negative per rank position")
    if {int(i) - 1 for i in neg} & ranked_cols:
        raise ValueError("negatives must avoid the ranked items")
    ranked = ndiff.matmul(swap_node, student_scores)
    s_neg = ndiff.gather_rows(student_scores, neg - 1)
    loss = ndiff.nsum(ndiff.relu(ndiff.add_const(
        ndiff.sub(s_neg, ranked), margin_negative)))
    if k > 1:
        s_prev = ndiff.gather_rows(ranked, np.arange(k - 1))
        s_next = ndiff.gather_rows(ranked, np.arange(1, k))
        loss = ndiff.add(ndiff.nsum(ndiff.relu(ndiff.add_const(
            ndiff.sub(s_next, s_prev), margin_pair))), loss)
    return loss


def grad_wrt_swap(swap_node: Node, loss: Node) -> GradientMatrix:
    """Back-propagate ``loss`` and read the swap matrix gradient.

    Each row comes out as (hinge sensitivity of that rank position) ×
    (student score vector). ``swap_node`` must be the node the loss was
    built from.
    """
    if swap_node not in ndiff.reachable_nodes(loss):
        raise GraphError("loss is not connected to this swap matrix")
    ndiff.backward(loss)
    return GradientMatrix(swap_node.grad.copy())


def build_proposal(grad: GradientMatrix) -> ProposalMatrix:
    """One-hot the largest-gradient column per row (ties: lowest id)."""
    k, m = grad.entries.shape
    entries = np.zeros((k, m))
    entries[np.arange(k), grad.entries.argmax(axis=1)] = 1.0
    return ProposalMatrix(entries)


def nonpositive_rows(grad: GradientMatrix) -> int:
    """Rows whose best entry is <= 0 (argmax policy still applies)."""
    return int((grad.entries.max(axis=1) <= 0).sum())


def swap_loss(swap: SwapMatrix, proposal: ProposalMatrix,
              target_scores: Node, swap_margin: float) -> Node:
    """Hinge pressure to realize each proposed ranking swap.

    ``mean_i max((A_i - A'_i) . S_target + swap_margin, 0)`` — zero
    exactly when every proposed item already outscores (by the margin)
    the item currently holding its rank position.
    """
    if swap.entries.shape != proposal.entries.shape:
        raise ValueError("swap and proposal shapes must agree")
    if swap.m != target_scores.value.shape[-1]:
        raise ValueError("target scores length must match matrix width")
    diff = ndiff.leaf(swap.entries - proposal.entries)
    margins = ndiff.add_const(ndiff.matmul(diff, target_scores), swap_margin)
    return ndiff.nmean(ndiff.relu(margins))


# ------------------------------------------------------- lemma checking

@dataclass(frozen=True)
class LemmaReport:
    """Outcome of checking converged swap/proposal agreement."""

    applicable: bool
    positions_checked: int
    violations: tuple[int, ...]


def first_occurrence_positions(proposal: ProposalMatrix) -> tuple[int, ...]:
    """1-based rows whose proposed item appears in no earlier row."""
    items = proposal.items()
    return tuple(i + 1 for i, item in enumerate(items)
                 if item not in items[:i])


def first_occurrence_agreement(swap: SwapMatrix,
                               proposal: ProposalMatrix) -> tuple[int, int]:
    """(agreeing, checked) counts over first-occurrence positions."""
    ranking, proposed = swap.ranking(), proposal.items()
    positions = first_occurrence_positions(proposal)
    agree = sum(ranking[i - 1] == proposed[i - 1] for i in positions)
    return agree, len(positions)


def lemma1_verify(swap: SwapMatrix, proposal: ProposalMatrix,
                  target_scores, tolerance: float = 0.0) -> LemmaReport:
    """Check the zero-swap-loss agreement claim on one instance.

    Applicable only when the zero-margin swap loss is ≤ ``tolerance``;
    then every first-occurrence position must propose the item already
    ranked there. Violations are reported, not raised: with repeated
    proposal rows the claim can genuinely fail.
    """
    vec = np.asarray(target_scores, dtype=np.float64)
    row_margins = (swap.entries - proposal.entries) @ vec
    loss = float(np.maximum(row_margins, 0.0).mean())
    if loss > tolerance:
        return LemmaReport(False, 0, ())
    ranking, proposed = swap.ranking(), proposal.items()
    positions = first_occurrence_positions(proposal)
    violations = tuple(i for i in positions
                       if ranking[i - 1] != proposed[i - 1])
    return LemmaReport(True, len(positions), violations)


# -------------------------------------------------------- joint training

@dataclass(frozen=True)
class GroConfig:
    """Hyper-parameters of the joint target/student fine-tuning."""

    k: int = 100
    swap_weight: float = 0.1
    swap_margin: float = 0.1
    margin_pair: float = 0.1
    margin_negative: float = 0.1
    negatives_per_position: int = 1
    lr_target: float = 0.01
    lr_student: float = 0.01
    epochs: int = 5
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.swap_weight < 0:
            raise ValueError("swap_weight must be >= 0")
        if self.swap_margin < 0:
            raise ValueError("swap_margin must be >= 0")
        if self.margin_pair < 0 or self.margin_negative < 0:
            raise ValueError("margins must be non-negative")
        if self.negatives_per_position < 1:
            raise ValueError("negatives_per_position must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass(frozen=True)
class StepLosses:
    """Per-batch loss readout of one joint step."""

    target_loss: float
    student_loss: float
    swap_loss: float
    nonpositive_rows: int


def _position_swaps(target_rows: np.ndarray, student_scores: Node,
                    num_items: int, cfg: GroConfig, rng):
    """Per window row: swap matrix, its leaf node, and student loss.

    ``target_rows`` are the target's score rows (values); row ``t`` of
    ``student_scores`` is the student's matching score node.
    """
    out = []
    for t in range(target_rows.shape[0]):
        ranking = topk(target_rows[t], cfg.k)
        swap = topk_to_swap_matrix(ranking, num_items)
        swap_node = ndiff.leaf(swap.entries)
        student_row = ndiff.row(student_scores, t)
        pool = np.setdiff1d(np.arange(1, num_items + 1),
                            np.asarray(ranking, dtype=np.intp))
        loss = None
        for _ in range(cfg.negatives_per_position):
            negatives = rng.choice(pool, size=cfg.k, replace=True)
            piece = student_loss_on_swap(swap_node, student_row,
                                         negatives, cfg.margin_pair,
                                         cfg.margin_negative)
            loss = piece if loss is None else ndiff.add(loss, piece)
        out.append((swap, swap_node, loss))
    return out


def gro_joint_step(target: SequenceModel, student: SequenceModel,
                   batch, cfg: GroConfig, seed: int = 0) -> StepLosses:
    """One joint update on a batch of (inputs, labels) training windows.

    The target descends cross-entropy plus ``swap_weight`` × swap loss;
    the student descends its ranking loss against the target's top-k
    lists. Swap and proposal matrices are constants to both updates.
    """
    if not batch:
        raise ValueError("batch must be non-empty")
    if target.num_items != student.num_items:
        raise ValueError("target and student must share the item space")
    if cfg.k > target.num_items:
        raise ValueError("cfg.k exceeds the item count")
    rng = np.random.default_rng(derive_seed("gro-negatives", cfg.seed, seed))
    positions = sum(len(inputs) for inputs, _ in batch)

    ce_pieces, target_leafset = [], []
    swap_work, student_pieces, student_leafset = [], [], []
    for inputs, labels in batch:
        target_scores, target_leaves = forward_all(target, inputs)
        ce_pieces.append(ndiff.softmax_cross_entropy(target_scores, labels,
                                                     reduction="sum"))
        target_leafset.append(target_leaves)
        student_scores, student_leaves = forward_all(student, inputs)
        student_leafset.append(student_leaves)
        for t, (swap, swap_node, loss) in enumerate(_position_swaps(
                target_scores.value, student_scores,
                target.num_items, cfg, rng)):
            # one entry per position; bundle the target row for stage 2
            swap_work.append((swap, swap_node, ndiff.row(target_scores, t)))
            student_pieces.append(loss)

    # student update; its backward also fills every swap-matrix gradient
    student_total = student_pieces[0]
    for piece in student_pieces[1:]:
        student_total = ndiff.add(student_total, piece)
    student_batch_loss = ndiff.scale(student_total, 1.0 / positions)
    ndiff.backward(student_batch_loss)
    student_grads = {name: np.zeros_like(arr)
                     for name, arr in student.params.items()}
    for leaves in student_leafset:
        for name, node in leaves.items():
            student_grads[name] += node.grad
    sgd_step(student.params, student_grads, cfg.lr_student)
    ensure_finite(student, float(student_batch_loss.value))

    # proposals from the swap gradients, then the target's joint loss
    swap_pieces, flat_rows = [], 0
    for swap, swap_node, target_row in swap_work:
        grad = GradientMatrix(swap_node.grad)
        proposal = build_proposal(grad)
        flat_rows += nonpositive_rows(grad)
        swap_pieces.append(swap_loss(swap, proposal, target_row,
                                     cfg.swap_margin))
    ce_total = ce_pieces[0]
    for piece in ce_pieces[1:]:
        ce_total = ndiff.add(ce_total, piece)
    target_ce_loss = ndiff.scale(ce_total, 1.0 / positions)
    swap_total = swap_pieces[0]
    for piece in swap_pieces[1:]:
        swap_total = ndiff.add(swap_total, piece)
    swap_batch_loss = ndiff.scale(swap_total, 1.0 / len(swap_pieces))
    if cfg.swap_weight == 0.0:
        target_batch_loss = target_ce_loss
    else:
        target_batch_loss = ndiff.add(
            target_ce_loss, ndiff.scale(swap_batch_loss, cfg.swap_weight))
    ndiff.backward(target_batch_loss)
    target_grads = {name: np.zeros_like(arr)
                    for name, arr in target.params.items()}
    for leaves in target_leafset:
        for name, node in leaves.items():
            target_grads[name] += node.grad
    sgd_step(target.params, target_grads, cfg.lr_target)
    ensure_finite(target, float(target_batch_loss.value))

    return StepLosses(float(target_ce_loss.value),
                      float(student_batch_loss.value),
                      float(swap_batch_loss.value), flat_rows)


def collect_swap_pairs(target: SequenceModel, student: SequenceModel,
                       split: SplitDataset, cfg: GroConfig,
                       max_windows: int | None = None):
    """(SwapMatrix, ProposalMatrix, target scores) per train position.

    Pure inspection — no parameters change. Used to audit how far the
    swap pressure has converged.
    """
    rng = np.random.default_rng(derive_seed("gro-inspect", cfg.seed))
    windows = _training_windows(split, target.max_len)
    if max_windows is not None:
        windows = windows[:max_windows]
    triples = []
    for inputs, _ in windows:
        target_scores, _ = forward_all(target, inputs)
        student_scores, _ = forward_all(student, inputs)
        for t, (swap, swap_node, loss) in enumerate(_position_swaps(
                target_scores.value, student_scores,
                target.num_items, cfg, rng)):
            ndiff.backward(loss)
            proposal = build_proposal(GradientMatrix(swap_node.grad))
            triples.append((swap, proposal, target_scores.value[t].copy()))
    return triples


def _validation_hr_at_10(model: SequenceModel, split: SplitDataset) -> float:
    hits = 0
    for user in split.train:
        prefix = split.train[user]
        k = min(10, model.num_items - len(set(prefix)))
        if k < 1:
            continue
        ranked = topk(score_next(model, prefix), k, exclude=set(prefix))
        hits += split.val_target[user] in ranked
    return hits / len(split.train)


def run_joint_training(target: SequenceModel, split: SplitDataset,
                       cfg: GroConfig, curve_path=None):
    """Full fine-tuning loop; returns (protected target, student, curve).

    The input target is left untouched; training runs on a clone. The
    curve is one row per joint step:
    (step, target loss, student loss, swap loss, swap weight,
    nonpositive gradient rows).
    """
    baseline = 3.0 * 10.0 / target.num_items
    if _validation_hr_at_10(target, split) < baseline:
        raise UnconvergedTargetError(
            f"target validation HR@10 below {baseline:.4f}; pretrain first")
    protected = clone_model(target)
    student = init_model(target.architecture, target.num_items, target.dim,
                         target.max_len,
                         seed=derive_seed("gro-student", cfg.seed),
                         role="student")
    windows = _training_windows(split, protected.max_len)
    curve = []
    step = 0
    for epoch in range(cfg.epochs):
        shuffle = np.random.default_rng(
            derive_seed("gro-shuffle", cfg.seed, epoch))
        order = shuffle.permutation(len(windows))
        for start in range(0, len(order), cfg.batch_size):
            batch = [windows[i] for i in order[start:start + cfg.batch_size]]
            losses = gro_joint_step(protected, student, batch, cfg, seed=step)
            curve.append((step, losses.target_loss, losses.student_loss,
                          losses.swap_loss, cfg.swap_weight,
                          losses.nonpositive_rows))
            step += 1
    if curve_path is not None:
        lines = ["step,loss_target,loss_student,loss_swap,swap_weight,"
                 "nonpositive_rows"]
        for row in curve:
            lines.append(",".join(repr(v) if isinstance(v, float) else str(v)
                                  for v in row))
        Path(curve_path).write_text("\n".join(lines) + "\n")
    return protected, student, curve


def train_with_gro(target: SequenceModel, split: SplitDataset,
                   cfg: GroConfig, curve_path=None) -> SequenceModel:
    """Protect a pretrained target; the student is discarded."""
    protected, _, _ = run_joint_training(target, split, cfg, curve_path)
    return protected
