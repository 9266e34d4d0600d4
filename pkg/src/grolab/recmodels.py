"""Small sequential next-item recommenders.

Two interchangeable architectures score the next item given an item
sequence:

* ``attn_lite``: item + position embeddings through one causal
  single-head self-attention block with a residual connection, scored
  against the (tied) item embedding table.
* ``recurrent``: a single gated recurrent cell over item embeddings,
  hidden state scored against the tied item embedding table.

Score vectors are ordered by item id: ``scores[j]`` is the score of
item ``j + 1``. Training is plain SGD on next-item cross-entropy with
global gradient-norm clipping. Checkpoints round-trip losslessly
through a small versioned binary format (see ``save_checkpoint``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ndiff
from .ndiff import Node
from .seqdata import SplitDataset

ARCHITECTURES = ("attn_lite", "recurrent")
ROLES = ("target", "student", "surrogate")

CHECKPOINT_MAGIC = b"GROCKPT1\n"

# softmax logits this far below the row maximum are effectively masked
_MASK_VALUE = -1e9

# global gradient-norm ceiling for every SGD step
GRAD_CLIP_NORM = 5.0


class TrainingDivergedError(RuntimeError):
    """Non-finite loss or parameters encountered during training."""


class CheckpointFormatError(ValueError):
    """Unreadable or truncated checkpoint file."""


@dataclass
class SequenceModel:
    """A next-item scorer; ``params`` maps names to float64 arrays."""

    architecture: str
    num_items: int
    dim: int
    max_len: int
    role: str
    params: dict[str, np.ndarray]

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if self.dim < 4:
            raise ValueError("embedding width must be >= 4")
        if self.max_len < 2:
            raise ValueError("max_len must be >= 2")
        if self.num_items < 1:
            raise ValueError("num_items must be >= 1")


def _param_shapes(architecture: str, m: int, d: int, max_len: int) -> list:
    """Parameter (name, shape) pairs in canonical creation order."""
    if architecture == "attn_lite":
        return [
            ("item_emb", (m + 1, d)),
            ("pos_emb", (max_len, d)),
            ("w_query", (d, d)),
            ("w_key", (d, d)),
            ("w_value", (d, d)),
            ("w_out", (d, d)),
        ]
    return [
        ("item_emb", (m + 1, d)),
        ("w_update", (d, d)),
        ("u_update", (d, d)),
        ("b_update", (d,)),
        ("w_reset", (d, d)),
        ("u_reset", (d, d)),
        ("b_reset", (d,)),
        ("w_cand", (d, d)),
        ("u_cand", (d, d)),
        ("b_cand", (d,)),
    ]


def init_model(architecture: str, num_items: int, dim: int, max_len: int,
               seed: int, role: str = "target") -> SequenceModel:
    """Fresh model with parameters uniform on (-0.1, 0.1); deterministic."""
    if architecture not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {architecture!r}")
    rng = np.random.default_rng(seed)
    params = {
        name: rng.uniform(-0.1, 0.1, size=shape)
        for name, shape in _param_shapes(architecture, num_items, dim, max_len)
    }
    return SequenceModel(architecture, num_items, dim, max_len, role, params)


def clone_model(model: SequenceModel, role: str | None = None) -> SequenceModel:
    """Deep copy; frozen snapshots for querying while the original trains."""
    return SequenceModel(model.architecture, model.num_items, model.dim,
                         model.max_len, role or model.role,
                         {k: v.copy() for k, v in model.params.items()})


def _check_window(model: SequenceModel, window) -> np.ndarray:
    ids = np.asarray(window, dtype=np.intp)
    if ids.ndim != 1 or ids.size == 0:
        raise ValueError("input sequence must be a non-empty 1-D id list")
    if ids.size > model.max_len:
        raise ValueError(f"window of {ids.size} items exceeds max_len "
                         f"{model.max_len}")
    if ids.min() < 1 or ids.max() > model.num_items:
        raise ValueError("item id out of range")
    return ids


def forward_all(model: SequenceModel, window) -> tuple[Node, dict[str, Node]]:
    """Score every prefix of ``window``.

    Returns a ``(len(window), num_items)`` node whose row ``t`` scores
    the item following ``window[:t + 1]``, plus the parameter leaves so
    callers can read gradients after ``ndiff.backward``.
    """
    ids = _check_window(model, window)
    leaves = {name: ndiff.leaf(arr) for name, arr in model.params.items()}
    if model.architecture == "attn_lite":
        hidden = _attn_lite_hidden(model, ids, leaves)
    else:
        hidden = _recurrent_hidden(model, ids, leaves)
    item_rows = ndiff.gather_rows(leaves["item_emb"],
                                  np.arange(1, model.num_items + 1))
    scores = ndiff.matmul(hidden, ndiff.transpose(item_rows))
    return scores, leaves


def _attn_lite_hidden(model: SequenceModel, ids: np.ndarray,
                      leaves: dict[str, Node]) -> Node:
    length, d = ids.size, model.dim
    x = ndiff.add(ndiff.gather_rows(leaves["item_emb"], ids),
                  ndiff.gather_rows(leaves["pos_emb"], np.arange(length)))
    q = ndiff.matmul(x, leaves["w_query"])
    k = ndiff.matmul(x, leaves["w_key"])
    v = ndiff.matmul(x, leaves["w_value"])
    logits = ndiff.scale(ndiff.matmul(q, ndiff.transpose(k)), 1.0 / np.sqrt(d))
    causal_mask = np.triu(np.full((length, length), _MASK_VALUE), k=1)
    weights = ndiff.softmax(ndiff.add_const(logits, causal_mask))
    mixed = ndiff.add(x, ndiff.matmul(weights, v))
    return ndiff.tanh(ndiff.matmul(mixed, leaves["w_out"]))


def _recurrent_hidden(model: SequenceModel, ids: np.ndarray,
                      leaves: dict[str, Node]) -> Node:
    state = ndiff.leaf(np.zeros((1, model.dim)))
    rows = []
    for item in ids:
        x = ndiff.gather_rows(leaves["item_emb"], np.array([item]))
        update = ndiff.sigmoid(ndiff.add(
            ndiff.add(ndiff.matmul(x, leaves["w_update"]),
                      ndiff.matmul(state, leaves["u_update"])),
            leaves["b_update"]))
        reset = ndiff.sigmoid(ndiff.add(
            ndiff.add(ndiff.matmul(x, leaves["w_reset"]),
                      ndiff.matmul(state, leaves["u_reset"])),
            leaves["b_reset"]))
        candidate = ndiff.tanh(ndiff.add(
            ndiff.add(ndiff.matmul(x, leaves["w_cand"]),
                      ndiff.matmul(ndiff.mul(reset, state), leaves["u_cand"])),
            leaves["b_cand"]))
        state = ndiff.add(state, ndiff.mul(update,
                                           ndiff.sub(candidate, state)))
        rows.append(state)
    return ndiff.concat(rows, axis=0)


def score_next(model: SequenceModel, sequence) -> np.ndarray:
    """Length-m score vector for the next item after ``sequence``.

    Inputs longer than ``max_len`` are truncated to their most recent
    ``max_len`` items.
    """
    seq = list(sequence)
    if not seq:
        raise ValueError("input sequence must be non-empty")
    scores, _ = forward_all(model, seq[-model.max_len:])
    return scores.value[-1].copy()


def topk(scores, k: int, exclude=()) -> tuple[int, ...]:
    """Ids of the k highest-scoring items, descending, ties by ascending id.

    ``exclude`` ids never appear in the result.
    """
    vec = np.asarray(scores, dtype=np.float64)
    if vec.ndim != 1:
        raise ValueError("scores must be a 1-D vector")
    m = vec.shape[0]
    excluded = {int(i) for i in exclude if 1 <= int(i) <= m}
    if not 1 <= k <= m - len(excluded):
        raise ValueError(f"k={k} but only {m - len(excluded)} items available")
    ids = np.arange(1, m + 1)
    order = np.lexsort((ids, -vec))
    picked = []
    for j in order:
        item = int(ids[j])
        if item in excluded:
            continue
        picked.append(item)
        if len(picked) == k:
            break
    return tuple(picked)


def _training_windows(split: SplitDataset, max_len: int) -> list:
    """(inputs, labels) per user: within-sequence next-item pairs."""
    windows = []
    for user in sorted(split.train):
        items = split.train[user]
        if len(items) < 2:
            continue
        tail = items[-max_len:]
        windows.append((np.asarray(tail[:-1], dtype=np.intp),
                        np.asarray(tail[1:], dtype=np.intp) - 1))
    return windows


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lr: float) -> None:
    """In-place SGD update with global gradient-norm clipping."""
    if lr == 0.0:
        return
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    factor = GRAD_CLIP_NORM / total if total > GRAD_CLIP_NORM else 1.0
    for name, g in grads.items():
        params[name] -= lr * factor * g


def ensure_finite(model: SequenceModel, loss: float) -> None:
    """Raise TrainingDivergedError on non-finite loss or parameters."""
    if not np.isfinite(loss):
        raise TrainingDivergedError(f"non-finite loss {loss!r}")
    for name, arr in model.params.items():
        if not np.all(np.isfinite(arr)):
            raise TrainingDivergedError(f"non-finite values in {name!r}")


def ce_train_epoch(model: SequenceModel, split: SplitDataset, lr: float,
                   batch_size: int, seed: int) -> float:
    """One shuffled pass of next-item cross-entropy SGD over train windows.

    Returns the mean per-position loss of the pass; with ``lr=0`` the
    parameters are untouched and the return value is the evaluation
    loss.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    windows = _training_windows(split, model.max_len)
    if not windows:
        raise ValueError("no trainable windows (all train sequences < 2)")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(windows))
    loss_total = 0.0
    position_total = 0
    for start in range(0, len(order), batch_size):
        batch = [windows[i] for i in order[start:start + batch_size]]
        positions = sum(len(inputs) for inputs, _ in batch)
        pieces = []
        batch_leaves = []
        for inputs, labels in batch:
            scores, leaves = forward_all(model, inputs)
            pieces.append(ndiff.softmax_cross_entropy(scores, labels,
                                                      reduction="sum"))
            batch_leaves.append(leaves)
        total = pieces[0]
        for piece in pieces[1:]:
            total = ndiff.add(total, piece)
        batch_loss = ndiff.scale(total, 1.0 / positions)
        ndiff.backward(batch_loss)
        grads = {name: np.zeros_like(arr)
                 for name, arr in model.params.items()}
        for leaves in batch_leaves:
            for name, node in leaves.items():
                if name in grads:
                    grads[name] += node.grad
        sgd_step(model.params, grads, lr)
        ensure_finite(model, float(batch_loss.value))
        loss_total += float(total.value)
        position_total += positions
    return loss_total / position_total


def save_checkpoint(model: SequenceModel, path) -> None:
    """Write a lossless binary snapshot.

    Layout: magic line ``GROCKPT1``, one JSON header line (architecture,
    dims, role, ordered parameter names and shapes), then each
    parameter's raw little-endian float64 bytes in header order.
    """
    header = {
        "architecture": model.architecture,
        "num_items": model.num_items,
        "dim": model.dim,
        "max_len": model.max_len,
        "role": model.role,
        "params": [[name, list(arr.shape)]
                   for name, arr in model.params.items()],
    }
    blob = bytearray(CHECKPOINT_MAGIC)
    blob += json.dumps(header, sort_keys=True).encode() + b"\n"
    for arr in model.params.values():
        blob += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path) -> SequenceModel:
    """Inverse of ``save_checkpoint``; rejects malformed files."""
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointFormatError("bad magic; not a model checkpoint")
    body = raw[len(CHECKPOINT_MAGIC):]
    newline = body.find(b"\n")
    if newline < 0:
        raise CheckpointFormatError("missing header line")
    try:
        header = json.loads(body[:newline].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"unreadable header: {exc}") from exc
    offset = newline + 1
    params = {}
    for name, shape in header["params"]:
        size = int(np.prod(shape)) * 8
        chunk = body[offset:offset + size]
        if len(chunk) != size:
            raise CheckpointFormatError(f"truncated data for {name!r}")
        params[name] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
        offset += size
    if offset != len(body):
        raise CheckpointFormatError("trailing bytes after parameter data")
    return SequenceModel(header["architecture"], header["num_items"],
                         header["dim"], header["max_len"], header["role"],
                         params)
