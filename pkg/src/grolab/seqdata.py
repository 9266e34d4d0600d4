"""User-item interaction sequences: loading, filtering, splitting,
synthesis, and corpus statistics.

Two on-disk formats are supported:

* ``delimited-ratings``: one interaction per line,
  ``user<sep>item<sep>rating<sep>timestamp`` (separator configurable,
  default ``::``). Ratings are binarized: any rating counts as an
  interaction. Interactions are grouped per user and ordered by
  timestamp ascending, ties broken by file order.
* ``tsv-sequences``: one user per line, tab-separated item ids already
  in interaction order.

After loading, items with fewer than ``min_item_count`` total
interactions are dropped, then users with fewer than ``min_seq_len``
remaining interactions are dropped, and both id spaces are re-densified
to 1-based contiguous ranges.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DataFormatError(ValueError):
    """Malformed input file (message carries the offending line number)."""


@dataclass(frozen=True)
class InteractionDataset:
    """Per-user ordered item sequences over a dense 1-based item space."""

    sequences: dict[int, tuple[int, ...]]
    num_items: int
    num_users: int

    def __post_init__(self):
        if self.num_users != len(self.sequences):
            raise ValueError("num_users does not match sequence map")
        seen = set()
        for user, seq in self.sequences.items():
            if len(seq) < 3:
                raise ValueError(f"user {user}: sequence shorter than 3")
            for item in seq:
                if not 1 <= item <= self.num_items:
                    raise ValueError(f"user {user}: item {item} outside [1, {self.num_items}]")
            seen.update(seq)
        if seen != set(range(1, self.num_items + 1)):
            raise ValueError("item ids are not dense in [1, num_items]")

    def total_interactions(self) -> int:
        return sum(len(s) for s in self.sequences.values())


@dataclass(frozen=True)
class SplitDataset:
    """Leave-one-out split: all-but-last-two / second-to-last / last."""

    train: dict[int, tuple[int, ...]]
    val_target: dict[int, int]
    test_target: dict[int, int]
    num_items: int

    @property
    def num_users(self) -> int:
        return len(self.train)


@dataclass(frozen=True)
class DatasetStats:
    num_users: int
    num_items: int
    avg_length: float
    density: float


def _densify(sequences: list[list[int]]) -> tuple[dict[int, tuple[int, ...]], int]:
    items = sorted({i for seq in sequences for i in seq})
    remap = {old: new for new, old in enumerate(items, start=1)}
    out = {u: tuple(remap[i] for i in seq) for u, seq in enumerate(sequences, start=1)}
    return out, len(items)


def _apply_filters(raw: list[list[int]], min_seq_len: int,
                   min_item_count: int) -> InteractionDataset:
    counts: dict[int, int] = {}
    for seq in raw:
        for item in seq:
            counts[item] = counts.get(item, 0) + 1
    kept_items = {i for i, c in counts.items() if c >= min_item_count}
    filtered = []
    for seq in raw:
        seq2 = [i for i in seq if i in kept_items]
        if len(seq2) >= min_seq_len:
            filtered.append(seq2)
    if not filtered:
        raise DataFormatError("no users remain after filtering")
    sequences, num_items = _densify(filtered)
    return InteractionDataset(sequences, num_items, len(sequences))


def load_interactions(path: str | Path, format: str, min_seq_len: int = 3,
                      min_item_count: int = 5, sep: str = "::") -> InteractionDataset:
    """Load a corpus from disk, filter, and densify ids.

    ``format`` is ``"delimited-ratings"`` or ``"tsv-sequences"``.
    """
    if min_seq_len < 3:
        raise ValueError("min_seq_len must be >= 3 (leave-one-out needs 3 items)")
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataFormatError(f"cannot read {path}: {exc}") from exc

    raw: list[list[int]]
    if format == "delimited-ratings":
        events: dict[int, list[tuple[int, int, int]]] = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            parts = line.split(sep)
            if len(parts) != 4:
                raise DataFormatError(f"line {lineno}: expected 4 fields, got {len(parts)}")
            try:
                user, item, ts = int(parts[0]), int(parts[1]), int(parts[3])
                float(parts[2])
            except ValueError:
                raise DataFormatError(f"line {lineno}: non-numeric field") from None
            events.setdefault(user, []).append((ts, lineno, item))
        raw = []
        for user in sorted(events):
            ordered = sorted(events[user])  # timestamp asc, file order tie-break
            raw.append([item for _, _, item in ordered])
    elif format == "tsv-sequences":
        raw = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                seq = [int(tok) for tok in line.split("\t")]
            except ValueError:
                raise DataFormatError(f"line {lineno}: non-integer item id") from None
            if any(i <= 0 for i in seq):
                raise DataFormatError(f"line {lineno}: item ids must be positive")
            raw.append(seq)
    else:
        raise ValueError(f"unknown format {format!r}")

    if not raw:
        raise DataFormatError(f"{path}: empty input")
    return _apply_filters(raw, min_seq_len, min_item_count)


def save_tsv_sequences(ds: InteractionDataset, path: str | Path) -> None:
    """Write a dataset in ``tsv-sequences`` format (users in id order)."""
    lines = ["\t".join(str(i) for i in ds.sequences[u]) for u in sorted(ds.sequences)]
    Path(path).write_text("\n".join(lines) + "\n")


def leave_one_out_split(ds: InteractionDataset) -> SplitDataset:
    """Hold out each user's last item for test, second-to-last for
    validation; the remaining prefix is the training sequence."""
    train: dict[int, tuple[int, ...]] = {}
    val: dict[int, int] = {}
    test: dict[int, int] = {}
    for user, seq in ds.sequences.items():
        if len(seq) < 3:
            raise ValueError(f"user {user}: sequence shorter than 3")
        train[user] = seq[:-2]
        val[user] = seq[-2]
        test[user] = seq[-1]
    return SplitDataset(train, val, test, ds.num_items)


def dataset_stats(ds: InteractionDataset) -> DatasetStats:
    if not ds.sequences:
        raise ValueError("empty dataset")
    total = ds.total_interactions()
    return DatasetStats(
        num_users=ds.num_users,
        num_items=ds.num_items,
        avg_length=total / ds.num_users,
        density=total / (ds.num_users * ds.num_items),
    )


def synth_generate(num_users: int, num_items: int, avg_len: int,
                   markov_order: int, seed: int) -> InteractionDataset:
    """Generate a learnable synthetic corpus.

    Items carry a planted low-rank preference structure: transition
    logits are ``U[i] . V[j] + b[j]`` over rank-16 factors, with a
    popularity bias ``b``. The rank is high enough that transition
    targets decorrelate across source items, keeping the set-level
    popularity signal weak relative to the sequential signal. ``markov_order`` previous items contribute
    with geometric decay; order 0 draws items i.i.d. from the
    popularity distribution. Walks avoid revisiting items so that
    held-out items are never excluded at inference. Identical arguments
    produce a bit-identical dataset.
    """
    if num_items < 20:
        raise ValueError("num_items must be >= 20")
    if avg_len < 4:
        raise ValueError("avg_len must be >= 4")
    if markov_order < 0:
        raise ValueError("markov_order must be >= 0")
    rng = np.random.default_rng(seed)
    rank = 16
    u_fac = rng.normal(scale=1.0, size=(num_items, rank))
    v_fac = rng.normal(scale=1.0, size=(num_items, rank))
    pop = rng.normal(scale=0.3, size=num_items)
    pop_probs = np.exp(pop - pop.max())
    pop_probs /= pop_probs.sum()

    sequences: list[list[int]] = []
    for _ in range(num_users):
        length = int(rng.integers(max(4, avg_len - 5), avg_len + 6))
        length = min(length, num_items)
        if markov_order == 0:
            seq0 = rng.choice(num_items, size=length, replace=True, p=pop_probs)
            sequences.append([int(i) + 1 for i in seq0])
            continue
        seq: list[int] = [int(rng.choice(num_items, p=pop_probs))]
        used = {seq[0]}
        while len(seq) < length:
            logits = pop.copy()
            for back, prev in enumerate(reversed(seq[-markov_order:])):
                logits = logits + (0.5 ** back) * (u_fac[prev] @ v_fac.T)
            logits[list(used)] = -np.inf
            probs = np.exp(logits - logits.max())
            probs /= probs.sum()
            nxt = int(rng.choice(num_items, p=probs))
            seq.append(nxt)
            used.add(nxt)
        sequences.append([i + 1 for i in seq])

    # guarantee dense item coverage: plant any unseen item into the
    # longest sequences, one per sequence, before the held-out tail
    covered = {i for seq in sequences for i in seq}
    missing = sorted(set(range(1, num_items + 1)) - covered)
    if missing:
        order = sorted(range(len(sequences)), key=lambda k: -len(sequences[k]))
        for slot, item in enumerate(missing):
            tgt = sequences[order[slot % len(order)]]
            tgt.insert(len(tgt) - 2, item)

    seqs = {u: tuple(seq) for u, seq in enumerate(sequences, start=1)}
    return InteractionDataset(seqs, num_items, num_users)
