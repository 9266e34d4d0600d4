"""Inference-time ranking-output perturbations.

A shield rewrites the top-k list a deployed recommender returns, at the
cost of degrading what genuine users see: the same perturbed list is
both what an attacker observes and what utility evaluation measures.

Modes: ``none`` (identity), ``reverse`` (exact reversal, the k-th item
becomes the 1st), ``random`` (uniform permutation). The random
permutation is a pure function of the mode seed and the list contents,
so repeated queries are consistent while different lists or seeds draw
independent permutations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .seeding import derive_seed

DEFENSE_TAGS = ("none", "random", "reverse")


@dataclass(frozen=True)
class DefenseMode:
    """Output-perturbation choice; ``seed`` only matters for random."""

    tag: str
    seed: int = 0

    def __post_init__(self):
        if self.tag not in DEFENSE_TAGS:
            raise ValueError(f"unknown defense tag {self.tag!r}")


def apply_output_defense(ranking, mode: DefenseMode) -> tuple[int, ...]:
    """Perturb one ranked list; always returns a permutation of it."""
    items = tuple(int(i) for i in ranking)
    if not items:
        raise ValueError("ranking must be non-empty")
    if len(set(items)) != len(items):
        raise ValueError("ranking must not contain duplicates")
    if mode.tag == "none":
        return items
    if mode.tag == "reverse":
        return items[::-1]
    rng = np.random.default_rng(derive_seed("shield", mode.seed, *items))
    order = rng.permutation(len(items))
    return tuple(items[j] for j in order)
