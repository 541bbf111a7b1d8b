"""Interaction loading, leave-one-out splitting and direct-recommendation candidates."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .io import read_jsonl, write_jsonl

log = logging.getLogger(__name__)

MIN_INTERACTIONS = 3


class DataError(ValueError):
    pass


@dataclass
class InteractionDataset:
    sequences: list[list[int]]
    user_ids: list[str] = field(default_factory=list)
    item_ids: list[str] = field(default_factory=list)
    rejected_users: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.user_ids:
            self.user_ids = [str(u) for u in range(len(self.sequences))]
        if not self.item_ids:
            n = 1 + max((max(s) for s in self.sequences if s), default=-1)
            self.item_ids = [str(i) for i in range(n)]
        self.user_index = {raw: i for i, raw in enumerate(self.user_ids)}
        self.item_index = {raw: i for i, raw in enumerate(self.item_ids)}

    @property
    def n_users(self) -> int:
        return len(self.sequences)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def users(self) -> list[int]:
        return list(range(self.n_users))


@dataclass(frozen=True)
class Splits:
    train: list[list[int]]
    valid: list[int]
    test: list[int]

    def history(self, user: int, stage: str = "test") -> list[int]:
        """Items visible when predicting the target of ``stage``."""
        if stage == "valid":
            return list(self.train[user])
        if stage == "test":
            return list(self.train[user]) + [self.valid[user]]
        if stage == "train":
            return list(self.train[user])
        raise ValueError(f"unknown stage {stage!r}")

    def target(self, user: int, stage: str = "test") -> int:
        return self.valid[user] if stage == "valid" else self.test[user]


@dataclass(frozen=True)
class CandidateSet:
    user: int
    positive: int
    negatives: list[int]
    seed: int

    @property
    def items(self) -> list[int]:
        return [self.positive] + list(self.negatives)


def load_interactions(path: str | Path, min_interactions: int = MIN_INTERACTIONS) -> InteractionDataset:
    """Parse ``user item item ...`` lines into dense indices (first-appearance order).

    Users with fewer than ``min_interactions`` items are dropped and listed in
    ``rejected_users``; their items are not indexed.
    """
    user_ids: list[str] = []
    item_ids: list[str] = []
    item_index: dict[str, int] = {}
    seen_users: set[str] = set()
    sequences: list[list[int]] = []
    rejected: list[str] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            raw_user, raw_items = parts[0], parts[1:]
            if not raw_items:
                raise DataError(f"{path}:{lineno}: user {raw_user!r} has no items")
            if raw_user in seen_users:
                raise DataError(f"{path}:{lineno}: duplicate user {raw_user!r}")
            seen_users.add(raw_user)
            if len(raw_items) < min_interactions:
                rejected.append(raw_user)
                continue
            seq = []
            for raw in raw_items:
                if raw not in item_index:
                    item_index[raw] = len(item_ids)
                    item_ids.append(raw)
                seq.append(item_index[raw])
            user_ids.append(raw_user)
            sequences.append(seq)
    if rejected:
        log.info("dropped %d users with < %d interactions", len(rejected), min_interactions)
    return InteractionDataset(sequences, user_ids, item_ids, rejected)


def save_interactions(path: str | Path, ds: InteractionDataset) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for raw_user, seq in zip(ds.user_ids, ds.sequences):
            fh.write(" ".join([raw_user] + [ds.item_ids[i] for i in seq]) + "\n")


def split_leave_one_out(ds: InteractionDataset) -> Splits:
    train, valid, test = [], [], []
    for u, seq in enumerate(ds.sequences):
        if len(seq) < MIN_INTERACTIONS:
            raise DataError(f"user {ds.user_ids[u]!r} has {len(seq)} interactions, need {MIN_INTERACTIONS}")
        train.append(list(seq[:-2]))
        valid.append(seq[-2])
        test.append(seq[-1])
    return Splits(train, valid, test)


def _user_rng(seed: int, user: int) -> np.random.Generator:
    # PCG64 keyed by (seed, user): per-user draws do not depend on iteration order
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, user])))


def sample_negatives(pool: list[int], n: int, rng: np.random.Generator) -> list[int]:
    """Partial Fisher-Yates draw of ``n`` distinct entries of ``pool``."""
    arr = list(pool)
    for i in range(n):
        j = int(rng.integers(i, len(arr)))
        arr[i], arr[j] = arr[j], arr[i]
    return arr[:n]


def sample_dr_candidates(ds: InteractionDataset, splits: Splits, n_neg: int = 99, seed: int = 0,
                         stage: str = "test") -> list[CandidateSet]:
    """One positive (the held-out target) plus ``n_neg`` unseen negatives per user."""
    out = []
    all_items = range(ds.n_items)
    for u, seq in enumerate(ds.sequences):
        seen = set(seq)
        pool = [i for i in all_items if i not in seen]
        if len(pool) < n_neg:
            raise DataError(f"user {ds.user_ids[u]!r}: only {len(pool)} unseen items for {n_neg} negatives")
        negs = sample_negatives(pool, n_neg, _user_rng(seed, u))
        out.append(CandidateSet(u, splits.target(u, stage), negs, seed))
    return out


def export_splits(path: str | Path, splits: Splits) -> None:
    write_jsonl(path, ({"user": u, "train": t, "valid": v, "test": s}
                       for u, (t, v, s) in enumerate(zip(splits.train, splits.valid, splits.test))))


def import_splits(path: str | Path) -> Splits:
    recs = sorted(read_jsonl(path), key=lambda r: r["user"])
    return Splits([r["train"] for r in recs], [r["valid"] for r in recs], [r["test"] for r in recs])


def export_candidates(path: str | Path, cands: list[CandidateSet]) -> None:
    write_jsonl(path, ({"user": c.user, "positive": c.positive, "negatives": c.negatives, "seed": c.seed}
                       for c in cands))


def import_candidates(path: str | Path) -> list[CandidateSet]:
    return [CandidateSet(r["user"], r["positive"], r["negatives"], r.get("seed", 0)) for r in read_jsonl(path)]
