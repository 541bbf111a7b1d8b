"""Beam search over summed log-probabilities, optionally constrained by a token trie."""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

StepFn = Callable[[list[list[int]]], np.ndarray]


class TokenTrie:
    """Prefix tree over allowed token sequences."""

    def __init__(self, sequences: Iterable[Sequence[int]]):
        self.root: dict = {}
        self.size = 0
        for seq in sequences:
            node = self.root
            for t in seq:
                node = node.setdefault(int(t), {})
            self.size += 1
        if self.size == 0:
            raise ValueError("empty constraint set")

    def children(self, prefix: Sequence[int]) -> list[int]:
        node = self.root
        for t in prefix:
            node = node.get(t)
            if node is None:
                return []
        return sorted(node)

    def is_leaf(self, prefix: Sequence[int]) -> bool:
        node = self.root
        for t in prefix:
            node = node.get(t)
            if node is None:
                return False
        return not node


def _key(hyp):
    seq, score = hyp
    return (-score, tuple(seq))


def beam_search(step_fn: StepFn, beam_width: int, max_len: int, eos_id: int | None = None,
                constraint: TokenTrie | None = None) -> list[tuple[list[int], float]]:
    """Return hypotheses sorted by score (desc), ties broken by lexicographic order.

    ``step_fn(prefixes)`` gives next-token log-probabilities ``(len(prefixes), V)``
    for prefixes that exclude the start token.  A hypothesis finishes when it
    emits ``eos_id``, reaches a trie leaf, or reaches ``max_len`` tokens.
    """
    if beam_width < 1:
        raise ValueError("beam width must be >= 1")
    live: list[tuple[list[int], float]] = [([], 0.0)]
    done: list[tuple[list[int], float]] = []
    for _ in range(max_len):
        if not live:
            break
        logp = step_fn([seq for seq, _ in live])
        cands = []
        for (seq, score), row in zip(live, logp):
            allowed = constraint.children(seq) if constraint else range(len(row))
            for t in allowed:
                cands.append((seq + [int(t)], score + float(row[t])))
        pool = sorted(cands + done, key=_key)[:beam_width]
        live, done = [], []
        for seq, score in pool:
            finished = (eos_id is not None and seq[-1] == eos_id) or len(seq) >= max_len \
                or (constraint is not None and constraint.is_leaf(seq))
            (done if finished else live).append((seq, score))
    return sorted(done + live, key=_key)


def greedy_decode(step_fn: StepFn, max_len: int, eos_id: int | None = None) -> tuple[list[int], float]:
    seq, score = [], 0.0
    for _ in range(max_len):
        row = step_fn([seq])[0]
        t = int(np.argmax(row))
        seq.append(t)
        score += float(row[t])
        if eos_id is not None and t == eos_id:
            break
    return seq, score


def model_step_fn(params: dict, memory: np.ndarray, src_mask: np.ndarray, bos_id: int) -> StepFn:
    """Step function for one encoded source (``memory`` of shape ``(1, N, d)``)."""
    from .model import decode

    def step(prefixes: list[list[int]]) -> np.ndarray:
        n = len(prefixes)
        T = 1 + max(len(p) for p in prefixes)
        y_in = np.zeros((n, T), dtype=np.int64)
        tmask = np.zeros((n, T), dtype=bool)
        for i, p in enumerate(prefixes):
            y_in[i, 0] = bos_id
            y_in[i, 1:1 + len(p)] = p
            tmask[i, :1 + len(p)] = True
        mem = np.broadcast_to(memory, (n,) + memory.shape[1:])
        sm = np.broadcast_to(src_mask, (n, src_mask.shape[1]))
        logits, _ = decode(params, mem, sm, y_in, tmask)
        last = logits[np.arange(n), tmask.sum(axis=1) - 1]
        m = last.max(axis=1, keepdims=True)
        return last - m - np.log(np.exp(last - m).sum(axis=1, keepdims=True))

    return step
