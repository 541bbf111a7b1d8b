"""Word-level tokenizer with character-level entity ids and whole-word slots."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Callable

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
SPECIALS = [PAD, BOS, EOS]
ENTITY_PIECES = ["user", "item", "_"] + [str(d) for d in range(10)]

SR_TEMPLATE = "sequential recommendation for {user} : history {history} ; next item ?"
DR_TEMPLATE = "direct recommendation for {user} : pick the best item ?"

_ENTITY = re.compile(r"^(user|item)_(\d+)$")


@dataclass(frozen=True)
class TokenizedInput:
    tokens: list[int]
    slots: list[int]
    target: list[int] | None = None

    def __post_init__(self):
        if len(self.tokens) != len(self.slots):
            raise ValueError("tokens and slots must align")


def template_words(*templates: str) -> list[str]:
    words = []
    for t in templates:
        for w in re.sub(r"\{\w+\}", " ", t).split():
            if w not in words:
                words.append(w)
    return words


class Tokenizer:
    """Vocabulary = specials + entity pieces + fixed template words.

    ``item_123`` becomes ``["item", "_", "1", "2", "3"]``; every piece shares the
    whole-word slot that ``slot_fn`` assigns to the entity.  Other words map to
    slot 0.
    """

    def __init__(self, words: list[str] | None = None):
        words = template_words(SR_TEMPLATE, DR_TEMPLATE) if words is None else words
        self.vocab: list[str] = []
        for w in SPECIALS + ENTITY_PIECES + list(words):
            if w not in self.vocab:
                self.vocab.append(w)
        self.index = {w: i for i, w in enumerate(self.vocab)}

    @property
    def size(self) -> int:
        return len(self.vocab)

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def bos_id(self) -> int:
        return self.index[BOS]

    @property
    def eos_id(self) -> int:
        return self.index[EOS]

    def entity_tokens(self, kind: str, idx: int) -> list[int]:
        return [self.index[kind], self.index["_"]] + [self.index[c] for c in str(idx)]

    def item_target(self, item: int) -> list[int]:
        return self.entity_tokens("item", item) + [self.eos_id]

    def tokenize(self, text: str, slot_fn: Callable[[str, int], int] | None = None) -> TokenizedInput:
        tokens, slots = [], []
        for word in text.split():
            m = _ENTITY.match(word)
            if m:
                kind, idx = m.group(1), int(m.group(2))
                slot = slot_fn(kind, idx) if slot_fn else 0
                pieces = self.entity_tokens(kind, idx)
                tokens.extend(pieces)
                slots.extend([slot] * len(pieces))
                continue
            if word not in self.index:
                raise KeyError(f"unknown token {word!r}")
            tokens.append(self.index[word])
            slots.append(0)
        return TokenizedInput(tokens, slots)

    def detokenize(self, ids: list[int]) -> str:
        words: list[str] = []
        i = 0
        while i < len(ids):
            w = self.vocab[ids[i]]
            if w in ("user", "item") and i + 2 < len(ids) and self.vocab[ids[i + 1]] == "_" \
                    and self.vocab[ids[i + 2]].isdigit():
                j = i + 2
                digits = ""
                while j < len(ids) and self.vocab[ids[j]].isdigit():
                    digits += self.vocab[ids[j]]
                    j += 1
                words.append(f"{w}_{digits}")
                i = j
                continue
            if w not in SPECIALS:
                words.append(w)
            i += 1
        return " ".join(words)

    def decode_item(self, ids: list[int]) -> int | None:
        """Item index encoded by ``ids`` (``item _ d d ... [eos]``), else None."""
        if ids and ids[-1] == self.eos_id:
            ids = ids[:-1]
        if len(ids) < 3 or ids[0] != self.index["item"] or ids[1] != self.index["_"]:
            return None
        digits = [self.vocab[t] for t in ids[2:]]
        if not all(d.isdigit() for d in digits):
            return None
        return int("".join(digits))


def sr_slot_fn(n_items: int) -> Callable[[str, int], int]:
    """SR table: row 0 shared, row 1 + v for item v; users share row 0."""
    def slot(kind, idx):
        if kind == "item":
            if not 0 <= idx < n_items:
                raise KeyError(f"unknown item {idx}")
            return 1 + idx
        return 0
    return slot


def dr_slot_fn(n_users: int, n_items: int) -> Callable[[str, int], int]:
    """DR table: row 0 shared, 1 + u for users, 1 + |U| + v for items."""
    def slot(kind, idx):
        if kind == "user":
            if not 0 <= idx < n_users:
                raise KeyError(f"unknown user {idx}")
            return 1 + idx
        if not 0 <= idx < n_items:
            raise KeyError(f"unknown item {idx}")
        return 1 + n_users + idx
    return slot


def render_sr_prompt(user: int, history: list[int]) -> str:
    return SR_TEMPLATE.format(user=f"user_{user}", history=" ".join(f"item_{i}" for i in history))


def render_dr_prompt(user: int) -> str:
    return DR_TEMPLATE.format(user=f"user_{user}")
