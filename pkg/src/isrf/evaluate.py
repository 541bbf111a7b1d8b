"""Ranking metrics, evaluation drivers, ablation/variant/sweep runners and case studies."""

from __future__ import annotations

import csv
import io as _io
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import CandidateSet
from .genrec import SourceBatch, TokenTrie, beam_search, inject_batch, model_step_fn
from .genrec.model import encode
from .graphs import cosine_matrix
from .train import ModelState, TrainConfig, TrainData, fit, semantic_sources

Ranker = Callable[[int, list[int], "list[int] | None"], list[int]]

METRIC_COLUMNS = ("H@5", "N@5", "H@10", "N@10")


def hit_at_k(ranked: Sequence[int], target: int, k: int) -> int:
    if k < 1:
        raise ValueError("K must be >= 1")
    return int(target in list(ranked)[:k])


def ndcg_at_k(ranked: Sequence[int], target: int, k: int) -> float:
    """Single relevant item: ``1 / log2(rank + 1)`` inside the top K, else 0."""
    if k < 1:
        raise ValueError("K must be >= 1")
    head = list(ranked)[:k]
    if target not in head:
        return 0.0
    return 1.0 / math.log2(head.index(target) + 2)


def evaluate_rankings(rankings: dict[int, list[int]], targets: dict[int, int],
                      ks: Sequence[int] = (5, 10)) -> dict[str, float]:
    out = {}
    users = sorted(rankings)
    for k in ks:
        out[f"H@{k}"] = float(np.mean([hit_at_k(rankings[u], targets[u], k) for u in users]))
        out[f"N@{k}"] = float(np.mean([ndcg_at_k(rankings[u], targets[u], k) for u in users]))
    return out


@dataclass
class MetricTable:
    rows: list[tuple[str, str, dict[str, float]]] = field(default_factory=list)

    def add(self, task: str, label: str, metrics: dict[str, float]) -> None:
        self.rows.append((task, label, dict(metrics)))

    def get(self, label: str, task: str | None = None) -> dict[str, float]:
        for t, lab, m in self.rows:
            if lab == label and (task is None or t == task):
                return m
        raise KeyError(label)

    def labels(self) -> list[str]:
        return [lab for _, lab, _ in self.rows]

    def columns(self) -> list[str]:
        cols = []
        for _, _, m in self.rows:
            for c in m:
                if c not in cols:
                    cols.append(c)
        ordered = [c for c in METRIC_COLUMNS if c in cols]
        return ordered + [c for c in cols if c not in ordered]

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = _io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = self.columns()
        w.writerow(["task", "config"] + cols)
        for task, label, m in self.rows:
            w.writerow([task, label] + [repr(float(m[c])) if c in m else "" for c in cols])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path: str | Path) -> "MetricTable":
        table = cls()
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                task, label = rec.pop("task"), rec.pop("config")
                table.add(task, label, {k: float(v) for k, v in rec.items() if v != ""})
        return table

    def to_text(self) -> str:
        cols = self.columns()
        width = max([len("config")] + [len(lab) for lab in self.labels()])
        lines = [f"{'task':<5} {'config':<{width}} " + " ".join(f"{c:>7}" for c in cols)]
        for task, label, m in self.rows:
            lines.append(f"{task:<5} {label:<{width}} " + " ".join(f"{m.get(c, float('nan')):>7.4f}" for c in cols))
        return "\n".join(lines)


# -- model-backed ranking -----------------------------------------------------

def model_ranker(state: ModelState, data: TrainData, stage: str, beam: int) -> Ranker:
    """Beam-search ranker; sources for every user are encoded in one batch."""
    cfg, tok, p = state.config, state.tokenizer, state.params
    slot_fn = state.slot_fn()
    table = state.slot_table()
    users = list(range(state.n_users))
    inputs = [tok.tokenize(state.prompt(u, data.splits.history(u, stage)), slot_fn) for u in users]
    src = SourceBatch.build(inputs, cfg.n_prompts)
    memory, _ = encode(p, inject_batch(p["tok_emb"], p["P"], src, table, cfg.beta), src.mask)
    all_items = TokenTrie(tok.item_target(i) for i in range(state.n_items))
    max_len = max(len(tok.item_target(i)) for i in range(state.n_items))

    def rank(user: int, history: list[int], candidates: list[int] | None) -> list[int]:
        trie = TokenTrie(tok.item_target(i) for i in candidates) if candidates is not None else all_items
        step = model_step_fn(p, memory[user:user + 1], src.mask[user:user + 1], tok.bos_id)
        hyps = beam_search(step, beam, max_len, tok.eos_id, trie)
        ranked, seen = [], set()
        for seq, _ in hyps:
            item = tok.decode_item(seq)
            if item is not None and item not in seen:
                seen.add(item)
                ranked.append(item)
        return ranked

    return rank


def _check_beam(beam: int, ks: Sequence[int]) -> None:
    if beam < max(ks):
        raise ValueError(f"beam {beam} is smaller than max K {max(ks)}")


def evaluate_sr(ranker: Ranker, data: TrainData, ks: Sequence[int] = (5, 10), beam: int = 20,
                stage: str = "test") -> dict[str, float]:
    _check_beam(beam, ks)
    users = range(data.dataset.n_users)
    rankings = {u: ranker(u, data.splits.history(u, stage), None) for u in users}
    return evaluate_rankings(rankings, {u: data.splits.target(u, stage) for u in users}, ks)


def evaluate_dr(ranker: Ranker, data: TrainData, candidate_sets: list[CandidateSet],
                ks: Sequence[int] = (5, 10), beam: int = 20, stage: str = "test") -> dict[str, float]:
    _check_beam(beam, ks)
    rankings, targets = {}, {}
    for c in candidate_sets:
        ranked = ranker(c.user, data.splits.history(c.user, stage), list(c.items))
        allowed = set(c.items)
        rankings[c.user] = [i for i in ranked if i in allowed]
        # scored against the held-out item, so a set missing its positive scores zero
        targets[c.user] = data.splits.target(c.user, stage)
    return evaluate_rankings(rankings, targets, ks)


def evaluate_state(state: ModelState, data: TrainData, stage: str = "test",
                   ks: Sequence[int] | None = None, candidate_sets: list[CandidateSet] | None = None
                   ) -> dict[str, float]:
    cfg = state.config
    ks = tuple(ks or cfg.eval_ks)
    ranker = model_ranker(state, data, stage, cfg.beam)
    if cfg.task == "SR" and cfg.sr_ranking == "full":
        return evaluate_sr(ranker, data, ks, cfg.beam, stage)
    cands = candidate_sets or data.dr_candidates(stage, cfg.n_neg, cfg.seed)
    return evaluate_dr(ranker, data, cands, ks, cfg.beam, stage)


# -- experiment runners -------------------------------------------------------

ABLATION_ROWS = (
    ("full", {}),
    ("w/o L_DS", {"no_distill": True}),
    ("w/o L_S", {"no_seq_loss": True}),
    ("w/o I_se", {"no_item_semantics": True}),
    ("w/o Adapter", {"no_adapter": True}),
)


def run_config(config: TrainConfig, data: TrainData) -> dict[str, float]:
    result = fit(config, data)
    return evaluate_state(result.state, data, "test")


def run_ablations(base: TrainConfig, data: TrainData, rows=ABLATION_ROWS) -> MetricTable:
    table = MetricTable()
    for label, delta in rows:
        table.add(base.task, label, run_config(base.replace(**delta), data))
    return table


def run_variants(base: TrainConfig, data: TrainData,
                 variants: Sequence[str] = ("full", "uPos", "uNeg", "vPos", "vNeg")) -> MetricTable:
    table = MetricTable()
    for v in variants:
        label = "full" if v == "full" else f"ISRF-{v}"
        table.add(base.task, label, run_config(base.replace(variant=v), data))
    return table


SWEEP_PARAMS = {"Lprime": "L_prime", "k": "k"}


def sweep(param: str, values: Sequence[int], base: TrainConfig, data: TrainData) -> MetricTable:
    if param not in SWEEP_PARAMS:
        raise ValueError(f"sweep parameter must be one of {sorted(SWEEP_PARAMS)}")
    field_name = SWEEP_PARAMS[param]
    table = MetricTable()
    for v in values:
        table.add(base.task, f"{param}={v}", run_config(base.replace(**{field_name: v}), data))
    return table


def case_study(state: ModelState, data: TrainData, user: int, top_m: int = 10) -> dict:
    """Semantic neighbours of ``user`` with their item-category histograms, plus recommendations."""
    cats = data.item_categories or ["unknown"] * state.n_items
    S_u, _ = semantic_sources(state.config, data)
    sim, _ = cosine_matrix(S_u)
    picks = state.relation.report.get("picks", [[] for _ in range(state.n_users)])[user]
    neighbors = []
    for j in picks:
        hist = Counter(cats[i] for i in data.splits.history(j, "test"))
        neighbors.append({"user": int(j), "cosine": round(float(sim[user, j]), 6),
                          "categories": dict(sorted(hist.items()))})
    cfg = state.config
    ranker = model_ranker(state, data, "test", max(cfg.beam, top_m))
    cands = None
    if cfg.task == "DR":
        cands = [c for c in data.dr_candidates("test", cfg.n_neg, cfg.seed) if c.user == user][0].items
    recs = ranker(user, data.splits.history(user, "test"), cands)[:top_m]
    own = Counter(cats[i] for i in data.splits.history(user, "test"))
    return {
        "user": int(user),
        "task": cfg.task,
        "k": cfg.k,
        "own_categories": dict(sorted(own.items())),
        "neighbors": neighbors,
        "recommendations": [{"item": int(i), "category": cats[i]} for i in recs],
    }
