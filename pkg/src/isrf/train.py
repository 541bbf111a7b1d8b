"""Joint optimization: generation loss plus the task's alignment loss, Adam, early stopping."""

from __future__ import annotations

import copy
import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import align
from .data import CandidateSet, InteractionDataset, Splits, sample_dr_candidates, split_leave_one_out
from .embed import AdapterParams, adapter_forward, adapter_gradient, init_adapter, pca_fit, pca_transform
from .genrec import (SourceBatch, Tokenizer, dr_slot_fn, generation_loss, init_backbone, inject_batch,
                     render_dr_prompt, render_sr_prompt, seq_model_backward, seq_model_forward, sr_slot_fn,
                     target_batch)
from .genrec.model import inject_batch_backward
from .graphs import (NormalizedGraph, build_interaction_graph, build_user_relation, lightgcn_propagate,
                     propagate_backward)
from .io import read_sections, write_sections

log = logging.getLogger(__name__)

VARIANTS = ("full", "uPos", "uNeg", "vPos", "vNeg")
ABLATIONS = ("no_distill", "no_seq_loss", "no_item_semantics", "no_adapter")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    task: str = "SR"
    L: int = 2
    L_prime: int = 3
    k: int = 10
    tau: float = 0.2
    beta: float = 0.1
    d_m: int = 64
    d: int = 512
    n_prompts: int = 8
    batch_size: int = 64
    learning_rate: float = 1e-3
    max_epochs: int = 20
    patience: int = 5
    seed: int = 0
    no_distill: bool = False
    no_seq_loss: bool = False
    no_item_semantics: bool = False
    no_adapter: bool = False
    variant: str = "full"
    distill_denominator: str = "diagonal"
    relation_symmetrize: str = "union"
    adapter_activation: str = "none"
    gen_weight: float = 1.0
    align_weight: float = 1.0
    max_history: int = 10
    n_neg: int = 99
    beam: int = 20
    # SR ranking over the full item vocabulary, or over 1 positive + n_neg sampled negatives
    sr_ranking: str = "full"
    sample_mode: str = "all"
    eval_ks: tuple[int, ...] = (5, 10)
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        self.task = self.task.upper()
        if self.task not in ("SR", "DR"):
            raise ValueError(f"task must be SR or DR, got {self.task!r}")
        if self.sample_mode not in ("all", "one"):
            raise ValueError("sample_mode must be 'all' or 'one'")
        if self.sr_ranking not in ("full", "sampled"):
            raise ValueError("sr_ranking must be 'full' or 'sampled'")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        for name in ("tau", "d_m", "d", "n_prompts", "batch_size", "max_epochs", "patience", "beam"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("L", "L_prime", "k", "beta", "learning_rate", "n_neg"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if (self.d + self.d_m) % 2:
            raise ValueError("d + d_m must be even")
        self.eval_ks = tuple(self.eval_ks)
        self.adam_betas = tuple(self.adam_betas)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


@dataclass
class TrainData:
    dataset: InteractionDataset
    splits: Splits
    S_u: np.ndarray
    S_v: np.ndarray
    views: dict[str, np.ndarray] = field(default_factory=dict)
    item_categories: list[str] | None = None
    candidates: dict[str, list[CandidateSet]] = field(default_factory=dict)

    @classmethod
    def from_dataset(cls, ds, S_u, S_v, **kw) -> "TrainData":
        return cls(ds, split_leave_one_out(ds), np.asarray(S_u, float), np.asarray(S_v, float), **kw)

    def dr_candidates(self, stage: str, n_neg: int, seed: int) -> list[CandidateSet]:
        key = f"{stage}:{n_neg}:{seed}"
        if key not in self.candidates:
            self.candidates[key] = sample_dr_candidates(self.dataset, self.splits, n_neg, seed, stage)
        return self.candidates[key]


def semantic_sources(config: TrainConfig, data: TrainData) -> tuple[np.ndarray, np.ndarray]:
    """User and item semantic matrices after applying the configured variant."""
    S_u, S_v = data.S_u, data.S_v
    source = {"uPos": ("user_pos", None), "uNeg": ("user_neg", None),
              "vPos": (None, "item_pos"), "vNeg": (None, "item_neg")}.get(config.variant)
    if source:
        u_key, v_key = source
        key = u_key or v_key
        if key not in data.views:
            raise ValueError(f"variant {config.variant} needs the {key!r} embedding view")
        if u_key:
            S_u = data.views[u_key]
        else:
            S_v = data.views[v_key]
    return S_u, S_v


@dataclass
class ModelState:
    """Trainable tensors, frozen tensors, Adam moments and bookkeeping."""

    config: TrainConfig
    params: dict[str, np.ndarray]
    frozen: dict[str, np.ndarray]
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int
    epoch: int
    n_users: int
    n_items: int
    tokenizer: Tokenizer
    relation: NormalizedGraph
    interaction: NormalizedGraph

    def adapter(self) -> AdapterParams:
        p = self.params
        return AdapterParams(p["adapter.W1"], p["adapter.b1"], p["adapter.W2"], p["adapter.b2"])

    def snapshot(self) -> "ModelState":
        return dataclasses.replace(self, params=copy.deepcopy(self.params), m=copy.deepcopy(self.m),
                                   v=copy.deepcopy(self.v))

    # -- derived embeddings -------------------------------------------------
    def item_embeddings(self) -> np.ndarray:
        S = self.frozen["S_red"]
        if self.config.no_adapter:
            return S @ self.frozen["proj"].T
        return adapter_forward(S, self.adapter(), self.config.adapter_activation)

    def group_interest(self) -> np.ndarray:
        return lightgcn_propagate(self.relation, self.params["H0"], self.config.L_prime).averaged

    def explicit_embeddings(self) -> np.ndarray:
        E0 = np.vstack([self.params["E_u"], self.item_embeddings()])
        return lightgcn_propagate(self.interaction, E0, self.config.L).averaged

    def slot_table(self) -> np.ndarray:
        if self.config.task == "SR":
            return self.params["omega_s"]
        return np.vstack([self.params["omega_s"][:1], self.explicit_embeddings()])

    def slot_fn(self):
        if self.config.task == "SR":
            return sr_slot_fn(self.n_items)
        return dr_slot_fn(self.n_users, self.n_items)

    def prompt(self, user: int, history: list[int]) -> str:
        if self.config.task == "SR":
            return render_sr_prompt(user, history[-self.config.max_history:] if self.config.max_history else [])
        return render_dr_prompt(user)

    # -- persistence --------------------------------------------------------
    def save(self, path: str | Path) -> None:
        sections = {}
        for prefix, group in (("param", self.params), ("frozen", self.frozen), ("m", self.m), ("v", self.v)):
            for name in sorted(group):
                sections[f"{prefix}/{name}"] = group[name]
        meta = {"config": self.config.to_dict(), "step": self.step, "epoch": self.epoch,
                "n_users": self.n_users, "n_items": self.n_items, "vocab": self.tokenizer.vocab}
        write_sections(path, sections, meta)

    @classmethod
    def load(cls, path: str | Path, data: TrainData) -> "ModelState":
        sections, meta = read_sections(path)
        config = TrainConfig.from_dict(meta["config"])
        state = init_state(config, data)
        groups = {"param": state.params, "frozen": state.frozen, "m": state.m, "v": state.v}
        for key, arr in sections.items():
            prefix, name = key.split("/", 1)
            groups[prefix][name] = arr
        state.step, state.epoch = meta["step"], meta["epoch"]
        return state


def max_lengths(config: TrainConfig, n_items: int, n_users: int) -> tuple[int, int]:
    digits = max(len(str(max(n_items - 1, 0))), len(str(max(n_users - 1, 0))))
    tok = Tokenizer()
    base = len(tok.tokenize(render_sr_prompt(0, [])).tokens) + 2 + digits
    return base + config.max_history * (2 + digits) + config.n_prompts + 4, 3 + digits + 1


def init_state(config: TrainConfig, data: TrainData) -> ModelState:
    """Build graphs, frozen item semantics and seeded parameters."""
    ds = data.dataset
    nu, ni, d = ds.n_users, ds.n_items, config.d
    rng = np.random.default_rng(config.seed)
    S_u, S_v = semantic_sources(config, data)

    relation = build_user_relation(S_u, config.k, config.relation_symmetrize)
    interaction = build_interaction_graph(data.splits.train, nu, ni)

    d_m = config.d_m
    pca = pca_fit(S_v, d_m)
    S_red = np.array(pca_transform(pca, S_v))
    frozen = {"S_red": S_red}
    if config.no_item_semantics:
        frozen["S_red"] = rng.normal(0.0, float(S_red.std()) or 1.0, S_red.shape)
    if config.no_adapter:
        frozen["proj"] = rng.normal(0.0, 1.0 / np.sqrt(d_m), (d, d_m))
    for arr in frozen.values():
        arr.setflags(write=False)

    tok = Tokenizer()
    max_src, max_tgt = max_lengths(config, ni, nu)
    params = {"E_u": rng.normal(0.0, 0.1, (nu, d)), "H0": rng.normal(0.0, 0.1, (nu, d)),
              "P": rng.normal(0.0, 0.1, (config.n_prompts, d)),
              "omega_s": rng.normal(0.0, 0.1, (ni + 1, d))}
    if not config.no_adapter:
        for name, arr in init_adapter(d_m, d, rng).as_dict().items():
            params[f"adapter.{name}"] = arr
    params.update(init_backbone(tok.size, d, max_src, max_tgt, rng))
    zeros = {k: np.zeros_like(v) for k, v in params.items()}
    return ModelState(config, params, frozen, zeros, copy.deepcopy(zeros), 0, 0, nu, ni, tok,
                      relation, interaction)


# -- batches ------------------------------------------------------------------

@dataclass
class Batch:
    users: list[int]
    histories: list[list[int]]
    targets: list[int]


def epoch_batches(state: ModelState, data: TrainData, epoch: int) -> list[Batch]:
    """Seeded shuffle of training samples.

    ``sample_mode="all"`` uses every SR prefix (history ``train[:t]``, target
    ``train[t]`` for t >= 1) or every DR training item; ``"one"`` draws a single
    random sample per user.
    """
    cfg = state.config
    rng = np.random.default_rng([cfg.seed, epoch])
    samples = []
    for u in range(state.n_users):
        train = data.splits.train[u]
        if cfg.sample_mode == "all":
            if cfg.task == "SR":
                cuts = range(1, len(train)) if len(train) > 1 else [0]
                samples.extend((u, train[:t], train[t]) for t in cuts)
            else:
                samples.extend((u, [], item) for item in train)
        elif cfg.task == "SR":
            t = int(rng.integers(1, len(train))) if len(train) > 1 else 0
            samples.append((u, train[:t], train[t]))
        else:
            samples.append((u, [], train[int(rng.integers(len(train)))]))
    order = rng.permutation(len(samples))
    samples = [samples[i] for i in order]
    bs = cfg.batch_size
    return [Batch([s[0] for s in chunk], [s[1] for s in chunk], [s[2] for s in chunk])
            for chunk in (samples[i:i + bs] for i in range(0, len(samples), bs))]


# -- loss ---------------------------------------------------------------------

@dataclass
class LossBreakdown:
    total: float
    gen: float
    align: float
    grads: dict[str, np.ndarray]


def total_loss(state: ModelState, batch: Batch, data: TrainData,
               components: tuple[str, ...] = ("gen", "align")) -> LossBreakdown:
    """Task loss and exact gradients for every trainable tensor.

    DR: generation + distillation (teacher behind stop-gradient).
    SR: generation + sequential alignment.  ``components`` restricts which
    terms are evaluated; ablation flags drop the alignment term.
    """
    cfg, p, tok = state.config, state.params, state.tokenizer
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    nu = state.n_users
    slot_fn = state.slot_fn()

    if cfg.task == "DR":
        E_v = state.item_embeddings()
        prop = lightgcn_propagate(state.interaction, np.vstack([p["E_u"], E_v]), cfg.L)
        E_tilde = prop.averaged
        table = np.vstack([p["omega_s"][:1], E_tilde])
        g_Et = np.zeros_like(E_tilde)
    else:
        table = p["omega_s"]

    gen_val = align_val = 0.0
    g_table = np.zeros_like(table)
    if "gen" in components and cfg.gen_weight:
        inputs = [tok.tokenize(state.prompt(u, h), slot_fn) for u, h in zip(batch.users, batch.histories)]
        src = SourceBatch.build(inputs, cfg.n_prompts)
        X = inject_batch(p["tok_emb"], p["P"], src, table, cfg.beta)
        y_in, y_out, tmask = target_batch([tok.item_target(t) for t in batch.targets], tok.bos_id, tok.pad_id)
        logits, cache = seq_model_forward(p, X, src.mask, y_in, tmask)
        gen_val, dlogits = generation_loss(logits, y_out, tmask)
        gb, dX = seq_model_backward(p, cache, dlogits * cfg.gen_weight)
        for k, v in gb.items():
            grads[k] += v
        g_tok, g_P, g_table = inject_batch_backward(dX, src, cfg.beta, tok.size, cfg.n_prompts, len(table))
        grads["tok_emb"] += g_tok
        grads["P"] += g_P

    # alignment sees each user once per batch (repeats would be false in-batch negatives)
    align_users = list(dict.fromkeys(batch.users))
    users = np.asarray(align_users)
    use_align = "align" in components and cfg.align_weight and not (
        (cfg.task == "DR" and cfg.no_distill) or (cfg.task == "SR" and cfg.no_seq_loss))
    if use_align:
        H = lightgcn_propagate(state.relation, p["H0"], cfg.L_prime).averaged
        if cfg.task == "DR":
            res = align.loss_distill(H[users], E_tilde[users], cfg.tau, cfg.distill_denominator)
            g_Et[users] += cfg.align_weight * res.grad_student
        else:
            omega_items = p["omega_s"][1:]
            student = np.stack([align.user_interest_from_sequence(omega_items, data.splits.train[u])
                                for u in align_users])
            res = align.loss_seq(H[users], student, cfg.tau)
            g_H = np.zeros_like(H)
            g_H[users] = cfg.align_weight * res.grad_teacher
            grads["H0"] += propagate_backward(state.relation, g_H, cfg.L_prime)
            for row, u in enumerate(align_users):
                items = data.splits.train[u]
                np.add.at(g_table, 1 + np.asarray(items),
                          cfg.align_weight * res.grad_student[row] / len(items))
        align_val = res.value

    if cfg.task == "DR":
        grads["omega_s"][0] += g_table[0]
        g_Et += g_table[1:]
        g_E0 = propagate_backward(state.interaction, g_Et, cfg.L)
        grads["E_u"] += g_E0[:nu]
        if not cfg.no_adapter:
            ga = adapter_gradient(state.frozen["S_red"], state.adapter(), g_E0[nu:], cfg.adapter_activation)
            for k, v in ga.items():
                grads[f"adapter.{k}"] += v
    else:
        grads["omega_s"] += g_table

    total = cfg.gen_weight * gen_val + (cfg.align_weight * align_val if use_align else 0.0)
    return LossBreakdown(total, gen_val, align_val if use_align else 0.0, grads)


# -- optimization -------------------------------------------------------------

def adam_update(state: ModelState, grads: dict[str, np.ndarray]) -> None:
    cfg = state.config
    b1, b2 = cfg.adam_betas
    state.step += 1
    c1, c2 = 1.0 - b1 ** state.step, 1.0 - b2 ** state.step
    for k, g in grads.items():
        m = state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        v = state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        state.params[k] = state.params[k] - cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


def train_epoch(state: ModelState, data: TrainData) -> dict:
    state.epoch += 1
    sums = {"loss": 0.0, "gen": 0.0, "align": 0.0, "grad_norm": 0.0}
    batches = epoch_batches(state, data, state.epoch)
    for bid, batch in enumerate(batches):
        out = total_loss(state, batch, data)
        if not np.isfinite(out.total):
            raise TrainingError(f"non-finite loss at epoch {state.epoch} batch {bid}: "
                                f"gen={out.gen} align={out.align}")
        gnorm = float(np.sqrt(sum(float(np.sum(g * g)) for g in out.grads.values())))
        if state.config.learning_rate:
            adam_update(state, out.grads)
        sums["loss"] += out.total
        sums["gen"] += out.gen
        sums["align"] += out.align
        sums["grad_norm"] += gnorm
    n = len(batches)
    return {"epoch": state.epoch, **{k: v / n for k, v in sums.items()}}


Evaluator = Callable[[ModelState, int], float]


def default_evaluator(data: TrainData) -> Evaluator:
    from .evaluate import evaluate_state

    def run(state: ModelState, epoch: int) -> float:
        return evaluate_state(state, data, stage="valid", ks=(10,))["H@10"]

    return run


@dataclass
class FitResult:
    state: ModelState
    history: list[dict]
    best_epoch: int


def fit(config: TrainConfig, data: TrainData, evaluator: Evaluator | None = None,
        out_dir: str | Path | None = None) -> FitResult:
    """Train until validation H@10 stalls for ``patience`` epochs or ``max_epochs`` is hit."""
    state = init_state(config, data)
    evaluator = evaluator or default_evaluator(data)
    best, best_metric, best_epoch, stale = state.snapshot(), -np.inf, 0, 0
    history = []
    for _ in range(config.max_epochs):
        row = train_epoch(state, data)
        row["val_H@10"] = float(evaluator(state, state.epoch))
        history.append(row)
        log.info("epoch %d loss=%.4f gen=%.4f align=%.4f val_H@10=%.4f", row["epoch"], row["loss"],
                 row["gen"], row["align"], row["val_H@10"])
        if row["val_H@10"] > best_metric:
            best, best_metric, best_epoch, stale = state.snapshot(), row["val_H@10"], state.epoch, 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        best.save(out / "checkpoint.bin")
        write_history(out / "history.csv", history)
        (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    return FitResult(best, history, best_epoch)


HISTORY_FIELDS = ["epoch", "loss", "gen", "align", "grad_norm", "val_H@10"]


def write_history(path: str | Path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(row[k]) if isinstance(row[k], float) else row[k]) for k in HISTORY_FIELDS})
