"""Acceptance suite: one test per criterion, reported as PASS/FAIL lines in the terminal summary.

Run alone with ``pytest tests/test_acceptance.py``.
"""

import json
import math
import sys
import time

import numpy as np
import pytest
import scipy.sparse as sp
from scipy import stats

from conftest import central_difference, rel_error, tiny_config, tiny_data
from isrf import align
from isrf.cli import main
from isrf.data import split_leave_one_out, sample_dr_candidates
from isrf.embed import adapter_forward, adapter_gradient, init_adapter, pca_fit, pca_transform
from isrf.evaluate import evaluate_rankings, evaluate_state, hit_at_k, ndcg_at_k
from isrf.genrec import (SourceBatch, TokenTrie, Tokenizer, beam_search, generation_loss, greedy_decode,
                         init_backbone, inject_batch, model_step_fn, seq_model_backward, seq_model_forward,
                         sr_slot_fn, target_batch)
from isrf.genrec.model import encode, inject_batch_backward
from isrf.graphs import build_user_relation, lightgcn_propagate, normalize_adjacency, topk_neighbors
from isrf.synth import SynthConfig, generate_planted, group_recovery_score
from isrf.train import TrainConfig, TrainData, epoch_batches, fit, init_state, total_loss
from oracles import brute_topk, dense_propagate, eig_oracle, random_adjacency

# Training settings for the planted end-to-end comparison (criterion 10): library defaults except
# a narrow width (runtime) and the learning rate with the best full-model validation H@10 among
# {1e-3, 3e-3, 1e-2}, chosen before looking at the ablation comparison.
PLANTED_TRAIN = dict(d=32, d_m=16, learning_rate=1e-2, max_epochs=40)
PLANTED_SEEDS = range(5)


def test_criterion_01_full_scale_substitution():
    # absolute table metrics need full-dataset fine-tuning of a pretrained model; the property
    # criteria 2-12 stand in for them and must all be present in this module
    mod = sys.modules[__name__]
    present = {int(n.split("_")[2]) for n in dir(mod) if n.startswith("test_criterion_")}
    assert set(range(2, 13)) <= present


def test_criterion_02_graph_oracle():
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    for _ in range(50):
        n, L = int(rng.integers(1, 51)), int(rng.integers(0, 5))
        A = random_adjacency(rng, n, rng.uniform(0.02, 0.4))
        E0 = rng.normal(size=(n, 6))
        got = lightgcn_propagate(normalize_adjacency(sp.csr_matrix(A)), E0, L).averaged
        assert np.max(np.abs(got - dense_propagate(A, E0, L))) <= 1e-10
    assert time.perf_counter() - t0 < 5.0


def test_criterion_03_topk_oracle():
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    for trial in range(30):
        n = int(rng.integers(2, 61))
        S = rng.normal(size=(n, 5))
        # duplicated rows create exact cosine ties
        dup = rng.choice(n, size=n // 3, replace=True)
        S[rng.choice(n, size=len(dup), replace=False)] = S[dup]
        if trial % 5 == 0:
            S[0] = 0.0
        k = int(rng.integers(0, n))
        assert topk_neighbors(S, k) == brute_topk(S, k)
    assert time.perf_counter() - t0 < 2.0


def test_criterion_04_gradient_certification():
    rng = np.random.default_rng(4)
    t0 = time.perf_counter()
    # adapter, both activations
    for act in ("none", "relu"):
        p = init_adapter(3, 5, rng)
        S, up = rng.normal(size=(6, 3)), rng.normal(size=(6, 5))
        g = adapter_gradient(S, p, up, act)
        for name in ("W1", "b1", "W2", "b2"):
            num = central_difference(lambda: float(np.sum(adapter_forward(S, p, act) * up)), getattr(p, name))
            assert rel_error(num, g[name]) < 1e-4, (act, name)
    # contrastive losses
    h, e = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    for den in ("diagonal", "cross"):
        res = align.loss_distill(h, e, 0.3, den)
        assert rel_error(central_difference(lambda: align.loss_distill(h, e, 0.3, den).value, e),
                         res.grad_student) < 1e-4
    res = align.loss_seq(h, e, 0.3)
    assert rel_error(central_difference(lambda: align.loss_seq(h, e, 0.3).value, h), res.grad_teacher) < 1e-4
    assert rel_error(central_difference(lambda: align.loss_seq(h, e, 0.3).value, e), res.grad_student) < 1e-4
    # generation loss through the backbone, and whole-word injection
    tok, d, n_p, beta = Tokenizer(), 4, 2, 0.6
    params = init_backbone(tok.size, d, 40, 6, rng)
    for k in params:
        params[k] = rng.normal(0, 0.5, params[k].shape)
    P, table = rng.normal(size=(n_p, d)), rng.normal(size=(9, d))
    inputs = [tok.tokenize("sequential recommendation for : history item_3 item_7 ; next item ?", sr_slot_fn(8)),
              tok.tokenize("direct recommendation for item_1", sr_slot_fn(8))]
    src = SourceBatch.build(inputs, n_p)
    y_in, y_out, tm = target_batch([tok.item_target(5), tok.item_target(2)], tok.bos_id, tok.pad_id)

    def loss():
        X = inject_batch(params["tok_emb"], P, src, table, beta)
        return generation_loss(seq_model_forward(params, X, src.mask, y_in, tm)[0], y_out, tm)[0]

    X = inject_batch(params["tok_emb"], P, src, table, beta)
    logits, cache = seq_model_forward(params, X, src.mask, y_in, tm)
    grads, dX = seq_model_backward(params, cache, generation_loss(logits, y_out, tm)[1])
    g_tok, g_P, g_table = inject_batch_backward(dX, src, beta, tok.size, n_p, len(table))
    for name in params:
        want = grads[name] + (g_tok if name == "tok_emb" else 0.0)
        assert rel_error(central_difference(loss, params[name]), want) < 1e-3, name
    assert rel_error(central_difference(loss, P), g_P) < 1e-4
    assert rel_error(central_difference(loss, table), g_table) < 1e-4
    assert time.perf_counter() - t0 < 30.0


def test_criterion_05_stop_gradient():
    rng = np.random.default_rng(5)
    for _ in range(10):
        B = int(rng.integers(1, 9))
        res = align.loss_distill(rng.normal(size=(B, 6)), rng.normal(size=(B, 6)), 0.2)
        assert res.grad_teacher.tobytes() == np.zeros((B, 6)).tobytes()
    data = tiny_data()
    state = init_state(tiny_config(task="DR"), data)
    for epoch in range(1, 11):
        b = epoch_batches(state, data, epoch)[0]
        out = total_loss(state, b, data)
        assert out.align > 0 and out.grads["H0"].tobytes() == np.zeros_like(state.params["H0"]).tobytes()


def test_criterion_06_closed_form_losses():
    rng = np.random.default_rng(6)
    h, e = rng.normal(size=(1, 4)), rng.normal(size=(1, 4))
    assert abs(align.loss_distill(h, e, 0.2).value) <= 1e-12
    assert abs(align.loss_seq(h, e, 0.2).value) <= 1e-12
    h2, e2 = np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([[3.0, 1.0], [1.0, 3.0]])
    assert abs(align.loss_distill(h2, e2, 0.2).value - math.log(2)) <= 1e-12
    for V in (2, 7, 113):
        val, _ = generation_loss(np.full((3, 4, V), 0.37), rng.integers(0, V, size=(3, 4)))
        assert abs(val - math.log(V)) <= 1e-12


def _apply_sign_rule(C):
    idx = np.argmax(np.abs(C), axis=1)
    return C * np.sign(C[np.arange(len(C)), idx])[:, None]


def test_criterion_07_pca_oracle():
    rng = np.random.default_rng(7)
    for _ in range(20):
        n, D = int(rng.integers(12, 60)), int(rng.integers(3, 20))
        d_m = int(rng.integers(1, min(n - 1, D) + 1))
        # distinct, well-separated spectrum so the oracle's ordering is unambiguous
        S = rng.normal(size=(n, D)) * np.linspace(3.0, 0.3, D) + rng.normal(size=D)
        m = pca_fit(S, d_m)
        comps, var = eig_oracle(S, d_m)
        comps = _apply_sign_rule(comps)
        assert np.max(np.abs(m.components - comps)) < 1e-8
        np.testing.assert_allclose(m.explained_variance, var, rtol=0, atol=1e-8)
        assert np.max(np.abs(pca_transform(m, S) - (S - S.mean(0)) @ comps.T)) < 1e-8


def _random_model(rng, V, d=4):
    params = init_backbone(V, d, 6, 8, rng)
    for k in params:
        params[k] = rng.normal(0, 1.0, params[k].shape)
    X = rng.normal(size=(1, 3, d))
    mask = np.ones((1, 3), bool)
    memory, _ = encode(params, X, mask)
    return model_step_fn(params, memory, mask, 0)


def test_criterion_08_beam_exactness():
    rng = np.random.default_rng(8)
    for _ in range(100):
        step = _random_model(rng, 6)
        g_seq, g_score = greedy_decode(step, 3, eos_id=1)
        ((b_seq, b_score),) = beam_search(step, 1, 3, eos_id=1)
        assert b_seq == g_seq and abs(b_score - g_score) < 1e-12
    V = 5
    step = _random_model(rng, V)
    out = beam_search(step, V * V, 2)
    first = step([[]])[0]
    brute = sorted((([a, b], first[a] + step([[a]])[0][b]) for a in range(V) for b in range(V)),
                   key=lambda h: (-h[1], tuple(h[0])))
    assert [s for s, _ in out] == [s for s, _ in brute]
    assert np.allclose([x for _, x in out], [x for _, x in brute], atol=1e-12)
    # DR-constrained decoding over 1 + 99 candidate ids
    tok = Tokenizer()
    for _ in range(5):
        cands = rng.choice(500, size=100, replace=False).tolist()
        trie = TokenTrie(tok.item_target(i) for i in cands)
        step = _random_model(rng, tok.size)
        for seq, _ in beam_search(step, 20, 6, tok.eos_id, trie):
            assert tok.decode_item(seq) in cands


def test_criterion_09_metric_hand_checks():
    assert hit_at_k([3, 1], 3, 5) == 1 and ndcg_at_k([3, 1], 3, 5) == 1.0
    assert ndcg_at_k([0, 1, 3, 4], 3, 5) == 0.5
    assert hit_at_k(list(range(20)), 15, 10) == 0 and ndcg_at_k(list(range(20)), 15, 10) == 0.0
    rankings = {0: [7, 1, 2], 1: [1, 2, 7], 2: [1, 2, 3, 4, 5, 6, 7, 8], 3: [0, 7], 4: [1, 2, 3]}
    out = evaluate_rankings(rankings, {u: 7 for u in rankings})
    inv_log3 = 0.6309297535714574
    assert abs(out["H@5"] - 0.6) <= 1e-12 and abs(out["H@10"] - 0.8) <= 1e-12
    assert abs(out["N@5"] - (1.5 + inv_log3) / 5) <= 1e-12
    assert abs(out["N@10"] - (1.5 + 1 / 3 + inv_log3) / 5) <= 1e-12


def planted_comparison(seed: int) -> tuple[float, float]:
    pd = generate_planted(SynthConfig(noise=0.2, seed=seed))
    data = TrainData.from_dataset(pd.dataset, pd.S_u, pd.S_v, views=pd.views)
    scores = []
    for delta in ({}, {"no_seq_loss": True}):
        cfg = TrainConfig(task="SR", seed=seed, **PLANTED_TRAIN, **delta)
        scores.append(evaluate_state(fit(cfg, data).state, data, "test")["H@10"])
    return scores[0], scores[1]


def test_criterion_10_planted_end_to_end():
    t0 = time.perf_counter()
    for seed in PLANTED_SEEDS:
        pd = generate_planted(SynthConfig(noise=0.0, seed=seed))
        assert group_recovery_score(build_user_relation(pd.S_u, 10), pd.user_groups) == 1.0
    xs, ys = [], []
    for noise in (0.0, 0.25, 0.5, 0.75, 1.0):
        for seed in PLANTED_SEEDS:
            pd = generate_planted(SynthConfig(noise=noise, seed=seed))
            xs.append(noise)
            ys.append(group_recovery_score(build_user_relation(pd.S_u, 10), pd.user_groups))
    rho, pval = stats.spearmanr(xs, ys)
    assert rho < 0 and pval < 0.05
    results = [planted_comparison(seed) for seed in PLANTED_SEEDS]
    wins = sum(full > ablated for full, ablated in results)
    print(f"\nplanted SR H@10 (full, w/o L_S) per seed: {results}; full wins {wins}/{len(results)}")
    elapsed = time.perf_counter() - t0
    assert elapsed < 600, f"planted pipeline took {elapsed:.0f}s"
    assert wins > len(results) // 2, f"full beat w/o L_S on {wins}/{len(results)} seeds: {results}"


def test_criterion_11_determinism(tmp_path):
    syn = tmp_path / "syn"
    assert main(["synth", "--n-users", "20", "--n-items", "15", "--n-groups", "2", "--items-per-user", "6",
                 "--embed-dim", "8", "--out", str(syn)]) == 0
    cfg = {"data": {"interactions": str(syn / "interactions.txt"), "user_emb": str(syn / "user_emb.bin"),
                    "item_emb": str(syn / "item_emb.bin")},
           "train": tiny_config(max_epochs=2).to_dict()}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    for run in ("a", "b"):
        assert main(["--config", str(path), "train", "--out", str(tmp_path / run)]) == 0
        assert main(["--config", str(path), "eval", "--checkpoint", str(tmp_path / run / "checkpoint.bin"),
                     "--out", str(tmp_path / run)]) == 0
    for name in ("checkpoint.bin", "metrics.csv", "history.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_criterion_12_protocol_fidelity(monkeypatch):
    cfg = TrainConfig()
    assert cfg.n_neg == 99 and cfg.batch_size == 64 and cfg.patience == 5
    pd = generate_planted(SynthConfig(n_items=200, seed=0))
    ds = pd.dataset
    splits = split_leave_one_out(ds)
    for c in sample_dr_candidates(ds, splits, cfg.n_neg, 0):
        assert len(c.items) == 100 and len(set(c.items)) == 100
        assert c.positive == splits.test[c.user]
        assert not set(c.negatives) & set(ds.sequences[c.user])
    # the DR evaluation path hands exactly 100 candidates to the ranker
    import isrf.evaluate as ev
    seen = []

    def spy(state, data, stage, beam):
        return lambda u, h, cands: seen.append(len(cands)) or list(cands)
    monkeypatch.setattr(ev, "model_ranker", spy)
    data = TrainData.from_dataset(ds, pd.S_u, pd.S_v)
    state = init_state(TrainConfig(task="DR", d=8, d_m=4, n_prompts=2), data)
    ev.evaluate_state(state, data)
    assert seen and set(seen) == {100}
