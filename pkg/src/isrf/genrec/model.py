"""Minimal single-head encoder/decoder with whole-word input injection.

One encoder self-attention block, one decoder block (causal self-attention then
cross-attention), residual connections, learned positions and a linear output
head.  Everything is float64 numpy with explicit backward passes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tokenizer import TokenizedInput

ATTN_BLOCKS = ("enc", "dself", "dcross")
ATTN_MATS = ("Wq", "Wk", "Wv", "Wo")


def init_backbone(vocab_size: int, d: int, max_src: int, max_tgt: int,
                  rng: np.random.Generator) -> dict[str, np.ndarray]:
    std = 1.0 / np.sqrt(d)
    p = {"tok_emb": rng.normal(0.0, std, (vocab_size, d)),
         "enc_pos": rng.normal(0.0, 0.1 * std, (max_src, d)),
         "dec_pos": rng.normal(0.0, 0.1 * std, (max_tgt, d))}
    for blk in ATTN_BLOCKS:
        for m in ATTN_MATS:
            p[f"{blk}.{m}"] = rng.normal(0.0, std, (d, d))
    p["W_out"] = rng.normal(0.0, std, (d, vocab_size))
    p["b_out"] = np.zeros(vocab_size)
    return p


@dataclass
class SourceBatch:
    """Padded encoder layout: ``[tokens..., prompts..., pad...]`` per row."""

    tokens: np.ndarray      # (B, N) token ids; 0 on prompt/pad positions
    slots: np.ndarray       # (B, N) whole-word slot; 0 on prompt/pad positions
    prompt_idx: np.ndarray  # (B, N) soft-prompt row or -1
    mask: np.ndarray        # (B, N) bool

    @classmethod
    def build(cls, inputs: list[TokenizedInput], n_prompts: int) -> "SourceBatch":
        B = len(inputs)
        N = max(len(x.tokens) for x in inputs) + n_prompts
        tokens = np.zeros((B, N), dtype=np.int64)
        slots = np.zeros((B, N), dtype=np.int64)
        pidx = np.full((B, N), -1, dtype=np.int64)
        mask = np.zeros((B, N), dtype=bool)
        for b, x in enumerate(inputs):
            n = len(x.tokens)
            tokens[b, :n] = x.tokens
            slots[b, :n] = x.slots
            pidx[b, n:n + n_prompts] = np.arange(n_prompts)
            mask[b, :n + n_prompts] = True
        return cls(tokens, slots, pidx, mask)


def inject_inputs(X_emb: np.ndarray, P: np.ndarray, Z: list[int] | np.ndarray, table: np.ndarray,
                  beta: float) -> np.ndarray:
    """Single-sequence injection: ``concat(X_emb, P) + beta * table[concat(Z, 0...)]``."""
    Z = np.asarray(Z, dtype=np.int64)
    if len(Z) != len(X_emb):
        raise ValueError("Z must align with the token embeddings")
    if Z.size and (Z.min() < 0 or Z.max() >= len(table)):
        raise IndexError(f"slot index out of range for table of {len(table)} rows")
    Xp = np.concatenate([X_emb, P], axis=0)
    Zp = np.concatenate([Z, np.zeros(len(P), dtype=np.int64)])
    return Xp + beta * table[Zp]


def inject_batch(tok_emb: np.ndarray, P: np.ndarray, src: SourceBatch, table: np.ndarray,
                 beta: float) -> np.ndarray:
    if src.slots.max(initial=0) >= len(table):
        raise IndexError(f"slot index out of range for table of {len(table)} rows")
    is_prompt = src.prompt_idx >= 0
    base = np.where(is_prompt[..., None], P[np.maximum(src.prompt_idx, 0)], tok_emb[src.tokens])
    return (base + beta * table[src.slots]) * src.mask[..., None]


def inject_batch_backward(dX: np.ndarray, src: SourceBatch, beta: float, vocab_size: int,
                          n_prompts: int, table_rows: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return gradients for ``(tok_emb, P, table)``."""
    d = dX.shape[-1]
    dX = dX * src.mask[..., None]
    is_prompt = src.prompt_idx >= 0
    tok_sel = src.mask & ~is_prompt
    g_tok = np.zeros((vocab_size, d))
    np.add.at(g_tok, src.tokens[tok_sel], dX[tok_sel])
    g_P = np.zeros((n_prompts, d))
    np.add.at(g_P, src.prompt_idx[is_prompt], dX[is_prompt])
    g_table = np.zeros((table_rows, d))
    np.add.at(g_table, src.slots[src.mask], beta * dX[src.mask])
    return g_tok, g_P, g_table


def _softmax_masked(S: np.ndarray, mask: np.ndarray) -> np.ndarray:
    S = np.where(mask, S, -np.inf)
    m = np.max(S, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.where(mask, np.exp(S - m), 0.0)
    z = e.sum(axis=-1, keepdims=True)
    return e / np.where(z > 0, z, 1.0)


def attention_forward(Xq, Xkv, mask, W):
    d = Xq.shape[-1]
    Q, K, V = Xq @ W["Wq"], Xkv @ W["Wk"], Xkv @ W["Wv"]
    A = _softmax_masked(Q @ np.swapaxes(K, -1, -2) / np.sqrt(d), mask)
    C = A @ V
    return C @ W["Wo"], (Xq, Xkv, Q, K, V, A, C)


def _outer_sum(X, Y):
    """sum_b X[b].T @ Y[b] as one matmul."""
    return X.reshape(-1, X.shape[-1]).T @ Y.reshape(-1, Y.shape[-1])


def attention_backward(dO, cache, W):
    Xq, Xkv, Q, K, V, A, C = cache
    d = Xq.shape[-1]
    g = {"Wo": _outer_sum(C, dO)}
    dC = dO @ W["Wo"].T
    dA = dC @ np.swapaxes(V, -1, -2)
    dV = np.swapaxes(A, -1, -2) @ dC
    dS = A * (dA - np.sum(dA * A, axis=-1, keepdims=True)) / np.sqrt(d)
    dQ = dS @ K
    dK = np.swapaxes(dS, -1, -2) @ Q
    g["Wq"] = _outer_sum(Xq, dQ)
    g["Wk"] = _outer_sum(Xkv, dK)
    g["Wv"] = _outer_sum(Xkv, dV)
    dXq = dQ @ W["Wq"].T
    dXkv = dK @ W["Wk"].T + dV @ W["Wv"].T
    return dXq, dXkv, g


def _block(params, name):
    return {m: params[f"{name}.{m}"] for m in ATTN_MATS}


def encode(params, X_tilde: np.ndarray, src_mask: np.ndarray):
    N = X_tilde.shape[1]
    if X_tilde.shape[-1] != params["tok_emb"].shape[1]:
        raise ValueError("input width does not match model width")
    if N > len(params["enc_pos"]):
        raise ValueError(f"source length {N} exceeds max_src {len(params['enc_pos'])}")
    h0 = X_tilde + params["enc_pos"][:N]
    amask = np.broadcast_to(src_mask[:, None, :], (len(src_mask), N, N))
    a, cache = attention_forward(h0, h0, amask, _block(params, "enc"))
    return h0 + a, cache


def decode(params, memory: np.ndarray, src_mask: np.ndarray, y_in: np.ndarray,
           tgt_mask: np.ndarray | None = None):
    B, T = y_in.shape
    if T > len(params["dec_pos"]):
        raise ValueError(f"target length {T} exceeds max_tgt {len(params['dec_pos'])}")
    if tgt_mask is None:
        tgt_mask = np.ones((B, T), dtype=bool)
    d0 = params["tok_emb"][y_in] + params["dec_pos"][:T]
    causal = np.tril(np.ones((T, T), dtype=bool))[None] & tgt_mask[:, None, :]
    a1, c1 = attention_forward(d0, d0, causal, _block(params, "dself"))
    h1 = d0 + a1
    xmask = np.broadcast_to(src_mask[:, None, :], (B, T, src_mask.shape[1]))
    a2, c2 = attention_forward(h1, memory, xmask, _block(params, "dcross"))
    h2 = h1 + a2
    logits = h2 @ params["W_out"] + params["b_out"]
    return logits, (y_in, c1, c2, h2)


def seq_model_forward(params, X_tilde, src_mask, y_in, tgt_mask=None):
    """Logits ``(B, T, vocab)`` plus a cache for :func:`seq_model_backward`."""
    memory, enc_cache = encode(params, X_tilde, src_mask)
    logits, dec_cache = decode(params, memory, src_mask, y_in, tgt_mask)
    return logits, (enc_cache, dec_cache)


def seq_model_backward(params, cache, dlogits):
    """Gradients for every backbone tensor plus ``d X_tilde``."""
    enc_cache, (y_in, c1, c2, h2) = cache
    T = y_in.shape[1]
    g = {k: np.zeros_like(v) for k, v in params.items()}
    g["W_out"] = _outer_sum(h2, dlogits)
    g["b_out"] = dlogits.sum(axis=(0, 1))
    dh2 = dlogits @ params["W_out"].T
    dh1, dmem, gx = attention_backward(dh2, c2, _block(params, "dcross"))
    dh1 = dh1 + dh2
    for m, v in gx.items():
        g[f"dcross.{m}"] = v
    dq, dkv, gs = attention_backward(dh1, c1, _block(params, "dself"))
    dd0 = dh1 + dq + dkv
    for m, v in gs.items():
        g[f"dself.{m}"] = v
    g["dec_pos"][:T] = dd0.sum(axis=0)
    np.add.at(g["tok_emb"], y_in, dd0)
    dq, dkv, ge = attention_backward(dmem, enc_cache, _block(params, "enc"))
    dh0 = dmem + dq + dkv
    for m, v in ge.items():
        g[f"enc.{m}"] = v
    N = dh0.shape[1]
    g["enc_pos"][:N] = dh0.sum(axis=0)
    return g, dh0


def generation_loss(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray | None = None):
    """Mean over sequences of the per-sequence mean token NLL; returns ``(value, dlogits)``."""
    B, T, _ = logits.shape
    if T == 0 or B == 0:
        raise ValueError("empty target")
    if mask is None:
        mask = np.ones((B, T), dtype=bool)
    lengths = mask.sum(axis=1)
    if (lengths == 0).any():
        raise ValueError("empty target sequence")
    m = logits.max(axis=-1, keepdims=True)
    logz = m[..., 0] + np.log(np.exp(logits - m).sum(axis=-1))
    picked = np.take_along_axis(logits, targets[..., None], axis=-1)[..., 0]
    nll = (logz - picked) * mask
    value = float(np.mean(nll.sum(axis=1) / lengths))
    probs = np.exp(logits - logz[..., None])
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
    w = (mask / lengths[:, None] / B)[..., None]
    return value, (probs - onehot) * w


def target_batch(targets: list[list[int]], bos_id: int, pad_id: int):
    """Teacher-forcing arrays ``(y_in, y_out, mask)`` for a list of target sequences."""
    B, T = len(targets), max(len(t) for t in targets)
    y_in = np.full((B, T), pad_id, dtype=np.int64)
    y_out = np.full((B, T), pad_id, dtype=np.int64)
    mask = np.zeros((B, T), dtype=bool)
    for b, t in enumerate(targets):
        y_out[b, :len(t)] = t
        y_in[b, 0] = bos_id
        y_in[b, 1:len(t)] = t[:-1]
        mask[b, :len(t)] = True
    return y_in, y_out, mask
