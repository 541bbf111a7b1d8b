"""Normalized interaction / user-relation graphs and LightGCN-style propagation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp


@dataclass(frozen=True)
class NormalizedGraph:
    """Sparse ``D^-1/2 A D^-1/2`` (or its directed row/column variant) on ``n`` nodes."""

    matrix: sp.csr_matrix
    degree: np.ndarray
    symmetrized: bool = True
    report: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def nnz(self) -> int:
        return self.matrix.nnz

    def neighbors(self, i: int) -> list[int]:
        m = self.matrix
        return m.indices[m.indptr[i]:m.indptr[i + 1]].tolist()

    def save(self, path: str | Path) -> None:
        m = self.matrix
        header = {"n": self.n, "nnz": self.nnz, "symmetrized": self.symmetrized}
        with open(path, "wb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
            fh.write(np.asarray(m.indptr, dtype="<i8").tobytes())
            fh.write(np.asarray(m.indices, dtype="<i8").tobytes())
            fh.write(np.asarray(m.data, dtype="<f8").tobytes())
            fh.write(np.asarray(self.degree, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "NormalizedGraph":
        with open(path, "rb") as fh:
            header = json.loads(fh.readline())
            buf = fh.read()
        n, nnz = header["n"], header["nnz"]
        off = 0

        def take(count, dtype):
            nonlocal off
            size = count * 8
            arr = np.frombuffer(buf[off:off + size], dtype=dtype)
            off += size
            return arr

        indptr = take(n + 1, "<i8")
        indices = take(nnz, "<i8")
        data = take(nnz, "<f8")
        degree = take(n, "<f8")
        m = sp.csr_matrix((data.copy(), indices.copy(), indptr.copy()), shape=(n, n))
        return cls(m, degree.copy(), header["symmetrized"])


def _inv_sqrt(deg: np.ndarray) -> np.ndarray:
    out = np.zeros_like(deg, dtype=np.float64)
    nz = deg > 0
    out[nz] = 1.0 / np.sqrt(deg[nz])
    return out


def normalize_adjacency(adj: sp.spmatrix, symmetric: bool = True) -> NormalizedGraph:
    """Binary adjacency -> normalized graph.  Isolated nodes get weight 0 (0^-1/2 := 0)."""
    a = sp.csr_matrix(adj, dtype=np.float64)
    a.data[:] = 1.0
    a.sum_duplicates()
    a.sort_indices()
    if symmetric:
        deg = np.asarray(a.sum(axis=1)).ravel()
        s = _inv_sqrt(deg)
        norm = sp.diags(s) @ a @ sp.diags(s)
    else:
        deg = np.asarray(a.sum(axis=1)).ravel()
        s_out = _inv_sqrt(deg)
        s_in = _inv_sqrt(np.asarray(a.sum(axis=0)).ravel())
        norm = sp.diags(s_out) @ a @ sp.diags(s_in)
    norm = sp.csr_matrix(norm)
    norm.sort_indices()
    return NormalizedGraph(norm, deg, symmetric)


def build_interaction_graph(sequences: list[list[int]], n_users: int, n_items: int) -> NormalizedGraph:
    """Bipartite user-item graph, users first; repeated interactions collapse to one edge."""
    if n_users + n_items == 0:
        raise ValueError("empty dataset")
    pairs = {(u, n_users + i) for u, seq in enumerate(sequences) for i in seq}
    rows = [p[0] for p in pairs] + [p[1] for p in pairs]
    cols = [p[1] for p in pairs] + [p[0] for p in pairs]
    n = n_users + n_items
    adj = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    return normalize_adjacency(adj)


@dataclass
class PropagationResult:
    layers: list[np.ndarray]
    averaged: np.ndarray


def lightgcn_propagate(g: NormalizedGraph, E0: np.ndarray, L: int) -> PropagationResult:
    if E0.shape[0] != g.n:
        raise ValueError(f"embedding has {E0.shape[0]} rows, graph has {g.n} nodes")
    layers = [np.asarray(E0, dtype=np.float64)]
    for _ in range(L):
        layers.append(g.matrix @ layers[-1])
    return PropagationResult(layers, sum(layers) / (L + 1))


def propagate_backward(g: NormalizedGraph, upstream: np.ndarray, L: int) -> np.ndarray:
    """Gradient of ``sum(upstream * averaged)`` w.r.t. the layer-0 input."""
    mt = g.matrix.T.tocsr()
    acc = np.array(upstream, dtype=np.float64)
    cur = acc
    for _ in range(L):
        cur = mt @ cur
        acc = acc + cur
    return acc / (L + 1)


def cosine_matrix(S: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pairwise cosine; rows with zero norm have similarity 0 to everything."""
    S = np.asarray(S, dtype=np.float64)
    norms = np.linalg.norm(S, axis=1)
    zero = norms == 0
    unit = np.divide(S, norms[:, None], out=np.zeros_like(S), where=~zero[:, None])
    # BLAS may round identical rows differently by position; computing on unique rows keeps
    # duplicated rows bitwise tied so the index tie rule applies
    uniq, inv = np.unique(unit, axis=0, return_inverse=True)
    inv = inv.ravel()
    return (uniq @ uniq.T)[np.ix_(inv, inv)], zero


def topk_neighbors(S: np.ndarray, k: int) -> list[list[int]]:
    """For every row, the ``k`` most cosine-similar other rows; ties go to the smaller index."""
    n = S.shape[0]
    if k < 0 or (n > 0 and k >= n):
        raise ValueError(f"k={k} must satisfy 0 <= k < n_users={n}")
    sim, _ = cosine_matrix(S)
    idx = np.arange(n)
    picks = []
    for i in range(n):
        row = sim[i]
        order = np.lexsort((idx, -row))
        picks.append([int(j) for j in order if j != i][:k])
    return picks


def build_user_relation(S_u: np.ndarray, k: int, symmetrize: str = "union") -> NormalizedGraph:
    n = S_u.shape[0]
    picks = topk_neighbors(S_u, k)
    _, zero = cosine_matrix(S_u)
    rows = [i for i, js in enumerate(picks) for _ in js]
    cols = [j for js in picks for j in js]
    adj = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n)).tocsr()
    if symmetrize == "union":
        adj = adj + adj.T
        g = normalize_adjacency(adj, symmetric=True)
    elif symmetrize == "none":
        g = normalize_adjacency(adj, symmetric=False)
    else:
        raise ValueError(f"unknown symmetrize mode {symmetrize!r}")
    g.report.update({"k": k, "zero_norm_rows": np.flatnonzero(zero).tolist(), "picks": picks})
    return g


def propagate_user_graph(g: NormalizedGraph, H0: np.ndarray, L_prime: int) -> PropagationResult:
    return lightgcn_propagate(g, H0, L_prime)
