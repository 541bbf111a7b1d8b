"""Independent reference implementations used by unit and acceptance tests."""

import numpy as np


def dense_norm(A):
    deg = A.sum(axis=1)
    s = np.where(deg > 0, 1 / np.sqrt(np.where(deg > 0, deg, 1)), 0.0)
    return s[:, None] * A * s[None, :]


def dense_propagate(A, E0, L):
    N = dense_norm(A)
    acc, cur = E0.copy(), E0.copy()
    for _ in range(L):
        cur = N @ cur
        acc += cur
    return acc / (L + 1)


def random_adjacency(rng, n, p):
    A = (rng.random((n, n)) < p).astype(float)
    A = np.triu(A, 1)
    return A + A.T


def brute_topk(S, k):
    n = len(S)
    picks = []
    for i in range(n):
        scored = []
        for j in range(n):
            if j == i:
                continue
            ni, nj = np.sqrt(np.sum(S[i] ** 2)), np.sqrt(np.sum(S[j] ** 2))
            c = 0.0 if ni == 0 or nj == 0 else float(np.dot(S[i] / ni, S[j] / nj))
            scored.append((-c, j))
        picks.append([j for _, j in sorted(scored)[:k]])
    return picks


def eig_oracle(S, d_m):
    X = S - S.mean(axis=0)
    vals, vecs = np.linalg.eig(X.T @ X)  # general solver, not the symmetric one used in pca_fit
    order = np.argsort(-vals.real)[:d_m]
    comps = vecs[:, order].real.T
    comps /= np.linalg.norm(comps, axis=1, keepdims=True)
    return comps, vals.real[order] / (len(S) - 1)
