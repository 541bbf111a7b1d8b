"""PCA reduction of raw semantic embeddings and the two-layer adapter into model space."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .io import read_sections, write_sections


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (d_m, d_llm), orthonormal rows
    explained_variance: np.ndarray

    @property
    def n_components(self) -> int:
        return self.components.shape[0]

    def save(self, path: str | Path) -> None:
        write_sections(path, {"mean": self.mean[None, :], "components": self.components,
                              "explained_variance": self.explained_variance[None, :]},
                       meta={"kind": "pca", "space": "reduced"})

    @classmethod
    def load(cls, path: str | Path) -> "PcaModel":
        s, _ = read_sections(path)
        return cls(s["mean"][0], s["components"], s["explained_variance"][0])


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip each row so its largest-magnitude entry is positive (first one on ties)."""
    idx = np.argmax(np.abs(vectors), axis=1)
    signs = np.sign(vectors[np.arange(len(vectors)), idx])
    signs[signs == 0] = 1.0
    return vectors * signs[:, None]


def pca_fit(S: np.ndarray, d_m: int) -> PcaModel:
    S = np.asarray(S, dtype=np.float64)
    n, dim = S.shape
    if n < 2:
        raise ValueError("PCA needs at least 2 rows")
    if not 1 <= d_m <= min(n, dim):
        raise ValueError(f"d_m={d_m} must be in [1, min(rows, cols)={min(n, dim)}]")
    mean = S.mean(axis=0)
    X = S - mean
    cov = X.T @ X / (n - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:d_m]
    comps = _fix_signs(vecs[:, order].T)
    return PcaModel(mean, comps, np.clip(vals[order], 0.0, None))


def pca_transform(model: PcaModel, S: np.ndarray) -> np.ndarray:
    """Project onto the principal axes.  The result is read-only (frozen)."""
    S = np.asarray(S, dtype=np.float64)
    if S.shape[1] != model.mean.shape[0]:
        raise ValueError(f"expected {model.mean.shape[0]} columns, got {S.shape[1]}")
    out = (S - model.mean) @ model.components.T
    out.setflags(write=False)
    return out


def pca_inverse_transform(model: PcaModel, Z: np.ndarray) -> np.ndarray:
    return np.asarray(Z) @ model.components + model.mean


@dataclass
class AdapterParams:
    W1: np.ndarray  # (hidden, d_m)
    b1: np.ndarray  # (hidden,)
    W2: np.ndarray  # (d, hidden)
    b2: np.ndarray  # (d,)

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}


def adapter_hidden(d: int, d_m: int) -> int:
    if (d + d_m) % 2:
        raise ValueError(f"d + d_m must be even, got {d} + {d_m}")
    return (d + d_m) // 2


def init_adapter(d_m: int, d: int, rng: np.random.Generator) -> AdapterParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
    h = adapter_hidden(d, d_m)
    a1, a2 = 1.0 / np.sqrt(d_m), 1.0 / np.sqrt(h)
    return AdapterParams(rng.uniform(-a1, a1, (h, d_m)), rng.uniform(-a1, a1, h),
                         rng.uniform(-a2, a2, (d, h)), rng.uniform(-a2, a2, d))


def _act(x, activation):
    if activation == "none":
        return x
    if activation == "relu":
        return np.maximum(x, 0.0)
    raise ValueError(f"unknown activation {activation!r}")


def adapter_forward(S_red: np.ndarray, p: AdapterParams, activation: str = "none") -> np.ndarray:
    """Row-wise ``W2 (W1 s + b1) + b2``; ``activation`` optionally wraps the hidden layer."""
    if S_red.shape[1] != p.W1.shape[1]:
        raise ValueError(f"adapter expects {p.W1.shape[1]} input columns, got {S_red.shape[1]}")
    hid = _act(S_red @ p.W1.T + p.b1, activation)
    return hid @ p.W2.T + p.b2


def adapter_gradient(S_red: np.ndarray, p: AdapterParams, upstream: np.ndarray,
                     activation: str = "none") -> dict[str, np.ndarray]:
    """Gradients of ``sum(upstream * adapter_forward(S_red))`` w.r.t. the adapter parameters.

    The input matrix is frozen and gets no gradient.
    """
    if upstream.shape != (S_red.shape[0], p.W2.shape[0]):
        raise ValueError(f"upstream shape {upstream.shape} does not match output "
                         f"{(S_red.shape[0], p.W2.shape[0])}")
    pre = S_red @ p.W1.T + p.b1
    hid = _act(pre, activation)
    g_hid = upstream @ p.W2
    if activation == "relu":
        g_hid = g_hid * (pre > 0)
    return {"W1": g_hid.T @ S_red, "b1": g_hid.sum(axis=0),
            "W2": upstream.T @ hid, "b2": upstream.sum(axis=0)}
