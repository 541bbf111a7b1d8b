"""Planted-group synthetic data: grouped users/items, semantic vectors and interactions."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .data import InteractionDataset
from .graphs import NormalizedGraph


@dataclass(frozen=True)
class SynthConfig:
    n_users: int = 200
    n_items: int = 100
    n_groups: int = 4
    items_per_user: int = 10
    noise: float = 0.2
    embed_dim: int = 32
    seed: int = 0
    # inverse temperature of the user-item affinity softmax used for sampling
    sharpness: float = 10.0

    def __post_init__(self):
        if not 1 <= self.n_groups <= min(self.n_users, self.n_items):
            raise ValueError("n_groups must be in [1, min(n_users, n_items)]")
        if not 0.0 <= self.noise <= 1.0:
            raise ValueError("noise must lie in [0, 1]")
        if self.embed_dim < self.n_groups:
            raise ValueError("embed_dim must be >= n_groups for orthogonal centroids")
        if self.items_per_user > self.n_items:
            raise ValueError("items_per_user exceeds n_items")


@dataclass
class PlantedData:
    dataset: InteractionDataset
    S_u: np.ndarray
    S_v: np.ndarray
    user_groups: np.ndarray
    item_groups: np.ndarray
    # independent redraws standing in for positive-only / negative-only descriptions
    views: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def item_categories(self) -> list[str]:
        return [f"group{g}" for g in self.item_groups]


def _normalize(X):
    return X / np.linalg.norm(X, axis=1, keepdims=True)


def _mix(centroids, groups, noise, rng):
    rand = _normalize(rng.normal(size=(len(groups), centroids.shape[1])))
    return _normalize((1.0 - noise) * centroids[groups] + noise * rand)


def generate_planted(cfg: SynthConfig) -> PlantedData:
    rng = np.random.default_rng(cfg.seed)
    q, _ = np.linalg.qr(rng.normal(size=(cfg.embed_dim, cfg.n_groups)))
    centroids = q.T  # orthonormal rows
    user_groups = np.arange(cfg.n_users) % cfg.n_groups
    item_groups = np.arange(cfg.n_items) % cfg.n_groups
    S_u = _mix(centroids, user_groups, cfg.noise, rng)
    S_v = _mix(centroids, item_groups, cfg.noise, rng)

    logits = cfg.sharpness * (S_u @ S_v.T)
    sequences = []
    for u in range(cfg.n_users):
        # Gumbel top-k == sequential sampling without replacement from the softmax
        g = logits[u] - np.log(-np.log(rng.uniform(size=cfg.n_items)))
        sequences.append([int(i) for i in np.argsort(-g, kind="stable")[:cfg.items_per_user]])

    views = {
        "user_pos": _mix(centroids, user_groups, cfg.noise, rng),
        "user_neg": _mix(centroids, user_groups, cfg.noise, rng),
        "item_pos": _mix(centroids, item_groups, cfg.noise, rng),
        "item_neg": _mix(centroids, item_groups, cfg.noise, rng),
    }
    ds = InteractionDataset(sequences, [f"u{u}" for u in range(cfg.n_users)],
                            [f"i{i}" for i in range(cfg.n_items)])
    return PlantedData(ds, S_u, S_v, user_groups, item_groups, views)


def group_recovery_score(graph: NormalizedGraph, truth: np.ndarray) -> float:
    """Fraction of graph edges joining two users of the same planted group."""
    m = sp.coo_matrix(graph.matrix)
    rows, cols = m.row, m.col
    if graph.symmetrized:
        keep = rows < cols
        rows, cols = rows[keep], cols[keep]
    else:
        keep = rows != cols
        rows, cols = rows[keep], cols[keep]
    if len(rows) == 0:
        return float("nan")
    return float(np.mean(truth[rows] == truth[cols]))
