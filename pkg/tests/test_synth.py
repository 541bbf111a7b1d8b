import numpy as np
import pytest
import scipy.sparse as sp
from scipy import stats

from isrf.graphs import build_user_relation, normalize_adjacency
from isrf.synth import SynthConfig, generate_planted, group_recovery_score

NOISE_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)


def test_noise_zero_cosines():
    p = generate_planted(SynthConfig(n_users=20, n_items=10, n_groups=2, noise=0.0, embed_dim=8))
    C = p.S_u @ p.S_u.T
    same = p.user_groups[:, None] == p.user_groups[None, :]
    np.testing.assert_allclose(C[same], 1.0, atol=1e-12)
    np.testing.assert_allclose(C[~same], 0.0, atol=1e-12)


def test_rows_unit_norm_and_round_robin():
    p = generate_planted(SynthConfig(seed=3))
    np.testing.assert_allclose(np.linalg.norm(p.S_u, axis=1), 1.0)
    np.testing.assert_allclose(np.linalg.norm(p.S_v, axis=1), 1.0)
    assert np.bincount(p.user_groups).tolist() == [50] * 4
    assert p.item_categories[:5] == ["group0", "group1", "group2", "group3", "group0"]


def test_sequences_distinct_items():
    p = generate_planted(SynthConfig(seed=1))
    for seq in p.dataset.sequences:
        assert len(seq) == 10 and len(set(seq)) == 10


def test_interactions_follow_groups():
    p = generate_planted(SynthConfig(noise=0.0, seed=2))
    ig = np.array([p.item_groups[i] for s in p.dataset.sequences for i in s])
    ug = np.repeat(p.user_groups, 10)
    assert np.mean(ig == ug) > 0.9


def test_deterministic_per_seed():
    a, b = generate_planted(SynthConfig(seed=9)), generate_planted(SynthConfig(seed=9))
    assert a.dataset.sequences == b.dataset.sequences
    assert a.S_u.tobytes() == b.S_u.tobytes() and a.S_v.tobytes() == b.S_v.tobytes()
    for k in a.views:
        assert a.views[k].tobytes() == b.views[k].tobytes()
    assert generate_planted(SynthConfig(seed=10)).S_u.tobytes() != a.S_u.tobytes()


@pytest.mark.parametrize("kw", [dict(n_groups=0), dict(n_groups=101), dict(noise=1.5), dict(noise=-0.1),
                                dict(embed_dim=2), dict(items_per_user=101)])
def test_invalid_config(kw):
    with pytest.raises(ValueError):
        SynthConfig(**kw)


def test_purity_noise_zero_is_one():
    for seed in range(5):
        p = generate_planted(SynthConfig(noise=0.0, seed=seed))
        assert group_recovery_score(build_user_relation(p.S_u, 10), p.user_groups) == 1.0


def test_single_group_purity_one(rng):
    g = build_user_relation(rng.normal(size=(30, 5)), 4)
    assert group_recovery_score(g, np.zeros(30, dtype=int)) == 1.0


def test_random_graph_two_groups_binomial(rng):
    n = 200
    A = sp.triu(sp.random(n, n, density=0.05, random_state=rng, format="csr"), k=1)
    A = (A + A.T).tocsr()
    A.data[:] = 1.0
    g = normalize_adjacency(A, True)
    truth = np.arange(n) % 2
    m = A.nnz // 2
    purity = group_recovery_score(g, truth)
    # same-group probability for a random pair: (n/2 - 1) / (n - 1)
    p0 = (n / 2 - 1) / (n - 1)
    assert abs(purity - p0) < 3 * np.sqrt(p0 * (1 - p0) / m)


def test_noise_one_chance_level():
    vals, edges = [], []
    for seed in range(5):
        p = generate_planted(SynthConfig(noise=1.0, seed=seed))
        g = build_user_relation(p.S_u, 10)
        vals.append(group_recovery_score(g, p.user_groups))
        edges.append(g.nnz // 2)
    p0 = 49 / 199
    sigma = np.sqrt(p0 * (1 - p0) / np.sum(edges))
    assert abs(np.mean(vals) - p0) < 3 * sigma


def test_empty_graph_nan():
    g = build_user_relation(np.eye(3), 0)
    assert np.isnan(group_recovery_score(g, np.zeros(3, dtype=int)))


def purity_grid(seeds=range(5)):
    xs, ys = [], []
    for noise in NOISE_GRID:
        for seed in seeds:
            p = generate_planted(SynthConfig(noise=noise, seed=seed))
            xs.append(noise)
            ys.append(group_recovery_score(build_user_relation(p.S_u, 10), p.user_groups))
    return xs, ys


def test_purity_monotone_in_noise():
    xs, ys = purity_grid()
    rho, pval = stats.spearmanr(xs, ys)
    assert rho < 0 and pval < 0.05
