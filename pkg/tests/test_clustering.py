import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meow.clustering import (THETA_MAX, THETA_MIN, Clustering, ClusterModel, build_cluster_model, concentration,
                             kmeans)
from meow.graph import SyntheticConfig, generate_synthetic, synthetic_metapaths
from meow.trainer import TrainConfig, Trainer


def test_k_equals_n_and_k_one():
    X = np.random.default_rng(0).standard_normal((7, 3))
    r = kmeans(X, 7, seed=1)
    assert r.inertia == 0.0 and len(set(r.assignments.tolist())) == 7
    r1 = kmeans(X, 1, seed=1)
    assert np.allclose(r1.centroids[0], X.mean(axis=0), rtol=0, atol=1e-15)
    with pytest.raises(ValueError, match="exceeds"):
        kmeans(X, 8, seed=0)


def test_planted_blobs_recovered():
    rng = np.random.default_rng(2)
    for trial in range(20):
        truth = rng.integers(0, 2, 40)
        truth[:2] = [0, 1]
        X = np.where(truth[:, None] == 1, 100.0, -100.0) + rng.standard_normal((40, 2))
        a = kmeans(X, 2, seed=trial).assignments
        assert np.array_equal(a, truth) or np.array_equal(a, 1 - truth)


def test_pure_function_of_inputs():
    X = np.random.default_rng(3).standard_normal((30, 4))
    a, b = kmeans(X, 4, 5, 50), kmeans(X, 4, 5, 50)
    assert np.array_equal(a.assignments, b.assignments) and np.array_equal(a.centroids, b.centroids)


def test_no_empty_clusters_with_duplicates():
    X = np.zeros((6, 2))
    X[5] = 1.0
    r = kmeans(X, 3, seed=0)
    assert np.all(np.bincount(r.assignments, minlength=3) > 0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6))
def test_inertia_non_increasing_and_centroids_are_means(seed, k):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((int(rng.integers(k, 40)), 3))
    r = kmeans(X, k, seed, max_iters=100)
    assert all(b <= a + 1e-9 for a, b in zip(r.history, r.history[1:]))
    for c in range(k):
        assert np.allclose(r.centroids[c], X[r.assignments == c].mean(axis=0), rtol=0, atol=1e-12)


def _model(*assignments):
    cl = [Clustering(int(max(a)) + 1, np.asarray(a), None, None, 0.0) for a in assignments]
    return ClusterModel(cl)


def test_hard_weight_examples():
    m = _model([0, 0, 1], [0, 1, 1])
    g = m.hard_weights()
    assert np.all(np.diag(g) == 0)
    assert g[0, 2] == 2 == m.hard_weight(0, 2)
    assert g[0, 1] == 1 and g[1, 2] == 1


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_hard_weights_match_recount(seed):
    rng = np.random.default_rng(seed)
    n, M = int(rng.integers(2, 15)), int(rng.integers(1, 4))
    m = _model(*[rng.integers(0, 4, n) for _ in range(M)])
    g = m.hard_weights()
    assert np.array_equal(g, g.T) and g.min() >= 0 and g.max() <= M
    for i in range(n):
        for j in range(n):
            count = 0
            for c in m.clusterings:
                if c.assignments[i] != c.assignments[j]:
                    count += 1
            assert g[i, j] == count


def test_concentration_examples():
    c = np.zeros(2)
    assert concentration(np.zeros((3, 2)), c) == THETA_MIN
    members = np.array([[1.0, 0.0], [0.0, -1.0]])
    assert concentration(members, c, alpha=5) == pytest.approx(2 / (2 * np.log(7)), abs=1e-15)
    assert concentration(members, c) == pytest.approx(0.5139, abs=1e-4)
    raw = concentration(members, c, clamp=False)
    assert concentration(members * 3.5, c, clamp=False) == pytest.approx(3.5 * raw, rel=1e-14)
    assert concentration(members * 1e6, c) == THETA_MAX
    with pytest.raises(ValueError):
        concentration(np.zeros((0, 2)), c)
    with pytest.raises(ValueError):
        concentration(members, c, alpha=0)


def test_cluster_model_invariants():
    Z = np.random.default_rng(4).standard_normal((25, 3))
    m = build_cluster_model(Z, (3, 5), seed=0)
    assert m.M == 2
    for c in m.clusterings:
        assert np.all(np.bincount(c.assignments, minlength=c.k) > 0)
        assert np.all((c.theta >= THETA_MIN) & (c.theta <= THETA_MAX))


def _intra_class_distance(Z, labels):
    Z = Z / np.linalg.norm(Z, axis=1, keepdims=True)
    return np.mean([np.linalg.norm(Z[labels == c] - Z[labels == c].mean(axis=0), axis=1).mean()
                    for c in np.unique(labels)])


@pytest.mark.slow
def test_prototype_term_tightens_classes():
    # equal epoch budgets; compactness measured where the prototype term acts (projected coarse view)
    syn = SyntheticConfig()
    g = generate_synthetic(syn, 0)
    spread = {}
    for lam in (1.0, 0.0):
        tr = Trainer(g, synthetic_metapaths(syn), TrainConfig(seed=0, lam=lam, patience=10**6, max_epochs=150))
        tr.run()
        spread[lam] = _intra_class_distance(tr.views().zc_bar.value, g.labels)
    assert spread[1.0] < spread[0.0]
