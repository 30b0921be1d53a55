import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meow.autodiff import DiffMatrix, Tape, constant, fd_check, init_params
from meow.clustering import Clustering, ClusterModel
from meow.model import ModelParams, adaptive_weights
from meow.objective import (LossConfig, analytic_gradients, infonce_terms, loss_ada, prototype_terms,
                            prototypical_loss, total_loss_meow, weighted_infonce, write_gradient_report)
from oracles import plain_infonce


def _loss(Zc, Zf, w, tau=0.5):
    return weighted_infonce(Tape(), constant(Zc), constant(Zf), w, LossConfig(tau=tau)).item()


def test_equal_similarities_give_zero_and_ln2():
    # anchor 0 with positive 0 and one negative 1, same similarity s
    Zc = np.array([[1.0, 0.0]])
    Zf = np.array([[0.3, 1.0], [0.3, -1.0]])
    # weight only the negative in the denominator
    assert _loss(Zc, Zf, np.array([[0.0, 1.0]])) == pytest.approx(0.0, abs=1e-15)
    assert _loss(Zc, Zf, np.array([[0.0, 2.0]])) == pytest.approx(math.log(2), abs=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 2.0))
def test_unit_weights_match_plain_infonce(seed, tau):
    rng = np.random.default_rng(seed)
    Zc, Zf = rng.standard_normal((8, 4)), rng.standard_normal((8, 4))
    assert abs(_loss(Zc, Zf, np.ones((8, 8)), tau) - plain_infonce(Zc, Zf, tau)) <= 1e-12


def test_permutation_invariance():
    rng = np.random.default_rng(1)
    Zc, Zf = rng.standard_normal((10, 3)), rng.standard_normal((10, 3))
    perm = rng.permutation(10)
    assert _loss(Zc, Zf, np.ones((10, 10))) == pytest.approx(_loss(Zc[perm], Zf[perm], np.ones((10, 10))), abs=1e-13)


def test_errors():
    Z = np.eye(2)
    with pytest.raises(ValueError, match="negative weight"):
        _loss(Z, Z, -np.ones((2, 2)))
    with pytest.raises(ValueError, match="temperature"):
        LossConfig(tau=0.0)
    with pytest.raises(ValueError):
        LossConfig(weight_mode="bogus")


def test_denominator_floor_keeps_isolated_anchor_finite():
    Z = np.eye(2)
    val = _loss(Z, Z, np.zeros((2, 2)))
    assert np.isfinite(val) and val == pytest.approx(math.log(1e-12) - 1 / 0.5, rel=1e-12)


def _clusters(assignments, centroids, theta):
    k = len(centroids)
    return Clustering(k, np.asarray(assignments), np.asarray(centroids, float), np.asarray(theta, float), 0.0)


def test_prototype_single_cluster_and_two_equal():
    Z = np.random.default_rng(2).standard_normal((4, 2))
    one = ClusterModel([_clusters([0] * 4, [[0.5, 0.5]], [0.3])] * 2)
    assert prototypical_loss(Tape(), constant(Z), one).item() == 0.0
    Z2 = np.array([[1.0, 0.0], [1.0, 0.0]])
    two = ClusterModel([_clusters([0, 1], [[0.0, 1.0], [0.0, -1.0]], [0.7, 0.7])])
    terms = prototype_terms(Tape(), constant(Z2), two).value.ravel()
    assert np.allclose(terms, math.log(2), rtol=0, atol=1e-15)


def test_prototype_hand_built_three_clusters():
    Z = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]])
    C = np.array([[1.0, 0.2], [0.1, 1.0], [-0.5, -0.5]])
    theta = np.array([0.5, 1.0, 2.0])
    assign = [0, 1, 2]
    m = ClusterModel([_clusters(assign, C, theta)])
    got = prototypical_loss(Tape(), constant(Z), m).item()
    ref = 0.0
    for i in range(3):
        logits = [float(Z[i] @ C[j]) / theta[j] for j in range(3)]
        ref += -logits[assign[i]] + math.log(sum(math.exp(v) for v in logits))
    assert got == pytest.approx(ref / 3, abs=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_prototype_terms_non_negative(seed):
    rng = np.random.default_rng(seed)
    n, k = 12, 3
    assign = np.concatenate([np.arange(k), rng.integers(0, k, n - k)])
    m = ClusterModel([_clusters(assign, rng.standard_normal((k, 4)), rng.uniform(1e-3, 10, k))])
    assert np.all(prototype_terms(Tape(), constant(rng.standard_normal((n, 4))), m).value >= 0)


def test_prototype_empty_cluster_rejected():
    m = ClusterModel([_clusters([0, 0], [[1.0], [2.0]], [1.0, 1.0])])
    with pytest.raises(ValueError, match="empty"):
        prototypical_loss(Tape(), constant(np.ones((2, 1))), m)


def test_total_loss_identities():
    t = Tape()
    l_con, l_proto = constant(np.array([[1.25]])), constant(np.array([[0.5]]))
    assert total_loss_meow(t, l_con, l_proto, LossConfig(lam=0.0)).item() == 1.25
    assert total_loss_meow(t, l_con, constant(np.array([[0.0]])), LossConfig(lam=1.0)).item() == 1.25
    assert total_loss_meow(t, l_con, l_proto, LossConfig(lam=10.0)).item() == 6.25


def _ada_params(d, h, rng, zero=False):
    shapes = {"ada.W1": (h, d), "ada.b1": (h,), "ada.W2": (1, h), "ada.b2": (1,)}
    out = {}
    for k, s in shapes.items():
        p = init_params(s, scheme="zeros" if zero else "xavier-uniform", seed=int(rng.integers(1 << 30)), name=k)
        if not zero:
            p.value = rng.standard_normal(s)
        out[k] = p
    return ModelParams(out)


def test_loss_ada_zero_params_equals_constant_half():
    rng = np.random.default_rng(3)
    Zc, Zf = rng.standard_normal((12, 4)), rng.standard_normal((12, 4))
    p = _ada_params(4, 3, rng, zero=True)
    l_ada, gamma = loss_ada(Tape(), constant(Zc), constant(Zf), p, LossConfig())
    assert np.all(gamma.value == 0.5)
    assert l_ada.item() == pytest.approx(_loss(Zc, Zf, np.full((12, 12), 0.5)), abs=1e-14)
    assert l_ada.item() == pytest.approx(plain_infonce(Zc, Zf, 0.5) - math.log(2), abs=1e-12)


def test_loss_ada_matches_separately_computed_weights():
    rng = np.random.default_rng(4)
    Zc, Zf = rng.standard_normal((12, 4)), rng.standard_normal((12, 4))
    p = _ada_params(4, 3, rng)
    l_ada, _ = loss_ada(Tape(), constant(Zc), constant(Zf), p, LossConfig())
    W1, b1, W2, b2 = (p[k].value for k in ("ada.W1", "ada.b1", "ada.W2", "ada.b2"))
    G = np.array([[1 / (1 + np.exp(-(W2 @ np.tanh(W1 @ (Zc[i] + Zf[j]) + b1) + b2)[0])) for j in range(12)]
                  for i in range(12)])
    assert np.isfinite(l_ada.item())
    assert l_ada.item() == pytest.approx(_loss(Zc, Zf, G), abs=1e-13)


def test_loss_ada_gradients_reach_mlp_unless_detached():
    rng = np.random.default_rng(5)
    Zc, Zf = constant(rng.standard_normal((6, 4))), constant(rng.standard_normal((6, 4)))
    for detach, expect in ((False, True), (True, False)):
        p = _ada_params(4, 3, np.random.default_rng(6))
        t = Tape()
        loss, _ = loss_ada(t, Zc, Zf, p, LossConfig(detach_weights=detach))
        t.backward(loss, p.trainable())
        assert bool(np.any(p["ada.W1"].grad != 0)) is expect


def _tape_anchor_grads(Zc, Zf, gamma, tau, i):
    zf = DiffMatrix(Zf.copy(), trainable=True)
    t = Tape()
    terms = infonce_terms(t, constant(Zc), zf, gamma, LossConfig(tau=tau))
    t.backward(t.getitem(terms, (slice(i, i + 1), slice(0, 1))), [zf])
    return zf.grad


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_analytic_gradients_match_tape(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 12))
    Zc, Zf = rng.standard_normal((n, 5)), rng.standard_normal((n, 5))
    gamma = rng.uniform(0, 2, (n, n))
    tau = float(rng.uniform(0.2, 1.5))
    i = int(rng.integers(n))
    got = analytic_gradients(Zc, Zf, gamma, tau, i).grads
    ref = _tape_anchor_grads(Zc, Zf, gamma, tau, i)
    assert np.max(np.abs(got - ref) / np.maximum(1.0, np.abs(ref))) <= 1e-8


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_gradient_magnitude_monotone_and_bounded(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 15))
    Zc, Zf = rng.standard_normal((n, 5)), rng.standard_normal((n, 5))
    for gamma in (np.ones((n, n)), np.ones((n, n)) - np.eye(n)):
        r = analytic_gradients(Zc, Zf, gamma, 0.5, 0)
        neg = r.negatives
        order = neg[np.argsort(r.similarity[neg])]
        sims, mags = r.similarity[order], r.magnitudes[order]
        distinct = np.diff(sims) > 0
        assert np.all(np.diff(mags)[distinct] > 0)
        assert np.all(r.positive_magnitude >= mags)


def test_gradient_magnitude_two_negative_example():
    Zc = np.array([[1.0, 0.0]])
    Zf = np.array([[1.0, 0.0], [0.8, 0.0], [0.1, 0.0]])
    Zc = np.vstack([Zc, Zc, Zc])
    r = analytic_gradients(Zc, Zf, np.ones((3, 3)), 0.5, 0)
    assert r.magnitudes[1] > r.magnitudes[2]
    assert r.positive_magnitude >= r.magnitudes[1]


def test_gradient_report_csv(tmp_path):
    rng = np.random.default_rng(7)
    r = analytic_gradients(rng.standard_normal((4, 3)), rng.standard_normal((4, 3)), np.ones((4, 4)), 0.5, 2)
    write_gradient_report(r, tmp_path / "g.csv")
    lines = (tmp_path / "g.csv").read_text().splitlines()
    assert lines[0] == "sample,role,similarity,weight,grad_magnitude"
    assert len(lines) == 5 and lines[3].split(",")[1] == "positive"


def test_adaptive_weights_on_tape_are_differentiable():
    def builder(seed):
        rng = np.random.default_rng(seed)
        p = _ada_params(3, 2, rng)
        Zc, Zf = constant(rng.standard_normal((4, 3))), constant(rng.standard_normal((4, 3)))
        return p.trainable(), lambda t: t.sum(adaptive_weights(t, Zc, Zf, p))

    assert fd_check(builder, 0) <= 1e-6
