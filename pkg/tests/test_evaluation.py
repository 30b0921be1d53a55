import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn import metrics as skm

from meow.evaluation import (ari, auc_ovr, binary_auc, clustering_eval, linear_probe, macro_f1, micro_f1, nmi,
                             precision_recall_f1, write_results_csv)
from meow.graph import LabelSplit, split_indices
from oracles import ari_by_pairs, auc_pairwise, f1_by_definition, nmi_by_definition


def test_f1_hand_example():
    yt, yp = [0, 0, 1, 1], [0, 1, 1, 1]
    assert micro_f1(yt, yp) == 0.75
    assert macro_f1(yt, yp) == pytest.approx((2 / 3 + 4 / 5) / 2, abs=1e-15)
    prec, rec, _ = precision_recall_f1(yt, yp)
    assert prec.tolist() == [1.0, 2 / 3] and rec.tolist() == [0.5, 1.0]


def test_separable_probe_is_perfect():
    rng = np.random.default_rng(0)
    labels = np.repeat([0, 1], 50)
    X = rng.standard_normal((100, 4)) * 0.1
    X[:, 0] += np.where(labels == 1, 5.0, -5.0)
    res = linear_probe(X, labels, split_indices(labels, 5, 0, None, 0))
    assert res.macro_f1 == res.micro_f1 == res.auc == 1.0


def test_random_embeddings_auc_near_half():
    aucs = []
    for seed in range(5):
        rng = np.random.default_rng(seed)
        labels = np.repeat([0, 1], 1000)
        X = rng.standard_normal((2000, 8))
        aucs.append(linear_probe(X, labels, split_indices(labels, 20, 0, None, seed)).auc)
    assert abs(np.mean(aucs) - 0.5) <= 0.05


def test_probe_requires_every_class_in_train():
    labels = np.array([0, 0, 1, 1, 2, 2])
    split = LabelSplit(np.array([0, 2]), np.array([], dtype=int), np.array([1, 3, 4, 5]))
    with pytest.raises(ValueError, match="absent"):
        linear_probe(np.eye(6), labels, split)


def test_probe_metrics_in_range_and_seed_free():
    rng = np.random.default_rng(1)
    labels = np.repeat([0, 1, 2], 20)
    X = rng.standard_normal((60, 5))
    split = split_indices(labels, 5, 0, None, 0)
    a, b = linear_probe(X, labels, split, seed=0), linear_probe(X, labels, split, seed=7)
    assert a.macro_f1 == b.macro_f1 and a.auc == b.auc
    for v in (a.macro_f1, a.micro_f1, a.auc):
        assert 0.0 <= v <= 1.0


def test_auc_examples(caplog):
    s = np.array([0.1, 0.2, 0.8, 0.9])
    pos = np.array([False, False, True, True])
    assert binary_auc(s, pos) == 1.0 and binary_auc(-s, pos) == 0.0
    scores = np.stack([-s, s], axis=1)
    assert auc_ovr(scores, pos.astype(int)) == 1.0
    with caplog.at_level(logging.WARNING):
        val = auc_ovr(np.stack([-s, s, np.zeros(4)], axis=1), pos.astype(int))
    assert val == 1.0 and "skipped" in caplog.text
    with pytest.raises(ValueError):
        binary_auc(s, np.ones(4, bool))


def test_partition_examples():
    a = [0, 0, 1, 1, 2, 2]
    assert nmi(a, a) == 1.0 and ari(a, a) == 1.0
    assert ari(a, [0] * 6) == 0.0
    perm = [2, 2, 0, 0, 1, 1]
    assert nmi(a, perm) == 1.0 and ari(a, perm) == 1.0
    b = [0, 1, 1, 0, 2, 0]
    relabel = {0: 5, 1: 3, 2: 9}
    assert nmi(a, b) == nmi(a, [relabel[x] for x in b])
    assert ari(a, b) == ari(a, [relabel[x] for x in b])


def test_clustering_eval_identical_partition():
    labels = np.repeat([0, 1, 2], 10)
    X = np.eye(3)[labels] * 10
    res = clustering_eval(X, labels, seed=0)
    assert res.nmi == 1.0 and res.ari == 1.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_metrics_match_oracles(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 21))
    a, b = rng.integers(0, 4, n).tolist(), rng.integers(0, 4, n).tolist()
    assert abs(nmi(a, b) - nmi_by_definition(a, b)) <= 1e-9
    assert abs(ari(a, b) - ari_by_pairs(a, b)) <= 1e-9
    macro, micro = f1_by_definition(a, b)
    assert abs(macro_f1(a, b) - macro) <= 1e-12 and micro_f1(a, b) == micro
    assert micro_f1(a, b) == np.mean(np.array(a) == np.array(b))
    pos = np.array(a) == a[0]
    if not pos.all():
        scores = rng.integers(0, 5, n).astype(float)  # many ties
        assert abs(binary_auc(scores, pos) - auc_pairwise(scores, pos)) <= 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_metrics_agree_with_sklearn(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.integers(0, 3, 20), rng.integers(0, 3, 20)
    assert nmi(a, b) == pytest.approx(skm.normalized_mutual_info_score(a, b), abs=1e-9)
    assert ari(a, b) == pytest.approx(skm.adjusted_rand_score(a, b), abs=1e-9)
    assert macro_f1(a, b) == pytest.approx(skm.f1_score(a, b, average="macro", zero_division=0), abs=1e-12)
    labels = np.concatenate([[0, 1, 2], rng.integers(0, 3, 17)])
    scores = rng.random((20, 3))
    ref = np.mean([skm.roc_auc_score(labels == c, scores[:, c]) for c in range(3)])
    assert auc_ovr(scores, labels) == pytest.approx(ref, abs=1e-12)


def test_results_csv(tmp_path):
    write_results_csv([("syn", 20, 0, "macro_f1", 0.5)], tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines() == ["dataset,split,seed,metric,value", "syn,20,0,macro_f1,0.5"]
