"""Independent brute-force reference implementations used by the tests."""

from __future__ import annotations

import itertools
import math
from collections import Counter

import numpy as np

from meow.graph import HeteroGraph, MetaPathSpec, Relation


def dfs_path_counts(graph: HeteroGraph, spec: MetaPathSpec) -> np.ndarray:
    """Count meta-path instances by explicit depth-first enumeration over edge lists."""
    adj = {}
    for k, (r, rev) in enumerate(zip(spec.relations, spec.reversed_steps)):
        step = {}
        for s, d in graph.edges[r]:
            a, b = (d, s) if rev else (s, d)
            step.setdefault(int(a), set()).add(int(b))
        adj[k] = step
    n = graph.num_targets
    off = graph.offsets[graph.target_type]
    counts = np.zeros((n, n), dtype=np.int64)

    def walk(node, k, start):
        if k == spec.length:
            counts[start, node - off] += 1
            return
        for nxt in sorted(adj[k].get(node, ())):
            walk(nxt, k + 1, start)

    for i in range(n):
        walk(off + i, 0, i)
    return counts


def enumerate_contexts(graph: HeteroGraph, spec: MetaPathSpec, retained: np.ndarray):
    """hop[j][i] = set of local ids at position j on any path from i to a retained neighbour."""
    adj = {}
    for k, (r, rev) in enumerate(zip(spec.relations, spec.reversed_steps)):
        step = {}
        for s, d in graph.edges[r]:
            a, b = (d, s) if rev else (s, d)
            step.setdefault(int(a), set()).add(int(b))
        adj[k] = step
    off = graph.offsets
    n = graph.num_targets
    hops = [[set() for _ in range(n)] for _ in range(spec.length)]

    def walk(path, k, i):
        if k == spec.length:
            end = path[-1] - off[spec.types[-1]]
            if retained[i, end]:
                for j in range(1, spec.length + 1):
                    hops[j - 1][i].add(path[j] - off[spec.types[j]])
            return
        for nxt in sorted(adj[k].get(path[-1], ())):
            walk(path + [nxt], k + 1, i)

    for i in range(n):
        walk([off[spec.types[0]] + i], 0, i)
    return hops


def plain_infonce(Zc: np.ndarray, Zf: np.ndarray, tau: float) -> float:
    """Standard InfoNCE over all samples (positive included in the denominator), looped."""
    n = Zc.shape[0]
    total = 0.0
    for i in range(n):
        logits = [float(np.dot(Zc[i], Zf[j])) / tau for j in range(n)]
        m = max(logits)
        lse = m + math.log(sum(math.exp(v - m) for v in logits))
        total += lse - logits[i]
    return total / n


def f1_by_definition(y_true, y_pred):
    """(macro, micro) F1 from per-class confusion counts."""
    classes = sorted(set(y_true) | set(y_pred))
    f1s = []
    for c in classes:
        tp = sum(1 for t, p in zip(y_true, y_pred) if t == c and p == c)
        fp = sum(1 for t, p in zip(y_true, y_pred) if t != c and p == c)
        fn = sum(1 for t, p in zip(y_true, y_pred) if t == c and p != c)
        f1s.append(0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn))
    tp_all = sum(1 for t, p in zip(y_true, y_pred) if t == p)
    return sum(f1s) / len(f1s), tp_all / len(y_true)


def auc_pairwise(scores, positive) -> float:
    """AUC by comparing every positive with every negative (ties count one half)."""
    pos = [s for s, p in zip(scores, positive) if p]
    neg = [s for s, p in zip(scores, positive) if not p]
    wins = 0.0
    for a in pos:
        for b in neg:
            wins += 1.0 if a > b else 0.5 if a == b else 0.0
    return wins / (len(pos) * len(neg))


def nmi_by_definition(a, b) -> float:
    n = len(a)
    ca, cb, cab = Counter(a), Counter(b), Counter(zip(a, b))
    ha = -sum(v / n * math.log(v / n) for v in ca.values())
    hb = -sum(v / n * math.log(v / n) for v in cb.values())
    mi = sum(v / n * math.log((v / n) / (ca[x] / n * cb[y] / n)) for (x, y), v in cab.items())
    if ha == 0 and hb == 0:
        return 1.0
    return mi / ((ha + hb) / 2)


def ari_by_pairs(a, b) -> float:
    """ARI from explicit pair agreement counts over all unordered pairs."""
    same_a = same_b = both = 0
    total = 0
    for i, j in itertools.combinations(range(len(a)), 2):
        sa, sb = a[i] == a[j], b[i] == b[j]
        same_a += sa
        same_b += sb
        both += sa and sb
        total += 1
    expected = same_a * same_b / total
    max_index = (same_a + same_b) / 2
    if max_index == expected:
        return 1.0
    return (both - expected) / (max_index - expected)


def random_hin(rng: np.random.Generator, max_nodes: int = 30):
    """Random three-type HIN (target, a, b) with at most ``max_nodes`` nodes."""
    cap = max_nodes // 3
    n_t, n_a, n_b = int(rng.integers(2, cap + 1)), int(rng.integers(1, cap + 1)), int(rng.integers(1, cap + 1))
    counts = [n_t, n_a, n_b]
    off = [0, n_t, n_t + n_a]

    rels = [Relation("t-a", 0, 1), Relation("t-b", 0, 2), Relation("a-b", 1, 2)]
    edges = []
    for r in rels:
        p = rng.uniform(0.1, 0.6)
        m = rng.random((counts[r.src_type], counts[r.dst_type])) < p
        s, d = np.nonzero(m)
        edges.append(np.stack([s + off[r.src_type], d + off[r.dst_type]], axis=1))
    feats = [rng.standard_normal((c, 3)) for c in counts]
    return HeteroGraph(["t", "a", "b"], counts, rels, edges, feats, 0)
