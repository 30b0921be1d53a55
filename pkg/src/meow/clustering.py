"""Seeded k-means, hard negative weights and prototype concentrations."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

THETA_MIN = 1e-3
THETA_MAX = 10.0


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    history: list = field(default_factory=list)
    n_iter: int = 0


def _sq_dists(X, C):
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)


def kmeans_plusplus(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = ((X - X[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            # all remaining points coincide with a centre: take the lowest unused id
            unused = np.setdiff1d(np.arange(n), chosen)
            nxt = int(unused[0])
        chosen.append(nxt)
        d2 = np.minimum(d2, ((X - X[nxt]) ** 2).sum(axis=1))
    return X[chosen].copy()


def _repair_empty(X, labels, k):
    """Give every empty cluster the point farthest from its centroid."""
    while True:
        sizes = np.bincount(labels, minlength=k)
        empty = np.flatnonzero(sizes == 0)
        if len(empty) == 0:
            return labels
        C = np.stack([X[labels == c].mean(axis=0) if sizes[c] else np.zeros(X.shape[1]) for c in range(k)])
        dist = ((X - C[labels]) ** 2).sum(axis=1)
        dist[sizes[labels] <= 1] = -1.0  # never empty another cluster
        far = int(np.argmax(dist))
        labels = labels.copy()
        labels[far] = empty[0]


def kmeans(Z: np.ndarray, k: int, seed: int, max_iters: int = 100) -> KMeansResult:
    """k-means++ seeding then Lloyd iterations until the assignment is a fixpoint.

    Nearest-centroid ties go to the lowest cluster id. ``history`` records the
    inertia after every update step.
    """
    Z = np.asarray(Z, dtype=np.float64)
    n = Z.shape[0]
    if k > n:
        raise ValueError(f"k={k} exceeds number of points {n}")
    if k < 1 or max_iters < 1:
        raise ValueError("k and max_iters must be >= 1")
    rng = np.random.default_rng(seed)
    C = kmeans_plusplus(Z, k, rng)
    labels = np.argmin(_sq_dists(Z, C), axis=1)  # argmin returns the first (lowest id) minimum
    labels = _repair_empty(Z, labels, k)
    history = []
    it = 0
    for it in range(1, max_iters + 1):
        C = np.stack([Z[labels == c].mean(axis=0) for c in range(k)])
        history.append(float(((Z - C[labels]) ** 2).sum()))
        new = _repair_empty(Z, np.argmin(_sq_dists(Z, C), axis=1), k)
        if np.array_equal(new, labels):
            break
        labels = new
    else:
        C = np.stack([Z[labels == c].mean(axis=0) for c in range(k)])
    inertia = float(((Z - C[labels]) ** 2).sum())
    return KMeansResult(labels, C, inertia, history, it)


def concentration(members: np.ndarray, centroid: np.ndarray, alpha: float = 5.0,
                  clamp: bool = True) -> float:
    """sum ||z_q - c|| / (Q ln(Q + alpha)), clamped to [THETA_MIN, THETA_MAX]."""
    Q = len(members)
    if Q == 0:
        raise ValueError("empty cluster")
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    theta = np.linalg.norm(members - centroid, axis=1).sum() / (Q * np.log(Q + alpha))
    return float(np.clip(theta, THETA_MIN, THETA_MAX)) if clamp else float(theta)


@dataclass
class Clustering:
    k: int
    assignments: np.ndarray
    centroids: np.ndarray
    theta: np.ndarray
    inertia: float


@dataclass
class ClusterModel:
    clusterings: list

    @property
    def M(self) -> int:
        return len(self.clusterings)

    def hard_weights(self) -> np.ndarray:
        """gamma_ij = number of clusterings separating i and j."""
        a = self.clusterings[0].assignments
        gamma = np.zeros((len(a), len(a)))
        for c in self.clusterings:
            gamma += c.assignments[:, None] != c.assignments[None, :]
        return gamma

    def hard_weight(self, i: int, j: int) -> int:
        return sum(int(c.assignments[i] != c.assignments[j]) for c in self.clusterings)


def build_cluster_model(Zf_bar: np.ndarray, sizes, seed: int, alpha: float = 5.0, max_iters: int = 100,
                        theta_members: np.ndarray | None = None) -> ClusterModel:
    """Run one k-means per entry of ``sizes`` (seed offset by position).

    ``theta_members`` selects the embeddings whose distances to the centroid
    enter the concentration estimate; defaults to ``Zf_bar`` itself.
    """
    members = Zf_bar if theta_members is None else theta_members
    out = []
    for r, k in enumerate(sizes):
        res = kmeans(Zf_bar, int(k), seed + r, max_iters)
        theta = np.array([
            concentration(members[res.assignments == c], res.centroids[c], alpha)
            for c in range(int(k))
        ])
        out.append(Clustering(int(k), res.assignments, res.centroids, theta, res.inertia))
    return ClusterModel(out)
