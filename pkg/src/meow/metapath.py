"""Meta-path instance counting, PathSim, top-K filtering and context extraction."""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .graph import GraphError, HeteroGraph, MetaPathSpec


def count_path_instances(graph: HeteroGraph, spec: MetaPathSpec) -> sp.csr_matrix:
    """Target x target matrix of path-instance counts (product of step incidences)."""
    spec.validate(graph)
    m = spec.step_matrix(graph, 0)
    for k in range(1, spec.length):
        m = m @ spec.step_matrix(graph, k)
    m = m.tocsr()
    m.sort_indices()
    return m


def pathsim(counts, i: int, j: int) -> float:
    """PathSim of targets i and j; 0 when neither has a self path."""
    c = counts
    den = c[i, i] + c[j, j]
    if den == 0:
        return 0.0
    return 2.0 * c[i, j] / den


def pathsim_matrix(counts) -> np.ndarray:
    """All-pairs PathSim (dense)."""
    c = counts.toarray() if sp.issparse(counts) else np.asarray(counts)
    diag = np.diag(c).astype(np.float64)
    den = diag[:, None] + diag[None, :]
    out = np.zeros(c.shape, dtype=np.float64)
    np.divide(2.0 * c, den, out=out, where=den > 0)
    return out


@dataclass(frozen=True, eq=False)
class MetaPathIndex:
    """Filtered adjacency and context sets of one meta-path.

    ``A`` is binary with self-loops; ``hops[j]`` is the binary target x T_{j+1}
    membership matrix of hop-(j+1) context nodes (the last hop is ``A`` without
    its diagonal, i.e. the retained neighbours).
    """

    spec: MetaPathSpec
    K: int
    A: np.ndarray
    hops: tuple

    @cached_property
    def A_norm(self) -> np.ndarray:
        return normalize_adjacency(self.A)

    @property
    def num_targets(self) -> int:
        return self.A.shape[0]

    def neighbors(self, i: int) -> np.ndarray:
        row = self.A[i].copy()
        row[i] = 0
        return np.flatnonzero(row)

    def hop_neighbors(self, i: int, hop: int) -> np.ndarray:
        """Local ids (within type ``spec.types[hop]``) of hop-``hop`` context nodes of i; hop in 1..l."""
        return np.flatnonzero(self.hops[hop - 1][i].toarray().ravel())


def normalize_adjacency(A: np.ndarray) -> np.ndarray:
    """D^-1/2 A D^-1/2 with D the row sums of A."""
    A = np.asarray(A, dtype=np.float64)
    deg = A.sum(axis=1)
    if np.any(deg <= 0):
        raise GraphError("adjacency has a row without entries")
    return A / np.sqrt(np.outer(deg, deg))


def top_k_neighbors(ps: np.ndarray, K: int) -> np.ndarray:
    """Binary matrix keeping, per row, up to K off-diagonal positive entries.

    Ranking is by similarity descending then node id ascending.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    n = ps.shape[0]
    keep = np.zeros((n, n), dtype=np.int64)
    ids = np.arange(n)
    for i in range(n):
        row = ps[i]
        cand = np.flatnonzero((row > 0) & (ids != i))
        if len(cand) == 0:
            continue
        order = np.lexsort((cand, -row[cand]))
        keep[i, cand[order[:K]]] = 1
    return keep


def build_index(graph: HeteroGraph, spec: MetaPathSpec, K: int) -> MetaPathIndex:
    counts = count_path_instances(graph, spec)
    retained = top_k_neighbors(pathsim_matrix(counts), K)
    A = retained.copy()
    np.fill_diagonal(A, 1)

    steps = [spec.step_matrix(graph, k) for k in range(spec.length)]
    R = sp.csr_matrix(retained)
    hops = []
    for j in range(1, spec.length):
        prefix = steps[0]
        for s in steps[1:j]:
            prefix = prefix @ s
        suffix = steps[j]
        for s in steps[j + 1:]:
            suffix = suffix @ s
        # v is on a path i -> v -> k with k retained iff prefix(i,v) > 0 and (R suffix^T)(i,v) > 0
        reach = (R @ suffix.T).tocsr()
        h = prefix.multiply(reach > 0).tocsr()
        h.data[:] = 1
        h.eliminate_zeros()
        hops.append(h.astype(np.int64))
    hops.append(R.astype(np.int64))
    return MetaPathIndex(spec, int(K), A, tuple(hops))


def auto_k(graph: HeteroGraph, spec: MetaPathSpec) -> int:
    """Average number of positive-PathSim neighbours per target node (at least 1)."""
    ps = pathsim_matrix(count_path_instances(graph, spec))
    np.fill_diagonal(ps, 0)
    return max(1, int(round((ps > 0).sum(axis=1).mean())))


def fuse_adjacency(indexes) -> np.ndarray:
    """Element-wise mean of the normalized adjacencies."""
    if not indexes:
        raise ValueError("need at least one index")
    mats = [ix.A_norm for ix in indexes]
    shape = mats[0].shape
    for m in mats[1:]:
        if m.shape != shape:
            raise ValueError(f"mismatched adjacency shapes {shape} and {m.shape}")
    return sum(mats) / len(mats)


# ---------------------------------------------------------------------------
# binary cache: magic, version, JSON header, then int64 (row, col) triplets

_MAGIC = b"MPIDX\x00"
_VERSION = 1


def cache_key(graph: HeteroGraph, spec: MetaPathSpec, K: int) -> str:
    payload = json.dumps([graph.fingerprint(), list(spec.types), list(spec.relations),
                          list(spec.reversed_steps), K]).encode()
    return hashlib.sha256(payload).hexdigest()[:24]


def save_index(index: MetaPathIndex, path, key: str = ""):
    mats = [sp.coo_matrix(index.A)] + [h.tocoo() for h in index.hops]
    header = {
        "key": key,
        "spec": {
            "types": list(index.spec.types),
            "relations": list(index.spec.relations),
            "reversed": list(index.spec.reversed_steps),
            "name": index.spec.name,
        },
        "K": index.K,
        "shapes": [list(m.shape) for m in mats],
        "nnz": [int(m.nnz) for m in mats],
    }
    hbytes = json.dumps(header).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(hbytes)))
        fh.write(hbytes)
        for m in mats:
            fh.write(np.ascontiguousarray(m.row, dtype="<i8").tobytes())
            fh.write(np.ascontiguousarray(m.col, dtype="<i8").tobytes())
    os.replace(tmp, path)


def load_index(path, key: str | None = None) -> MetaPathIndex:
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path}: not a meta-path index file")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported index version {version}")
        header = json.loads(fh.read(hlen))
        if key is not None and header["key"] != key:
            raise ValueError(f"{path}: cache key mismatch")
        mats = []
        for shape, nnz in zip(header["shapes"], header["nnz"]):
            row = np.frombuffer(fh.read(8 * nnz), dtype="<i8")
            col = np.frombuffer(fh.read(8 * nnz), dtype="<i8")
            mats.append(sp.csr_matrix((np.ones(nnz, dtype=np.int64), (row, col)), shape=tuple(shape)))
    s = header["spec"]
    spec = MetaPathSpec(tuple(s["types"]), tuple(s["relations"]), tuple(s["reversed"]), s["name"])
    return MetaPathIndex(spec, header["K"], mats[0].toarray(), tuple(mats[1:]))


def cached_build_index(graph: HeteroGraph, spec: MetaPathSpec, K: int, cache_dir=None) -> MetaPathIndex:
    if cache_dir is None:
        return build_index(graph, spec, K)
    key = cache_key(graph, spec, K)
    path = Path(cache_dir) / f"index-{key}.bin"
    if path.exists():
        return load_index(path, key)
    path.parent.mkdir(parents=True, exist_ok=True)
    index = build_index(graph, spec, K)
    save_index(index, path, key)
    return index
