"""Heterogeneous graph data model, dataset I/O and synthetic generation."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .seeding import derive_rng

log = logging.getLogger(__name__)

MANIFEST = "meta.json"


class GraphError(ValueError):
    """Invalid graph structure or meta-path."""


class DatasetError(GraphError):
    """Malformed dataset directory; message carries file and line."""

    def __init__(self, path, line, msg):
        self.path = str(path)
        self.line = line
        where = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{where}: {msg}")


@dataclass(frozen=True)
class Relation:
    name: str
    src_type: int
    dst_type: int


class HeteroGraph:
    """Typed nodes with contiguous global ids, typed edges and per-type features.

    Node ids are global: type ``t`` owns ``offsets[t] .. offsets[t] + counts[t] - 1``.
    Edges are stored per relation as an ``(E, 2)`` array of global ids.
    """

    def __init__(
        self,
        type_names: Sequence[str],
        counts: Sequence[int],
        relations: Sequence[Relation],
        edges: Sequence[np.ndarray],
        features: Sequence[Optional[np.ndarray]],
        target_type: int,
        labels: Optional[np.ndarray] = None,
        validate: bool = True,
    ):
        self.type_names = list(type_names)
        self.counts = np.asarray(counts, dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(self.counts)[:-1]]).astype(np.int64)
        self.relations = list(relations)
        self.edges = [np.asarray(e, dtype=np.int64).reshape(-1, 2) for e in edges]
        self.features = [None if f is None else np.asarray(f, dtype=np.float64) for f in features]
        self.target_type = int(target_type)
        self.labels = None if labels is None else np.asarray(labels, dtype=np.int64)
        self._incidence = {}
        if validate:
            self.validate()

    # -- lookups ---------------------------------------------------------
    @property
    def num_nodes(self) -> int:
        return int(self.counts.sum())

    @property
    def num_targets(self) -> int:
        return int(self.counts[self.target_type])

    @property
    def num_classes(self) -> int:
        if self.labels is None:
            return 0
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def node_type(self, node_id) -> np.ndarray | int:
        """Node type mapping: global id(s) to type id."""
        ids = np.asarray(node_id)
        if np.any(ids < 0) or np.any(ids >= self.num_nodes):
            raise GraphError(f"unknown node {node_id}")
        t = np.searchsorted(self.offsets, ids, side="right") - 1
        return int(t) if t.ndim == 0 else t

    def global_id(self, type_id: int, local_id) -> np.ndarray | int:
        return self.offsets[type_id] + local_id

    def type_id(self, name: str) -> int:
        try:
            return self.type_names.index(name)
        except ValueError:
            raise GraphError(f"unknown node type {name!r}") from None

    def relation_id(self, name: str) -> int:
        for r, rel in enumerate(self.relations):
            if rel.name == name:
                return r
        raise GraphError(f"unknown relation {name!r}")

    def incidence(self, rel: int) -> sp.csr_matrix:
        """Binary local-id incidence matrix (src_count x dst_count) of a relation."""
        if rel not in self._incidence:
            r = self.relations[rel]
            e = self.edges[rel]
            src = e[:, 0] - self.offsets[r.src_type]
            dst = e[:, 1] - self.offsets[r.dst_type]
            m = sp.csr_matrix(
                (np.ones(len(e), dtype=np.int64), (src, dst)),
                shape=(int(self.counts[r.src_type]), int(self.counts[r.dst_type])),
            )
            m.data[:] = 1  # duplicate edges collapse to one
            m.sort_indices()
            self._incidence[rel] = m
        return self._incidence[rel]

    # -- validation ------------------------------------------------------
    def validate(self):
        n_types = len(self.type_names)
        if len(self.counts) != n_types or len(self.features) != n_types:
            raise GraphError("per-type arrays disagree in length")
        if not 0 <= self.target_type < n_types:
            raise GraphError(f"target type {self.target_type} out of range")
        if len(self.edges) != len(self.relations):
            raise GraphError("one edge list per relation required")
        for r, (rel, e) in enumerate(zip(self.relations, self.edges)):
            for t in (rel.src_type, rel.dst_type):
                if not 0 <= t < n_types:
                    raise GraphError(f"relation {rel.name!r} references unknown type {t}")
            if len(e) == 0:
                continue
            if e.min() < 0 or e.max() >= self.num_nodes:
                raise GraphError(f"relation {rel.name!r}: unknown node")
            src_t = self.node_type(e[:, 0])
            dst_t = self.node_type(e[:, 1])
            bad = np.flatnonzero((src_t != rel.src_type) | (dst_t != rel.dst_type))
            if len(bad):
                raise GraphError(
                    f"relation {rel.name!r}: edge {tuple(e[bad[0]])} violates type signature "
                    f"({self.type_names[rel.src_type]}, {self.type_names[rel.dst_type]})"
                )
        for t, f in enumerate(self.features):
            if f is None:
                continue
            if f.ndim != 2 or f.shape[0] != self.counts[t]:
                raise GraphError(f"features of {self.type_names[t]!r} have shape {f.shape}")
            if not np.all(np.isfinite(f)):
                raise GraphError(f"features of {self.type_names[t]!r} contain non-finite values")
        if self.labels is not None and len(self.labels) != self.num_targets:
            raise GraphError("labels must cover every target node")
        if n_types + len(self.relations) <= 2:
            log.warning("homogeneous graph: %d node type(s), %d relation(s)", n_types, len(self.relations))

    @property
    def is_heterogeneous(self) -> bool:
        return len(self.type_names) + len(self.relations) > 2

    # -- identity --------------------------------------------------------
    def fingerprint(self) -> str:
        """SHA-256 over a canonical byte encoding of the graph."""
        h = hashlib.sha256()
        h.update(json.dumps(
            {
                "types": self.type_names,
                "counts": self.counts.tolist(),
                "relations": [(r.name, r.src_type, r.dst_type) for r in self.relations],
                "target": self.target_type,
            },
            sort_keys=True,
        ).encode())
        for e in self.edges:
            h.update(np.ascontiguousarray(e, dtype="<i8").tobytes())
        for f in self.features:
            h.update(b"none" if f is None else np.ascontiguousarray(f, dtype="<f8").tobytes())
        h.update(b"nolabels" if self.labels is None else self.labels.astype("<i8").tobytes())
        return h.hexdigest()

    def __eq__(self, other):
        if not isinstance(other, HeteroGraph):
            return NotImplemented
        return self.fingerprint() == other.fingerprint()

    def __repr__(self):
        parts = ", ".join(f"{n}={c}" for n, c in zip(self.type_names, self.counts))
        return f"HeteroGraph({parts}; relations={[r.name for r in self.relations]}; target={self.type_names[self.target_type]})"


# ---------------------------------------------------------------------------
# meta-paths


@dataclass(frozen=True)
class MetaPathSpec:
    """Target-to-target meta-path: node types ``types[0..l]`` joined by ``relations[0..l-1]``.

    ``reversed_steps[k]`` is True when step k traverses relation k from dst to src.
    """

    types: tuple
    relations: tuple
    reversed_steps: tuple
    name: str = ""

    @property
    def length(self) -> int:
        return len(self.relations)

    def validate(self, graph: HeteroGraph):
        if len(self.types) != len(self.relations) + 1 or len(self.relations) < 1:
            raise GraphError(f"meta-path {self.name!r}: need l+1 types for l>=1 relations")
        if self.types[0] != graph.target_type or self.types[-1] != graph.target_type:
            raise GraphError(f"meta-path {self.name!r} must start and end at the target type")
        for k, (r, rev) in enumerate(zip(self.relations, self.reversed_steps)):
            rel = graph.relations[r]
            src, dst = (rel.dst_type, rel.src_type) if rev else (rel.src_type, rel.dst_type)
            if (src, dst) != (self.types[k], self.types[k + 1]):
                raise GraphError(f"meta-path {self.name!r}: relation {rel.name!r} does not chain at step {k}")

    def step_matrix(self, graph: HeteroGraph, k: int) -> sp.csr_matrix:
        m = graph.incidence(self.relations[k])
        return m.T.tocsr() if self.reversed_steps[k] else m


def parse_metapath(graph: HeteroGraph, path, relations=None) -> MetaPathSpec:
    """Build a MetaPathSpec from type names, e.g. ``"paper-author-paper"``.

    When ``relations`` is omitted each step uses the unique relation joining the
    two types (in either direction).
    """
    names = path.split("-") if isinstance(path, str) else list(path)
    types = tuple(graph.type_id(n) for n in names)
    rels, revs = [], []
    for k in range(len(types) - 1):
        a, b = types[k], types[k + 1]
        if relations is not None:
            r = graph.relation_id(relations[k])
            rel = graph.relations[r]
            if (rel.src_type, rel.dst_type) == (a, b):
                rev = False
            elif (rel.src_type, rel.dst_type) == (b, a):
                rev = True
            else:
                raise GraphError(f"relation {rel.name!r} does not join {names[k]} and {names[k + 1]}")
        else:
            cands = [(r, False) for r, rel in enumerate(graph.relations) if (rel.src_type, rel.dst_type) == (a, b)]
            cands += [(r, True) for r, rel in enumerate(graph.relations)
                      if (rel.src_type, rel.dst_type) == (b, a) and a != b]
            if len(cands) != 1:
                raise GraphError(
                    f"{len(cands)} relations join {names[k]} and {names[k + 1]}; name them explicitly"
                )
            r, rev = cands[0]
        rels.append(r)
        revs.append(rev)
    spec = MetaPathSpec(types, tuple(rels), tuple(revs), name="-".join(names))
    spec.validate(graph)
    return spec


# ---------------------------------------------------------------------------
# dataset directory format


def _read_tsv(path: Path):
    if not path.exists():
        raise DatasetError(path, None, "missing file")
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DatasetError(path, 1, "missing header")
    for lineno, line in enumerate(lines[1:], start=2):
        if line.strip() == "":
            continue
        yield lineno, line.split("\t")


def _int(path, lineno, tok):
    try:
        return int(tok)
    except ValueError:
        raise DatasetError(path, lineno, f"malformed integer {tok!r}") from None


def load_graph(path) -> HeteroGraph:
    """Load and validate a dataset directory (see README for the format)."""
    root = Path(path)
    mpath = root / MANIFEST
    if not mpath.exists():
        raise DatasetError(mpath, None, "missing file")
    try:
        meta = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(mpath, exc.lineno, f"malformed manifest: {exc.msg}") from None

    try:
        type_names = [t["name"] for t in meta["node_types"]]
        counts = [int(t["count"]) for t in meta["node_types"]]
        feat_dims = [int(t.get("feature_dim", 0)) for t in meta["node_types"]]
        target = type_names.index(meta["target_type"])
        relations = [
            Relation(r["name"], type_names.index(r["src"]), type_names.index(r["dst"]))
            for r in meta.get("relations", [])
        ]
    except (KeyError, ValueError, TypeError) as exc:
        raise DatasetError(mpath, None, f"malformed manifest: {exc}") from None
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.int64)

    labels = None
    for t, name in enumerate(type_names):
        p = root / f"nodes_{name}.tsv"
        seen = np.zeros(counts[t], dtype=bool)
        lab = np.full(counts[t], -1, dtype=np.int64)
        for lineno, row in _read_tsv(p):
            nid = _int(p, lineno, row[0])
            if not 0 <= nid < counts[t]:
                raise DatasetError(p, lineno, f"unknown node {nid}")
            if seen[nid]:
                raise DatasetError(p, lineno, f"duplicate node {nid}")
            seen[nid] = True
            if len(row) > 1 and row[1] != "":
                if t != target:
                    raise DatasetError(p, lineno, "labels allowed on the target type only")
                lab[nid] = _int(p, lineno, row[1])
        if not seen.all():
            raise DatasetError(p, None, f"{int((~seen).sum())} declared node(s) missing")
        if t == target and (lab >= 0).any():
            if (lab < 0).any():
                raise DatasetError(p, None, "labels must be given for all target nodes or none")
            labels = lab

    edges = []
    for rel in relations:
        p = root / f"edges_{rel.name}.tsv"
        rows = []
        for lineno, row in _read_tsv(p):
            if len(row) < 2:
                raise DatasetError(p, lineno, "expected src and dst columns")
            s, d = _int(p, lineno, row[0]), _int(p, lineno, row[1])
            if not 0 <= s < counts[rel.src_type]:
                raise DatasetError(p, lineno, f"unknown node {s} of type {type_names[rel.src_type]!r}")
            if not 0 <= d < counts[rel.dst_type]:
                raise DatasetError(p, lineno, f"unknown node {d} of type {type_names[rel.dst_type]!r}")
            rows.append((offsets[rel.src_type] + s, offsets[rel.dst_type] + d))
        edges.append(np.array(rows, dtype=np.int64).reshape(-1, 2))

    features = []
    for t, name in enumerate(type_names):
        p = root / f"features_{name}.tsv"
        if feat_dims[t] == 0:
            features.append(None)
            continue
        x = np.full((counts[t], feat_dims[t]), np.nan)
        filled = np.zeros(counts[t], dtype=bool)
        for lineno, row in _read_tsv(p):
            nid = _int(p, lineno, row[0])
            if not 0 <= nid < counts[t]:
                raise DatasetError(p, lineno, f"unknown node {nid}")
            if len(row) - 1 != feat_dims[t]:
                raise DatasetError(p, lineno, f"expected {feat_dims[t]} feature values, got {len(row) - 1}")
            try:
                vals = [float(v) for v in row[1:]]
            except ValueError:
                raise DatasetError(p, lineno, "malformed feature value") from None
            if not all(np.isfinite(vals)):
                raise DatasetError(p, lineno, "non-finite feature value")
            x[nid] = vals
            filled[nid] = True
        if not filled.all():
            raise DatasetError(p, None, f"{int((~filled).sum())} node(s) without features")
        features.append(x)

    try:
        return HeteroGraph(type_names, counts, relations, edges, features, target, labels)
    except GraphError as exc:
        raise DatasetError(root, None, str(exc)) from None


def save_graph(graph: HeteroGraph, path):
    """Write ``graph`` in the dataset directory format; inverse of load_graph."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    meta = {
        "node_types": [
            {
                "name": n,
                "count": int(c),
                "feature_dim": 0 if f is None else int(f.shape[1]),
            }
            for n, c, f in zip(graph.type_names, graph.counts, graph.features)
        ],
        "relations": [
            {"name": r.name, "src": graph.type_names[r.src_type], "dst": graph.type_names[r.dst_type]}
            for r in graph.relations
        ],
        "target_type": graph.type_names[graph.target_type],
    }
    _write(root / MANIFEST, json.dumps(meta, indent=2) + "\n")
    for t, name in enumerate(graph.type_names):
        lines = ["node_id\tlabel" if t == graph.target_type else "node_id"]
        for i in range(int(graph.counts[t])):
            if t == graph.target_type and graph.labels is not None:
                lines.append(f"{i}\t{graph.labels[i]}")
            else:
                lines.append(str(i))
        _write(root / f"nodes_{name}.tsv", "\n".join(lines) + "\n")
        f = graph.features[t]
        if f is not None:
            flines = ["node_id\t" + "\t".join(f"x{k}" for k in range(f.shape[1]))]
            flines += [f"{i}\t" + "\t".join(repr(float(v)) for v in row) for i, row in enumerate(f)]
            _write(root / f"features_{name}.tsv", "\n".join(flines) + "\n")
    for rel, e in zip(graph.relations, graph.edges):
        so, do = graph.offsets[rel.src_type], graph.offsets[rel.dst_type]
        lines = ["src\tdst"] + [f"{s - so}\t{d - do}" for s, d in e]
        _write(root / f"edges_{rel.name}.tsv", "\n".join(lines) + "\n")


def _write(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# synthetic planted-partition graphs


@dataclass
class AuxTypeConfig:
    name: str
    count: int
    p_in: float = 0.2
    p_out: float = 0.01
    feature_dim: Optional[int] = None
    feature_noise: Optional[float] = None  # None: use the target noise


@dataclass
class SyntheticConfig:
    n_classes: int = 3
    nodes_per_class: int = 50
    target_name: str = "target"
    feature_dim: int = 32
    feature_noise: float = 6.0
    aux_types: list = field(default_factory=lambda: [
        AuxTypeConfig("a", 60, 0.2, 0.01, feature_noise=1.0),
        AuxTypeConfig("b", 30, 0.2, 0.01, feature_noise=1.0),
    ])

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        d = dict(d)
        aux = d.pop("aux_types", None)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise GraphError(f"unknown synthetic config keys: {sorted(unknown)}")
        cfg = cls(**d)
        if aux is not None:
            cfg.aux_types = [a if isinstance(a, AuxTypeConfig) else AuxTypeConfig(**a) for a in aux]
        return cfg

    def validate(self):
        if self.n_classes < 1:
            raise GraphError("n_classes must be >= 1")
        if self.nodes_per_class < 1:
            raise GraphError("nodes_per_class must be >= 1")
        if self.feature_noise < 0:
            raise GraphError("feature_noise must be >= 0")
        if not self.aux_types:
            raise GraphError("at least one auxiliary type is required")
        for a in self.aux_types:
            for p in (a.p_in, a.p_out):
                if not 0.0 <= p <= 1.0:
                    raise GraphError(f"probability {p} of {a.name!r} outside [0, 1]")
            if a.feature_noise is not None and a.feature_noise < 0:
                raise GraphError(f"feature_noise of {a.name!r} must be >= 0")
            if a.count < 1:
                raise GraphError(f"aux type {a.name!r} needs at least one node")


def generate_synthetic(config: SyntheticConfig, seed: int) -> HeteroGraph:
    """Planted-partition HIN: one target type linked to each auxiliary type.

    Auxiliary node ``v`` of type ``a`` belongs to class ``v % n_classes``; target
    node ``i`` links to it with probability ``p_in`` when classes agree and
    ``p_out`` otherwise. Features are a per-class mean plus Gaussian noise.
    """
    config.validate()
    c, per = config.n_classes, config.nodes_per_class
    n = c * per
    labels = np.repeat(np.arange(c), per)

    type_names = [config.target_name] + [a.name for a in config.aux_types]
    counts = [n] + [a.count for a in config.aux_types]
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])

    def class_features(rng, cls, dim, noise):
        means = rng.standard_normal((c, dim))
        return means[cls] + noise * rng.standard_normal((len(cls), dim))

    rng = derive_rng(seed, "synthetic", "target-features")
    features = [class_features(rng, labels, config.feature_dim, config.feature_noise)]
    relations, edges = [], []
    for k, a in enumerate(config.aux_types, start=1):
        aux_cls = np.arange(a.count) % c
        rng = derive_rng(seed, "synthetic", "edges", a.name)
        prob = np.where(labels[:, None] == aux_cls[None, :], a.p_in, a.p_out)
        src, dst = np.nonzero(rng.random((n, a.count)) < prob)
        relations.append(Relation(f"{config.target_name}-{a.name}", 0, k))
        edges.append(np.stack([src, dst + offsets[k]], axis=1))
        rng = derive_rng(seed, "synthetic", "aux-features", a.name)
        noise = config.feature_noise if a.feature_noise is None else a.feature_noise
        features.append(class_features(rng, aux_cls, a.feature_dim or config.feature_dim, noise))
    return HeteroGraph(type_names, counts, relations, edges, features, 0, labels)


def synthetic_metapaths(config: SyntheticConfig) -> list:
    """The symmetric target-aux-target meta-path of every auxiliary type."""
    return [f"{config.target_name}-{a.name}-{config.target_name}" for a in config.aux_types]


# ---------------------------------------------------------------------------
# label splits


@dataclass
class LabelSplit:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def split_labels(graph: HeteroGraph, per_class_train: int, n_val: int, n_test: Optional[int], seed: int) -> LabelSplit:
    """Random train/val/test split of target nodes.

    ``train`` holds exactly ``per_class_train`` nodes of every class; ``val`` and
    ``test`` are drawn from the remaining nodes (``n_test=None`` takes the rest).
    """
    if graph.labels is None:
        raise GraphError("graph has no labels")
    return split_indices(graph.labels, per_class_train, n_val, n_test, seed)


def split_indices(labels: np.ndarray, per_class_train: int, n_val: int, n_test: Optional[int], seed: int) -> LabelSplit:
    labels = np.asarray(labels)
    rng = derive_rng(seed, "split", per_class_train)
    classes = np.unique(labels)
    train = []
    for cl in classes:
        idx = np.flatnonzero(labels == cl)
        if len(idx) < per_class_train:
            raise GraphError(f"class {cl} has {len(idx)} nodes, fewer than {per_class_train} requested")
        train.append(rng.choice(idx, per_class_train, replace=False))
    train = np.sort(np.concatenate(train)) if train else np.zeros(0, dtype=np.int64)
    rest = np.setdiff1d(np.arange(len(labels)), train)
    rest = rest[rng.permutation(len(rest))]
    if n_test is None:
        n_test = len(rest) - n_val
    if n_val < 0 or n_test < 0 or n_val + n_test > len(rest):
        raise GraphError(f"insufficient nodes: {len(rest)} left for {n_val} val + {n_test} test")
    val = np.sort(rest[:n_val])
    test = np.sort(rest[n_val:n_val + n_test])
    return LabelSplit(train.astype(np.int64), val.astype(np.int64), test.astype(np.int64))
