"""Forward components: feature transform, shared GCN, context aggregation,
augmentation, attention fusion, projection head and the adaptive-weight MLP."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit

from .autodiff import DiffMatrix, Tape, constant, init_params
from .graph import HeteroGraph
from .metapath import MetaPathIndex, fuse_adjacency, normalize_adjacency
from .seeding import derive_seed


@dataclass
class ModelConfig:
    dim: int = 64
    ada_hidden: int = 32
    transform_act: str = "elu"
    context_act: str = "elu"
    gcn_hidden_act: str = "elu"
    gcn_out_act: str = "identity"
    proj_act: str = "elu"


@dataclass
class AugmentSpec:
    edge_mask_rate: float = 0.0
    feature_mask_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for r in (self.edge_mask_rate, self.feature_mask_rate):
            if not 0.0 <= r <= 1.0:
                raise ValueError(f"masking rate {r} outside [0, 1]")


class ModelParams:
    """Named learnable arrays. Weight matrices carry ``decay=True``; biases do not."""

    def __init__(self, params: dict):
        self.params = dict(params)

    def __getitem__(self, name) -> DiffMatrix:
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params.values())

    def names(self):
        return list(self.params)

    def trainable(self):
        return [p for p in self.params.values() if p.trainable]

    def snapshot(self) -> dict:
        return {k: p.value.copy() for k, p in self.params.items()}

    def load(self, values: dict):
        for k, v in values.items():
            if self.params[k].value.shape != v.shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {self.params[k].value.shape}")
            self.params[k].value = np.array(v, dtype=np.float64)


def metapath_types(indexes) -> list:
    return sorted({t for ix in indexes for t in ix.spec.types})


def init_model_params(graph: HeteroGraph, indexes, cfg: ModelConfig, seed: int, ada_zero: bool = False) -> ModelParams:
    """Xavier-uniform weights and zero biases; each array seeded from its own name."""
    d = cfg.dim
    shapes = {}
    for t in metapath_types(indexes):
        x = graph.features[t]
        if x is None:
            raise ValueError(f"node type {graph.type_names[t]!r} has no features")
        shapes[f"transform.W.{graph.type_names[t]}"] = (d, x.shape[1])
        shapes[f"transform.b.{graph.type_names[t]}"] = (d,)
    for u, ix in enumerate(indexes):
        for j in range(1, ix.spec.length + 1):
            shapes[f"context.W.{u}.{j}"] = (d, d)
    shapes.update({
        "gcn.W1": (d, d), "gcn.b1": (d,), "gcn.W2": (d, d), "gcn.b2": (d,),
        "att.a": (d,), "att.W": (d, d), "att.b": (d,),
        "proj.W": (d, d), "proj.b": (d,),
        "ada.W1": (cfg.ada_hidden, d), "ada.b1": (cfg.ada_hidden,),
        "ada.W2": (1, cfg.ada_hidden), "ada.b2": (1,),
    })
    params = {}
    for name, shape in shapes.items():
        bias = name.split(".")[1].startswith("b")
        sub = int(derive_seed(seed, "init", name).generate_state(1)[0])
        if name == "att.a":
            p = init_params((1, d), seed=sub, name=name)
            p.value = p.value.reshape(d)
            p.decay = False
        elif name.startswith("ada.") and ada_zero:
            p = init_params(shape, scheme="zeros", name=name)
        else:
            p = init_params(shape, seed=sub, name=name, bias=bias)
        params[name] = p
    return ModelParams(params)


# ---------------------------------------------------------------------------
# constants derived from graph + indexes, built once per run


@dataclass
class GraphInputs:
    features: dict
    indexes: list
    A_fused: np.ndarray
    hop_mats: list = field(default_factory=list)

    @classmethod
    def build(cls, graph: HeteroGraph, indexes) -> "GraphInputs":
        feats = {t: constant(graph.features[t]) for t in metapath_types(indexes)}
        hop_mats = [[h.toarray().astype(np.float64) for h in ix.hops] for ix in indexes]
        return cls(feats, list(indexes), fuse_adjacency(indexes), hop_mats)

    @property
    def n(self) -> int:
        return self.A_fused.shape[0]


# ---------------------------------------------------------------------------
# components


def feature_transform(tape: Tape, graph: HeteroGraph, features: dict, params: ModelParams, act: str = "elu") -> dict:
    """Per-type projection into the shared d-dimensional space."""
    out = {}
    for t, x in features.items():
        name = graph.type_names[t]
        if f"transform.W.{name}" not in params:
            raise ValueError(f"missing transform parameters for type {name!r}")
        z = tape.affine(x, params[f"transform.W.{name}"], params[f"transform.b.{name}"])
        out[t] = tape.activation(act, z)
    return out


def gcn_encode(tape: Tape, A_norm, H: DiffMatrix, params: ModelParams,
               hidden_act: str = "elu", out_act: str = "identity") -> DiffMatrix:
    """Two-layer GCN with the shared weights: A act(A H W1 + b1) W2 + b2."""
    A = A_norm if isinstance(A_norm, DiffMatrix) else constant(A_norm)
    n = A.value.shape[0]
    if A.value.shape != (n, n) or H.value.shape[0] != n:
        raise ValueError(f"shape mismatch: A {A.value.shape}, H {H.value.shape}")
    x = tape.matmul(tape.matmul(A, H), params["gcn.W1"])
    x = tape.activation(hidden_act, tape.add(x, params["gcn.b1"]))
    x = tape.matmul(tape.matmul(A, x), params["gcn.W2"])
    return tape.activation(out_act, tape.add(x, params["gcn.b2"]))


def context_aggregate(tape: Tape, index: MetaPathIndex, h: dict, params: ModelParams, u: int,
                      act: str = "elu", hop_mats=None, use_context: bool = True) -> DiffMatrix:
    """act(h_i + sum_j sum_{v in N_i^{T_j}} W_uj h_v) for every target node i."""
    target = index.spec.types[0]
    x = h[target]
    if use_context:
        if hop_mats is None:
            hop_mats = [m.toarray().astype(np.float64) for m in index.hops]
        for j in range(1, index.spec.length + 1):
            N = hop_mats[j - 1]
            if not N.any():
                continue
            msg = tape.matmul(constant(N), h[index.spec.types[j]])
            x = tape.add(x, tape.affine(msg, params[f"context.W.{u}.{j}"]))
    return tape.activation(act, x)


def augment_masks(A: np.ndarray, dim: int, spec: AugmentSpec):
    """Edge-masked normalized adjacency and a 0/1 column mask over ``dim`` features."""
    rng = np.random.default_rng(spec.seed)
    n = A.shape[0]
    drop = rng.random((n, n)) < spec.edge_mask_rate
    A2 = np.where(drop, 0, A)
    np.fill_diagonal(A2, np.diag(A))
    col_keep = (rng.random(dim) >= spec.feature_mask_rate).astype(np.float64)
    return normalize_adjacency(A2), col_keep


def augment(tape: Tape, index: MetaPathIndex, hP: DiffMatrix, spec: AugmentSpec):
    """Perturbed (A_norm', H') for one meta-path view."""
    A_norm, col_keep = augment_masks(index.A, hP.value.shape[1], spec)
    if spec.feature_mask_rate == 0.0:
        return A_norm, hP
    return A_norm, tape.scale(hP, col_keep.reshape(1, -1))


def attention_fuse(tape: Tape, Z_set, params: ModelParams):
    """Semantic attention over view embeddings; returns (z_f, beta)."""
    if not Z_set:
        raise ValueError("empty embedding set")
    scores = []
    a = tape.reshape(params["att.a"], (-1, 1))
    for Z in Z_set:
        t = tape.tanh(tape.affine(Z, params["att.W"], params["att.b"]))
        scores.append(tape.matmul(tape.mean(t, axis=0), a))
    w = tape.concat(scores, axis=1)
    beta = tape.softmax(w, axis=1)
    zf = None
    for s, Z in enumerate(Z_set):
        term = tape.mul(Z, tape.getitem(beta, (slice(0, 1), slice(s, s + 1))))
        zf = term if zf is None else tape.add(zf, term)
    return zf, beta


def project(tape: Tape, Z: DiffMatrix, params: ModelParams, act: str = "elu") -> DiffMatrix:
    return tape.activation(act, tape.affine(Z, params["proj.W"], params["proj.b"]))


def adaptive_weights(tape: Tape, Zc_bar: DiffMatrix, Zf_bar: DiffMatrix, params: ModelParams) -> DiffMatrix:
    """All-pairs gamma_ij = sigmoid(W2 tanh(W1 (zc_i + zf_j) + b1) + b2), shape (n, n)."""
    n, d = Zc_bar.value.shape
    # W1 (zc_i + zf_j) = W1 zc_i + W1 zf_j, so the hidden layer is a broadcast sum
    pc = tape.reshape(tape.affine(Zc_bar, params["ada.W1"], params["ada.b1"]), (n, 1, -1))
    pf = tape.reshape(tape.affine(Zf_bar, params["ada.W1"]), (1, n, -1))
    hidden = tape.tanh(tape.add(pc, pf))
    logit = tape.matmul(hidden, tape.transpose(params["ada.W2"]))
    logit = tape.add(tape.reshape(logit, (n, n)), tape.reshape(params["ada.b2"], (1, 1)))
    return tape.sigmoid(logit)


def adaptive_weight(zc: np.ndarray, zf: np.ndarray, params: ModelParams) -> float:
    """Single-pair weight evaluated without a tape."""
    hidden = np.tanh(params["ada.W1"].value @ (zc + zf) + params["ada.b1"].value)
    return float(expit(params["ada.W2"].value @ hidden + params["ada.b2"].value)[0])


# ---------------------------------------------------------------------------
# full two-view forward pass


@dataclass
class Views:
    zc: DiffMatrix
    zf: DiffMatrix
    zc_bar: DiffMatrix
    zf_bar: DiffMatrix
    beta: DiffMatrix


@dataclass
class ForwardNoise:
    """Random choices of one forward pass; all-None means a clean pass."""

    augment: list = field(default_factory=list)
    dropout: Optional[dict] = None


def draw_noise(inputs: GraphInputs, dim: int, seed: int, epoch: int,
               edge_rate: float, feature_rate: float, dropout: float) -> ForwardNoise:
    aug = []
    for u, ix in enumerate(inputs.indexes):
        sub = int(derive_seed(seed, "augment", epoch, u).generate_state(1)[0])
        aug.append(augment_masks(ix.A, dim, AugmentSpec(edge_rate, feature_rate, sub)))
    drop = None
    if dropout > 0:
        rng = np.random.default_rng(derive_seed(seed, "dropout", epoch))
        keep = 1.0 - dropout
        shape = (inputs.n, dim)
        drop = {"coarse": (rng.random(shape) < keep) / keep}
        for u in range(len(inputs.indexes)):
            drop[(u, 0)] = (rng.random(shape) < keep) / keep
            drop[(u, 1)] = (rng.random(shape) < keep) / keep
    return ForwardNoise(aug, drop)


def forward(tape: Tape, graph: HeteroGraph, inputs: GraphInputs, params: ModelParams, cfg: ModelConfig,
            noise: Optional[ForwardNoise] = None, use_context: bool = True) -> Views:
    """Coarse and fine-grained views plus their projections."""
    noise = noise or ForwardNoise()

    def dropped(H, key):
        if noise.dropout is None:
            return H
        return tape.scale(H, noise.dropout[key])

    h = feature_transform(tape, graph, inputs.features, params, cfg.transform_act)
    target = graph.target_type
    zc = gcn_encode(tape, inputs.A_fused, dropped(h[target], "coarse"), params, cfg.gcn_hidden_act, cfg.gcn_out_act)

    Z_set = []
    for u, ix in enumerate(inputs.indexes):
        hP = context_aggregate(tape, ix, h, params, u, cfg.context_act, inputs.hop_mats[u], use_context)
        Z_set.append(gcn_encode(tape, ix.A_norm, dropped(hP, (u, 0)), params, cfg.gcn_hidden_act, cfg.gcn_out_act))
        if noise.augment:
            A_aug, col_keep = noise.augment[u]
            hP_aug = tape.scale(hP, col_keep.reshape(1, -1))
        else:
            A_aug, hP_aug = ix.A_norm, hP
        Z_set.append(gcn_encode(tape, A_aug, dropped(hP_aug, (u, 1)), params, cfg.gcn_hidden_act, cfg.gcn_out_act))
    zf, beta = attention_fuse(tape, Z_set, params)
    return Views(zc, zf, project(tape, zc, params, cfg.proj_act), project(tape, zf, params, cfg.proj_act), beta)
