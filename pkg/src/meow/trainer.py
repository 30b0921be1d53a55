"""Training loops for MEOW (hard weights + prototypes) and AdaMEOW (learned
weights), early stopping, ablation switches and binary checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .autodiff import AdamState, NonFiniteError, Tape, adam_step
from .clustering import build_cluster_model
from .graph import HeteroGraph, MetaPathSpec, parse_metapath
from .metapath import auto_k, build_index, cached_build_index
from .model import (GraphInputs, ModelConfig, ModelParams, draw_noise, forward,
                    Views, init_model_params)
from .objective import LossConfig, l2_normalize, loss_ada, prototypical_loss, total_loss_meow, weighted_infonce
from .seeding import derive_rng, derive_seed

log = logging.getLogger(__name__)

VARIANTS = ("meow", "ada")
ABLATIONS = ("no_prototype", "no_weight", "no_context", "random_weight", "freeze_ada")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    variant: str = "meow"
    ablations: tuple = ()
    lr: float = 7e-4
    weight_decay: float = 0.0
    patience: int = 40
    max_epochs: int = 500
    tau: float = 0.8
    lam: float = 1.0
    dropout: float = 0.0
    edge_mask_rate: float = 0.2
    feature_mask_rate: float = 0.2
    K: Union[int, str, list] = 5
    cluster_sizes: tuple = (3, 6)
    alpha: float = 5.0
    kmeans_iters: int = 100
    theta_space: str = "fine"
    similarity: str = "cosine"
    weight_mode: Optional[str] = None  # overrides the mode implied by variant/ablations
    constant_weight: float = 1.0
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        self.ablations = tuple(self.ablations)
        self.cluster_sizes = tuple(int(k) for k in self.cluster_sizes)
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        self.validate()

    def validate(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        for a in self.ablations:
            if a not in ABLATIONS:
                raise ValueError(f"unknown ablation {a!r}")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if not self.tau > 0:
            raise ValueError("tau must be > 0")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.weight_mode is not None and self.weight_mode not in ("none", "hard", "random", "constant"):
            raise ValueError(f"unknown weight mode {self.weight_mode!r}")
        if self.variant == "meow" and not self.cluster_sizes:
            raise ValueError("at least one cluster size is required")
        if any(k < 1 for k in self.cluster_sizes):
            raise ValueError("cluster sizes must be >= 1")
        if self.theta_space not in ("fine", "coarse"):
            raise ValueError("theta_space must be 'fine' or 'coarse'")
        if self.similarity not in ("dot", "cosine"):
            raise ValueError("similarity must be 'dot' or 'cosine'")

    def has(self, ablation: str) -> bool:
        return ablation in self.ablations

    def loss_config(self) -> LossConfig:
        if self.variant == "ada":
            mode = "adaptive"
        elif self.has("no_weight"):
            mode = "none"
        elif self.has("random_weight"):
            mode = "random"
        else:
            mode = "hard"
        if self.weight_mode is not None:
            mode = self.weight_mode
        lam = 0.0 if self.has("no_prototype") else self.lam
        return LossConfig(tau=self.tau, lam=lam, weight_mode=mode, constant_weight=self.constant_weight)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ablations"] = list(self.ablations)
        d["cluster_sizes"] = list(self.cluster_sizes)
        return d


def early_stop(history, patience: int) -> bool:
    """True iff none of the last ``patience`` losses beat the best loss before them."""
    if not history:
        raise ValueError("empty history")
    if len(history) <= patience:
        return False
    return min(history[-patience:]) >= min(history[:-patience])


def build_indexes(graph: HeteroGraph, metapaths, K="auto", cache_dir=None) -> list:
    """One MetaPathIndex per meta-path; ``K`` is an int, "auto" or a per-path list."""
    specs = [m if isinstance(m, MetaPathSpec) else parse_metapath(graph, m) for m in metapaths]
    if not specs:
        raise ValueError("at least one meta-path is required")
    ks = list(K) if isinstance(K, (list, tuple)) else [K] * len(specs)
    if len(ks) != len(specs):
        raise ValueError("one K per meta-path required")
    out = []
    for spec, k in zip(specs, ks):
        k = auto_k(graph, spec) if k == "auto" else int(k)
        out.append(cached_build_index(graph, spec, k, cache_dir) if cache_dir else build_index(graph, spec, k))
    return out


def _subseed(seed: int, *labels) -> int:
    return int(derive_seed(seed, *labels).generate_state(1)[0])


@dataclass
class TrainResult:
    params: ModelParams
    embeddings: np.ndarray
    history: list
    best_epoch: int
    epochs_run: int
    indexes: list

    def __iter__(self):
        return iter((self.params, self.embeddings))


@dataclass
class _State:
    epoch: int
    adam: AdamState
    history: list
    best_loss: float
    best_epoch: int
    best_params: dict


class Trainer:
    """Holds everything one run needs; ``run`` trains from the current state."""

    def __init__(self, graph: HeteroGraph, metapaths, cfg: TrainConfig, indexes=None, cache_dir=None):
        cfg.validate()
        self.graph, self.cfg = graph, cfg
        self.indexes = indexes if indexes is not None else build_indexes(graph, metapaths, cfg.K, cache_dir)
        self.inputs = GraphInputs.build(graph, self.indexes)
        self.loss_cfg = cfg.loss_config()
        freeze = cfg.has("freeze_ada")
        self.params = init_model_params(graph, self.indexes, cfg.model, cfg.seed, ada_zero=freeze)
        active = {"transform", "context", "gcn", "att", "proj"}
        if cfg.variant == "ada" and not freeze:
            active.add("ada")
        for name in self.params.names():
            self.params[name].trainable = name.split(".")[0] in active
        self.state = _State(0, AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay), [], np.inf, -1,
                            self.params.snapshot())

    # -- one epoch -----------------------------------------------------------
    def _weights(self, epoch, zc_bar, zf_bar):
        """Pair weights and (for MEOW) the cluster model of this epoch."""
        n = self.inputs.n
        mode = self.loss_cfg.weight_mode
        clusters = None
        need_clusters = mode == "hard" or self.loss_cfg.lam > 0
        if need_clusters:
            members = zf_bar.value if self.cfg.theta_space == "fine" else zc_bar.value
            clusters = build_cluster_model(zf_bar.value, self.cfg.cluster_sizes,
                                           _subseed(self.cfg.seed, "cluster", epoch),
                                           self.cfg.alpha, self.cfg.kmeans_iters, members)
        if mode == "hard":
            gamma = clusters.hard_weights()
        elif mode == "random":
            gamma = derive_rng(self.cfg.seed, "random-weight", epoch).uniform(0.0, 1.0, (n, n))
        elif mode == "constant":
            gamma = np.full((n, n), self.loss_cfg.constant_weight)
        else:
            gamma = np.ones((n, n))
        return gamma, clusters

    def loss(self, tape: Tape, epoch: int, train: bool = True, fixed: Optional[dict] = None):
        """Build this epoch's loss on ``tape``; returns (total, record).

        ``fixed`` caches the epoch's non-differentiable choices (noise, weights,
        clusters): empty on the first call, reused afterwards, so repeated
        evaluations at perturbed parameters see the same discrete state.
        """
        cfg = self.cfg
        fixed = {} if fixed is None else fixed
        if "noise" not in fixed:
            fixed["noise"] = draw_noise(self.inputs, cfg.model.dim, cfg.seed, epoch, cfg.edge_mask_rate,
                                        cfg.feature_mask_rate, cfg.dropout) if train else None
        noise = fixed["noise"]
        views = forward(tape, self.graph, self.inputs, self.params, cfg.model, noise,
                        use_context=not cfg.has("no_context"))
        zc_bar, zf_bar = views.zc_bar, views.zf_bar
        if cfg.similarity == "cosine":
            zc_bar, zf_bar = l2_normalize(tape, zc_bar), l2_normalize(tape, zf_bar)
        rec = {"epoch": epoch}
        if cfg.variant == "ada":
            total, gamma = loss_ada(tape, zc_bar, zf_bar, self.params, self.loss_cfg)
            rec.update(l_con=total.item(), l_proto=0.0)
            g = gamma.value
        else:
            if "weights" not in fixed:
                fixed["weights"] = self._weights(epoch, zc_bar, zf_bar)
            g, clusters = fixed["weights"]
            l_con = weighted_infonce(tape, zc_bar, zf_bar, g, self.loss_cfg)
            l_proto = prototypical_loss(tape, zc_bar, clusters) if self.loss_cfg.lam > 0 else None
            total = total_loss_meow(tape, l_con, l_proto, self.loss_cfg)
            rec.update(l_con=l_con.item(), l_proto=l_proto.item() if l_proto is not None else 0.0)
        rec.update(total=total.item(), w_max=float(g.max()), w_mean=float(g.mean()), w_min=float(g.min()))
        return total, rec

    def step(self):
        """Run one epoch: loss, backward, Adam update; returns the epoch record."""
        st = self.state
        tape = Tape()
        try:
            total, rec = self.loss(tape, st.epoch)
            if not np.isfinite(total.item()):
                raise NonFiniteError("non-finite loss")
            trainable = self.params.trainable()
            tape.backward(total, trainable)
        except NonFiniteError as exc:
            raise TrainingError(f"epoch {st.epoch}: {exc}") from exc
        if rec["total"] < st.best_loss:
            st.best_loss, st.best_epoch = rec["total"], st.epoch
            st.best_params = self.params.snapshot()
        adam_step(st.adam, trainable)
        st.history.append(rec)
        st.epoch += 1
        return rec

    def run(self, max_epochs: Optional[int] = None, checkpoint_path=None) -> TrainResult:
        """Train until early stopping or ``max_epochs`` total epochs."""
        limit = self.cfg.max_epochs if max_epochs is None else max_epochs
        while self.state.epoch < limit:
            rec = self.step()
            if self.state.epoch % 50 == 0:
                log.info("epoch %d loss %.6f", rec["epoch"], rec["total"])
            if early_stop([h["total"] for h in self.state.history], self.cfg.patience):
                log.info("early stop at epoch %d", rec["epoch"])
                break
        if checkpoint_path is not None:
            save_checkpoint(self, checkpoint_path)
        return self.result()

    def views(self, values: Optional[dict] = None) -> Views:
        """All four embedding matrices from a clean forward pass at ``values`` (default: current)."""
        current = self.params.snapshot()
        if values is not None:
            self.params.load(values)
        try:
            return forward(Tape(record=False), self.graph, self.inputs, self.params, self.cfg.model, None,
                           use_context=not self.cfg.has("no_context"))
        finally:
            self.params.load(current)

    def embeddings(self, values: Optional[dict] = None) -> np.ndarray:
        """Unprojected fused fine-grained embeddings from a clean forward pass."""
        return self.views(values).zf.value.copy()

    def result(self) -> TrainResult:
        st = self.state
        return TrainResult(self.params, self.embeddings(st.best_params), list(st.history),
                           st.best_epoch, st.epoch, self.indexes)


def train(graph: HeteroGraph, metapaths, cfg: TrainConfig, **kw) -> TrainResult:
    return Trainer(graph, metapaths, cfg, **kw).run()


def train_meow(graph: HeteroGraph, metapaths, cfg: TrainConfig, **kw) -> TrainResult:
    if cfg.variant != "meow":
        raise ValueError("train_meow needs variant 'meow'")
    return train(graph, metapaths, cfg, **kw)


def train_ada(graph: HeteroGraph, metapaths, cfg: TrainConfig, **kw) -> TrainResult:
    if cfg.variant != "ada":
        raise ValueError("train_ada needs variant 'ada'")
    return train(graph, metapaths, cfg, **kw)


METRIC_COLUMNS = ("epoch", "l_con", "l_proto", "total", "w_max", "w_mean", "w_min")


def write_metrics_csv(history, path):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(METRIC_COLUMNS)
        for rec in history:
            out.writerow([rec["epoch"]] + [repr(float(rec[c])) for c in METRIC_COLUMNS[1:]])


# ---------------------------------------------------------------------------
# checkpoints: magic, version, JSON header, then little-endian float64 arrays.
# Sub-seeds are pure functions of (seed, label, epoch), so the RNG state is the
# run seed plus the next epoch index.

_CKPT_MAGIC = b"MEOWCKPT"
_CKPT_VERSION = 1


def save_checkpoint(trainer: Trainer, path):
    st = trainer.state
    arrays = {}
    for k, v in trainer.params.snapshot().items():
        arrays[f"param/{k}"] = v
    for k, v in st.best_params.items():
        arrays[f"best/{k}"] = v
    for k in st.adam.m:
        arrays[f"adam_m/{k}"] = st.adam.m[k]
        arrays[f"adam_v/{k}"] = st.adam.v[k]
    header = {
        "epoch": st.epoch,
        "total_loss": st.history[-1]["total"] if st.history else None,
        "rng": {"seed": trainer.cfg.seed, "next_epoch": st.epoch},
        "adam_t": st.adam.t,
        "best_loss": st.best_loss if np.isfinite(st.best_loss) else None,
        "best_epoch": st.best_epoch,
        "history": st.history,
        "config": trainer.cfg.to_dict(),
        "arrays": [[k, list(v.shape)] for k, v in arrays.items()],
    }
    hbytes = json.dumps(header).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    os.replace(tmp, path)


def read_checkpoint(path):
    """Return (header, arrays) of a checkpoint file."""
    with open(path, "rb") as fh:
        if fh.read(len(_CKPT_MAGIC)) != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != _CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen))
        arrays = {}
        for name, shape in header["arrays"]:
            count = int(np.prod(shape)) if shape else 1
            arrays[name] = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    return header, arrays


def load_checkpoint(trainer: Trainer, path):
    """Restore params, optimizer state and history into ``trainer``."""
    header, arrays = read_checkpoint(path)
    if header["rng"]["seed"] != trainer.cfg.seed:
        raise ValueError("checkpoint was written by a run with a different seed")
    trainer.params.load({k[6:]: v for k, v in arrays.items() if k.startswith("param/")})
    adam = AdamState(lr=trainer.cfg.lr, weight_decay=trainer.cfg.weight_decay, t=header["adam_t"])
    adam.m = {k[7:]: v.copy() for k, v in arrays.items() if k.startswith("adam_m/")}
    adam.v = {k[7:]: v.copy() for k, v in arrays.items() if k.startswith("adam_v/")}
    best = header["best_loss"]
    trainer.state = _State(header["epoch"], adam, header["history"], np.inf if best is None else best,
                           header["best_epoch"], {k[5:]: v for k, v in arrays.items() if k.startswith("best/")})
    return header
