"""Gradient verification on a small seeded instance: finite differences over
the complete training loss, plus closed-form per-sample gradients against the
tape."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import DiffMatrix, Tape, fd_check
from .graph import AuxTypeConfig, SyntheticConfig, generate_synthetic, synthetic_metapaths
from .model import ModelConfig
from .objective import LossConfig, analytic_gradients, infonce_terms
from .seeding import derive_rng
from .trainer import TrainConfig, Trainer

TINY = SyntheticConfig(
    n_classes=3, nodes_per_class=4, feature_dim=5, feature_noise=0.5,
    aux_types=[AuxTypeConfig("a", 9, 0.6, 0.1), AuxTypeConfig("b", 6, 0.6, 0.1)],
)


def tiny_trainer(loss: str = "meow", seed: int = 0, dim: int = 8) -> Trainer:
    """12 target nodes, two meta-paths, d=8."""
    if loss not in ("meow", "ada"):
        raise ValueError(f"unknown loss {loss!r}")
    graph = generate_synthetic(TINY, seed)
    cfg = TrainConfig(variant=loss, K=3, cluster_sizes=(2, 3), seed=seed, dropout=0.1,
                      model=ModelConfig(dim=dim, ada_hidden=4))
    return Trainer(graph, synthetic_metapaths(TINY), cfg)


def full_loss_builder(loss: str = "meow"):
    """``builder(seed)`` for fd_check: every trainable parameter, complete loss."""

    def builder(seed):
        tr = tiny_trainer(loss, seed)
        fixed: dict = {}
        tr.loss(Tape(record=False), 0, fixed=fixed)  # freeze noise and clusters

        def loss_fn(tape):
            return tr.loss(tape, 0, fixed=fixed)[0]

        return tr.params.trainable(), loss_fn

    return builder


def random_embeddings(seed: int, n: int = 12, d: int = 8, scale: float = 0.5):
    rng = derive_rng(seed, "gradcheck", "embeddings")
    return scale * rng.standard_normal((n, d)), scale * rng.standard_normal((n, d))


def tape_anchor_gradients(Zc: np.ndarray, Zf: np.ndarray, gamma: np.ndarray, tau: float, i: int) -> np.ndarray:
    """d L_i / d Zf by reverse mode on the weighted InfoNCE."""
    zc, zf = DiffMatrix(Zc, trainable=True), DiffMatrix(Zf, trainable=True)
    tape = Tape()
    terms = infonce_terms(tape, zc, zf, gamma, LossConfig(tau=tau, denominator_floor=0.0))
    li = tape.getitem(terms, (slice(i, i + 1), slice(0, 1)))
    tape.backward(li, [zc, zf])
    return zf.grad


def analytic_error(Zc, Zf, gamma, tau) -> float:
    """Max over anchors of the relative error |analytic - tape| / max(1, |tape|)."""
    worst = 0.0
    for i in range(Zc.shape[0]):
        a = analytic_gradients(Zc, Zf, gamma, tau, i).grads
        t = tape_anchor_gradients(Zc, Zf, gamma, tau, i)
        worst = max(worst, float((np.abs(a - t) / np.maximum(1.0, np.abs(t))).max()))
    return worst


def gradient_order_violations(report) -> tuple:
    """(monotonicity violations, positive-bound violations) for one anchor."""
    neg = report.negatives
    order = neg[np.argsort(report.similarity[neg], kind="stable")]
    sims, mags = report.similarity[order], report.magnitudes[order]
    mono = int(sum(1 for a in range(len(order) - 1)
                   if sims[a + 1] > sims[a] and not mags[a + 1] > mags[a]))
    bound = int(np.sum(report.magnitudes[neg] > report.positive_magnitude))
    return mono, bound


@dataclass
class GradcheckReport:
    loss: str
    fd_error: float
    analytic_error: float
    monotone_violations: int
    bound_violations: int
    tol: float

    @property
    def passed(self) -> bool:
        return (self.fd_error <= self.tol and self.analytic_error <= self.tol
                and self.monotone_violations == 0 and self.bound_violations == 0)


def run_gradcheck(loss: str = "meow", seed: int = 0, tol: float = 1e-6, tau: float = 0.5) -> GradcheckReport:
    fd = fd_check(full_loss_builder(loss), seed)
    Zc, Zf = random_embeddings(seed)
    n = Zc.shape[0]
    gamma = derive_rng(seed, "gradcheck", "gamma").uniform(0.0, 2.0, (n, n))
    err = analytic_error(Zc, Zf, gamma, tau)
    ones = np.ones((n, n)) - np.eye(n)
    mono = bound = 0
    for i in range(n):
        a, b = gradient_order_violations(analytic_gradients(Zc, Zf, ones, tau, i))
        mono, bound = mono + a, bound + b
    return GradcheckReport(loss, fd, err, mono, bound, tol)
