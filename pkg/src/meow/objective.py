"""Weighted InfoNCE, prototypical loss, the adaptive-weight loss and the
closed-form per-sample gradients of the weighted InfoNCE."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .autodiff import DiffMatrix, Tape, constant
from .clustering import ClusterModel

WEIGHT_MODES = ("none", "hard", "random", "adaptive", "constant")


@dataclass
class LossConfig:
    tau: float = 0.5
    lam: float = 1.0
    denominator_floor: float = 1e-12
    weight_mode: str = "hard"
    constant_weight: float = 1.0
    detach_weights: bool = False

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"temperature must be > 0, got {self.tau}")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.weight_mode not in WEIGHT_MODES:
            raise ValueError(f"unknown weight mode {self.weight_mode!r}")


def l2_normalize(tape: Tape, Z: DiffMatrix) -> DiffMatrix:
    """Rows scaled to unit length, so dot products become cosine similarities."""
    norm = tape.sqrt(tape.sum(tape.mul(Z, Z), axis=1))
    return tape.div(Z, norm)


def infonce_terms(tape: Tape, Zc_bar: DiffMatrix, Zf_bar: DiffMatrix, weights, cfg: LossConfig) -> DiffMatrix:
    """Per-anchor losses, shape (n, 1):
    -log[exp(zc_i.zf_i / tau) / max(floor, sum_j w_ij exp(zc_i.zf_j / tau))]."""
    if not cfg.tau > 0:
        raise ValueError("temperature must be > 0")
    inv_tau = 1.0 / cfg.tau
    sim = tape.scale(tape.matmul(Zc_bar, tape.transpose(Zf_bar)), inv_tau)
    pos = tape.scale(tape.sum(tape.mul(Zc_bar, Zf_bar), axis=1), inv_tau)
    lse = tape.logsumexp(sim, weights=weights, floor=cfg.denominator_floor)
    return tape.sub(lse, pos)


def weighted_infonce(tape: Tape, Zc_bar: DiffMatrix, Zf_bar: DiffMatrix, weights, cfg: LossConfig) -> DiffMatrix:
    """Mean weighted InfoNCE over anchors (coarse view anchors, fine view samples)."""
    w = weights.value if isinstance(weights, DiffMatrix) else np.asarray(weights)
    if np.any(w < 0):
        raise ValueError("negative weight")
    return tape.mean(infonce_terms(tape, Zc_bar, Zf_bar, weights, cfg))


def prototype_terms(tape: Tape, Zc_bar: DiffMatrix, model: ClusterModel) -> DiffMatrix:
    """Per-anchor prototypical losses averaged over clusterings, shape (n, 1)."""
    total = None
    for c in model.clusterings:
        if np.any(np.bincount(c.assignments, minlength=c.k) == 0):
            raise ValueError("empty cluster")
        logits = tape.scale(tape.matmul(Zc_bar, constant(c.centroids.T)), (1.0 / c.theta).reshape(1, -1))
        onehot = np.zeros((len(c.assignments), c.k))
        onehot[np.arange(len(c.assignments)), c.assignments] = 1.0
        pos = tape.sum(tape.scale(logits, onehot), axis=1)
        term = tape.sub(tape.logsumexp(logits), pos)
        total = term if total is None else tape.add(total, term)
    return tape.scale(total, 1.0 / model.M)


def prototypical_loss(tape: Tape, Zc_bar: DiffMatrix, model: ClusterModel) -> DiffMatrix:
    return tape.mean(prototype_terms(tape, Zc_bar, model))


def total_loss_meow(tape: Tape, l_con: DiffMatrix, l_proto: DiffMatrix | None, cfg: LossConfig) -> DiffMatrix:
    """L^con + lambda L^proto."""
    if l_proto is None or cfg.lam == 0:
        return l_con
    return tape.add(l_con, tape.scale(l_proto, cfg.lam))


def loss_ada(tape: Tape, Zc_bar: DiffMatrix, Zf_bar: DiffMatrix, params, cfg: LossConfig):
    """Weighted InfoNCE with MLP-learned pair weights; returns (loss, weights)."""
    from .model import adaptive_weights

    gamma = adaptive_weights(tape, Zc_bar, Zf_bar, params)
    if cfg.detach_weights:
        gamma = constant(gamma.value)
    return weighted_infonce(tape, Zc_bar, Zf_bar, gamma, cfg), gamma


# ---------------------------------------------------------------------------
# closed-form gradients


@dataclass
class GradientReport:
    """Per-sample gradients of one anchor's loss w.r.t. the fine-view samples.

    ``grads[j]`` is d L_i / d zf_j; ``positive`` indexes the anchor's own
    positive sample. ``similarity[j] = zc_i . zf_j``.
    """

    anchor: int
    grads: np.ndarray
    similarity: np.ndarray
    weights: np.ndarray
    tau: float

    @property
    def magnitudes(self) -> np.ndarray:
        return np.linalg.norm(self.grads, axis=1)

    @property
    def negatives(self) -> np.ndarray:
        return np.array([j for j in range(len(self.similarity)) if j != self.anchor])

    @property
    def positive_magnitude(self) -> float:
        return float(self.magnitudes[self.anchor])


def analytic_gradients(Zc_bar: np.ndarray, Zf_bar: np.ndarray, gamma: np.ndarray, tau: float, i: int) -> GradientReport:
    """d L_i / d f(x_t) for every sample t.

    Negatives: gamma_it exp(s_it/tau) / (tau sum_j gamma_ij exp(s_ij/tau)) f(x_i).
    Positive: -f(x_i)/tau, plus the negative-form term when gamma_ii > 0.
    """
    anchor = np.asarray(Zc_bar)[i]
    sim = np.asarray(Zf_bar) @ anchor
    w = np.asarray(gamma, dtype=np.float64)[i]
    logits = sim / tau
    m = logits[w > 0].max() if np.any(w > 0) else 0.0
    e = w * np.exp(logits - m)
    soft = e / e.sum()
    grads = (soft / tau)[:, None] * anchor[None, :]
    grads[i] -= anchor / tau
    return GradientReport(i, grads, sim, w.copy(), tau)


def write_gradient_report(report: GradientReport, path):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["sample", "role", "similarity", "weight", "grad_magnitude"])
        for j, (s, w, g) in enumerate(zip(report.similarity, report.weights, report.magnitudes)):
            out.writerow([j, "positive" if j == report.anchor else "negative", repr(float(s)), repr(float(w)), repr(float(g))])
