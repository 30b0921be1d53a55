"""Dense float64 arrays with a recording tape for reverse-mode gradients.

Only the primitives the model needs are provided. Every op is stored with its
forward and backward rule, so a tape can be replayed and differentiated.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import expit


class NonFiniteError(FloatingPointError):
    """A recorded value or gradient became NaN or infinite."""


class DiffMatrix:
    """A float64 array that may take part in a recorded computation."""

    __slots__ = ("value", "grad", "trainable", "name", "decay", "requires_grad")

    def __init__(self, value, trainable: bool = False, name: str = "", decay: bool = False):
        self.value = np.array(value, dtype=np.float64)
        if self.value.ndim == 0:
            self.value = self.value.reshape(1, 1)
        self.grad: Optional[np.ndarray] = None
        self.trainable = trainable
        self.requires_grad = trainable
        self.name = name
        self.decay = decay

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise ValueError(f"item() on array of shape {self.shape}")
        return float(self.value.reshape(-1)[0])

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"DiffMatrix{tag}(shape={self.shape}, trainable={self.trainable})"


def constant(value) -> DiffMatrix:
    return DiffMatrix(value, trainable=False)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (undo numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


@dataclass
class _Op:
    name: str
    inputs: tuple
    output: DiffMatrix
    fwd: Callable
    bwd: Callable


@dataclass
class Tape:
    """Ordered record of primitive operations.

    With ``record=False`` values are computed but nothing is stored, which is
    what finite-difference probes use.
    """

    record: bool = True
    ops: list = field(default_factory=list)
    backward_trace: list = field(default_factory=list)

    # -- core --------------------------------------------------------------
    def _apply(self, name, fwd, bwd, *inputs) -> DiffMatrix:
        with np.errstate(all="ignore"):  # non-finite results are reported below
            out_val = fwd(*(x.value for x in inputs))
        if not np.all(np.isfinite(out_val)):
            raise NonFiniteError(f"non-finite output from {name}")
        out = DiffMatrix(out_val)
        out.requires_grad = any(x.requires_grad for x in inputs)
        if self.record and out.requires_grad:
            self.ops.append(_Op(name, inputs, out, fwd, bwd))
        return out

    def backward(self, loss: DiffMatrix, params=()):
        """Accumulate d(loss)/d(node) into ``.grad`` of every node on the tape.

        ``params`` get zero gradients first, so parameters that do not reach
        the loss end with all-zero gradients.
        """
        if loss.value.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        for p in params:
            p.zero_grad()
        for op in self.ops:
            op.output.grad = None
            for x in op.inputs:
                if x.requires_grad and x.grad is None:
                    x.zero_grad()
        loss.grad = np.ones_like(loss.value)
        self.backward_trace = []
        for k in range(len(self.ops) - 1, -1, -1):
            op = self.ops[k]
            g = op.output.grad
            if g is None:
                continue
            self.backward_trace.append(k)
            grads = op.bwd(g, op.output.value, *(x.value for x in op.inputs))
            for x, gx in zip(op.inputs, grads):
                if gx is None or not x.requires_grad:
                    continue
                if not np.all(np.isfinite(gx)):
                    raise NonFiniteError(f"non-finite gradient through {op.name}")
                x.grad = x.grad + gx

    def replay(self) -> list:
        """Recompute every recorded op from its inputs' current values."""
        return [op.fwd(*(x.value for x in op.inputs)) for op in self.ops]

    # -- linear algebra ----------------------------------------------------
    def matmul(self, a, b):
        def bwd(g, out, av, bv):
            ga = g @ np.swapaxes(bv, -1, -2)
            gb = np.swapaxes(av, -1, -2) @ g
            return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

        return self._apply("matmul", np.matmul, bwd, a, b)

    def affine(self, x, W, b=None):
        """x @ W^T + b for row-stacked inputs ``x``; W is (out, in)."""
        if b is None:
            def fwd(xv, Wv):
                return xv @ Wv.T

            def bwd(g, out, xv, Wv):
                return g @ Wv, g.T @ xv

            return self._apply("affine", fwd, bwd, x, W)

        def fwd(xv, Wv, bv):
            return xv @ Wv.T + bv.reshape(1, -1)

        def bwd(g, out, xv, Wv, bv):
            return g @ Wv, g.T @ xv, g.sum(axis=0).reshape(bv.shape)

        return self._apply("affine", fwd, bwd, x, W, b)

    def transpose(self, a):
        return self._apply("transpose", lambda v: np.swapaxes(v, -1, -2),
                           lambda g, out, v: (np.swapaxes(g, -1, -2),), a)

    def reshape(self, a, shape):
        return self._apply("reshape", lambda v: v.reshape(shape),
                           lambda g, out, v: (g.reshape(v.shape),), a)

    # -- elementwise binary (broadcasting) ---------------------------------
    def add(self, a, b):
        return self._apply("add", np.add,
                           lambda g, out, av, bv: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)), a, b)

    def sub(self, a, b):
        return self._apply("sub", np.subtract,
                           lambda g, out, av, bv: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)), a, b)

    def mul(self, a, b):
        return self._apply("mul", np.multiply,
                           lambda g, out, av, bv: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
                           a, b)

    def div(self, a, b):
        def bwd(g, out, av, bv):
            return _unbroadcast(g / bv, av.shape), _unbroadcast(-g * av / (bv * bv), bv.shape)

        return self._apply("div", np.divide, bwd, a, b)

    def scale(self, a, c):
        """Multiply by a constant scalar or broadcastable constant mask."""
        c = np.asarray(c, dtype=np.float64)
        return self._apply("scale", lambda v: v * c,
                           lambda g, out, v: (_unbroadcast(g * c, v.shape),), a)

    # -- elementwise unary -------------------------------------------------
    def exp(self, a):
        return self._apply("exp", np.exp, lambda g, out, v: (g * out,), a)

    def log(self, a):
        return self._apply("log", np.log, lambda g, out, v: (g / v,), a)

    def sqrt(self, a):
        return self._apply("sqrt", np.sqrt, lambda g, out, v: (g * 0.5 / out,), a)

    def tanh(self, a):
        return self._apply("tanh", np.tanh, lambda g, out, v: (g * (1.0 - out * out),), a)

    def sigmoid(self, a):
        return self._apply("sigmoid", expit, lambda g, out, v: (g * out * (1.0 - out),), a)

    def elu(self, a):
        def fwd(v):
            return np.where(v > 0, v, np.expm1(np.minimum(v, 0.0)))

        def bwd(g, out, v):
            return (g * np.where(v > 0, 1.0, np.exp(np.minimum(v, 0.0))),)

        return self._apply("elu", fwd, bwd, a)

    def relu(self, a):
        return self._apply("relu", lambda v: np.maximum(v, 0.0),
                           lambda g, out, v: (g * (v > 0),), a)

    def activation(self, name: str, a):
        if name in ("identity", "none", "linear"):
            return a
        if name not in ACTIVATIONS:
            raise ValueError(f"unknown activation {name!r}")
        return getattr(self, name)(a)

    # -- reductions and structure -----------------------------------------
    def sum(self, a, axis=None, keepdims=True):
        def fwd(v):
            r = v.sum(axis=axis, keepdims=True)
            return r if keepdims or axis is None else r.squeeze(axis)

        def bwd(g, out, v):
            if axis is None:
                g = g.reshape((1,) * v.ndim)
            elif not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, v.shape).copy(),)

        return self._apply("sum", fwd, bwd, a)

    def mean(self, a, axis=None, keepdims=True):
        n = a.value.size if axis is None else a.value.shape[axis]
        return self.scale(self.sum(a, axis=axis, keepdims=keepdims), 1.0 / n)

    def getitem(self, a, idx):
        def bwd(g, out, v):
            gv = np.zeros_like(v)
            np.add.at(gv, idx, g)
            return (gv,)

        def fwd(v):
            r = v[idx]
            return r.reshape(1, 1) if np.ndim(r) == 0 else r

        return self._apply("getitem", fwd, bwd, a)

    def concat(self, items, axis=0):
        sizes = [x.value.shape[axis] for x in items]
        bounds = np.cumsum(sizes)[:-1]

        def fwd(*vals):
            return np.concatenate(vals, axis=axis)

        def bwd(g, out, *vals):
            return tuple(np.split(g, bounds, axis=axis))

        return self._apply("concat", fwd, bwd, *items)

    def softmax(self, a, axis=-1):
        def fwd(v):
            e = np.exp(v - v.max(axis=axis, keepdims=True))
            return e / e.sum(axis=axis, keepdims=True)

        def bwd(g, out, v):
            return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

        return self._apply("softmax", fwd, bwd, a)

    def logsumexp(self, a, weights=None, floor: float = 0.0):
        """Row-wise ``log(max(floor, sum_j w_ij exp(a_ij)))`` with keepdims.

        ``weights`` may be None (all ones), a constant array or a DiffMatrix;
        weights must be non-negative.
        """
        log_floor = np.log(floor) if floor > 0 else -np.inf

        def fwd(v, w=None):
            if w is None:
                w = np.ones_like(v)
            live = w > 0
            m = np.where(live, v, -np.inf).max(axis=-1, keepdims=True)
            m = np.where(np.isfinite(m), m, 0.0)
            s = (w * np.exp(np.where(live, v - m, -np.inf))).sum(axis=-1, keepdims=True)
            with np.errstate(divide="ignore"):
                out = m + np.log(s)
            return np.maximum(out, log_floor)

        def floored(out, v, w):
            if floor <= 0:
                return np.zeros(out.shape, dtype=bool)
            # the floor is active when the raw weighted sum is below it
            return out <= log_floor

        def probs(out, v, w):
            live = w > 0
            return np.where(live, np.exp(np.where(live, v - out, -np.inf)), 0.0)

        if weights is None:
            def bwd(g, out, v):
                p = np.exp(v - out)
                return (np.where(floored(out, v, None), 0.0, g) * p,)

            return self._apply("logsumexp", fwd, bwd, a)

        if not isinstance(weights, DiffMatrix):
            weights = constant(weights)
        if np.any(weights.value < 0):
            raise ValueError("weights must be non-negative")

        def bwd_w(g, out, v, w):
            gg = np.where(floored(out, v, w), 0.0, g)
            e = probs(out, v, w)
            gv = gg * w * e
            gw = None
            if weights.requires_grad:
                gw = gg * np.exp(v - out)
            return gv, gw

        return self._apply("weighted_logsumexp", fwd, bwd_w, a, weights)


ACTIVATIONS = ("elu", "tanh", "sigmoid", "relu", "exp")


# ---------------------------------------------------------------------------
# gradient verification


def fd_check(builder: Callable, seed: int, h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``builder(seed)`` returns ``(params, loss_fn)`` where ``loss_fn(tape)``
    builds a scalar loss from ``params``. Relative error is
    ``|analytic - fd| / max(1, |fd|)``.
    """
    if not h > 0:
        raise ValueError("invalid step h; must be > 0")
    params, loss_fn = builder(seed)
    params = list(params.values()) if isinstance(params, dict) else list(params)
    params = [p for p in params if p.trainable]
    tape = Tape()
    loss = loss_fn(tape)
    tape.backward(loss, params)
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        flat = p.value.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            up = loss_fn(Tape(record=False)).item()
            flat[k] = orig - h
            down = loss_fn(Tape(record=False)).item()
            flat[k] = orig
            fd = (up - down) / (2 * h)
            err = abs(analytic.reshape(-1)[k] - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
    return float(worst)


# ---------------------------------------------------------------------------
# initialisation


def xavier_uniform(shape, rng: np.random.Generator) -> np.ndarray:
    """Uniform in +-sqrt(6 / (fan_in + fan_out)); shape is (fan_out, fan_in)."""
    if len(shape) == 1:
        fan_out, fan_in = 1, shape[0]
    else:
        fan_out, fan_in = shape[0], int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_params(shape, scheme: str = "xavier-uniform", seed: int = 0, name: str = "", bias: bool = False) -> DiffMatrix:
    if any(int(s) <= 0 for s in shape):
        raise ValueError(f"non-positive dimension in {shape}")
    if bias or scheme == "zeros":
        return DiffMatrix(np.zeros(shape), trainable=True, name=name, decay=False)
    if scheme != "xavier-uniform":
        raise ValueError(f"unknown init scheme {scheme!r}")
    rng = np.random.default_rng(seed)
    return DiffMatrix(xavier_uniform(tuple(shape), rng), trainable=True, name=name, decay=True)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params, grads=None):
    """One bias-corrected Adam update in place.

    The L2 term ``weight_decay * param`` is added to the gradient of
    parameters flagged ``decay`` (weight matrices), never to biases.
    """
    params = list(params)
    if grads is None:
        grads = [p.grad for p in params]
    if len(grads) != len(params):
        raise ValueError("one gradient per parameter required")
    state.t += 1
    b1t = 1.0 - state.beta1 ** state.t
    b2t = 1.0 - state.beta2 ** state.t
    for p, g in zip(params, grads):
        if not p.trainable:
            continue
        if g is None:
            g = np.zeros_like(p.value)
        if g.shape != p.value.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.value.shape} for {p.name!r}")
        if p.decay and state.weight_decay:
            g = g + state.weight_decay * p.value
        key = p.name or id(p)
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(p.value)
            state.v[key] = np.zeros_like(p.value)
        v = state.v[key]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.value -= state.lr * (m / b1t) / (np.sqrt(v / b2t) + state.eps)
    return params
