"""Dense-tensor numerics: a reverse-mode tape, Adam, and a plateau LR schedule.

Everything runs in float64. The tape is define-by-run: values are computed
eagerly when an op is recorded, adjoints are filled in by ``Tape.backward``.
Reductions accumulate in creation order, so repeated runs with identical
inputs are bitwise identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Node",
    "Tape",
    "ShapeError",
    "NumericError",
    "TapeStateError",
    "AdamState",
    "adam_step",
    "PlateauSchedule",
    "plateau_update",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class NumericError(ArithmeticError):
    """A scalar op produced a non-finite value."""


class TapeStateError(RuntimeError):
    """Backward was invoked on a tape in an invalid state."""


def _as_f64(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a


class Node:
    """One value in the computation DAG, plus its adjoint after backward."""

    __slots__ = ("value", "grad", "_parents", "_vjps", "track")

    def __init__(self, value, parents=(), vjps=(), track=True):
        self.value = value
        self.grad = None
        self._parents = parents
        self._vjps = vjps
        self.track = track

    @property
    def shape(self):
        return np.shape(self.value)


class Tape:
    """Records primitive ops over numpy arrays and runs reverse accumulation.

    Ops are methods; each returns a ``Node`` whose ``value`` is already
    computed. ``backward(loss)`` seeds the adjoint of a scalar ``loss`` node
    with 1 and accumulates adjoints in reverse creation order, which is a
    valid reverse topological order because parents are always created
    before children.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._done = False

    # -- leaves ----------------------------------------------------------

    def param(self, value) -> Node:
        """Differentiable leaf; its .grad is read out after backward."""
        return self._record(_as_f64(value), track=True)

    def constant(self, value) -> Node:
        """Non-differentiable leaf; no adjoint is accumulated into it."""
        return self._record(_as_f64(value), track=False)

    def _record(self, value, parents=(), vjps=(), track=True) -> Node:
        node = Node(value, parents, vjps, track)
        self.nodes.append(node)
        return node

    # -- elementwise and linear ops --------------------------------------

    def matmul(self, a: Node, b: Node) -> Node:
        av, bv = a.value, b.value
        if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
            raise ShapeError(f"matmul: {av.shape} @ {bv.shape}")
        return self._record(
            av @ bv,
            (a, b),
            (lambda up: up @ bv.T, lambda up: av.T @ up),
        )

    def transpose(self, x: Node) -> Node:
        return self._record(x.value.T, (x,), (lambda up: up.T,))

    def add(self, a: Node, b: Node) -> Node:
        if a.shape != b.shape:
            raise ShapeError(f"add: {a.shape} vs {b.shape}")
        return self._record(a.value + b.value, (a, b), (lambda up: up, lambda up: up))

    def sub(self, a: Node, b: Node) -> Node:
        if a.shape != b.shape:
            raise ShapeError(f"sub: {a.shape} vs {b.shape}")
        return self._record(
            a.value - b.value, (a, b), (lambda up: up, lambda up: -up)
        )

    def mul(self, a: Node, b: Node) -> Node:
        if a.shape != b.shape:
            raise ShapeError(f"mul: {a.shape} vs {b.shape}")
        av, bv = a.value, b.value
        return self._record(av * bv, (a, b), (lambda up: up * bv, lambda up: up * av))

    def scale(self, x: Node, c: float) -> Node:
        c = float(c)
        return self._record(x.value * c, (x,), (lambda up: up * c,))

    def add_bias(self, x: Node, b: Node) -> Node:
        """Row-broadcast bias: (m, q) + (q,)."""
        if x.value.ndim != 2 or b.value.shape != (x.value.shape[1],):
            raise ShapeError(f"add_bias: {x.shape} + {b.shape}")
        return self._record(
            x.value + b.value[None, :],
            (x, b),
            (lambda up: up, lambda up: up.sum(axis=0)),
        )

    def leaky_relu(self, x: Node, slope: float) -> Node:
        xv = x.value
        gate = np.where(xv >= 0.0, 1.0, slope)
        return self._record(xv * gate, (x,), (lambda up: up * gate,))

    def exp(self, x: Node) -> Node:
        y = np.exp(x.value)
        return self._record(y, (x,), (lambda up: up * y,))

    def exp_scale(self, x: Node, c: float) -> Node:
        """exp(c * x) in one op; the workhorse of the RBF kernel."""
        c = float(c)
        y = np.exp(c * x.value)
        return self._record(y, (x,), (lambda up: up * (c * y),))

    def square(self, x: Node) -> Node:
        xv = x.value
        return self._record(xv * xv, (x,), (lambda up: up * (2.0 * xv),))

    # -- reductions -------------------------------------------------------

    def sum(self, x: Node) -> Node:
        shape = x.shape
        return self._record(
            float(np.sum(x.value)), (x,), (lambda up: np.full(shape, up),)
        )

    def sum_rows(self, x: Node) -> Node:
        """Column sums of a matrix: (m, q) -> (q,)."""
        m = x.value.shape[0]
        return self._record(
            x.value.sum(axis=0),
            (x,),
            (lambda up: np.broadcast_to(up, (m,) + up.shape),),
        )

    def mean(self, x: Node) -> Node:
        shape = x.shape
        size = x.value.size
        return self._record(
            float(np.mean(x.value)), (x,), (lambda up: np.full(shape, up / size),)
        )

    def mse(self, a: Node, b: Node) -> Node:
        """Mean over all elements of the squared difference."""
        if a.shape != b.shape:
            raise ShapeError(f"mse: {a.shape} vs {b.shape}")
        diff = a.value - b.value
        size = diff.size
        val = float(np.mean(diff * diff))
        if not math.isfinite(val):
            raise NumericError("mse produced a non-finite value")
        return self._record(
            val,
            (a, b),
            (lambda up: (2.0 * up / size) * diff, lambda up: (-2.0 * up / size) * diff),
        )

    # -- structural ops ---------------------------------------------------

    def concat_rows(self, parts: list[Node]) -> Node:
        sizes = [p.value.shape[0] for p in parts]
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        vjps = tuple(
            (lambda lo, hi: (lambda up: up[lo:hi]))(offsets[i], offsets[i + 1])
            for i in range(len(parts))
        )
        return self._record(np.vstack([p.value for p in parts]), tuple(parts), vjps)

    def slice_rows(self, x: Node, start: int, stop: int) -> Node:
        shape = x.shape

        def vjp(up):
            g = np.zeros(shape)
            g[start:stop] = up
            return g

        return self._record(np.array(x.value[start:stop]), (x,), (vjp,))

    def gather_rows(self, x: Node, idx) -> Node:
        """Select rows by index (repeats allowed); adjoints scatter-add back."""
        idx = np.asarray(idx, dtype=np.intp)
        shape = x.shape

        def vjp(up):
            g = np.zeros(shape)
            np.add.at(g, idx, up)
            return g

        return self._record(x.value[idx], (x,), (vjp,))

    def slice_cols(self, x: Node, cols) -> Node:
        cols = np.asarray(cols, dtype=np.intp)
        shape = x.shape

        def vjp(up):
            g = np.zeros(shape)
            g[:, cols] = up
            return g

        return self._record(np.array(x.value[:, cols]), (x,), (vjp,))

    # -- kernel / penalty primitives --------------------------------------

    def pairwise_sqdist(self, x: Node, y: Node) -> Node:
        """Matrix of squared Euclidean distances D[i, j] = ||x_i - y_j||^2."""
        if y is x:
            return self._self_sqdist(x)
        xv, yv = x.value, y.value
        if xv.ndim != 2 or yv.ndim != 2 or xv.shape[1] != yv.shape[1]:
            raise ShapeError(f"pairwise_sqdist: {xv.shape} vs {yv.shape}")
        xx = np.sum(xv * xv, axis=1)
        yy = np.sum(yv * yv, axis=1)
        d = xv @ yv.T
        d *= -2.0
        d += xx[:, None]
        d += yy[None, :]
        np.maximum(d, 0.0, out=d)

        def vjp_x(up):
            return 2.0 * (xv * up.sum(axis=1)[:, None] - up @ yv)

        def vjp_y(up):
            return 2.0 * (yv * up.sum(axis=0)[:, None] - up.T @ xv)

        return self._record(d, (x, y), (vjp_x, vjp_y))

    def _self_sqdist(self, x: Node) -> Node:
        # D(x, x) with both adjoint roles folded into one matmul
        xv = x.value
        if xv.ndim != 2:
            raise ShapeError(f"pairwise_sqdist: {xv.shape}")
        xx = np.sum(xv * xv, axis=1)
        d = xv @ xv.T
        d *= -2.0
        d += xx[:, None]
        d += xx[None, :]
        np.maximum(d, 0.0, out=d)

        def vjp(up):
            s = up.sum(axis=0) + up.sum(axis=1)
            return 2.0 * (xv * s[:, None] - (up + up.T) @ xv)

        return self._record(d, (x,), (vjp,))

    def extreme_mean(self, x: Node, k: int, largest: bool) -> Node:
        """Column-wise mean of the k largest (or smallest) entries: (m, q) -> (1, q).

        The adjoint flows only to the selected entries. Ties are broken by a
        stable argsort, so selection is deterministic.
        """
        xv = x.value
        m, q = xv.shape
        if k < 1 or k > m:
            raise ShapeError(f"extreme_mean: k={k} with {m} rows")
        order = np.argsort(xv, axis=0, kind="stable")
        idx = order[-k:] if largest else order[:k]
        val = xv[idx, np.arange(q)[None, :]].mean(axis=0, keepdims=True)
        shape = x.shape

        def vjp(up):
            g = np.zeros(shape)
            np.add.at(g, (idx, np.arange(q)[None, :]), up / k)
            return g

        return self._record(val, (x,), (vjp,))

    def weighted_sum(self, x: Node, w: np.ndarray) -> Node:
        """Scalar sum(w * x) against a constant weight array."""
        if np.shape(w) != x.shape:
            raise ShapeError(f"weighted_sum: {np.shape(w)} vs {x.shape}")
        return self._record(
            float(np.dot(w.ravel(), x.value.ravel())), (x,), (lambda up: up * w,)
        )

    def monomial_map(self, z: Node, basis) -> Node:
        """Evaluate a monomial feature basis, (m, d) -> (m, D).

        ``basis`` is a ``mixing.MonomialBasis``; its exponent table and
        reduced-monomial index table drive both the product evaluation and
        the polynomial-rule adjoint.
        """
        zv = z.value
        if zv.ndim != 2 or zv.shape[1] != basis.d:
            raise ShapeError(f"monomial_map: {zv.shape} with d={basis.d}")
        feats = basis.evaluate(zv)
        exps = basis.exponents
        red = basis.reduced_index

        def vjp(up):
            g = np.empty_like(zv)
            for i in range(basis.d):
                e = exps[:, i]
                g[:, i] = ((up * e) * feats[:, red[:, i]]).sum(axis=1)
            return g

        return self._record(feats, (z,), (vjp,))

    # -- backward ----------------------------------------------------------

    def backward(self, loss: Node) -> None:
        """Reverse accumulation from a scalar node recorded on this tape."""
        if not self.nodes:
            raise TapeStateError("backward on an empty tape: no forward was run")
        if loss not in self.nodes:
            raise TapeStateError("loss node was not recorded on this tape")
        if np.shape(loss.value) != ():
            raise ShapeError("backward target must be scalar")
        if not math.isfinite(float(loss.value)):
            raise NumericError("backward target is non-finite")
        for node in self.nodes:
            node.grad = None
        loss.grad = 1.0
        for node in reversed(self.nodes):
            if node.grad is None or not node._parents:
                continue
            for parent, vjp in zip(node._parents, node._vjps):
                if not parent.track and not parent._parents:
                    continue
                g = vjp(node.grad)
                parent.grad = g if parent.grad is None else parent.grad + g
        self._done = True


# ---------------------------------------------------------------------------
# Optimizer and schedule
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Adam with bias correction; moments are allocated lazily per parameter."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict) -> dict:
    """Apply one Adam update in place; returns the updated params dict."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: grad {g.shape} vs param {p.shape} for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


@dataclass
class PlateauSchedule:
    """Halve the LR when the epoch loss stops improving, with a cooldown.

    An epoch counts as an improvement only when it beats the best loss by a
    relative margin of ``threshold`` (so a crawling loss still triggers
    decay). After a drop, ``cooldown`` epochs are ignored before
    non-improving epochs start counting again; the LR never goes below
    ``min_lr``.
    """

    lr: float = 1e-3
    factor: float = 0.5
    patience: int = 10
    cooldown: int = 10
    min_lr: float = 1e-4
    threshold: float = 1e-4
    best: float = math.inf
    bad_epochs: int = 0
    cooldown_left: int = 0


def plateau_update(sched: PlateauSchedule, epoch_loss: float) -> float:
    """Feed one epoch loss; returns the (possibly reduced) learning rate."""
    if not math.isfinite(epoch_loss):
        raise NumericError("plateau_update: non-finite epoch loss")
    if epoch_loss < sched.best * (1.0 - sched.threshold):
        sched.best = epoch_loss
        sched.bad_epochs = 0
    else:
        sched.best = min(sched.best, epoch_loss)
        sched.bad_epochs += 1
    if sched.cooldown_left > 0:
        sched.cooldown_left -= 1
        sched.bad_epochs = 0
        return sched.lr
    if sched.bad_epochs >= sched.patience:
        sched.lr = max(sched.lr * sched.factor, sched.min_lr)
        sched.cooldown_left = sched.cooldown
        sched.bad_epochs = 0
    return sched.lr
