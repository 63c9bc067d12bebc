"""Dense float64 tensors with a reverse-mode tape.

A :class:`Tape` records every operation whose inputs include a tensor bound
to it. Tensors that are not bound to a tape are plain constants: operations
on constants are evaluated eagerly and never recorded, which is how frozen
snapshots and teacher networks are run.

Broadcasting is deliberately limited to adding a bias row to every row of a
matrix; all other binary operations require equal shapes.
"""
from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import expit

from ..errors import ContractError, DimensionError, TapeStateError
from . import kernels

EPS = 1e-12

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    __slots__ = ("values", "grad", "tape", "parents", "backward_fn", "name")

    def __init__(self, values, tape: "Tape | None" = None, parents: tuple = (),
                 backward_fn: BackwardFn | None = None, name: str | None = None):
        arr = np.asarray(values, dtype=np.float64)
        self.values = arr
        self.grad: np.ndarray | None = None
        self.tape = tape
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def requires_grad(self) -> bool:
        return self.tape is not None

    def __len__(self) -> int:
        return self.values.shape[0]

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        flag = ", tracked" if self.tape is not None else ""
        return f"Tensor{label}(shape={self.shape}{flag})"

    def item(self) -> float:
        return float(self.values)

    def numpy(self) -> np.ndarray:
        return self.values

    def __add__(self, other):
        return add(self, _lift(other))

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scalar_mul(self, -1.0)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of operations, replayed in reverse by :meth:`backward`.

    Nodes are appended in execution order, so the reverse of the record is a
    valid reverse topological order. After one backward pass the tape is
    frozen; :meth:`reset` clears it for reuse.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.frozen = False

    def leaf(self, values, name: str | None = None) -> Tensor:
        """Bind an array to this tape as a differentiable input."""
        if self.frozen:
            raise TapeStateError("cannot add leaves to a frozen tape")
        return Tensor(values, tape=self, name=name)

    def record(self, values, parents: tuple, backward_fn: BackwardFn) -> Tensor:
        if self.frozen:
            raise TapeStateError("tape is frozen; call reset() before recording")
        out = Tensor(values, tape=self, parents=parents, backward_fn=backward_fn)
        self.nodes.append(out)
        return out

    def reset(self) -> None:
        self.nodes = []
        self.frozen = False

    def backward(self, loss: Tensor) -> None:
        if self.frozen:
            raise TapeStateError("backward already ran on this tape")
        if loss.tape is not self:
            raise TapeStateError("loss was not recorded on this tape")
        if loss.values.size != 1 or loss.values.ndim > 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.values)
        for node in reversed(self.nodes):
            if node.grad is None or node.backward_fn is None:
                continue
            grads = node.backward_fn(node.grad)
            for parent, g in zip(node.parents, grads):
                if g is None or parent.tape is None:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
        self.frozen = True


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tape ancestor of ``loss``."""
    if loss.values.size != 1 or loss.values.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape is None:
        raise ContractError("loss does not depend on any tracked tensor")
    loss.tape.backward(loss)


def _emit(values, parents: tuple, backward_fn: BackwardFn) -> Tensor:
    tape = None
    for p in parents:
        if p.tape is not None:
            if tape is None:
                tape = p.tape
            elif p.tape is not tape:
                raise TapeStateError("operands are bound to different tapes")
    if tape is None:
        return Tensor(values)
    return tape.record(values, parents, backward_fn)


def _check_2d(t: Tensor, op: str) -> None:
    if t.values.ndim != 2:
        raise DimensionError(f"{op} expects a matrix, got shape {t.shape}")


# ---------------------------------------------------------------- constants

def constant(values) -> Tensor:
    return Tensor(np.array(values, dtype=np.float64))


def detach(t: Tensor) -> Tensor:
    return Tensor(t.values)


def gaussian(shape, rng: np.random.Generator, std: float = 1.0) -> Tensor:
    """Standard normal samples (forward-only)."""
    return Tensor(rng.standard_normal(shape) * std if std != 1.0 else rng.standard_normal(shape))


def bernoulli(p: float, shape, rng: np.random.Generator) -> Tensor:
    """0/1 samples with success probability ``p`` (forward-only)."""
    return Tensor((rng.random(shape) < p).astype(np.float64))


def one_hot(indices, num_classes: int) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    out = np.zeros((idx.shape[0], num_classes))
    out[np.arange(idx.shape[0]), idx] = 1.0
    return Tensor(out)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_2d(a, "matmul")
    _check_2d(b, "matmul")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    av, bv = a.values, b.values

    def bwd(g):
        return (g @ bv.T if a.tape else None, av.T @ g if b.tape else None)

    return _emit(av @ bv, (a, b), bwd)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as (out, in)."""
    _check_2d(x, "linear")
    _check_2d(weight, "linear")
    if x.shape[1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        raise DimensionError(
            f"linear shapes disagree: x{x.shape} W{weight.shape} b{bias.shape}")
    xv, wv = x.values, weight.values

    def bwd(g):
        return (g @ wv if x.tape else None,
                g.T @ xv if weight.tape else None,
                g.sum(axis=0) if bias.tape else None)

    return _emit(xv @ wv.T + bias.values, (x, weight, bias), bwd)


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape == b.shape:
        return _emit(a.values + b.values, (a, b), lambda g: (g, g))
    if a.values.ndim == 2 and b.shape in ((a.shape[1],), (1, a.shape[1])):
        shape = b.shape
        return _emit(a.values + b.values, (a, b),
                     lambda g: (g, g.sum(axis=0).reshape(shape)))
    raise DimensionError(f"add: cannot combine {a.shape} and {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub: shapes differ {a.shape} vs {b.shape}")
    return _emit(a.values - b.values, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes differ {a.shape} vs {b.shape}")
    av, bv = a.values, b.values
    return _emit(av * bv, (a, b), lambda g: (g * bv, g * av))


def scalar_mul(a: Tensor, s: float) -> Tensor:
    return _emit(a.values * s, (a,), lambda g: (g * s,))


def leaky_relu(a: Tensor, alpha: float = 0.2) -> Tensor:
    av = a.values
    return _emit(kernels.leaky_relu_forward(av, alpha), (a,),
                 lambda g: (kernels.leaky_relu_backward(av, g, alpha),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.values)
    return _emit(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.values)
    return _emit(out, (a,), lambda g: (g * out * (1.0 - out),))


# ---------------------------------------------------------------- structure

def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    if len(tensors) == 1:
        return tensors[0]
    for t in tensors:
        _check_2d(t, "concat")
    other = 1 - axis
    if len({t.shape[other] for t in tensors}) != 1:
        raise DimensionError(f"concat along axis {axis}: mismatched shapes "
                             f"{[t.shape for t in tensors]}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bwd(g):
        if axis == 0:
            return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(tensors)))
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return _emit(np.concatenate([t.values for t in tensors], axis=axis),
                 tuple(tensors), bwd)


def rows(a: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous row slice ``a[start:stop]``."""
    n = a.shape[0]

    def bwd(g):
        full = np.zeros_like(a.values)
        full[start:stop] = g
        return (full,)

    if not 0 <= start <= stop <= n:
        raise DimensionError(f"rows({start}, {stop}) outside 0..{n}")
    return _emit(a.values[start:stop], (a,), bwd)


def gather_rows(a: Tensor, index) -> Tensor:
    idx = np.asarray(index, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise DimensionError(f"gather_rows index outside 0..{a.shape[0] - 1}")

    def bwd(g):
        full = np.zeros_like(a.values)
        np.add.at(full, idx, g)
        return (full,)

    return _emit(a.values[idx], (a,), bwd)


def select_columns(a: Tensor, index) -> Tensor:
    """Columns ``a[:, index]`` (used to align heads with different label sets)."""
    _check_2d(a, "select_columns")
    idx = np.asarray(index, dtype=np.int64)

    def bwd(g):
        full = np.zeros_like(a.values)
        np.add.at(full.T, idx, g.T)
        return (full,)

    return _emit(a.values[:, idx], (a,), bwd)


# ---------------------------------------------------------------- reductions

def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return _emit(np.asarray(a.values.sum()), (a,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.values.size
    return _emit(np.asarray(a.values.mean()), (a,),
                 lambda g: (np.full(shape, float(g) / n),))


def sum_all(terms: Iterable[Tensor]) -> Tensor:
    """Sum of scalar tensors; ``None`` entries are skipped."""
    total = None
    for t in terms:
        if t is None:
            continue
        total = t if total is None else add(total, t)
    if total is None:
        raise ContractError("sum_all received no terms")
    return total


# ---------------------------------------------------------------- probabilities

def softmax(logits: Tensor) -> Tensor:
    _check_2d(logits, "softmax")
    if logits.shape[1] < 1:
        raise DimensionError("softmax needs at least one column")
    s = kernels.softmax_rows(logits.values)

    def bwd(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _emit(s, (logits,), bwd)


def cross_entropy(probs: Tensor, targets: Tensor) -> Tensor:
    """Batch mean of ``-sum_j t_j log p_j`` with ``p`` clamped at 1e-12."""
    if probs.shape != targets.shape:
        raise DimensionError(f"cross_entropy: {probs.shape} vs {targets.shape}")
    pv, tv = probs.values, targets.values
    b = pv.shape[0]
    clamped = np.maximum(pv, EPS)
    logp = np.log(clamped)
    loss = -(tv * logp).sum() / b

    def bwd(g):
        gp = None
        if probs.tape:
            gp = (-g / b) * tv / clamped * (pv >= EPS)
        gt = (-g / b) * logp if targets.tape else None
        return (gp, gt)

    return _emit(np.asarray(loss), (probs, targets), bwd)


def kl_divergence(p: Tensor, q: Tensor) -> Tensor:
    """Batch mean of ``KL(p_row || q_row)``; both logs clamped at 1e-12."""
    if p.shape != q.shape:
        raise DimensionError(f"kl_divergence: {p.shape} vs {q.shape}")
    pv, qv = p.values, q.values
    b = pv.shape[0]
    pc, qc = np.maximum(pv, EPS), np.maximum(qv, EPS)
    logp, logq = np.log(pc), np.log(qc)
    loss = (pv * (logp - logq)).sum() / b

    def bwd(g):
        gp = (g / b) * (logp - logq + (pv >= EPS)) if p.tape else None
        gq = (-g / b) * pv / qc * (qv >= EPS) if q.tape else None
        return (gp, gq)

    return _emit(np.asarray(loss), (p, q), bwd)


def binary_cross_entropy(p: Tensor, targets: Tensor) -> Tensor:
    """Elementwise-mean BCE with both logs clamped at 1e-12."""
    if p.shape != targets.shape:
        raise DimensionError(f"binary_cross_entropy: {p.shape} vs {targets.shape}")
    pv, tv = p.values, targets.values
    n = pv.size
    pos = np.maximum(pv, EPS)
    neg = np.maximum(1.0 - pv, EPS)
    lpos, lneg = np.log(pos), np.log(neg)
    loss = -(tv * lpos + (1.0 - tv) * lneg).sum() / n

    def bwd(g):
        gp = None
        if p.tape:
            gp = (g / n) * (-tv / pos * (pv >= EPS) + (1.0 - tv) / neg * ((1.0 - pv) >= EPS))
        gt = (-g / n) * (lpos - lneg) if targets.tape else None
        return (gp, gt)

    return _emit(np.asarray(loss), (p, targets), bwd)


def squared_distance(a: Tensor, anchor: np.ndarray) -> Tensor:
    """``sum((a - anchor)**2)`` against a constant anchor (proximal terms)."""
    if a.shape != anchor.shape:
        raise DimensionError(f"squared_distance: {a.shape} vs {anchor.shape}")
    diff = a.values - anchor
    return _emit(np.asarray((diff * diff).sum()), (a,), lambda g: (2.0 * g * diff,))
