"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward


def numeric_gradient(fn: Callable[[Sequence[np.ndarray]], float],
                     arrays: Sequence[np.ndarray], h: float = 1e-6) -> list[np.ndarray]:
    """Central differences of a scalar function of several arrays.

    ``fn`` receives the (perturbed) arrays and must return a float; it must
    not keep references to them between calls.
    """
    work = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    for arr in work:
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn(work)
            flat[i] = orig - h
            down = fn(work)
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """``||a - n|| / max(||a||, ||n||, floor)`` over the whole array."""
    num = float(np.linalg.norm(np.ravel(analytic) - np.ravel(numeric)))
    den = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), floor)
    return num / den


def check_gradients(build: Callable[[Sequence[Tensor]], Tensor],
                    arrays: Sequence[np.ndarray], h: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    ``build`` maps input tensors to a scalar loss. It is called once on tape
    leaves for the analytic gradient and repeatedly on constants for the
    finite differences.
    """
    tape = Tape()
    leaves = [tape.leaf(np.array(a, dtype=np.float64)) for a in arrays]
    loss = build(leaves)
    backward(loss)
    analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.values)
                for leaf in leaves]
    numeric = numeric_gradient(
        lambda arrs: float(build([Tensor(a) for a in arrs]).values), arrays, h)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))
