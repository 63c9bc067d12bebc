# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the kernels in ``_kernels_py``.

Operation order mirrors the numpy fallback so the algebraic kernels are
bit-identical when built without floating-point contraction.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt

cnp.import_array()


def leaky_relu_forward(x, double alpha):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] src = np.ascontiguousarray(x, dtype=np.float64).reshape(-1)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty_like(src)
    cdef Py_ssize_t i, n = src.shape[0]
    cdef double val
    for i in range(n):
        val = src[i]
        out[i] = val if val > 0 else alpha * val
    return out.reshape(np.shape(x))


def leaky_relu_backward(x, grad, double alpha):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] src = np.ascontiguousarray(x, dtype=np.float64).reshape(-1)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] g = np.ascontiguousarray(grad, dtype=np.float64).reshape(-1)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty_like(src)
    cdef Py_ssize_t i, n = src.shape[0]
    for i in range(n):
        out[i] = g[i] if src[i] > 0 else alpha * g[i]
    return out.reshape(np.shape(x))


def softmax_rows(x):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] src = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t rows = src.shape[0], cols = src.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty((rows, cols), dtype=np.float64)
    cdef Py_ssize_t i, j
    cdef double top, total
    for i in range(rows):
        top = src[i, 0]
        for j in range(1, cols):
            if src[i, j] > top:
                top = src[i, j]
        total = 0.0
        for j in range(cols):
            out[i, j] = exp(src[i, j] - top)
            total += out[i, j]
        for j in range(cols):
            out[i, j] = out[i, j] / total
    return out


def adam_update(param, grad, m, v, double lr, double beta1, double beta2,
                double eps, double bias1, double bias2):
    """In-place Adam step; ``param``, ``m`` and ``v`` must be C-contiguous float64."""
    cdef double[::1] p = param.reshape(-1)
    cdef const double[::1] g = np.ascontiguousarray(grad, dtype=np.float64).reshape(-1)
    cdef double[::1] mm = m.reshape(-1)
    cdef double[::1] vv = v.reshape(-1)
    cdef Py_ssize_t i, n = p.shape[0]
    cdef double c1 = 1.0 - beta1
    cdef double c2 = 1.0 - beta2
    for i in range(n):
        mm[i] = beta1 * mm[i] + c1 * g[i]
        vv[i] = beta2 * vv[i] + (c2 * g[i]) * g[i]
        p[i] -= (lr * (mm[i] / bias1)) / (sqrt(vv[i] / bias2) + eps)
