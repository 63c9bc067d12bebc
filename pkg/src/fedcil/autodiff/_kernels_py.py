"""Pure numpy implementations of the hot kernels.

These are the reference versions; the compiled module in ``_kernels.pyx``
must agree with them (bit-for-bit for the algebraic kernels, to rounding
for ``softmax_rows`` which goes through ``exp``).
"""
import numpy as np


def leaky_relu_forward(x, alpha):
    return np.where(x > 0, x, alpha * x)


def leaky_relu_backward(x, grad, alpha):
    return np.where(x > 0, grad, alpha * grad)


def softmax_rows(x):
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def adam_update(param, grad, m, v, lr, beta1, beta2, eps, bias1, bias2):
    """In-place Adam step on one parameter array."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    param -= lr * (m / bias1) / (np.sqrt(v / bias2) + eps)
