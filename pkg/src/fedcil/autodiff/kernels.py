"""Kernel backend selection.

The compiled extension is used when it was built and imports cleanly;
otherwise the numpy fallback is used. Set ``FEDCIL_PURE_PYTHON=1`` to force
the fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("FEDCIL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled  # type: ignore[attr-defined]
    except ImportError:
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

leaky_relu_forward = _impl.leaky_relu_forward
leaky_relu_backward = _impl.leaky_relu_backward
softmax_rows = _impl.softmax_rows
adam_update = _impl.adam_update

__all__ = [
    "BACKEND",
    "leaky_relu_forward",
    "leaky_relu_backward",
    "softmax_rows",
    "adam_update",
]
