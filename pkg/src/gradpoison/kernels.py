"""Hot-kernel dispatch.

The compiled extension is used when it imports; otherwise the numpy fallback.
Set ``GRADPOISON_KERNELS=python`` to force the fallback.
"""

import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("GRADPOISON_KERNELS", "").lower() != "python":
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]
        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py


def pairwise_sq_dists(X):
    """(n, n) squared Euclidean distances between the rows of ``X``."""
    return _impl.pairwise_sq_dists(np.ascontiguousarray(X, dtype=np.float64))


def im2col(x, K, stride):
    """(B, C, H, W) -> (B, Ho*Wo, C*K*K) patch matrix, columns ordered (c, ki, kj)."""
    return _impl.im2col(np.ascontiguousarray(x, dtype=np.float64), K, stride)


def col2im(cols, C, H, W, K, stride):
    """Adjoint of :func:`im2col`: scatter-add patches back to (B, C, H, W)."""
    return _impl.col2im(np.ascontiguousarray(cols, dtype=np.float64), C, H, W, K, stride)


def conv_out_size(size, kernel, stride):
    return (size - kernel) // stride + 1
