"""Pure numpy implementations of the hot kernels (fallback backend)."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def pairwise_sq_dists(X):
    X = np.ascontiguousarray(X, dtype=np.float64)
    n = X.shape[0]
    D = np.zeros((n, n))
    for i in range(n - 1):
        diff = X[i + 1:] - X[i]
        row = np.einsum("ij,ij->i", diff, diff)
        D[i, i + 1:] = row
        D[i + 1:, i] = row
    return D


def im2col(x, K, stride):
    x = np.ascontiguousarray(x, dtype=np.float64)
    B, C, H, W = x.shape
    win = sliding_window_view(x, (K, K), axis=(2, 3))[:, :, ::stride, ::stride]
    Ho, Wo = win.shape[2], win.shape[3]
    # (B, C, Ho, Wo, K, K) -> (B, Ho, Wo, C, K, K)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B, Ho * Wo, C * K * K)


def col2im(cols, C, H, W, K, stride):
    cols = np.asarray(cols, dtype=np.float64)
    B = cols.shape[0]
    Ho = (H - K) // stride + 1
    Wo = (W - K) // stride + 1
    blocks = cols.reshape(B, Ho, Wo, C, K, K)
    x = np.zeros((B, C, H, W))
    for ki in range(K):
        for kj in range(K):
            x[:, :, ki:ki + stride * (Ho - 1) + 1:stride, kj:kj + stride * (Wo - 1) + 1:stride] += \
                blocks[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
    return x
