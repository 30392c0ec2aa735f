"""Pure numpy implementations of the hot kernels (fallback for ``_kernels``)."""
from __future__ import annotations

import numpy as np

_CHUNK_ELEMS = 1 << 22


def pairwise_l2(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Normalized l2 between every row of ``a`` (n, d) and ``b`` (m, d)."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    n, d = a.shape
    out = np.empty((n, b.shape[0]))
    rows = max(1, _CHUNK_ELEMS // max(1, b.shape[0] * d))
    for s in range(0, n, rows):
        diff = a[s:s + rows, None, :] - b[None, :, :]
        out[s:s + rows] = np.einsum("ijk,ijk->ij", diff, diff)
    return np.sqrt(out / d)


def patched_pairwise(a: np.ndarray, b: np.ndarray, reading: int) -> np.ndarray:
    """Patch-level image distance for ``a`` (n, P, d) against ``b`` (m, P, d).

    reading 0: max over corresponding patch pairs (same grid cell).
    reading 1: max over generation patches of the min over training patches.
    reading 2: max over all (generation patch, training patch) pairs.
    """
    n, p, d = a.shape
    m = b.shape[0]
    if reading == 0:
        diff = a[:, None, :, :] - b[None, :, :, :]
        return np.sqrt(np.einsum("ijpk,ijpk->ijp", diff, diff) / d).max(axis=2)
    pd = pairwise_l2(a.reshape(n * p, d), b.reshape(m * p, d)).reshape(n, p, m, p)
    if reading == 2:
        return pd.max(axis=(1, 3))
    return pd.min(axis=3).max(axis=1)


def masked_channel_means(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-image, per-channel mean over ``mask == 1`` for ``x`` (N, C, H, W)."""
    m = np.asarray(mask, dtype=np.float64)
    return np.einsum("nchw,hw->nc", x, m) / m.sum()


def count_at_most(values: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    v = np.sort(np.asarray(values, dtype=np.float64))
    return np.searchsorted(v, np.asarray(thresholds, dtype=np.float64), side="right").astype(np.int64)
