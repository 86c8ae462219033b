"""Inner-loop kernels with a numba path and a pure-numpy path.

Both implementations are importable under explicit names so they can be
benchmarked and cross-checked; the unprefixed names pick one according to
:data:`stmil._accel.USE_NUMBA`.
"""
import numpy as np

from ._accel import USE_NUMBA, njit


def pool_cells_numpy(data, cell):
    """Average-pool every ``cell x cell`` spatial cell of a (C, T, H, W) cuboid.

    Returns a float64 array of shape (n_cells, C), cells in row-major order.
    """
    C, T, H, W = data.shape
    gh, gw = H // cell, W // cell
    v = data.reshape(C, T, gh, cell, gw, cell).astype(np.float64)
    s = v.sum(axis=(1, 3, 5))
    return np.ascontiguousarray((s / (T * cell * cell)).reshape(C, gh * gw).T)


def _pool_cells_loop(data, cell):
    C, T, H, W = data.shape
    gh = H // cell
    gw = W // cell
    out = np.zeros((gh * gw, C), dtype=np.float64)
    for c in range(C):
        for t in range(T):
            for h in range(H):
                row = (h // cell) * gw
                for w in range(W):
                    out[row + w // cell, c] += data[c, t, h, w]
    scale = 1.0 / (T * cell * cell)
    for i in range(gh * gw):
        for c in range(C):
            out[i, c] *= scale
    return out


pool_cells_numba = njit(_pool_cells_loop)


def roc_sweep_numpy(scores, labels):
    """Cumulative (false positive, true positive) counts at each distinct threshold.

    Thresholds are visited from the highest score down; the returned count
    arrays are prefixed with the (0, 0) origin.
    """
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order].astype(np.int64)
    n = s.shape[0]
    ends = np.append(np.flatnonzero(np.diff(s)), n - 1)
    tps = np.cumsum(y)[ends]
    fps = (ends + 1) - tps
    zero = np.zeros(1, dtype=np.int64)
    return np.concatenate((zero, fps)), np.concatenate((zero, tps)), s[ends]


def _roc_sweep_loop(scores, labels):
    order = np.argsort(-scores, kind="mergesort")
    n = scores.shape[0]
    fps = np.zeros(n + 1, dtype=np.int64)
    tps = np.zeros(n + 1, dtype=np.int64)
    thr = np.empty(n, dtype=np.float64)
    k = 0
    tp = 0
    fp = 0
    for i in range(n):
        j = order[i]
        if labels[j] != 0:
            tp += 1
        else:
            fp += 1
        if i == n - 1 or scores[order[i + 1]] != scores[j]:
            k += 1
            fps[k] = fp
            tps[k] = tp
            thr[k - 1] = scores[j]
    return fps[: k + 1], tps[: k + 1], thr[:k]


roc_sweep_numba = njit(_roc_sweep_loop)


if USE_NUMBA:
    _pool_impl, _roc_impl = pool_cells_numba, roc_sweep_numba
else:
    _pool_impl, _roc_impl = pool_cells_numpy, roc_sweep_numpy


def pool_cells(data, cell):
    return _pool_impl(np.ascontiguousarray(data), int(cell))


def roc_sweep(scores, labels):
    return _roc_impl(
        np.ascontiguousarray(scores, dtype=np.float64),
        np.ascontiguousarray(labels, dtype=np.int8),
    )
