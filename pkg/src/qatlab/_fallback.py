"""Pure-NumPy versions of the compiled kernels in ``_kernels.pyx``.

Operation order mirrors the compiled code so results are bit-identical.
"""
import numpy as np


def qdq_mask(x, scale, zero, qmin, qmax):
    t = np.rint(x / scale) + zero
    mask = (t >= qmin) & (t <= qmax)
    lo = x.dtype.type(qmin)
    hi = x.dtype.type(qmax)
    out = scale * (np.clip(t, lo, hi) - zero)
    return out, mask


def mse_search(x, base_scale, zero, qmin, qmax, factors):
    n, C = x.shape
    best_idx = np.zeros(C, dtype=np.int64)
    best_err = np.full(C, np.inf)
    lo = x.dtype.type(qmin)
    hi = x.dtype.type(qmax)
    x64 = x.astype(np.float64)
    for k, f in enumerate(factors):
        s = (f * base_scale).astype(x.dtype)
        t = np.clip(np.rint(x / s) + zero, lo, hi)
        d = x64 - (s * (t - zero)).astype(np.float64)
        # axis-0 reduction accumulates row by row, matching the compiled loop
        err = np.add.reduce(d * d, axis=0) / n
        better = err < best_err
        best_err[better] = err[better]
        best_idx[better] = k
    return best_idx, best_err
