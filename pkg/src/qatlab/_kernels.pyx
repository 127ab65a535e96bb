# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled fake-quantization kernels.

Both kernels operate on a C-contiguous ``[n, C]`` view where column ``c`` is
one quantization group. Arithmetic is performed in the input dtype in the
same order as the NumPy fallback so the two backends agree bit for bit.
Loops are written branch-free so the compiler can vectorize them.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport copysign, copysignf, fabs, fabsf

cnp.import_array()

# Round |t| to the nearest integer (ties to even under the default rounding
# mode) by adding and subtracting 2**(mantissa bits), then restore the sign.
# At or above that magnitude every value is already an integer.
cdef float _TWO23 = 8388608.0
cdef double _TWO52 = 4503599627370496.0


cdef inline float _rint_f(float t) noexcept nogil:
    cdef float a = fabsf(t)
    cdef float r = copysignf((a + _TWO23) - _TWO23, t)
    return r if a < _TWO23 else t


cdef inline double _rint_d(double t) noexcept nogil:
    cdef double a = fabs(t)
    cdef double r = copysign((a + _TWO52) - _TWO52, t)
    return r if a < _TWO52 else t


cdef inline floating _rint(floating t) noexcept nogil:
    if floating is float:
        return _rint_f(t)
    else:
        return _rint_d(t)


def qdq_mask(floating[:, ::1] x, floating[::1] scale, floating[::1] zero,
             double qmin, double qmax):
    """Fake-quantize ``x`` column-wise; also return the pre-clamp in-range mask."""
    cdef Py_ssize_t n = x.shape[0], C = x.shape[1], i, c
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((n, C), dtype=dtype)
    mask_arr = np.empty((n, C), dtype=np.uint8)
    cdef floating[:, ::1] out = out_arr
    cdef unsigned char[:, ::1] mask = mask_arr
    cdef floating t
    cdef floating lo = <floating>qmin
    cdef floating hi = <floating>qmax
    # raw pointers: memoryview indexing defeats the vectorizer's alias analysis
    cdef const floating* sp = &scale[0]
    cdef const floating* zp = &zero[0]
    cdef const floating* xr
    cdef floating* orow
    cdef unsigned char* mrow
    if n == 0 or C == 0:
        return out_arr, mask_arr.view(np.bool_)
    with nogil:
        for i in range(n):
            xr = &x[i, 0]
            orow = &out[i, 0]
            mrow = &mask[i, 0]
            for c in range(C):
                t = _rint(xr[c] / sp[c]) + zp[c]
                mrow[c] = (t >= lo) & (t <= hi)
                t = t if t > lo else lo
                t = t if t < hi else hi
                orow[c] = sp[c] * (t - zp[c])
    return out_arr, mask_arr.view(np.bool_)


def mse_search(floating[:, ::1] x, double[::1] base_scale, floating[::1] zero,
               double qmin, double qmax, double[::1] factors):
    """Per column, pick the factor whose scaled step minimizes reconstruction MSE.

    Returns ``(best_index, best_mse)``. Ties keep the earliest factor.
    """
    cdef Py_ssize_t n = x.shape[0], C = x.shape[1], K = factors.shape[0]
    cdef Py_ssize_t i, c, k
    best_idx_arr = np.zeros(C, dtype=np.int64)
    best_err_arr = np.full(C, np.inf, dtype=np.float64)
    cdef long long[::1] best_idx = best_idx_arr
    cdef double[::1] best_err = best_err_arr
    # one accumulator per column so rows are summed in order, like numpy's axis-0 sum
    acc_arr = np.empty(C, dtype=np.float64)
    cdef double[::1] acc = acc_arr
    scales_arr = np.empty(C, dtype=np.float32 if floating is float else np.float64)
    cdef floating[::1] s = scales_arr
    cdef floating t, lo = <floating>qmin, hi = <floating>qmax
    cdef double d
    if n == 0 or C == 0:
        return best_idx_arr, best_err_arr
    cdef floating* sp = &s[0]
    cdef const floating* zp = &zero[0]
    cdef double* ap = &acc[0]
    cdef const floating* xr
    with nogil:
        for k in range(K):
            for c in range(C):
                sp[c] = <floating>(factors[k] * base_scale[c])
                ap[c] = 0.0
            for i in range(n):
                xr = &x[i, 0]
                for c in range(C):
                    t = _rint(xr[c] / sp[c]) + zp[c]
                    t = t if t > lo else lo
                    t = t if t < hi else hi
                    t = sp[c] * (t - zp[c])
                    d = <double>xr[c] - <double>t
                    ap[c] = ap[c] + d * d
            for c in range(C):
                d = acc[c] / n
                if d < best_err[c]:
                    best_err[c] = d
                    best_idx[c] = k
    return best_idx_arr, best_err_arr
