"""Kernel backend selection.

The compiled extension is used when it was built; otherwise the NumPy
fallback is loaded. Set ``QATLAB_PURE=1`` to force the fallback.
"""
import os

from qatlab import _fallback

try:
    if os.environ.get("QATLAB_PURE", "") not in ("", "0"):
        raise ImportError("pure backend requested")
    from qatlab import _kernels as _impl

    BACKEND = "compiled"
except ImportError:
    _impl = _fallback
    BACKEND = "numpy"

qdq_mask = _impl.qdq_mask
mse_search = _impl.mse_search

__all__ = ["BACKEND", "qdq_mask", "mse_search"]
