"""Uniform fake quantization, range calibration and the clipped straight-through estimator.

The quantizer maps ``x`` to ``s * (clamp(round(x / s) + z, qmin, qmax) - z)``
with round-half-to-even. Symmetric-signed schemes use the grid
``[-2^(b-1), 2^(b-1) - 1]`` with ``z = 0``; asymmetric schemes use
``[0, 2^b - 1]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from qatlab import kernels
from qatlab.tensor import Tensor, custom

SYMMETRIC = "symmetric"
ASYMMETRIC = "asymmetric"
SCALE_FLOOR = 1e-8


class QuantError(ValueError):
    pass


@dataclass(frozen=True)
class QuantScheme:
    bitwidth: int = 4
    symmetry: str = SYMMETRIC
    # None means per-tensor, otherwise the per-channel axis
    axis: int | None = None

    def __post_init__(self):
        if not 2 <= self.bitwidth <= 16:
            raise QuantError(f"bitwidth must be in [2, 16], got {self.bitwidth}")
        if self.symmetry not in (SYMMETRIC, ASYMMETRIC):
            raise QuantError(f"unknown symmetry {self.symmetry!r}")

    @property
    def qmin(self) -> int:
        return -(2 ** (self.bitwidth - 1)) if self.symmetry == SYMMETRIC else 0

    @property
    def qmax(self) -> int:
        return 2 ** (self.bitwidth - 1) - 1 if self.symmetry == SYMMETRIC else 2**self.bitwidth - 1

    @property
    def per_channel(self) -> bool:
        return self.axis is not None

    def to_dict(self) -> dict:
        return {"bitwidth": self.bitwidth, "symmetry": self.symmetry, "axis": self.axis}

    @classmethod
    def from_dict(cls, d: dict) -> "QuantScheme":
        return cls(int(d["bitwidth"]), d["symmetry"], d["axis"])


@dataclass
class QuantParams:
    scale: np.ndarray
    zero_point: np.ndarray

    def __post_init__(self):
        self.scale = np.atleast_1d(np.asarray(self.scale, dtype=np.float64))
        self.zero_point = np.atleast_1d(np.asarray(self.zero_point, dtype=np.int64))
        if self.scale.shape != self.zero_point.shape:
            raise QuantError("scale and zero_point must have the same length")

    def validate(self, scheme: QuantScheme) -> None:
        if not np.all(self.scale > 0):
            raise QuantError("scale must be positive everywhere")
        if scheme.symmetry == SYMMETRIC:
            if np.any(self.zero_point != 0):
                raise QuantError("symmetric-signed quantization requires zero_point == 0")
        elif np.any((self.zero_point < 0) | (self.zero_point > scheme.qmax)):
            raise QuantError(f"zero_point outside [0, {scheme.qmax}]")


@dataclass
class QuantizerState:
    scheme: QuantScheme
    params: QuantParams
    enabled: bool = True
    _frozen: bool = field(default=False, repr=False)

    def __setattr__(self, name, value):
        if name == "params" and getattr(self, "_frozen", False):
            raise QuantError("quantizer is frozen; params are immutable")
        object.__setattr__(self, name, value)

    @property
    def frozen(self) -> bool:
        return self._frozen

    def freeze(self) -> None:
        self.params.scale.setflags(write=False)
        self.params.zero_point.setflags(write=False)
        object.__setattr__(self, "_frozen", True)


# ---------------------------------------------------------------------------
# layout helpers
# ---------------------------------------------------------------------------

def _groups_last(x: np.ndarray, scheme: QuantScheme) -> np.ndarray:
    """View ``x`` as ``[n, C]`` with one quantization group per column."""
    if scheme.axis is None:
        return np.ascontiguousarray(x.reshape(-1, 1))
    if not -x.ndim <= scheme.axis < x.ndim:
        raise QuantError(f"per-channel axis {scheme.axis} invalid for rank {x.ndim}")
    moved = np.moveaxis(x, scheme.axis, -1)
    return np.ascontiguousarray(moved.reshape(-1, x.shape[scheme.axis]))


def _restore(y2: np.ndarray, x: np.ndarray, scheme: QuantScheme) -> np.ndarray:
    if scheme.axis is None:
        return y2.reshape(x.shape)
    moved_shape = np.moveaxis(np.empty(x.shape, dtype=bool), scheme.axis, -1).shape
    return np.ascontiguousarray(np.moveaxis(y2.reshape(moved_shape), -1, scheme.axis))


def _n_groups(x: np.ndarray, scheme: QuantScheme) -> int:
    return 1 if scheme.axis is None else x.shape[scheme.axis]


def _check(x: np.ndarray, state: QuantizerState) -> None:
    p = state.params
    if not np.all(p.scale > 0):
        raise QuantError("scale must be positive everywhere")
    axis = state.scheme.axis
    if axis is not None and not -x.ndim <= axis < x.ndim:
        raise QuantError(f"per-channel axis {axis} invalid for rank {x.ndim}")
    groups = _n_groups(x, state.scheme)
    if p.scale.shape[0] != groups:
        raise QuantError(f"params have {p.scale.shape[0]} groups but tensor {x.shape} needs {groups}")


# ---------------------------------------------------------------------------
# quantize-dequantize and STE
# ---------------------------------------------------------------------------

def qdq_array(x: np.ndarray, state: QuantizerState) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(fake_quantized, in_range_mask)`` for a raw array."""
    x = np.asarray(x)
    if x.dtype not in (np.float32, np.float64):
        x = x.astype(np.float64)
    _check(x, state)
    x2 = _groups_last(x, state.scheme)
    s = state.params.scale.astype(x.dtype)
    z = state.params.zero_point.astype(x.dtype)
    out2, mask2 = kernels.qdq_mask(x2, s, z, float(state.scheme.qmin), float(state.scheme.qmax))
    return _restore(out2, x, state.scheme), _restore(mask2, x, state.scheme)


def quantize_dequantize(x, state: QuantizerState):
    """Fake-quantize ``x``. Tensors get a differentiable op with the clipped STE backward."""
    if not state.enabled:
        raise QuantError("quantizer is disabled")
    if isinstance(x, Tensor):
        out, mask = qdq_array(x.data, state)
        return custom("fake_quant", out, (x,), lambda g: (g * mask,))
    return qdq_array(x, state)[0]


def ste_backward(upstream: np.ndarray, x: np.ndarray, state: QuantizerState) -> np.ndarray:
    """Pass ``upstream`` where ``round(x/s) + z`` lies inside the grid before clamping, else 0."""
    upstream = np.asarray(upstream)
    x = np.asarray(x)
    if upstream.shape != x.shape:
        raise QuantError(f"ste_backward: upstream {upstream.shape} vs input {x.shape}")
    _, mask = qdq_array(x, state)
    return np.where(mask, upstream, np.zeros_like(upstream))


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------

def _minmax_groups(x2: np.ndarray, scheme: QuantScheme) -> QuantParams:
    x64 = x2.astype(np.float64)
    if scheme.symmetry == SYMMETRIC:
        maxabs = np.abs(x64).max(axis=0)
        scale = np.maximum(maxabs / scheme.qmax, SCALE_FLOOR)
        zp = np.zeros_like(scale, dtype=np.int64)
    else:
        lo, hi = x64.min(axis=0), x64.max(axis=0)
        scale = np.maximum((hi - lo) / scheme.qmax, SCALE_FLOOR)
        zp = np.clip(np.rint(-lo / scale), 0, scheme.qmax).astype(np.int64)
    return QuantParams(scale, zp)


def _prepare(w, scheme: QuantScheme) -> np.ndarray:
    w = w.data if isinstance(w, Tensor) else np.asarray(w)
    if w.size == 0:
        raise QuantError("cannot calibrate an empty tensor")
    if w.dtype not in (np.float32, np.float64):
        w = w.astype(np.float64)
    return _groups_last(w, scheme)


def calibrate_minmax(w, scheme: QuantScheme) -> QuantParams:
    """Range from observed extrema, per group."""
    return _minmax_groups(_prepare(w, scheme), scheme)


def mse_factors(grid_points: int = 101) -> np.ndarray:
    """Candidate scale multipliers: uniform over [0.2, 1.2] plus exactly 1.0."""
    if grid_points < 2:
        raise QuantError("grid_points must be >= 2")
    f = np.linspace(0.2, 1.2, grid_points)
    near = np.isclose(f, 1.0, rtol=0, atol=1e-9)
    if near.any():
        f[near] = 1.0
    else:
        f = np.sort(np.append(f, 1.0))
    return f


def calibrate_mse(w, scheme: QuantScheme, grid_points: int = 101) -> QuantParams:
    """Per group, the min-max scale multiplied by the factor with least reconstruction MSE.

    The zero-point stays at its min-max value; only the scale is searched.
    Ties keep the smallest factor.
    """
    x2 = _prepare(w, scheme)
    base = _minmax_groups(x2, scheme)
    factors = mse_factors(grid_points)
    idx, _ = kernels.mse_search(
        x2, base.scale, base.zero_point.astype(x2.dtype),
        float(scheme.qmin), float(scheme.qmax), factors,
    )
    scale = np.maximum(factors[idx] * base.scale, SCALE_FLOOR)
    return QuantParams(scale, base.zero_point.copy())


def reconstruction_mse(w, params: QuantParams, scheme: QuantScheme) -> float:
    """Mean squared difference between ``w`` and its fake-quantized version."""
    w = w.data if isinstance(w, Tensor) else np.asarray(w)
    state = QuantizerState(scheme, params)
    out, _ = qdq_array(w, state)
    d = w.astype(np.float64) - out.astype(np.float64)
    return float(np.mean(d * d))


def calibrate(w, scheme: QuantScheme, method: str = "mse", grid_points: int = 101) -> QuantParams:
    if method == "mse":
        return calibrate_mse(w, scheme, grid_points)
    if method == "minmax":
        return calibrate_minmax(w, scheme)
    raise QuantError(f"unknown calibration method {method!r}")
