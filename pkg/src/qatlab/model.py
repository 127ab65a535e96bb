"""LLaMA-style decoder-only micro transformer with attachable weight quantizers.

Weights are stored input-major (``y = x @ W``), so the per-channel
quantization axis over output features is axis 1.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Iterable

import numpy as np

from qatlab import quant
from qatlab import tensor as T
from qatlab.tensor import Tensor

ATTN_ROLES = ("q", "k", "v", "o")
MLP_ROLES = ("gate", "up", "down")
ROLES = ATTN_ROLES + MLP_ROLES
# whole-model weights that may also be put in a quantization policy (off by default)
EXTRA_QUANT_ROLES = ("embed", "head")
_ROLE_PARAM = {
    "q": "attn.wq", "k": "attn.wk", "v": "attn.wv", "o": "attn.wo",
    "gate": "mlp.w_gate", "up": "mlp.w_up", "down": "mlp.w_down",
}


@dataclass
class ModelConfig:
    vocab_size: int = 259
    n_layers: int = 4
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 344
    max_seq_len: int = 256
    rope_base: float = 10000.0
    rmsnorm_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if (self.d_model // self.n_heads) % 2:
            raise ValueError("head_dim must be even for rotary embeddings")
        for name in ("vocab_size", "n_layers", "d_model", "n_heads", "d_ff", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


def param_name(layer: int, role: str) -> str:
    return f"layers.{layer}.{_ROLE_PARAM[role]}"


def role_of(name: str) -> tuple[int, str] | None:
    """Inverse of :func:`param_name`; None for non-projection parameters."""
    parts = name.split(".")
    if len(parts) != 4 or parts[0] != "layers":
        return None
    suffix = f"{parts[2]}.{parts[3]}"
    for role, p in _ROLE_PARAM.items():
        if p == suffix:
            return int(parts[1]), role
    return None


def rmsnorm(x: Tensor, weight: Tensor, eps: float) -> Tensor:
    return T.rmsnorm(x, weight, eps)


def rope_tables(positions, head_dim: int, base: float, dtype=np.float32):
    """``cos``/``sin`` tables of shape ``[len(positions), head_dim // 2]``."""
    if head_dim % 2:
        raise ValueError(f"head_dim must be even, got {head_dim}")
    inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    ang = np.outer(np.asarray(positions, dtype=np.float64), inv_freq)
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def rope(q: Tensor, k: Tensor, positions, base: float = 10000.0) -> tuple[Tensor, Tensor]:
    cos, sin = rope_tables(positions, q.shape[-1], base, q.dtype)
    return T.rope(q, cos, sin), T.rope(k, cos, sin)


def causal_attention(q: Tensor, k: Tensor, v: Tensor, return_weights: bool = False):
    """Scaled dot-product attention over ``[batch, heads, seq, head_dim]`` with a strict causal mask."""
    if q.ndim != 4 or q.shape != k.shape or q.shape != v.shape:
        raise T.ShapeError(f"causal_attention: shapes {q.shape}, {k.shape}, {v.shape}")
    seq, hd = q.shape[2], q.shape[3]
    # scaling q is cheaper than scaling the [seq, seq] scores
    scores = (q * (1.0 / math.sqrt(hd))) @ T.transpose(k, (0, 1, 3, 2))
    mask = np.triu(np.ones((seq, seq), dtype=bool), k=1)
    weights = T.softmax(scores, mask=mask)
    out = weights @ v
    return (out, weights) if return_weights else out


class MicroLM:
    """Pre-norm decoder stack: embed, N x (norm, attention, norm, gated MLP), norm, head."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=None):
        self.config = config
        self.dtype = np.dtype(dtype or T.get_default_dtype()).type
        self.params: dict[str, Tensor] = {}
        self.quantizers: dict[str, quant.QuantizerState] = {}
        # activation quantizers keyed by the weight whose output they follow
        self.act_quantizers: dict[str, quant.QuantizerState] = {}
        self.act_quant_enabled = False
        self.observers: list[Callable] = []
        self._init_params(seed)

    def _init_params(self, seed: int) -> None:
        c = self.config
        rng = np.random.default_rng(seed)

        def normal(shape, std):
            return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True, dtype=self.dtype)

        def ones(n):
            return Tensor(np.ones(n), requires_grad=True, dtype=self.dtype)

        std = 0.02
        out_std = std / math.sqrt(2 * c.n_layers)
        self.params["embed"] = normal((c.vocab_size, c.d_model), std)
        for i in range(c.n_layers):
            p = f"layers.{i}."
            self.params[p + "attn_norm"] = ones(c.d_model)
            for r in ("q", "k", "v"):
                self.params[param_name(i, r)] = normal((c.d_model, c.d_model), std)
            self.params[param_name(i, "o")] = normal((c.d_model, c.d_model), out_std)
            self.params[p + "mlp_norm"] = ones(c.d_model)
            self.params[param_name(i, "gate")] = normal((c.d_model, c.d_ff), std)
            self.params[param_name(i, "up")] = normal((c.d_model, c.d_ff), std)
            self.params[param_name(i, "down")] = normal((c.d_ff, c.d_model), out_std)
        self.params["final_norm"] = ones(c.d_model)
        self.params["head"] = normal((c.d_model, c.vocab_size), std)
        for name, t in self.params.items():
            t.name = name

    # -- parameters ----------------------------------------------------------
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            missing = set(self.params) ^ set(arrays)
            raise KeyError(f"parameter set mismatch: {sorted(missing)}")
        for k, t in self.params.items():
            a = np.asarray(arrays[k])
            if a.shape != t.shape:
                raise T.ShapeError(f"{k}: expected {t.shape}, got {a.shape}")
            t.data = np.array(a, dtype=self.dtype, copy=True)

    def copy(self) -> "MicroLM":
        other = MicroLM.__new__(MicroLM)
        other.config = self.config
        other.dtype = self.dtype
        other.params = {
            k: Tensor(t.data.copy(), requires_grad=t.requires_grad, name=k, dtype=self.dtype)
            for k, t in self.params.items()
        }
        other.quantizers = {
            k: quant.QuantizerState(s.scheme, quant.QuantParams(s.params.scale.copy(), s.params.zero_point.copy()), s.enabled)
            for k, s in self.quantizers.items()
        }
        other.act_quantizers = {
            k: quant.QuantizerState(s.scheme, quant.QuantParams(s.params.scale.copy(), s.params.zero_point.copy()), s.enabled)
            for k, s in self.act_quantizers.items()
        }
        other.act_quant_enabled = self.act_quant_enabled
        other.observers = []
        return other

    def set_quant_enabled(self, flag: bool) -> None:
        for s in self.quantizers.values():
            s.enabled = flag

    # -- forward ---------------------------------------------------------------
    def weight(self, name: str) -> Tensor:
        w = self.params[name]
        state = self.quantizers.get(name)
        if state is not None and state.enabled:
            return quant.quantize_dequantize(w, state)
        return w

    def _linear(self, x: Tensor, layer: int, role: str) -> Tensor:
        name = param_name(layer, role)
        y = x @ self.weight(name)
        if self.act_quant_enabled and name in self.act_quantizers:
            y = quant.quantize_dequantize(y, self.act_quantizers[name])
        for obs in self.observers:
            obs(layer, role, y)
        return y

    def __call__(self, tokens) -> Tensor:
        return self.forward(tokens)

    def forward(self, tokens) -> Tensor:
        """Logits ``[batch, seq, vocab]`` for integer ``tokens`` of shape ``[batch, seq]``."""
        c = self.config
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        if tokens.ndim != 2:
            raise T.ShapeError(f"tokens must be [batch, seq], got {tokens.shape}")
        B, S = tokens.shape
        if S > c.max_seq_len:
            raise ValueError(f"sequence length {S} exceeds max_seq_len {c.max_seq_len}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= c.vocab_size):
            raise IndexError(f"token id out of range [0, {c.vocab_size})")
        H, hd = c.n_heads, c.head_dim
        cos, sin = rope_tables(np.arange(S), hd, c.rope_base, self.dtype)
        P = self.params
        with T.scope("embed"):
            x = T.embedding(self.weight("embed"), tokens)
        for i in range(c.n_layers):
            with T.scope(f"layers.{i}.attn"):
                h = rmsnorm(x, P[f"layers.{i}.attn_norm"], c.rmsnorm_eps)
                q = self._linear(h, i, "q")
                k = self._linear(h, i, "k")
                v = self._linear(h, i, "v")
                q = T.rope(T.transpose(q.reshape(B, S, H, hd), (0, 2, 1, 3)), cos, sin)
                k = T.rope(T.transpose(k.reshape(B, S, H, hd), (0, 2, 1, 3)), cos, sin)
                v = T.transpose(v.reshape(B, S, H, hd), (0, 2, 1, 3))
                att = causal_attention(q, k, v)
                att = T.transpose(att, (0, 2, 1, 3)).reshape(B, S, c.d_model)
                x = x + self._linear(att, i, "o")
            with T.scope(f"layers.{i}.mlp"):
                h = rmsnorm(x, P[f"layers.{i}.mlp_norm"], c.rmsnorm_eps)
                gated = T.silu(self._linear(h, i, "gate")) * self._linear(h, i, "up")
                x = x + self._linear(gated, i, "down")
        with T.scope("head"):
            x = rmsnorm(x, P["final_norm"], c.rmsnorm_eps)
            return x @ self.weight("head")


# ---------------------------------------------------------------------------
# quantizer attachment
# ---------------------------------------------------------------------------

def weight_scheme(bitwidth: int = 4) -> quant.QuantScheme:
    """Per-output-channel symmetric-signed weight scheme."""
    return quant.QuantScheme(bitwidth, quant.SYMMETRIC, axis=1)


def attach_quantizers(
    model: MicroLM,
    scheme: quant.QuantScheme | None = None,
    policy: Iterable[str] = ROLES,
    method: str = "mse",
    grid_points: int = 101,
) -> dict[str, quant.QuantizerState]:
    """Calibrate and attach a weight quantizer to every projection whose role is in ``policy``."""
    scheme = scheme or weight_scheme()
    policy = list(policy)
    unknown = [r for r in policy if r not in ROLES + EXTRA_QUANT_ROLES]
    if unknown:
        raise ValueError(f"unknown layer role(s) {unknown}; expected a subset of {ROLES + EXTRA_QUANT_ROLES}")
    model.quantizers.clear()
    for i in range(model.config.n_layers):
        for role in ROLES:
            if role not in policy:
                continue
            name = param_name(i, role)
            w = model.params[name]
            params = quant.calibrate(w.data, scheme, method, grid_points)
            model.quantizers[name] = quant.QuantizerState(scheme, params)
    # embed is [vocab, d_model] and head [d_model, vocab]; axis 1 is the output side of both
    for name in EXTRA_QUANT_ROLES:
        if name in policy:
            params = quant.calibrate(model.params[name].data, scheme, method, grid_points)
            model.quantizers[name] = quant.QuantizerState(scheme, params)
    return model.quantizers


def calibrate_activations_minmax(model: MicroLM, batches, bitwidth: int = 16) -> dict[str, quant.QuantizerState]:
    """Per-tensor asymmetric min-max params for every quantized projection's output."""
    batches = [np.asarray(b) for b in batches]
    if not batches or all(b.size == 0 for b in batches):
        raise ValueError("activation calibration needs a nonempty sample")
    lo: dict[str, float] = {}
    hi: dict[str, float] = {}

    def observe(layer, role, y):
        name = param_name(layer, role)
        if name not in model.quantizers:
            return
        lo[name] = min(lo.get(name, np.inf), float(y.data.min()))
        hi[name] = max(hi.get(name, -np.inf), float(y.data.max()))

    was = model.act_quant_enabled
    model.act_quant_enabled = False
    model.observers.append(observe)
    try:
        for b in batches:
            if b.size:
                model.forward(b)
    finally:
        model.observers.remove(observe)
        model.act_quant_enabled = was
    scheme = quant.QuantScheme(bitwidth, quant.ASYMMETRIC, axis=None)
    model.act_quantizers.clear()
    for name in lo:
        params = quant.calibrate_minmax(np.array([lo[name], hi[name]]), scheme)
        model.act_quantizers[name] = quant.QuantizerState(scheme, params)
    return model.act_quantizers
