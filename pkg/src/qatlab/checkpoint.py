"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"QATF" | u32 version | u64 manifest_len | manifest (UTF-8 JSON)
    | 32-byte SHA-256 of the manifest | payload

The payload is every tensor as little-endian float32, concatenated in
manifest order. The manifest carries the payload's SHA-256, so a corrupted
payload or manifest is detected on load.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from qatlab import quant
from qatlab.model import MicroLM, ModelConfig

MAGIC = b"QATF"
VERSION = 1
_HEAD = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    pass


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def _state_to_dict(s: quant.QuantizerState) -> dict:
    return {
        "scheme": s.scheme.to_dict(),
        "scale": [float(v) for v in s.params.scale],
        "zero_point": [int(v) for v in s.params.zero_point],
        "enabled": bool(s.enabled),
        "frozen": bool(s.frozen),
    }


def _state_from_dict(d: dict) -> quant.QuantizerState:
    st = quant.QuantizerState(
        quant.QuantScheme.from_dict(d["scheme"]),
        quant.QuantParams(np.array(d["scale"], dtype=np.float64), np.array(d["zero_point"], dtype=np.int64)),
        enabled=bool(d["enabled"]),
    )
    if d.get("frozen"):
        st.freeze()
    return st


@dataclass
class Checkpoint:
    model: MicroLM
    config: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def to_bytes(model: MicroLM, config: dict | None = None, meta: dict | None = None) -> bytes:
    chunks = []
    entries = []
    offset = 0
    for name, t in model.params.items():
        buf = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "dtype": "float32",
                        "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    payload = b"".join(chunks)
    manifest = {
        "format": "QATF",
        "model": model.config.to_dict(),
        "tensors": entries,
        "quantizers": {k: _state_to_dict(s) for k, s in model.quantizers.items()},
        "act_quantizers": {k: _state_to_dict(s) for k, s in model.act_quantizers.items()},
        "config": config or {},
        "meta": meta or {},
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    mbytes = _dumps(manifest)
    return b"".join([_HEAD.pack(MAGIC, VERSION, len(mbytes)), mbytes,
                     hashlib.sha256(mbytes).digest(), payload])


def save_checkpoint(path: str | Path, model: MicroLM, config: dict | None = None,
                    meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = to_bytes(model, config, meta)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return path


def from_bytes(data: bytes, dtype=np.float32) -> Checkpoint:
    if len(data) < _HEAD.size:
        raise CheckpointError("file too short for a QATF header")
    magic, version, mlen = _HEAD.unpack_from(data, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported format version {version}")
    start = _HEAD.size
    mbytes = data[start:start + mlen]
    digest = data[start + mlen:start + mlen + 32]
    if len(mbytes) != mlen or len(digest) != 32:
        raise CheckpointError("truncated manifest")
    if hashlib.sha256(mbytes).digest() != digest:
        raise CheckpointError("manifest hash mismatch: checkpoint is corrupt")
    manifest = json.loads(mbytes.decode("utf-8"))
    payload = data[start + mlen + 32:]
    if hashlib.sha256(payload).hexdigest() != manifest["payload_sha256"]:
        raise CheckpointError("payload hash mismatch: checkpoint is corrupt")

    model = MicroLM(ModelConfig(**manifest["model"]), seed=0, dtype=dtype)
    arrays = {}
    for e in manifest["tensors"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype="<f4").reshape(e["shape"])
    model.load_arrays(arrays)
    # preserve manifest tensor order
    model.params = {e["name"]: model.params[e["name"]] for e in manifest["tensors"]}
    model.quantizers = {k: _state_from_dict(d) for k, d in manifest["quantizers"].items()}
    model.act_quantizers = {k: _state_from_dict(d) for k, d in manifest["act_quantizers"].items()}
    return Checkpoint(model, manifest["config"], manifest["meta"])


def load_checkpoint(path: str | Path, dtype=np.float32) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return from_bytes(path.read_bytes(), dtype)


def tensor_digest(model: MicroLM, name: str) -> str:
    return hashlib.sha256(np.ascontiguousarray(model.params[name].data).tobytes()).hexdigest()
