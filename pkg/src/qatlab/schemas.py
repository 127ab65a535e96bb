"""JSON schemas for every machine-readable output the CLI produces."""

_NUM = {"type": "number"}
_INT = {"type": "integer", "minimum": 0}

EVAL_RECORD = {
    "type": "object",
    "required": ["split", "ppl", "tokens", "context_length"],
    "properties": {
        "split": {"type": "string"},
        "ppl": {"type": "number", "minimum": 1.0},
        "tokens": _INT,
        "context_length": {"type": "integer", "minimum": 1},
        "mode": {"enum": ["fp", "w4", "w4a16"]},
        "kind": {"type": "string"},
        "steps": _INT,
        "step": _INT,
        "ckpt": {"type": "string"},
    },
    "additionalProperties": False,
}

METRICS_RECORD = {
    "type": "object",
    "required": ["step", "loss", "ce", "kl", "grad_norm", "lr", "elapsed_ms"],
    "properties": {
        "step": _INT,
        "loss": _NUM,
        "ce": _NUM,
        "kl": _NUM,
        "grad_norm": {"type": "number", "minimum": 0},
        "lr": {"type": "number", "minimum": 0},
        "elapsed_ms": {"type": "number", "minimum": 0},
    },
    "additionalProperties": False,
}

CALIBRATION_REPORT = {
    "type": "object",
    "required": ["method", "bitwidth", "tensors", "total_mse", "n_quantized", "eval", "teacher_eval"],
    "properties": {
        "method": {"enum": ["minmax", "mse"]},
        "bitwidth": {"type": "integer"},
        "tensors": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["name", "mse"],
                "properties": {"name": {"type": "string"}, "mse": {"type": "number", "minimum": 0}},
                "additionalProperties": False,
            },
        },
        "total_mse": {"type": "number", "minimum": 0},
        "n_quantized": _INT,
        "eval": EVAL_RECORD,
        "teacher_eval": EVAL_RECORD,
        "ckpt": {"type": "string"},
    },
    "additionalProperties": False,
}

KDQAT_SUMMARY = {
    "type": "object",
    "required": ["run_dir", "freeze", "quantized", "steps", "initial_eval", "final_eval", "frozen_sha256"],
    "properties": {
        "run_dir": {"type": "string"},
        "freeze": {"type": "string"},
        "quantized": {"type": "boolean"},
        "steps": _INT,
        "initial_eval": EVAL_RECORD,
        "final_eval": EVAL_RECORD,
        "frozen_sha256": {"type": "object", "additionalProperties": {"type": "string"}},
    },
    "additionalProperties": False,
}

_OPT_NUM = {"type": ["number", "null"]}

TRACE_SUMMARY = {
    "type": "object",
    "required": ["layers"],
    "properties": {
        "layers": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["layer_id", "ratio_o/q", "ratio_o/k", "ratio_v/q", "ratio_v/k"],
                "properties": {"layer_id": _INT},
                "additionalProperties": _OPT_NUM,
            },
        },
        "series": {"type": "array", "items": {"type": "string"}},
    },
}
