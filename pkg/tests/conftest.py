import numpy as np
import pytest

from qatlab.config import from_dict
from qatlab.model import ModelConfig

TINY_MODEL = dict(vocab_size=259, n_layers=2, d_model=16, n_heads=2, d_ff=24, max_seq_len=32)


@pytest.fixture
def tiny_model_cfg():
    return ModelConfig(**TINY_MODEL)


@pytest.fixture
def small_corpus_file(tmp_path):
    rng = np.random.default_rng(0)
    words = [b"alpha", b"beta", b"gamma", b"delta", b"quant", b"layer", b"norm", b"the", b"of"]
    text = b" ".join(words[i] for i in rng.integers(0, len(words), size=4000))
    path = tmp_path / "corpus.txt"
    path.write_bytes(text)
    return path


def tiny_experiment(corpus, out_dir, **overrides):
    raw = {
        "seed": 0,
        "model": dict(TINY_MODEL),
        "pretrain": {"steps": 30, "batch_size": 4, "seq_len": 16, "warmup_steps": 5},
        "train": {"steps": 12, "batch_size": 4, "seq_len": 16, "warmup_steps": 2, "trace_every": 3,
                  "eval_every": 5, "eval_windows": 4},
        "quant": {"grid_points": 11},
        "eval": {"context_length": 32, "batch_size": 8},
        "paths": {"corpus": [str(corpus)], "out_dir": str(out_dir)},
    }
    for section, values in overrides.items():
        if isinstance(values, dict):
            raw.setdefault(section, {}).update(values)
        else:
            raw[section] = values
    return raw


@pytest.fixture
def tiny_raw_config(small_corpus_file, tmp_path):
    return tiny_experiment(small_corpus_file, tmp_path / "runs")


@pytest.fixture
def tiny_config(tiny_raw_config):
    return from_dict(tiny_raw_config)


# acceptance results are echoed in the terminal summary so they show up without -s
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
