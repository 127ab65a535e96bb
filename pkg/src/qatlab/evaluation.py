"""Byte-level tokenization, corpus splits and perplexity."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

BOS, EOS, PAD = 256, 257, 258
VOCAB_SIZE = 259


def tokenize(text: bytes | str) -> np.ndarray:
    """Bytes to ids, with BOS prepended."""
    if isinstance(text, str):
        text = text.encode("utf-8")
    ids = np.frombuffer(bytes(text), dtype=np.uint8).astype(np.int64)
    return np.concatenate([[BOS], ids]).astype(np.int64)


def detokenize(ids) -> bytes:
    """Ids to bytes. A leading BOS and trailing EOS are dropped; specials elsewhere are rejected."""
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    if ids.size and ids[0] == BOS:
        ids = ids[1:]
    if ids.size and ids[-1] == EOS:
        ids = ids[:-1]
    if ids.size and (ids.min() < 0 or ids.max() > 255):
        bad = int(ids[(ids < 0) | (ids > 255)][0])
        raise ValueError(f"special or invalid token {bad} inside content")
    return ids.astype(np.uint8).tobytes()


def bundled_corpus_path() -> Path:
    return Path(str(resources.files("qatlab") / "data" / "corpus.txt"))


@dataclass
class Corpus:
    train: np.ndarray
    heldout: np.ndarray
    sources: list[str]
    split: float = 0.95

    @classmethod
    def load(cls, paths: Sequence[str | Path] | str | Path | None = None, split: float = 0.95) -> "Corpus":
        """Read files, tokenize each as one document and split by byte offset."""
        if paths is None:
            paths = [bundled_corpus_path()]
        elif isinstance(paths, (str, Path)):
            paths = [paths]
        if not 0.0 < split < 1.0:
            raise ValueError("split must be in (0, 1)")
        docs = []
        for p in paths:
            p = Path(p)
            if not p.is_file():
                raise FileNotFoundError(f"corpus file not found: {p}")
            docs.append(tokenize(p.read_bytes()))
        ids = np.concatenate(docs) if docs else np.zeros(0, dtype=np.int64)
        cut = int(len(ids) * split)
        train, heldout = ids[:cut], ids[cut:]
        if len(heldout) < 2:
            raise ValueError("corpus too small: held-out split is empty")
        return cls(train, heldout, [str(p) for p in paths], split)

    def get(self, split: str) -> np.ndarray:
        if split == "train":
            return self.train
        if split in ("heldout", "test", "valid"):
            return self.heldout
        raise ValueError(f"unknown split {split!r}")


@dataclass
class EvalConfig:
    context_length: int = 256
    stride: int | None = None
    batch_size: int = 4
    max_windows: int | None = None

    def __post_init__(self):
        if self.stride is None:
            self.stride = self.context_length
        if not 0 < self.stride <= self.context_length:
            raise ValueError("need 0 < stride <= context_length")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def windows(n_tokens: int, context_length: int, stride: int) -> list[tuple[int, int, int]]:
    """``(begin, end, first_scored)`` triples covering every predictable position once.

    A window feeds ``ids[begin:end]`` and predicts ``ids[begin+1:end+1]``;
    only targets at absolute index ``>= first_scored`` count, so each of the
    ``n_tokens - 1`` targets is scored exactly once.
    """
    out = []
    last = n_tokens - 1
    prev_end = 0
    for begin in range(0, last, stride):
        end = min(begin + context_length, last)
        out.append((begin, end, prev_end + 1))
        prev_end = end
        if end == last:
            break
    return out


def _logits(model, batch: np.ndarray) -> np.ndarray:
    out = model(batch)
    return np.asarray(getattr(out, "data", out), dtype=np.float64)


def token_nll(model, ids: np.ndarray, cfg: EvalConfig | None = None) -> tuple[float, int]:
    """Total natural-log NLL and number of scored tokens, teacher forced."""
    cfg = cfg or EvalConfig()
    ids = np.asarray(ids, dtype=np.int64)
    if len(ids) < 2:
        raise ValueError("split has no predictable tokens")
    wins = windows(len(ids), cfg.context_length, cfg.stride)
    if cfg.max_windows is not None:
        wins = wins[: cfg.max_windows]
    per_window = np.zeros(len(wins))
    counts = np.zeros(len(wins), dtype=np.int64)
    # group windows of equal length into batches
    by_len: dict[int, list[int]] = {}
    for wi, (b, e, _) in enumerate(wins):
        by_len.setdefault(e - b, []).append(wi)
    for length, members in by_len.items():
        for start in range(0, len(members), cfg.batch_size):
            chunk = members[start:start + cfg.batch_size]
            x = np.stack([ids[wins[w][0]:wins[w][1]] for w in chunk])
            y = np.stack([ids[wins[w][0] + 1:wins[w][1] + 1] for w in chunk])
            lg = _logits(model, x)
            m = lg.max(axis=-1, keepdims=True)
            lse = np.log(np.exp(lg - m).sum(axis=-1)) + m[..., 0]
            nll = lse - np.take_along_axis(lg, y[..., None], axis=-1)[..., 0]
            for row, w in enumerate(chunk):
                b, _, first = wins[w]
                skip = first - (b + 1)
                per_window[w] = math.fsum(nll[row, skip:])
                counts[w] = length - skip
    # fixed-order reduction over windows keeps the total independent of batching
    return math.fsum(per_window), int(counts.sum())


def perplexity(model, ids: np.ndarray, cfg: EvalConfig | None = None) -> float:
    total, count = token_nll(model, ids, cfg)
    return math.exp(total / count)


def eval_record(model, corpus: Corpus, split: str = "heldout", cfg: EvalConfig | None = None) -> dict:
    cfg = cfg or EvalConfig()
    total, count = token_nll(model, corpus.get(split), cfg)
    return {
        "split": split,
        "ppl": math.exp(total / count),
        "tokens": count,
        "context_length": cfg.context_length,
    }
