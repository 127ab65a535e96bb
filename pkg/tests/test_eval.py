import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qatlab import evaluation as E
from qatlab.evaluation import BOS, EOS, Corpus, EvalConfig, detokenize, perplexity, token_nll, tokenize
from qatlab.model import MicroLM, ModelConfig


def test_tokenize_examples():
    assert tokenize(b"").tolist() == [BOS]
    assert tokenize(b"A").tolist() == [BOS, 65]
    assert tokenize("é").tolist() == [BOS, 0xC3, 0xA9]


def test_round_trip_random_kib():
    blob = np.random.default_rng(0).integers(0, 256, 1024, dtype=np.uint8).tobytes()
    assert detokenize(tokenize(blob)) == blob
    assert detokenize(list(tokenize(blob)) + [EOS]) == blob


@settings(max_examples=100, deadline=None)
@given(st.binary(max_size=300))
def test_round_trip_property(blob):
    assert detokenize(tokenize(blob)) == blob


def test_specials_inside_content_rejected():
    with pytest.raises(ValueError):
        detokenize([BOS, 65, EOS, 66])
    with pytest.raises(ValueError):
        detokenize([65, 258])


class Uniform:
    def __call__(self, x):
        return np.zeros(x.shape + (259,))


class Table:
    """Logits from a fixed per-position table: log-probabilities chosen by hand."""

    def __init__(self, logp):
        self.logp = logp

    def __call__(self, x):
        return np.broadcast_to(self.logp[: x.shape[1]], x.shape + (self.logp.shape[-1],)).copy()


def test_uniform_logits_ppl_is_vocab():
    ids = np.random.default_rng(1).integers(0, 259, 1000)
    assert perplexity(Uniform(), ids, EvalConfig(64)) == pytest.approx(259, abs=1e-3)


def test_hand_case_sqrt8():
    # two predicted tokens (ids 0 then 1) with probabilities 0.5 and 0.25
    logp = np.full((2, 4), -30.0)
    logp[0, 0], logp[0, 1] = math.log(0.5), math.log(0.5)
    logp[1, 1], logp[1, 2], logp[1, 3] = math.log(0.25), math.log(0.25), math.log(0.5)
    ids = np.array([3, 0, 1])
    ppl = perplexity(Table(logp), ids, EvalConfig(2))
    assert ppl == pytest.approx(math.sqrt(8), rel=1e-9)
    assert ppl == pytest.approx(2.8284, abs=1e-4)


def _naive_nll(model, ids, ctx, stride):
    """Per-token loop oracle: score each target once, from its latest window."""
    total, n = 0.0, 0
    scored = set()
    for begin in range(0, len(ids) - 1, stride):
        end = min(begin + ctx, len(ids) - 1)
        logits = np.asarray(model(ids[begin:end][None]).data, dtype=np.float64)[0]
        for pos in range(begin, end):
            tgt = pos + 1
            if tgt in scored:
                continue
            row = logits[pos - begin]
            lse = math.log(sum(math.exp(v - row.max()) for v in row)) + row.max()
            total += lse - row[ids[tgt]]
            n += 1
            scored.add(tgt)
        if end == len(ids) - 1:
            break
    return total, n


@pytest.mark.parametrize("ctx, stride", [(16, 16), (16, 5), (7, 7)])
def test_matches_naive_loop(ctx, stride):
    m = MicroLM(ModelConfig(n_layers=1, d_model=16, n_heads=2, d_ff=24, max_seq_len=16), seed=2)
    ids = np.random.default_rng(2).integers(0, 256, 60)
    total, n = token_nll(m, ids, EvalConfig(ctx, stride, batch_size=3))
    ref_total, ref_n = _naive_nll(m, ids, ctx, stride)
    assert n == ref_n == len(ids) - 1
    assert total == pytest.approx(ref_total, rel=1e-5)


def test_batch_size_invariance():
    m = MicroLM(ModelConfig(n_layers=1, d_model=16, n_heads=2, d_ff=24, max_seq_len=16), seed=3)
    ids = np.random.default_rng(3).integers(0, 256, 200)
    ppls = [perplexity(m, ids, EvalConfig(16, batch_size=b)) for b in (1, 2, 5, 64)]
    for p in ppls[1:]:
        assert p == pytest.approx(ppls[0], rel=1e-5)
    assert all(p >= 1 for p in ppls)


@pytest.mark.parametrize("n, ctx, stride", [(10, 4, 4), (10, 4, 2), (100, 16, 7), (3, 8, 8), (17, 16, 16)])
def test_windows_score_each_target_once(n, ctx, stride):
    seen = []
    for b, e, first in E.windows(n, ctx, stride):
        assert e - b <= ctx
        seen += list(range(max(first, b + 1), e + 1))
    assert seen == list(range(1, n))


def test_windows_hand():
    assert E.windows(10, 4, 4) == [(0, 4, 1), (4, 8, 5), (8, 9, 9)]
    assert E.windows(10, 4, 2) == [(0, 4, 1), (2, 6, 5), (4, 8, 7), (6, 9, 9)]


def test_eval_config_invariants():
    assert EvalConfig(32).stride == 32
    with pytest.raises(ValueError):
        EvalConfig(8, stride=9)
    with pytest.raises(ValueError):
        EvalConfig(8, stride=0)


def test_empty_split_rejected():
    with pytest.raises(ValueError):
        token_nll(Uniform(), np.array([BOS]))


def test_corpus_split(small_corpus_file):
    c = Corpus.load(small_corpus_file)
    n = len(c.train) + len(c.heldout)
    assert len(c.train) == int(n * 0.95)
    np.testing.assert_array_equal(np.concatenate([c.train, c.heldout]), tokenize(small_corpus_file.read_bytes()))
    with pytest.raises(FileNotFoundError, match="nope.txt"):
        Corpus.load("nope.txt")


def test_bundled_corpus_loads():
    c = Corpus.load()
    assert len(c.heldout) > 10000 and len(c.train) > 400000
    assert c.train[0] == BOS


def test_untrained_model_near_vocab_size():
    m = MicroLM(ModelConfig(), seed=0)
    ppl = perplexity(m, Corpus.load().heldout[:2049], EvalConfig(256))
    assert 200 <= ppl <= 320


def test_eval_record_fields(small_corpus_file):
    rec = E.eval_record(Uniform(), Corpus.load(small_corpus_file), "heldout", EvalConfig(32))
    assert set(rec) == {"split", "ppl", "tokens", "context_length"}
    assert rec["ppl"] == pytest.approx(259, abs=1e-3)
