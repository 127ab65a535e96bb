"""Knowledge-distillation QAT: loss, freeze plans, optimizer and training loops."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from qatlab import checkpoint as ckpt
from qatlab import tensor as T
from qatlab.config import FREEZE_PRESETS, FREEZE_ROLES, ExperimentConfig, KDLossConfig, TrainConfig
from qatlab.evaluation import Corpus, EvalConfig, eval_record
from qatlab.model import ATTN_ROLES, MLP_ROLES, MicroLM, attach_quantizers, param_name, weight_scheme
from qatlab.probe import TraceSink, install_probes
from qatlab.tensor import Tensor

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, where: str, detail: str = ""):
        self.step = step
        self.where = where
        super().__init__(f"non-finite values at step {step} in {where or 'unknown location'}"
                         + (f": {detail}" if detail else ""))


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def kd_loss_parts(student_logits: Tensor, teacher_logits, labels, cfg: KDLossConfig | None = None):
    """Return ``(total, ce, kl)`` tensors.

    ``total = alpha_ce * CE(student, labels) + beta_kl * T^2 * KL(p_teacher || p_student)``
    with both distributions taken at temperature ``T`` and every term averaged over tokens.
    """
    cfg = cfg or KDLossConfig()
    teacher_logits = np.asarray(getattr(teacher_logits, "data", teacher_logits))
    labels = np.asarray(labels, dtype=np.int64)
    if teacher_logits.shape != student_logits.shape:
        raise T.ShapeError(f"kd_loss: student {student_logits.shape} vs teacher {teacher_logits.shape}")
    if labels.shape != student_logits.shape[:-1]:
        raise T.ShapeError(f"kd_loss: labels {labels.shape} vs logits {student_logits.shape}")
    V = student_logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= V):
        raise ValueError(f"kd_loss: label outside [0, {V})")

    logp_s = T.log_softmax(student_logits)
    ce = -T.mean(T.take_last(logp_s, labels))

    temp = cfg.temperature
    logp_s_t = logp_s if temp == 1.0 else T.log_softmax(student_logits * (1.0 / temp))
    tl = teacher_logits.astype(np.float64) / temp
    tl = tl - tl.max(axis=-1, keepdims=True)
    logp_t = tl - np.log(np.exp(tl).sum(axis=-1, keepdims=True))
    p_t = np.exp(logp_t)
    neg_entropy = (p_t * logp_t).sum(axis=-1).astype(student_logits.dtype)
    cross = T.tsum(logp_s_t * Tensor(p_t, dtype=student_logits.dtype), axis=-1)
    kl = T.mean(Tensor(neg_entropy, dtype=student_logits.dtype) - cross) * (temp * temp)

    total = ce * cfg.alpha_ce + kl * cfg.beta_kl
    return total, ce, kl


def kd_loss(student_logits: Tensor, teacher_logits, labels, cfg: KDLossConfig | None = None) -> Tensor:
    return kd_loss_parts(student_logits, teacher_logits, labels, cfg)[0]


# ---------------------------------------------------------------------------
# freezing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FreezePlan:
    frozen_roles: frozenset

    @classmethod
    def preset(cls, name: str) -> "FreezePlan":
        if name not in FREEZE_PRESETS:
            raise ValueError(f"unknown freeze preset {name!r}; choose from {sorted(FREEZE_PRESETS)}")
        return cls(frozenset(FREEZE_PRESETS[name]))

    @classmethod
    def of(cls, roles: Iterable[str]) -> "FreezePlan":
        roles = frozenset(roles)
        bad = roles - set(FREEZE_ROLES)
        if bad:
            raise ValueError(f"unknown freeze role(s) {sorted(bad)}")
        return cls(roles)

    def covers(self, role: str) -> bool:
        return role in self.frozen_roles or (role in MLP_ROLES and "mlp" in self.frozen_roles)


def frozen_names(model: MicroLM, plan: FreezePlan) -> list[str]:
    return [
        param_name(i, r)
        for i in range(model.config.n_layers)
        for r in ATTN_ROLES + MLP_ROLES
        if plan.covers(r)
    ]


def apply_freeze(model: MicroLM, plan: FreezePlan | str) -> list[Tensor]:
    """Freeze the plan's projections in every layer; return the remaining trainable tensors."""
    if isinstance(plan, str):
        plan = FreezePlan.preset(plan)
    names = set(frozen_names(model, plan))
    for name in names:
        model.params[name].requires_grad = False
        model.params[name].zero_grad()
        state = model.quantizers.get(name)
        if state is not None and not state.frozen:
            state.freeze()
    trainable = []
    for name, t in model.params.items():
        if name not in names:
            t.requires_grad = True
            trainable.append(t)
    return trainable


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------

class Adam:
    def __init__(self, params: list[Tensor], betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def global_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        g = p.grad.reshape(-1).astype(np.float64)
        total += float(np.dot(g, g))
    return math.sqrt(total)


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    norm = global_grad_norm(params)
    if norm > max_norm:
        factor = max_norm / (norm + 1e-6)
        for p in params:
            if p._grad is not None:
                p._grad *= p.dtype.type(factor)
    return norm


def lr_at(step: int, base_lr: float, warmup_steps: int, total_steps: int | None = None,
          final_ratio: float = 1.0) -> float:
    """Linear warmup over ``warmup_steps``, then constant.

    With ``final_ratio < 1`` and ``total_steps`` given, the post-warmup rate
    follows a half cosine from ``base_lr`` down to ``final_ratio * base_lr``.
    """
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    if final_ratio == 1.0 or total_steps is None or total_steps <= warmup_steps:
        return base_lr
    t = min(1.0, (step - warmup_steps) / max(1, total_steps - 1 - warmup_steps))
    return base_lr * (final_ratio + (1.0 - final_ratio) * 0.5 * (1.0 + math.cos(math.pi * t)))


class BatchSampler:
    """Random contiguous windows from a token stream, reproducible from the seed."""

    def __init__(self, ids: np.ndarray, batch_size: int, seq_len: int, seed: int):
        if len(ids) < seq_len + 2:
            raise ValueError(f"corpus too small for one batch: {len(ids)} tokens, seq_len {seq_len}")
        self.ids = np.asarray(ids, dtype=np.int64)
        self.batch_size = batch_size
        self.seq_len = seq_len
        self.rng = np.random.default_rng(seed)

    def next(self) -> tuple[np.ndarray, np.ndarray]:
        starts = self.rng.integers(0, len(self.ids) - self.seq_len - 1, size=self.batch_size)
        idx = starts[:, None] + np.arange(self.seq_len + 1)
        chunk = self.ids[idx]
        return chunk[:, :-1], chunk[:, 1:]


# ---------------------------------------------------------------------------
# steps and loops
# ---------------------------------------------------------------------------

@dataclass
class StepMetrics:
    step: int
    loss: float
    ce: float
    kl: float
    grad_norm: float
    lr: float
    tokens_per_s: float
    elapsed_ms: float

    def record(self) -> dict:
        return {"step": self.step, "loss": self.loss, "ce": self.ce, "kl": self.kl,
                "grad_norm": self.grad_norm, "lr": self.lr, "elapsed_ms": self.elapsed_ms}


def _named(model: MicroLM, params: list[Tensor]) -> list[tuple[str, Tensor]]:
    ids = {id(p) for p in params}
    return [(k, t) for k, t in model.params.items() if id(t) in ids]


def train_step(
    student: MicroLM,
    teacher: MicroLM | None,
    batch: tuple[np.ndarray, np.ndarray],
    optimizer: Adam,
    probe=None,
    *,
    step: int = 0,
    lr: float = 3e-4,
    kd: KDLossConfig | None = None,
    grad_clip: float = 1.0,
    teacher_logits: np.ndarray | None = None,
) -> StepMetrics:
    """One KD step (or plain CE when ``teacher`` is None and no logits are given)."""
    x, y = batch
    t0 = time.perf_counter()
    if probe is not None:
        probe.begin_step(step)
    try:
        if teacher_logits is None and teacher is not None:
            teacher_logits = teacher.forward(x).data
        with T.Tape() as tape:
            logits = student.forward(x)
            if teacher_logits is None:
                ce = -T.mean(T.take_last(T.log_softmax(logits), y))
                loss, kl = ce, None
            else:
                loss, ce, kl = kd_loss_parts(logits, teacher_logits, y, kd)
            if not np.isfinite(loss.data).all():
                raise TrainingDiverged(step, "loss")
            tape.backward(loss)
    except T.NonFiniteError as e:
        raise TrainingDiverged(step, e.scope, str(e)) from e
    if probe is not None:
        probe.end_step()
    for name, p in _named(student, optimizer.params):
        if p._grad is not None and not np.isfinite(p._grad).all():
            raise TrainingDiverged(step, name, "non-finite gradient")
    gnorm = clip_grad_norm(optimizer.params, grad_clip)
    optimizer.step(lr)
    optimizer.zero_grad()
    dt = time.perf_counter() - t0
    return StepMetrics(
        step=step,
        loss=float(loss.data),
        ce=float(ce.data),
        kl=float(kl.data) if kl is not None else 0.0,
        grad_norm=gnorm,
        lr=lr,
        tokens_per_s=x.size / dt if dt > 0 else float("inf"),
        elapsed_ms=dt * 1000.0,
    )


def _eval_cfg(cfg: ExperimentConfig, windows: int | None) -> EvalConfig:
    e = cfg.eval
    return EvalConfig(e.context_length, e.stride, e.batch_size, windows)


def pretrain_teacher(cfg: ExperimentConfig, corpus: Corpus, out_path: str | Path | None = None,
                     metrics_path: str | Path | None = None) -> tuple[MicroLM, dict]:
    """Train the full-precision teacher with plain cross-entropy and record held-out perplexity."""
    p = cfg.pretrain
    model = MicroLM(cfg.model, seed=cfg.seed)
    sampler = BatchSampler(corpus.train, p.batch_size, p.seq_len, cfg.seed)
    opt = Adam(model.parameters(), (p.beta1, p.beta2), p.eps)
    if metrics_path:
        Path(metrics_path).parent.mkdir(parents=True, exist_ok=True)
    mfile = open(metrics_path, "w", encoding="utf-8") if metrics_path else None
    try:
        for step in range(p.steps):
            m = train_step(model, None, sampler.next(), opt, step=step,
                           lr=lr_at(step, p.learning_rate, p.warmup_steps, p.steps, p.final_lr_ratio),
                           grad_clip=p.grad_clip)
            if mfile:
                mfile.write(json.dumps(m.record()) + "\n")
            if step % 100 == 0 or step == p.steps - 1:
                log.info("pretrain step %d loss %.4f", step, m.loss)
    finally:
        if mfile:
            mfile.close()
    record = eval_record(model, corpus, "heldout", _eval_cfg(cfg, None))
    record["kind"] = "teacher"
    record["steps"] = p.steps
    if out_path is not None:
        ckpt.save_checkpoint(out_path, model, cfg.to_dict(), {"kind": "teacher", "eval": record})
    return model, record


def make_ptq_student(teacher: MicroLM, cfg: ExperimentConfig, method: str | None = None) -> MicroLM:
    student = teacher.copy()
    q = cfg.quant
    attach_quantizers(student, weight_scheme(q.bitwidth), q.policy, method or q.calibration, q.grid_points)
    return student


@dataclass
class RunResult:
    run_dir: Path
    student: MicroLM
    metrics: list[StepMetrics]
    initial_eval: dict
    final_eval: dict
    frozen_digests: dict


def run_kd_qat(
    cfg: ExperimentConfig,
    teacher: MicroLM,
    corpus: Corpus,
    run_dir: str | Path,
    student: MicroLM | None = None,
    quantize: bool = True,
    probes: bool = True,
) -> RunResult:
    """Calibrate (unless a PTQ student is given), freeze, train with KD and evaluate.

    Writes ``trace.csv``, ``metrics.jsonl``, ``eval.jsonl`` and ``student.qatf``
    into ``run_dir``.
    """
    tc: TrainConfig = cfg.train
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    if student is None:
        student = make_ptq_student(teacher, cfg) if quantize else teacher.copy()
    else:
        student = student.copy()
    if not quantize:
        student.quantizers.clear()
    student.act_quantizers.clear()
    student.act_quant_enabled = False

    plan = FreezePlan.preset(cfg.freeze.preset)
    trainable = apply_freeze(student, plan)
    frozen = frozen_names(student, plan)
    before = {n: ckpt.tensor_digest(student, n) for n in frozen}

    sink = TraceSink(run_dir / "trace.csv") if probes else None
    probe = install_probes(student, sink, every_n_steps=tc.trace_every) if probes else None
    opt = Adam(trainable, (tc.beta1, tc.beta2), tc.eps)
    sampler = BatchSampler(corpus.train, tc.batch_size, tc.seq_len, cfg.seed)
    periodic = _eval_cfg(cfg, tc.eval_windows)

    initial = eval_record(student, corpus, "heldout", _eval_cfg(cfg, None))
    initial["step"] = 0
    metrics: list[StepMetrics] = []
    with open(run_dir / "metrics.jsonl", "w", encoding="utf-8") as mf, \
            open(run_dir / "eval.jsonl", "w", encoding="utf-8") as ef:
        ef.write(json.dumps(initial) + "\n")
        for step in range(tc.steps):
            m = train_step(student, teacher, sampler.next(), opt, probe, step=step,
                           lr=lr_at(step, tc.learning_rate, tc.warmup_steps), kd=cfg.kd,
                           grad_clip=tc.grad_clip)
            metrics.append(m)
            mf.write(json.dumps(m.record()) + "\n")
            if (step + 1) % tc.eval_every == 0 and step + 1 < tc.steps:
                rec = eval_record(student, corpus, "heldout", periodic)
                rec["step"] = step + 1
                ef.write(json.dumps(rec) + "\n")
                log.info("kdqat step %d loss %.4f ppl(subset) %.3f", step + 1, m.loss, rec["ppl"])
        final = eval_record(student, corpus, "heldout", _eval_cfg(cfg, None))
        final["step"] = tc.steps
        ef.write(json.dumps(final) + "\n")
    if sink is not None:
        sink.close()
        student.observers.remove(probe)

    after = {n: ckpt.tensor_digest(student, n) for n in frozen}
    if after != before:
        changed = [n for n in frozen if after[n] != before[n]]
        raise RuntimeError(f"freeze contract violated for {changed}")
    meta = {"kind": "kdqat", "freeze": cfg.freeze.preset, "quantized": quantize,
            "initial_eval": initial, "eval": final, "frozen_sha256": before}
    ckpt.save_checkpoint(run_dir / "student.qatf", student, cfg.to_dict(), meta)
    return RunResult(run_dir, student, metrics, initial, final, before)
