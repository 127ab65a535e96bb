"""Per-projection forward means and output-gradient norms, with CSV traces and reports."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from qatlab import tensor as T
from qatlab.model import ATTN_ROLES, MicroLM

log = logging.getLogger(__name__)

HEADER = ("step", "layer_id", "proj", "stat", "value")
STATS = ("fwd_mean", "grad_norm_sq")
RATIOS = (("o", "q"), ("o", "k"), ("v", "q"), ("v", "k"))


class TraceFormatError(ValueError):
    def __init__(self, line: int, msg: str):
        self.line = line
        super().__init__(f"line {line}: {msg}")


def grad_norm_sq(grad) -> float:
    """Squared Frobenius norm of a gradient array."""
    if grad is None:
        raise ValueError("no gradient recorded")
    g = np.asarray(grad, dtype=np.float64).reshape(-1)
    return float(np.dot(g, g))


def fwd_mean(output) -> float:
    a = np.asarray(getattr(output, "data", output), dtype=np.float64)
    if a.size == 0:
        raise ValueError("fwd_mean of an empty tensor")
    return float(a.mean())


@dataclass(frozen=True)
class TraceRecord:
    step: int
    layer_id: int
    proj: str
    stat: str
    value: float

    def key(self):
        return (self.step, self.layer_id, self.proj, self.stat)

    def row(self) -> str:
        return f"{self.step},{self.layer_id},{self.proj},{self.stat},{self.value:.9g}\n"


class TraceSink:
    """Append-only trace writer. ``path=None`` keeps records in memory only."""

    def __init__(self, path: str | Path | None = None, flush_every: int = 256):
        self.path = Path(path) if path is not None else None
        self.flush_every = flush_every
        self.records: list[TraceRecord] = []
        self._pending: list[TraceRecord] = []
        self._keys: set = set()
        self._last_step = -1
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", encoding="utf-8", newline="\n") as f:
                f.write(",".join(HEADER) + "\n")

    def add(self, rec: TraceRecord) -> None:
        if not math.isfinite(rec.value):
            raise ValueError(f"non-finite trace value at {rec.key()}")
        if rec.key() in self._keys:
            raise ValueError(f"duplicate trace record {rec.key()}")
        if rec.step < self._last_step:
            raise ValueError("trace records must arrive in step order")
        self._last_step = rec.step
        self._keys.add(rec.key())
        self.records.append(rec)
        self._pending.append(rec)
        if len(self._pending) >= self.flush_every:
            self.flush()

    def flush(self) -> None:
        if self.path is not None and self._pending:
            with open(self.path, "a", encoding="utf-8", newline="\n") as f:
                f.write("".join(r.row() for r in self._pending))
        self._pending.clear()

    def close(self) -> None:
        self.flush()


class Probe:
    """Records ``fwd_mean`` and ``grad_norm_sq`` of projection outputs at sampled steps."""

    def __init__(self, sink: TraceSink, roles: Iterable[str] = ATTN_ROLES, every_n_steps: int = 10):
        roles = tuple(roles)
        bad = [r for r in roles if r not in ATTN_ROLES]
        if bad:
            raise ValueError(f"probe roles must be a subset of {ATTN_ROLES}, got {bad}")
        if every_n_steps <= 0:
            raise ValueError("every_n_steps must be positive")
        self.sink = sink
        self.roles = roles
        self.every_n_steps = every_n_steps
        self.step: int | None = None
        self.model: MicroLM | None = None
        self._pending_grads: list[TraceRecord] = []

    def begin_step(self, step: int) -> None:
        self.step = step
        self._pending_grads = []

    @property
    def active(self) -> bool:
        return self.step is not None and self.step % self.every_n_steps == 0

    def __call__(self, layer: int, role: str, y: T.Tensor) -> None:
        if not self.active or role not in self.roles:
            return
        self.sink.add(TraceRecord(self.step, layer, role, "fwd_mean", fwd_mean(y)))
        tape = T.current_tape()
        if tape is None or not y.requires_grad:
            return
        step = self.step

        def on_grad(g):
            self._pending_grads.append(TraceRecord(step, layer, role, "grad_norm_sq", grad_norm_sq(g)))

        tape.watch(y, on_grad)

    def end_step(self) -> None:
        # backward visits layers last-to-first; write them in forward order
        for rec in sorted(self._pending_grads, key=lambda r: (r.layer_id, self.roles.index(r.proj))):
            self.sink.add(rec)
        self._pending_grads = []
        self.step = None


def install_probes(model: MicroLM, sink: TraceSink, roles: Iterable[str] = ATTN_ROLES,
                   every_n_steps: int = 10) -> Probe:
    if any(isinstance(o, Probe) for o in model.observers):
        raise RuntimeError("probes already installed on this model")
    probe = Probe(sink, roles, every_n_steps)
    probe.model = model
    model.observers.append(probe)
    return probe


def expected_record_count(n_layers: int, n_roles: int, steps: int, every_n: int) -> int:
    return n_layers * n_roles * 2 * math.ceil(steps / every_n)


# ---------------------------------------------------------------------------
# trace files and reports
# ---------------------------------------------------------------------------

def read_trace(path: str | Path) -> list[TraceRecord]:
    text = Path(path).read_text(encoding="utf-8")
    return parse_trace(text)


def parse_trace(text: str) -> list[TraceRecord]:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        return []
    if lines[0].rstrip("\r") != ",".join(HEADER):
        raise TraceFormatError(1, f"expected header {','.join(HEADER)!r}")
    out = []
    seen = set()
    for n, line in enumerate(lines[1:], start=2):
        parts = next(csv.reader(io.StringIO(line)), [])
        if len(parts) != 5:
            raise TraceFormatError(n, f"expected 5 fields, got {len(parts)}")
        try:
            rec = TraceRecord(int(parts[0]), int(parts[1]), parts[2], parts[3], float(parts[4]))
        except ValueError as e:
            raise TraceFormatError(n, str(e)) from None
        if rec.proj not in ATTN_ROLES:
            raise TraceFormatError(n, f"unknown projection {rec.proj!r}")
        if rec.stat not in STATS:
            raise TraceFormatError(n, f"unknown stat {rec.stat!r}")
        if not math.isfinite(rec.value):
            raise TraceFormatError(n, "non-finite value")
        if rec.key() in seen:
            raise TraceFormatError(n, f"duplicate record {rec.key()}")
        seen.add(rec.key())
        out.append(rec)
    return out


def _series(records: list[TraceRecord]) -> dict[tuple[int, str], dict[int, dict[str, float]]]:
    series: dict[tuple[int, str], dict[int, dict[str, float]]] = {}
    for r in records:
        series.setdefault((r.layer_id, r.stat), {}).setdefault(r.step, {})[r.proj] = r.value
    return series


def summarize(records: list[TraceRecord]) -> list[dict]:
    """Per layer: median of each stat per projection and the o/v-over-q/k grad-norm ratios."""
    vals: dict[tuple[int, str, str], list[float]] = {}
    for r in records:
        vals.setdefault((r.layer_id, r.stat, r.proj), []).append(r.value)
    rows = []
    for layer in sorted({r.layer_id for r in records}):
        row: dict = {"layer_id": layer}
        for stat in STATS:
            for p in ATTN_ROLES:
                v = vals.get((layer, stat, p))
                row[f"{stat}_median_{p}"] = float(np.median(v)) if v else None
        for a, b in RATIOS:
            num, den = row[f"grad_norm_sq_median_{a}"], row[f"grad_norm_sq_median_{b}"]
            row[f"ratio_{a}/{b}"] = num / den if num is not None and den else None
        rows.append(row)
    return rows


def _fmt(v) -> str:
    return "" if v is None else f"{v:.9g}"


def trace_report(trace_file: str | Path, out_dir: str | Path) -> list[dict]:
    """Write per-(layer, stat) series CSVs and a summary table; return the summary rows."""
    records = read_trace(trace_file)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not records:
        log.warning("trace %s has no records; writing an empty summary", trace_file)
    for (layer, stat), by_step in sorted(_series(records).items()):
        with open(out_dir / f"layer{layer}_{stat}.csv", "w", encoding="utf-8", newline="\n") as f:
            f.write("step," + ",".join(ATTN_ROLES) + "\n")
            for step in sorted(by_step):
                f.write(f"{step}," + ",".join(_fmt(by_step[step].get(p)) for p in ATTN_ROLES) + "\n")
    summary = summarize(records)
    _write_summary(summary, out_dir / "summary.csv")
    return summary


def _summary_columns() -> list[str]:
    cols = ["layer_id"]
    cols += [f"{s}_median_{p}" for s in STATS for p in ATTN_ROLES]
    cols += [f"ratio_{a}/{b}" for a, b in RATIOS]
    return cols


def _write_summary(summary: list[dict], path: Path) -> None:
    cols = _summary_columns()
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(",".join(cols) + "\n")
        for row in summary:
            f.write(",".join(str(row[c]) if c == "layer_id" else _fmt(row[c]) for c in cols) + "\n")


def overlay_report(traces: dict[str, str | Path], out_dir: str | Path) -> list[Path]:
    """One CSV per (layer, stat, proj) with a column per labelled run, aligned on step."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    per_run = {label: _series(read_trace(p)) for label, p in traces.items()}
    keys = sorted({k for s in per_run.values() for k in s})
    labels = list(traces)
    written = []
    for layer, stat in keys:
        steps = sorted({st for s in per_run.values() for st in s.get((layer, stat), {})})
        for p in ATTN_ROLES:
            path = out_dir / f"overlay_layer{layer}_{stat}_{p}.csv"
            with open(path, "w", encoding="utf-8", newline="\n") as f:
                f.write("step," + ",".join(labels) + "\n")
                for st in steps:
                    cells = [_fmt(per_run[lb].get((layer, stat), {}).get(st, {}).get(p)) for lb in labels]
                    f.write(f"{st}," + ",".join(cells) + "\n")
            written.append(path)
    return written
