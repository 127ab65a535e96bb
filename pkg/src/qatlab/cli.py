"""Command-line front end: ``qatlab <command> ...``.

Commands print one JSON document on stdout and exit 0; on failure they
print a message on stderr and exit nonzero (2 for configuration problems,
1 otherwise). ``QATF_THREADS`` caps BLAS threads.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
from pathlib import Path

from qatlab import checkpoint as ckpt
from qatlab import distill, probe, quant
from qatlab.config import ConfigError, ExperimentConfig, load_config
from qatlab.evaluation import Corpus, EvalConfig, eval_record
from qatlab.model import calibrate_activations_minmax

log = logging.getLogger("qatlab")


class CommandError(RuntimeError):
    pass


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    sys.stdout.flush()


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_corpus(cfg: ExperimentConfig) -> Corpus:
    return Corpus.load(cfg.paths.corpus)


def _refuse_existing(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise CommandError(f"{path} already exists; pass --force to overwrite")


def _eval_cfg(cfg: ExperimentConfig) -> EvalConfig:
    return EvalConfig(cfg.eval.context_length, cfg.eval.stride, cfg.eval.batch_size, cfg.eval.max_windows)


def run_dir_name(cfg: ExperimentConfig, quantize: bool) -> str:
    """Pure function of the configuration (which includes the seed)."""
    blob = json.dumps({"config": cfg.to_dict(), "quantize": quantize}, sort_keys=True,
                      separators=(",", ":"))
    digest = hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]
    mode = "int" + str(cfg.quant.bitwidth) if quantize else "fp"
    return f"kdqat-{mode}-{cfg.freeze.preset}-{digest}-s{cfg.seed}"


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_pretrain_teacher(args) -> dict:
    cfg = load_config(args.config)
    out = Path(args.out) if args.out else cfg.paths.teacher_path()
    _refuse_existing(out, args.force)
    corpus = _load_corpus(cfg)
    metrics = out.with_suffix(".metrics.jsonl")
    _, record = distill.pretrain_teacher(cfg, corpus, out, metrics)
    record["ckpt"] = str(out)
    _write_json(out.with_suffix(".eval.json"), record)
    return record


def calibration_report(teacher_ckpt: ckpt.Checkpoint, cfg: ExperimentConfig, method: str,
                       corpus: Corpus):
    teacher = teacher_ckpt.model
    if teacher.quantizers:
        raise CommandError("calibrate expects a full-precision teacher checkpoint")
    student = distill.make_ptq_student(teacher, cfg, method)
    tensors = []
    for name, state in student.quantizers.items():
        mse = quant.reconstruction_mse(student.params[name].data, state.params, state.scheme)
        tensors.append({"name": name, "mse": mse})
    ev = _eval_cfg(cfg)
    report = {
        "method": method,
        "bitwidth": cfg.quant.bitwidth,
        "tensors": tensors,
        "total_mse": float(sum(t["mse"] for t in tensors)),
        "n_quantized": len(tensors),
        "eval": dict(eval_record(student, corpus, "heldout", ev), mode="w4"),
        "teacher_eval": dict(eval_record(teacher, corpus, "heldout", ev), mode="fp"),
    }
    return student, report


def cmd_calibrate(args) -> dict:
    cfg = load_config(args.config)
    teacher = ckpt.load_checkpoint(args.teacher)
    out = Path(args.out) if args.out else Path(cfg.paths.out_dir) / f"ptq-{args.method}.qatf"
    _refuse_existing(out, args.force)
    student, report = calibration_report(teacher, cfg, args.method, _load_corpus(cfg))
    meta = {"kind": "ptq", "method": args.method, "eval": report["eval"]}
    ckpt.save_checkpoint(out, student, cfg.to_dict(), meta)
    report["ckpt"] = str(out)
    _write_json(out.with_suffix(".report.json"), report)
    return report


def cmd_kdqat(args) -> dict:
    cfg = load_config(args.config)
    cfg.freeze.preset = args.freeze
    if args.steps is not None:
        cfg.train.steps = args.steps
    if args.teacher:
        cfg.paths.teacher = args.teacher
    if args.ptq:
        cfg.paths.ptq = args.ptq
    cfg.validate()
    quantize = not args.no_quant

    teacher_path = cfg.paths.teacher_path()
    if not teacher_path.is_file():
        raise CommandError(f"teacher checkpoint not found: {teacher_path}")
    teacher = ckpt.load_checkpoint(teacher_path).model
    student = None
    if quantize:
        ptq_path = cfg.paths.ptq_path(cfg.quant.calibration)
        if ptq_path.is_file():
            student = ckpt.load_checkpoint(ptq_path).model
        elif cfg.paths.ptq:
            raise CommandError(f"PTQ checkpoint not found: {ptq_path}")
        else:
            log.info("no PTQ checkpoint at %s; calibrating from the teacher", ptq_path)

    run_dir = Path(cfg.paths.out_dir) / run_dir_name(cfg, quantize)
    if run_dir.exists():
        if not args.force:
            raise CommandError(f"run directory {run_dir} exists; pass --force to overwrite")
        shutil.rmtree(run_dir)
    run_dir.mkdir(parents=True)
    _write_json(run_dir / "config.json", {"config": cfg.to_dict(), "quantize": quantize})
    res = distill.run_kd_qat(cfg, teacher, _load_corpus(cfg), run_dir, student=student,
                             quantize=quantize, probes=not args.no_probes)
    mode = "w4" if quantize else "fp"
    summary = {
        "run_dir": str(run_dir),
        "freeze": cfg.freeze.preset,
        "quantized": quantize,
        "steps": cfg.train.steps,
        "initial_eval": dict(res.initial_eval, mode=mode),
        "final_eval": dict(res.final_eval, mode=mode),
        "frozen_sha256": res.frozen_digests,
    }
    _write_json(run_dir / "summary.json", summary)
    return summary


def cmd_eval(args) -> dict:
    cfg = load_config(args.config)
    loaded = ckpt.load_checkpoint(args.ckpt)
    model = loaded.model
    corpus = _load_corpus(cfg)
    mode = "w4" if model.quantizers else "fp"
    if args.w4a16:
        if not model.quantizers:
            raise CommandError("--w4a16 needs a weight-quantized checkpoint")
        if not model.act_quantizers:
            sampler = distill.BatchSampler(corpus.train, cfg.eval.batch_size, cfg.eval.context_length,
                                           cfg.seed)
            calibrate_activations_minmax(model, [sampler.next()[0] for _ in range(cfg.quant.act_calib_batches)],
                                         cfg.quant.act_bitwidth)
            if args.save:
                ckpt.save_checkpoint(args.save, model, loaded.config,
                                     dict(loaded.meta, act_calibrated=True))
        model.act_quant_enabled = True
        mode = "w4a16"
    record = eval_record(model, corpus, args.split, _eval_cfg(cfg))
    record["mode"] = mode
    record["ckpt"] = str(args.ckpt)
    if args.out:
        _write_json(Path(args.out), record)
    return record


def cmd_trace_report(args) -> dict:
    traces = {}
    for i, spec in enumerate(args.trace):
        label, sep, path = spec.partition("=")
        if not sep:
            label, path = f"run{i}", spec
        if label in traces:
            raise CommandError(f"duplicate trace label {label!r}")
        traces[label] = path
    out = Path(args.out)
    if len(traces) == 1:
        summary = probe.trace_report(next(iter(traces.values())), out)
        result = {"layers": summary, "series": sorted(str(p) for p in out.glob("layer*_*.csv"))}
    else:
        runs = {label: probe.trace_report(path, out / label) for label, path in traces.items()}
        written = probe.overlay_report(traces, out / "overlay")
        result = {"layers": runs[next(iter(traces))], "runs": runs, "series": [str(p) for p in written]}
    _write_json(out / "summary.json", result)
    return result


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qatlab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pretrain-teacher", help="train the full-precision teacher")
    s.add_argument("--config")
    s.add_argument("--out", help="teacher checkpoint path (default <out_dir>/teacher.qatf)")
    s.add_argument("--force", action="store_true")
    s.set_defaults(fn=cmd_pretrain_teacher)

    s = sub.add_parser("calibrate", help="post-training weight quantization of a teacher")
    s.add_argument("--teacher", required=True)
    s.add_argument("--method", choices=("minmax", "mse"), default="mse")
    s.add_argument("--config")
    s.add_argument("--out")
    s.add_argument("--force", action="store_true")
    s.set_defaults(fn=cmd_calibrate)

    s = sub.add_parser("kdqat", help="knowledge-distillation QAT with a freeze plan")
    s.add_argument("--config")
    s.add_argument("--freeze", choices=sorted(distill.FREEZE_PRESETS), default="none")
    s.add_argument("--teacher")
    s.add_argument("--ptq")
    s.add_argument("--steps", type=int)
    s.add_argument("--no-quant", action="store_true", help="full-precision reference run")
    s.add_argument("--no-probes", action="store_true")
    s.add_argument("--force", action="store_true")
    s.set_defaults(fn=cmd_kdqat)

    s = sub.add_parser("eval", help="held-out perplexity of a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--w4a16", action="store_true", help="also fake-quantize projection outputs to 16 bits")
    s.add_argument("--config")
    s.add_argument("--split", default="heldout", choices=("heldout", "train"))
    s.add_argument("--save", help="write the activation-calibrated checkpoint here")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("trace-report", help="summaries and series files from probe traces")
    s.add_argument("--trace", action="append", required=True, metavar="[LABEL=]CSV")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_trace_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    limiter = None
    threads = os.environ.get("QATF_THREADS")
    if threads:
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(limits=int(threads))
    try:
        _emit(args.fn(args))
        return 0
    except ConfigError as e:
        print(f"qatlab: config error: {e}", file=sys.stderr)
        return 2
    except (CommandError, FileNotFoundError, ckpt.CheckpointError, probe.TraceFormatError,
            distill.TrainingDiverged, ValueError) as e:
        print(f"qatlab: error: {e}", file=sys.stderr)
        return 1
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
