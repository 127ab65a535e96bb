"""Run the three-way comparison end to end and write the trace overlay.

    python scripts/three_way.py --config configs/default.toml [--out report]

Runs, in order: teacher pretraining, MSE calibration, then KD finetuning as
FP (no quantizers, nothing frozen), INT4 with nothing frozen and INT4 with
o/v frozen. Existing teacher and PTQ checkpoints are reused. Finishes with
``qatlab trace-report`` over the three traces.
"""
import argparse
import contextlib
import io
import json
import sys
from pathlib import Path

from qatlab.cli import main as qatlab
from qatlab.config import load_config

RUNS = {
    "fp_none": ["--freeze", "none", "--no-quant"],
    "int4_none": ["--freeze", "none"],
    "int4_ov": ["--freeze", "ov"],
}


def call(*argv) -> dict:
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        code = qatlab([str(a) for a in argv])
    if code != 0:
        sys.exit(code)
    return json.loads(buf.getvalue())


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/default.toml")
    ap.add_argument("--out", default=None, help="report directory (default: <out_dir>/three_way)")
    ap.add_argument("--force", action="store_true", help="rerun KD runs whose directories exist")
    args = ap.parse_args()

    cfg = load_config(args.config)
    out_dir = Path(cfg.paths.out_dir)
    teacher = cfg.paths.teacher_path()
    if not teacher.is_file():
        print(f"pretraining teacher -> {teacher}", file=sys.stderr)
        call("pretrain-teacher", "--config", args.config)
    ptq = out_dir / "ptq-mse.qatf"
    if not ptq.is_file():
        print(f"calibrating -> {ptq}", file=sys.stderr)
        call("calibrate", "--config", args.config, "--teacher", teacher, "--method", "mse")

    traces, finals = {}, {}
    for label, extra in RUNS.items():
        print(f"kdqat {label}", file=sys.stderr)
        res = call("kdqat", "--config", args.config, "--ptq", ptq, *extra, *(["--force"] if args.force else []))
        traces[label] = Path(res["run_dir"]) / "trace.csv"
        finals[label] = res["final_eval"]["ppl"]

    report_dir = Path(args.out) if args.out else out_dir / "three_way"
    argv = ["trace-report", "--out", report_dir]
    for label, path in traces.items():
        argv += ["--trace", f"{label}={path}"]
    report = call(*argv)

    print("final held-out ppl: " + ", ".join(f"{k}={v:.4f}" for k, v in finals.items()))
    print("median grad_norm_sq ratios per layer (o/q, o/k, v/q, v/k):")
    for label, rows in report["runs"].items():
        for row in rows:
            ratios = "  ".join(f"{row[f'ratio_{a}/{b}']:.3g}" for a, b in (("o", "q"), ("o", "k"), ("v", "q"), ("v", "k")))
            print(f"  {label:10s} layer {row['layer_id']}: {ratios}")
    print(f"overlay CSVs in {report_dir / 'overlay'}")


if __name__ == "__main__":
    main()
