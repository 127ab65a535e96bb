"""End-to-end acceptance checks, one test per criterion.

Each test prints ``CRITERION n: PASS|FAIL ...`` (also echoed in the pytest
terminal summary). The desk-scale runs use the default configuration with
seed 0 and take roughly 45 minutes on one CPU core. Set QATLAB_ACCEPT_DIR to
keep the artifacts and reuse them on the next invocation (recorded wall
times are reused too).
"""
import contextlib
import io
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from qatlab import checkpoint as ckpt
from qatlab import probe, quant
from qatlab import tensor as T
from qatlab.cli import main
from qatlab.distill import Adam, BatchSampler, apply_freeze, frozen_names, FreezePlan, train_step
from qatlab.evaluation import Corpus, EvalConfig, token_nll
from qatlab.model import ATTN_ROLES, ROLES, MicroLM, ModelConfig, attach_quantizers, param_name
from qatlab.quant import QuantParams, QuantScheme, QuantizerState

from conftest import ACCEPTANCE_LINES

pytestmark = pytest.mark.slow


@contextlib.contextmanager
def criterion(n: int, title: str):
    """Record PASS/FAIL for criterion ``n``; the body stores details in the yielded dict."""
    info: dict = {}
    t0 = time.perf_counter()
    try:
        yield info
    except BaseException as e:
        line = f"CRITERION {n}: FAIL {title} ({type(e).__name__}: {str(e).splitlines()[0] if str(e) else ''})"
        print(line)
        ACCEPTANCE_LINES.append(line)
        raise
    detail = ", ".join(f"{k}={v}" for k, v in info.items())
    line = f"CRITERION {n}: PASS {title} [{time.perf_counter() - t0:.1f}s] {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)


# ---------------------------------------------------------------------------
# 1. quantizer exactness
# ---------------------------------------------------------------------------

def test_criterion_01_quantizer_exactness():
    with criterion(1, "quantizer exactness") as info:
        t0 = time.perf_counter()
        s4, a4 = QuantScheme(4, quant.SYMMETRIC), QuantScheme(4, quant.ASYMMETRIC)
        cases = [(0.0, s4, 0.25, 0, 0.0), (0.9, s4, 0.25, 0, 1.0), (10.0, s4, 0.25, 0, 1.75),
                 (-3.0, a4, 1.0, 0, 0.0)]
        for x, sch, s, z, want in cases:
            got = quant.quantize_dequantize(np.array([x]), QuantizerState(sch, QuantParams([s], [z])))[0]
            assert abs(got - want) <= 1e-6, (x, got, want)
        assert abs(quant.calibrate_minmax(np.array([-3.5, 2.0]), s4).scale[0] - 0.5) <= 1e-6
        p = quant.calibrate_minmax(np.arange(16.0), a4)
        assert abs(p.scale[0] - 1.0) <= 1e-6 and p.zero_point[0] == 0
        assert abs(quant.reconstruction_mse(np.array([0.1]), QuantParams([1.0], [0]), a4) - 0.01) <= 1e-6

        rng = np.random.default_rng(2024)
        schemes = [QuantScheme(b, sym, axis) for b in (2, 3, 4, 8) for sym in (quant.SYMMETRIC, quant.ASYMMETRIC)
                   for axis in (None, 1)]
        for i in range(10_000):
            sch = schemes[i % len(schemes)]
            shape = (int(rng.integers(1, 9)), int(rng.integers(1, 9)))
            x = (rng.normal(size=shape) * rng.uniform(0.01, 10)).astype(np.float32)
            st = QuantizerState(sch, quant.calibrate_minmax(x, sch))
            y = quant.quantize_dequantize(x, st)
            assert np.array_equal(quant.quantize_dequantize(y, st), y), "idempotence"
            cols = [slice(None)] if sch.axis is None else range(shape[1])
            for c in cols:
                xc, yc = (x.reshape(-1), y.reshape(-1)) if sch.axis is None else (x[:, c], y[:, c])
                order = np.argsort(xc, kind="stable")
                assert np.all(np.diff(yc[order]) >= 0), "monotonicity"
        elapsed = time.perf_counter() - t0
        info.update(random_tensors=10_000, seconds=round(elapsed, 2))
        assert elapsed < 10


# ---------------------------------------------------------------------------
# 2. MSE dominance
# ---------------------------------------------------------------------------

def test_criterion_02_mse_dominance():
    with criterion(2, "MSE calibration never worse than min-max") as info:
        t0 = time.perf_counter()
        rng = np.random.default_rng(7)
        violations = 0
        for i in range(1000):
            sym = quant.SYMMETRIC if i % 2 == 0 else quant.ASYMMETRIC
            sch = QuantScheme(4, sym, axis=1)
            shape = (int(rng.integers(2, 65)), int(rng.integers(1, 17)))
            w = rng.standard_t(df=3, size=shape) * rng.uniform(0.001, 1.0)
            mse = quant.reconstruction_mse(w, quant.calibrate_mse(w, sch), sch)
            mm = quant.reconstruction_mse(w, quant.calibrate_minmax(w, sch), sch)
            violations += mse > mm
        elapsed = time.perf_counter() - t0
        info.update(tensors=1000, violations=violations, seconds=round(elapsed, 2))
        assert violations == 0 and elapsed < 30


# ---------------------------------------------------------------------------
# 3. gradient fidelity
# ---------------------------------------------------------------------------

def test_criterion_03_gradient_fidelity():
    with criterion(3, "gradient fidelity") as info:
        t0 = time.perf_counter()
        with T.default_dtype(np.float64):
            m = MicroLM(ModelConfig(), seed=11)
        attach_quantizers(m, grid_points=5)
        m.set_quant_enabled(False)
        rng = np.random.default_rng(11)
        toks = rng.integers(0, 259, size=(2, 12))
        labels = rng.integers(0, 259, size=(2, 12))

        def loss_fn(_):
            return -T.mean(T.take_last(T.log_softmax(m.forward(toks)), labels))

        model_err = T.finite_difference_check(loss_fn, m.parameters(), epsilon=1e-5, samples=20, seed=3)

        # per-primitive checks, reusing the unit-test table
        from test_tensor import PRIMITIVES, _u, leaf

        prim_err = 0.0
        for name, (f, shapes) in sorted(PRIMITIVES.items()):
            xs = [leaf(_u(*s)) for s in shapes]
            prim_err = max(prim_err, T.finite_difference_check(lambda _: f(*xs), xs, epsilon=1e-4))
        elapsed = time.perf_counter() - t0
        info.update(model_max_rel_err=f"{model_err:.2e}", primitive_max_rel_err=f"{prim_err:.2e}",
                    seconds=round(elapsed, 1))
        assert model_err < 1e-3 and prim_err < 1e-6 and elapsed < 120


# ---------------------------------------------------------------------------
# 4. STE correctness
# ---------------------------------------------------------------------------

def test_criterion_04_ste_correctness():
    with criterion(4, "STE equals clipped-mask oracle") as info:
        rng = np.random.default_rng(4)
        n = 10_000
        x = rng.uniform(-3, 3, size=n)
        s, z, sch = 0.2, 0, QuantScheme(4, quant.SYMMETRIC)
        st = QuantizerState(sch, QuantParams([s], [z]))
        up = rng.normal(size=n)
        xt = T.Tensor(x, requires_grad=True, dtype=np.float64)
        with T.Tape() as tape:
            loss = (quant.quantize_dequantize(xt, st) * T.Tensor(up, dtype=np.float64)).sum()
        tape.backward(loss)
        oracle = np.array([u if sch.qmin <= round(v / s) + z <= sch.qmax else 0.0 for v, u in zip(x, up)])
        mismatches = int(np.sum(xt.grad != oracle))
        info.update(scalars=n, clipped=int(np.sum(oracle == 0)), mismatches=mismatches)
        assert mismatches == 0


# ---------------------------------------------------------------------------
# 6. probe fidelity
# ---------------------------------------------------------------------------

def test_criterion_06_probe_fidelity():
    with criterion(6, "probe fidelity") as info:
        cfg = ModelConfig()
        corpus = Corpus.load()
        steps = 4

        def setup():
            teacher = MicroLM(cfg, seed=0)
            student = teacher.copy()
            attach_quantizers(student, grid_points=11)
            return teacher, student, Adam(apply_freeze(student, "none"))

        # probed run
        teacher, student, opt = setup()
        sink = probe.TraceSink(None)
        p = probe.install_probes(student, sink, every_n_steps=1)
        sampler = BatchSampler(corpus.train, 2, 64, 0)
        probed = [train_step(student, teacher, sampler.next(), opt, p, step=i, lr=1e-3).loss for i in range(steps)]

        # unprobed run with an independent capture hook
        teacher, student, opt = setup()
        captured = {}

        class Capture:
            step = 0

            def __call__(self, layer, role, y):
                if role not in ATTN_ROLES:
                    return
                flat = y.data.astype(np.float64).reshape(-1)
                captured[(self.step, layer, role, "fwd_mean")] = math.fsum(flat) / flat.size

                def on_grad(g, key=(self.step, layer, role)):
                    gf = g.astype(np.float64).reshape(-1)
                    captured[key + ("grad_norm_sq",)] = math.fsum(gf * gf)

                T.current_tape().watch(y, on_grad)

        cap = Capture()
        student.observers.append(cap)
        sampler = BatchSampler(corpus.train, 2, 64, 0)
        plain = []
        for i in range(steps):
            cap.step = i
            plain.append(train_step(student, teacher, sampler.next(), opt, step=i, lr=1e-3).loss)
        student.observers.remove(cap)

        worst = 0.0
        for r in sink.records:
            ref = captured[r.key()]
            worst = max(worst, abs(r.value - ref) / max(abs(ref), 1e-30))
        loss_diff = max(abs(a - b) for a, b in zip(probed, plain))
        info.update(records=len(sink.records), max_rel_err=f"{worst:.2e}", loss_diff=loss_diff)
        assert len(sink.records) == probe.expected_record_count(cfg.n_layers, 4, steps, 1)
        assert worst <= 1e-6 and probed == plain


# ---------------------------------------------------------------------------
# 7. perplexity oracle
# ---------------------------------------------------------------------------

def test_criterion_07_perplexity_oracle():
    with criterion(7, "perplexity oracle") as info:
        corpus = Corpus.load()

        class Uniform:
            def __call__(self, x):
                return np.zeros(x.shape + (259,))

        total, n = token_nll(Uniform(), corpus.heldout, EvalConfig(256))
        ppl_uniform = math.exp(total / n)

        m = MicroLM(ModelConfig(), seed=1)
        ids = corpus.heldout[:1025]
        batched, count = token_nll(m, ids, EvalConfig(256, batch_size=3))
        naive = 0.0
        for b in range(0, 1024, 256):
            logits = m.forward(ids[b:b + 256][None]).data[0].astype(np.float64)
            for pos in range(logits.shape[0]):
                row = logits[pos]
                mx = max(row)
                naive += math.log(sum(math.exp(v - mx) for v in row)) + mx - row[ids[b + pos + 1]]
        rel = abs(batched - naive) / naive
        info.update(uniform_ppl=f"{ppl_uniform:.6f}", batched_vs_naive_rel=f"{rel:.2e}", tokens=count)
        assert abs(ppl_uniform - 259) <= 1e-3 and rel <= 1e-5


# ---------------------------------------------------------------------------
# desk-scale pipeline shared by criteria 5 and 8-11
# ---------------------------------------------------------------------------

class Pipeline:
    def __init__(self, root: Path):
        self.root = root
        self.runs = root / "runs"
        self.config = root / "default.toml"
        self.timings_path = root / "timings.json"
        self.timings = json.loads(self.timings_path.read_text()) if self.timings_path.is_file() else {}
        if not self.config.is_file():
            # default configuration; only the output directory is redirected
            self.config.write_text(f'seed = 0\n[paths]\nout_dir = "{self.runs}"\n')

    @staticmethod
    def run(*argv) -> dict:
        """Run one CLI command (overwriting earlier outputs) and return its JSON result."""
        buf = io.StringIO()
        with contextlib.redirect_stdout(buf):
            code = main([str(a) for a in argv] + ["--force"] * (argv[0] != "trace-report"))
        assert code == 0, f"{argv} exited {code}"
        return json.loads(buf.getvalue())

    def call(self, key: str, *argv) -> dict:
        """Like ``run``, but cache the result and wall time under ``key``."""
        out_json = self.root / f"{key}.json"
        if out_json.is_file():
            return json.loads(out_json.read_text())
        t0 = time.perf_counter()
        result = self.run(*argv)
        self.timings[key] = time.perf_counter() - t0
        self.timings_path.write_text(json.dumps(self.timings, indent=2))
        out_json.write_text(json.dumps(result, indent=2))
        return result

    @property
    def teacher(self) -> Path:
        return self.runs / "teacher.qatf"

    def ptq(self, method: str) -> Path:
        return self.runs / f"ptq-{method}.qatf"

    def kdqat(self, key, freeze, *extra):
        return self.call(key, "kdqat", "--config", self.config, "--freeze", freeze,
                         "--ptq", self.ptq("mse"), *extra)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = os.environ.get("QATLAB_ACCEPT_DIR")
    root = Path(root) if root else tmp_path_factory.mktemp("accept")
    root.mkdir(parents=True, exist_ok=True)
    pl = Pipeline(root)
    pl.results = {}
    pl.results["teacher"] = pl.call("teacher", "pretrain-teacher", "--config", pl.config)
    for method in ("minmax", "mse"):
        pl.results[method] = pl.call(f"ptq-{method}", "calibrate", "--config", pl.config,
                                     "--teacher", pl.teacher, "--method", method)
    pl.results["none"] = pl.kdqat("kd-none", "none")
    pl.results["ov"] = pl.kdqat("kd-ov", "ov")
    return pl


def test_criterion_08_desk_scale_ordering(pipeline):
    with criterion(8, "desk-scale ordering teacher < PTQ-minmax, PTQ-mse <= PTQ-minmax, KD < PTQ-mse") as info:
        r = pipeline.results
        teacher = r["teacher"]["ppl"]
        minmax = r["minmax"]["eval"]["ppl"]
        mse = r["mse"]["eval"]["ppl"]
        kd_none = r["none"]["final_eval"]["ppl"]
        kd_ov = r["ov"]["final_eval"]["ppl"]
        minutes = sum(pipeline.timings[k] for k in ("teacher", "ptq-minmax", "ptq-mse", "kd-none", "kd-ov")) / 60
        info.update(teacher=f"{teacher:.4f}", ptq_minmax=f"{minmax:.4f}", ptq_mse=f"{mse:.4f}",
                    kd_none=f"{kd_none:.4f}", kd_ov=f"{kd_ov:.4f}",
                    ov_vs_none="ov lower" if kd_ov < kd_none else "none lower",
                    minutes=f"{minutes:.1f}")
        checks = {
            "teacher < ptq_minmax": teacher < minmax,
            "ptq_mse <= ptq_minmax": mse <= minmax,
            "kd_none < ptq_mse": kd_none < mse,
            "kd_ov < ptq_mse": kd_ov < mse,
            "minutes < 45": minutes < 45,
        }
        failed = [k for k, ok in checks.items() if not ok]
        assert r["none"]["steps"] == r["ov"]["steps"] == 2000
        assert not failed, f"violated {failed}; " + ", ".join(f"{k}={v}" for k, v in info.items())


def test_criterion_05_freeze_contract(pipeline):
    with criterion(5, "freeze contract for o, v, ov, qkv, oqkv") as info:
        ptq = ckpt.load_checkpoint(pipeline.ptq("mse")).model
        seconds = 0.0
        for preset in ("ov", "o", "v", "qkv", "oqkv"):
            res = pipeline.kdqat(f"freeze-{preset}", preset, "--steps", 200)
            seconds += pipeline.timings[f"freeze-{preset}"]
            student = ckpt.load_checkpoint(Path(res["run_dir"]) / "student.qatf").model
            plan = FreezePlan.preset(preset)
            frozen = frozen_names(student, plan)
            for name in frozen:
                assert ckpt.tensor_digest(student, name) == ckpt.tensor_digest(ptq, name), name
                assert (student.quantizers[name].params.scale.tobytes()
                        == ptq.quantizers[name].params.scale.tobytes()), name
            trainable = [param_name(i, r) for i in range(student.config.n_layers)
                         for r in ("q", "k", "gate", "up", "down") if not plan.covers(r)]
            changed = [n for n in trainable if ckpt.tensor_digest(student, n) != ckpt.tensor_digest(ptq, n)]
            assert changed, f"{preset}: no trainable q/k/MLP tensor changed"
            info[preset] = f"{len(frozen)} frozen/{len(changed)} changed"
        info["seconds"] = round(seconds, 1)
        assert seconds < 300


def test_criterion_09_three_way_report(pipeline):
    with criterion(9, "three-way trace report") as info:
        fp = pipeline.kdqat("kd-fp", "none", "--no-quant")
        runs = {"fp_none": fp, "int4_none": pipeline.results["none"], "int4_ov": pipeline.results["ov"]}
        out = pipeline.root / "report"
        args = ["trace-report", "--out", out]
        for label, res in runs.items():
            args += ["--trace", f"{label}={Path(res['run_dir']) / 'trace.csv'}"]
        report = pipeline.call("report", *args)
        n_layers = ModelConfig().n_layers
        for label in runs:
            rows = report["runs"][label]
            assert [row["layer_id"] for row in rows] == list(range(n_layers))
            for row in rows:
                for ratio in ("ratio_o/q", "ratio_o/k", "ratio_v/q", "ratio_v/k"):
                    assert row[ratio] is not None and row[ratio] > 0
            header = (out / label / "summary.csv").read_text().splitlines()[0].split(",")
            assert header[0] == "layer_id" and "ratio_v/q" in header
            for layer in range(n_layers):
                for stat in probe.STATS:
                    lines = (out / label / f"layer{layer}_{stat}.csv").read_text().splitlines()
                    assert lines[0] == "step,q,k,v,o"
        expected_steps = list(range(0, 2000, 10))
        for layer in range(n_layers):
            for stat in probe.STATS:
                for proj in ATTN_ROLES:
                    lines = (out / "overlay" / f"overlay_layer{layer}_{stat}_{proj}.csv").read_text().splitlines()
                    assert lines[0] == "step,fp_none,int4_none,int4_ov"
                    assert [int(x.split(",")[0]) for x in lines[1:]] == expected_steps
                    assert all("" not in x.split(",") for x in lines[1:])
        for label in runs:
            for row in report["runs"][label]:
                info[f"{label}.L{row['layer_id']}"] = "/".join(
                    f"{row[k]:.3g}" for k in ("ratio_o/q", "ratio_o/k", "ratio_v/q", "ratio_v/k"))
        print("per-layer ratios o/q, o/k, v/q, v/k (grad_norm_sq medians):")
        for label in runs:
            for row in report["runs"][label]:
                means = " ".join(f"{p}={row['fwd_mean_median_' + p]:.3g}" for p in ATTN_ROLES)
                ratios = info[f"{label}.L{row['layer_id']}"]
                print(f"  {label:10s} layer {row['layer_id']}: {ratios}  fwd_mean {means}")


def test_criterion_10_reproducibility(pipeline):
    with criterion(10, "bit-identical reruns") as info:
        # same config file and output directory both times; outputs are snapshotted in between
        d = pipeline.root / "repro"
        d.mkdir(exist_ok=True)
        cfg = d / "cfg.toml"
        runs = d / "runs"
        cfg.write_text(f'seed = 0\n[pretrain]\nsteps = 60\n[train]\nsteps = 50\n[paths]\nout_dir = "{runs}"\n')

        def metrics(path):
            recs = [json.loads(x) for x in path.read_text().splitlines()]
            for rec in recs:
                rec.pop("elapsed_ms")  # wall clock, not a model quantity
            return recs

        outputs = []
        t0 = time.perf_counter()
        for _ in range(2):
            pipeline.run("pretrain-teacher", "--config", cfg)
            pipeline.run("calibrate", "--config", cfg, "--teacher", runs / "teacher.qatf", "--method", "mse")
            run_dir = Path(pipeline.run("kdqat", "--config", cfg, "--freeze", "ov")["run_dir"])
            outputs.append({
                "run_dir": run_dir.name,
                "teacher": (runs / "teacher.qatf").read_bytes(),
                "teacher_metrics": metrics(runs / "teacher.metrics.jsonl"),
                "ptq": (runs / "ptq-mse.qatf").read_bytes(),
                "student": (run_dir / "student.qatf").read_bytes(),
                "metrics": metrics(run_dir / "metrics.jsonl"),
                "eval": (run_dir / "eval.jsonl").read_bytes(),
                "trace": (run_dir / "trace.csv").read_bytes(),
            })
        a, b = outputs
        differing = [k for k in a if a[k] != b[k]]
        info.update(compared=len(a), differing=differing or "none",
                    seconds_per_repeat=round((time.perf_counter() - t0) / 2, 1))
        assert not differing


def test_criterion_11_checkpoint_round_trip(pipeline, tmp_path):
    with criterion(11, "checkpoint round trip and corruption detection") as info:
        sources = [pipeline.teacher, pipeline.ptq("mse"), Path(pipeline.results["ov"]["run_dir"]) / "student.qatf"]
        for src in sources:
            loaded = ckpt.load_checkpoint(src)
            again = ckpt.save_checkpoint(tmp_path / src.name, loaded.model, loaded.config, loaded.meta)
            assert again.read_bytes() == src.read_bytes(), src
        data = bytearray(sources[-1].read_bytes())
        data[len(data) // 2 + 7] ^= 0x40
        bad = tmp_path / "corrupt.qatf"
        bad.write_bytes(bytes(data))
        with pytest.raises(ckpt.CheckpointError, match="payload"):
            ckpt.load_checkpoint(bad)
        info.update(checkpoints=len(sources), corruption="detected")
