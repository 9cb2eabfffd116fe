import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from edgenext import analysis
from edgenext import serialization as sio
from edgenext.cli import main
from edgenext.model import preset
from edgenext.training import SyntheticDataset, evaluate


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def _total(out):
    return [ln for ln in out.splitlines() if ln.startswith("total")][0]


@pytest.fixture
def ppm(tmp_path):
    def make(seed, size=80):
        raw = np.random.default_rng(seed).integers(0, 256, (size, size, 3)).astype(np.uint8)
        path = tmp_path / f"img{seed}.ppm"
        path.write_bytes(sio.encode_ppm(raw))
        return str(path)

    return make


class TestSummarize:
    @pytest.mark.parametrize("variant,params,madds", [("S", 5.6e6, 1.30e9), ("XXS", 1.3e6, 261e6)])
    def test_totals_within_budget(self, capsys, variant, params, madds):
        code, out, _ = run(capsys, "summarize", "--variant", variant, "--res", "256")
        assert code == 0
        rep = analysis.count_madds(preset(variant), 256)
        assert f"{rep.params:,}" in _total(out) and f"{rep.madds:,}" in _total(out)
        assert abs(rep.params / params - 1) < 0.10 and abs(rep.madds / madds - 1) < 0.15

    def test_csv(self, capsys):
        code, out, _ = run(capsys, "summarize", "--variant", "XS", "--csv")
        rows = list(csv.DictReader(io.StringIO(out)))
        assert code == 0 and sum(int(r["params"]) for r in rows) == analysis.count_params(preset("XS")).params

    def test_invalid_variant(self, capsys):
        code, out, err = run(capsys, "summarize", "--variant", "M")
        assert code != 0 and out == ""
        assert all(v in err for v in ("XXS", "XS", "S", "B"))

    def test_config_file_and_flag_precedence(self, capsys, tmp_path):
        cfg_path = tmp_path / "c.json"
        cfg_path.write_text(json.dumps({"variant": "S", "num_classes": 10}))
        _, out_file, _ = run(capsys, "summarize", "--config", str(cfg_path))
        _, out_flag, _ = run(capsys, "summarize", "--config", str(cfg_path), "--num-classes", "100")
        for out, k in ((out_file, 10), (out_flag, 100)):
            assert f"{analysis.count_params(preset('S').replace(num_classes=k)).params:,}" in _total(out)

    def test_schema_error_reports_key_path(self, capsys, tmp_path):
        cfg_path = tmp_path / "c.json"
        cfg_path.write_text(json.dumps({"variant": "S", "heads": "four"}))
        code, _, err = run(capsys, "summarize", "--config", str(cfg_path))
        assert code == 2 and "heads" in err

    def test_unknown_flag_rejected(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["summarize", "--bogus"])
        assert exc.value.code != 0


class TestInfer:
    def test_sorted_and_normalized(self, capsys, ppm):
        code, out, _ = run(capsys, "infer", "--variant", "XXS", "--res", "64", "--image", ppm(0), "--all")
        rows = list(csv.DictReader(io.StringIO(out)))
        assert code == 0 and len(rows) == 1000
        p = [float(r["probability"]) for r in rows]
        assert p == sorted(p, reverse=True)
        assert abs(sum(p) - 1) < 1e-6

    def test_top5_and_deterministic(self, capsys, ppm):
        args = ("infer", "--variant", "XXS", "--res", "64", "--image", ppm(1))
        _, a, _ = run(capsys, *args)
        _, b, _ = run(capsys, *args)
        assert a == b and len(a.splitlines()) == 6

    def test_chance_level_with_random_weights(self, capsys, ppm):
        k = 10
        for seed in range(20):
            _, out, _ = run(capsys, "infer", "--variant", "tiny", "--num-classes", str(k),
                            "--image", ppm(seed, 48), "--topk", "1")
            top1 = float(out.splitlines()[1].split(",")[2])
            assert 1 / k <= top1 < 5 / k

    def test_weights_file_and_mismatch(self, capsys, tmp_path, ppm):
        sio.save_weights({"a.weight": np.ones(2, np.float32)}, tmp_path / "w.edgw")
        code, out, err = run(capsys, "infer", "--variant", "tiny", "--weights", str(tmp_path / "w.edgw"),
                             "--image", ppm(0, 64))
        assert code == 2 and out == "" and "do not match" in err

    def test_missing_image(self, capsys, tmp_path):
        code, _, err = run(capsys, "infer", "--variant", "tiny", "--image", str(tmp_path / "none.ppm"))
        assert code == 2 and "error" in err


class TestGradcheck:
    def test_op_scope_coverage(self, capsys):
        code, out, _ = run(capsys, "gradcheck", "--scope", "op")
        assert code == 0
        cov = [ln for ln in out.splitlines() if ln.startswith("# op coverage")][0]
        n, m = cov.split(": ")[1].split()[0].split("/")
        assert n == m
        assert out.rstrip().endswith("result=PASS")

    def test_block_scope_deterministic(self, capsys):
        _, a, _ = run(capsys, "gradcheck", "--scope", "block", "--seed", "3")
        _, b, _ = run(capsys, "gradcheck", "--scope", "block", "--seed", "3")
        assert a == b and "result=PASS" in a


class TestProbe:
    def test_ratios_and_header(self, capsys):
        code, out, _ = run(capsys, "probe-attention", "--resolutions", "32,64")
        lines = out.splitlines()
        assert code == 0 and lines[0].startswith("# convention=" + analysis.CONVENTION)
        row = dict(zip(lines[1].split(","), lines[3].split(",")))
        assert row["xca_ratio"] == "4.00" and row["mhsa_quadratic_ratio"] == "16.00"

    def test_needs_two_resolutions(self, capsys):
        code, _, err = run(capsys, "probe-attention", "--resolutions", "32")
        assert code == 2 and "two" in err


class TestTrainToy:
    ARGS = ("train-toy", "--steps", "30", "--samples", "40", "--image-size", "32", "--res", "32",
            "--batch-size", "10", "--eval-every", "10")

    def test_reproducible_csv(self, capsys):
        _, a, _ = run(capsys, *self.ARGS, "--csv", "--seed", "4")
        _, b, _ = run(capsys, *self.ARGS, "--csv", "--seed", "4")
        assert a == b and a.startswith("step,loss,accuracy\n")

    def test_saved_weights_reproduce_accuracy(self, capsys, tmp_path):
        code, out, _ = run(capsys, *self.ARGS, "--out", str(tmp_path))
        assert code == 0
        acc = float(out.split("accuracy=")[1])
        cfg = sio.load_config(tmp_path / "config.json")
        w = sio.load_weights(tmp_path / "weights.edgw", cfg)
        x, y = SyntheticDataset(0, 10, 40, 32).arrays()
        assert round(evaluate(cfg, w, x, y)[1], 4) == acc
        last = (tmp_path / "curve.csv").read_text().splitlines()[-1].split(",")
        assert float(last[2]) == evaluate(cfg, w, x, y)[1]

    @pytest.mark.slow
    def test_default_run_reaches_target(self, capsys):
        code, out, _ = run(capsys, "train-toy")
        assert code == 0 and float(out.split("accuracy=")[1]) >= 0.95


class TestBench:
    ARGS = ("bench", "--variant", "tiny", "--res", "64")

    def test_single_iteration(self, capsys):
        code, out, _ = run(capsys, *self.ARGS, "--iters", "1")
        lines = out.splitlines()
        assert code == 0 and "samples=1" in lines[0]
        stats = dict(zip(lines[1].split(","), map(float, lines[2].split(","))))
        assert stats["mean_s"] >= stats["min_s"] > 0
        assert stats["mean_s"] == stats["max_s"]

    @pytest.mark.parametrize("act,norm", [("gelu", "layer"), ("hard_swish", "batch")])
    def test_activation_norm_variants(self, capsys, act, norm):
        code, out, _ = run(capsys, *self.ARGS, "--iters", "2", "--activation", act, "--norm", norm)
        mean, median, p95, lo, hi = map(float, out.splitlines()[2].split(","))
        assert code == 0 and lo <= median <= hi and mean >= lo

    def test_zero_iters_rejected(self, capsys):
        code, _, err = run(capsys, *self.ARGS, "--iters", "0")
        assert code == 2 and "iters" in err


def test_module_entry_point():
    proc = subprocess.run(
        [sys.executable, "-m", "edgenext", "summarize", "--variant", "XS"], capture_output=True, text=True
    )
    assert proc.returncode == 0 and proc.stdout.startswith("# model=XS ")
    bad = subprocess.run([sys.executable, "-m", "edgenext", "nope"], capture_output=True, text=True)
    assert bad.returncode != 0 and bad.stdout == ""
