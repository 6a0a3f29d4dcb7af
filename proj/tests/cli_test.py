"""End-to-end checks of the orthorank command line tool."""

import json
import subprocess
import sys
import tempfile
import unittest
from pathlib import Path

BINARY = None


def run(*args, ok=True):
    proc = subprocess.run([BINARY, *map(str, args)], capture_output=True, text=True)
    if ok and proc.returncode != 0:
        raise AssertionError(f"{args} failed ({proc.returncode}): {proc.stderr}")
    if not ok and proc.returncode == 0:
        raise AssertionError(f"{args} unexpectedly succeeded: {proc.stdout}")
    return proc


class CliTest(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.dir = Path(cls.tmp.name)
        cls.model = cls.dir / "model"
        cls.corpus = cls.dir / "corpus.txt"
        run("synth-model", "--out", cls.model, "--layers", 8, "--d-model", 32, "--heads", 4,
            "--kv-heads", 2, "--d-ffn", 64, "--vocab", 48, "--seed", 3, "--sink-layer", 1)
        run("synth-corpus", "--model", cls.model, "--docs", 4, "--doc-len", 64,
            "--temperature", 0.7, "--seed", 4, "--out", cls.corpus)

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def test_synth_model_files(self):
        for name in ("config.json", "manifest.json", "weights.bin"):
            self.assertTrue((self.model / name).exists())
        proc = run("synth-model", "--out", self.dir / "bad", "--heads", 4, "--kv-heads", 3,
                   ok=False)
        self.assertIn("divisible", proc.stderr)

    def test_corpus(self):
        tokens = [int(t) for t in self.corpus.read_text().split()]
        self.assertEqual(len(tokens), 256)
        self.assertEqual([i for i, t in enumerate(tokens) if t == 0], [0, 64, 128, 192])

    def test_analyze_synthetic(self):
        out = self.dir / "analysis_synth"
        run("analyze", "--synthetic-trace", "--layers", 10, "--seq-len", 20, "--dim", 16,
            "--l-sink", 2, "--positions", "1..5", "--cross-positions", "0,7", "--out", out)
        for name in ("sink_vs_tokens.csv", "cross_layer_p0.csv", "cross_layer_p7.csv",
                     "norms.csv", "norms_cv.csv"):
            self.assertTrue((out / name).exists(), name)

    def test_analyze_model(self):
        out = self.dir / "analysis_model"
        run("analyze", "--model", self.model, "--tokens", self.corpus, "--positions", "1..3",
            "--cross-positions", "5", "--dump-trace", "--out", out)
        self.assertTrue((out / "sink_vs_tokens.csv").exists())
        self.assertTrue((out / "trace" / "trace_norms.csv").exists())

    def test_analyze_needs_input(self):
        run("analyze", "--out", self.dir / "nothing", ok=False)

    def test_calibrate_eval_and_flops(self):
        plan = self.dir / "plan.json"
        run("calibrate", "--model", self.model, "--corpus", self.corpus, "--context-len", 64,
            "--sparsity", 0.1, "--l-sink", 1, "--calib-chunks", 2, "--out", plan)
        p = json.loads(plan.read_text())
        self.assertEqual(p["l_sink"], 1)
        self.assertEqual(len(p["layers"]), 1)  # round(0.1 * 8 / 0.667) = 1
        self.assertEqual(p["calib"]["context_len"], 64)

        report = self.dir / "report.json"
        run("eval-ppl", "--model", self.model, "--corpus", self.corpus, "--context-len", 64,
            "--plan", plan, "--out", report)
        r = json.loads(report.read_text())
        self.assertEqual(len(r["chunk_nll"]), 4)
        self.assertLess(r["flop_ratio"], 1.0)
        self.assertGreater(r["perplexity"], 1.0)

        proc = run("eval-ppl", "--model", self.model, "--corpus", self.corpus,
                   "--context-len", 64)
        self.assertIn("perplexity", proc.stdout)

        flops = json.loads(run("flops", "--model", self.model, "--plan", plan,
                               "--seq-len", 64).stdout)
        self.assertAlmostEqual(flops["ratio"], r["flop_ratio"], places=12)

        ablation = self.dir / "ablation.csv"
        run("ablate", "--model", self.model, "--corpus", self.corpus, "--context-len", 64,
            "--plan", plan, "--max-chunks", 1, "--out", ablation)
        self.assertEqual(len(ablation.read_text().strip().splitlines()), 8)

        audit = self.dir / "audit.csv"
        proc = run("generate", "--model", self.model, "--plan", plan, "--prompt", "0 5 9 2",
                   "--max-new", 4, "--audit", audit)
        self.assertEqual(len(proc.stdout.split()), 4)
        lines = audit.read_text().strip().splitlines()
        self.assertEqual(lines[0], "layer,step,position,score,selected")
        self.assertEqual(len(lines) - 1, 4 + 3)

    def test_calibrate_zero_and_infeasible(self):
        plan = self.dir / "empty.json"
        run("calibrate", "--model", self.model, "--corpus", self.corpus, "--context-len", 64,
            "--sparsity", 0, "--l-sink", 1, "--out", plan)
        self.assertEqual(json.loads(plan.read_text())["layers"], [])

        proc = run("calibrate", "--model", self.model, "--corpus", self.corpus,
                   "--context-len", 64, "--sparsity", 0.9, "--l-sink", 1,
                   "--out", self.dir / "never.json", ok=False)
        self.assertIn("maximum achievable sparsity", proc.stderr)
        self.assertFalse((self.dir / "never.json").exists())

    def test_flops_from_sparsity(self):
        cfg = self.dir / "config40.json"
        base = json.loads((self.model / "config.json").read_text())
        base.update(n_layers=40, d_model=4096, n_heads=32, n_kv_heads=8, d_head=128,
                    d_ffn=14336, vocab_size=32000)
        cfg.write_text(json.dumps(base))
        out = json.loads(run("flops", "--config", cfg, "--sparsity", 0.2, "--keep-ratio", 0.333,
                             "--l-sink", 2, "--seq-len", 2048).stdout)
        self.assertLess(out["ratio"], 0.82)

    def test_layerwise(self):
        out = self.dir / "layerwise.csv"
        run("layerwise", "--model", self.model, "--corpus", self.corpus, "--context-len", 64,
            "--max-chunks", 1, "--l-sink", 1, "--criteria", "orthogonal_asc,norm_desc",
            "--out", out)
        lines = out.read_text().strip().splitlines()
        self.assertIn("orthogonal_asc", lines[0])
        self.assertEqual(len(lines), 1 + 6)  # layers 2..7

    def test_bad_model_path(self):
        proc = run("eval-ppl", "--model", self.dir / "missing", "--corpus", self.corpus,
                   ok=False)
        self.assertIn("error", proc.stderr)


if __name__ == "__main__":
    BINARY = sys.argv.pop(1)
    unittest.main()
