import contextlib
import io
import json
import tempfile
import unittest
from pathlib import Path

import numpy as np

from BatchlessNorm.cli.application import BatchlessNorm, main, resolve_args_config
from BatchlessNorm.cli.argument_parser import CLIArgumentParser, flag_overrides
from BatchlessNorm.cli.commands import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, output_difference
from BatchlessNorm.cli.plots import svg_line_chart
from BatchlessNorm.experiments.results import write_runs_csv
from BatchlessNorm.experiments.suites import RunConfig, RunResult
from BatchlessNorm.nn.checkpoint import load_checkpoint, save_checkpoint
from BatchlessNorm.nn.network import Model, build_spiral_mlp
from BatchlessNorm.utils.config_loader import resolve_config


def run_cli(argv):
    """Run one command with a silent logger; returns the exit code and captured stdout."""
    args = CLIArgumentParser(argv).get_args()
    out = io.StringIO()
    with contextlib.redirect_stdout(out):
        code = BatchlessNorm(args=args, config=resolve_args_config(args)).run()
    return code, out.getvalue()


def parse_error(argv):
    try:
        with contextlib.redirect_stderr(io.StringIO()):
            CLIArgumentParser(argv)
    except SystemExit as exc:
        return exc.code
    return None


class ArgumentTests(unittest.TestCase):
    def test_usage_errors_exit_with_two(self):
        self.assertEqual(parse_error([]), 2)
        self.assertEqual(parse_error(["spiral", "--runs", "0"]), 2)
        self.assertEqual(parse_error(["spiral", "--norm", "layernorm"]), 2)
        self.assertEqual(parse_error(["cifar", "--norm", "brn"]), 2)
        migrate = ["migrate", "--checkpoint", "a", "--out", "b"]
        self.assertEqual(parse_error(migrate + ["--mode", "bn", "--insert-before", "x"]), 2)

    def test_flag_overrides(self):
        args = CLIArgumentParser(
            ["--output", "out", "spiral", "--norm", "bin", "--norm", "binlog", "--runs", "3", "--lambda", "0.2"]
        ).get_args()
        overrides = flag_overrides(args)
        self.assertEqual(overrides["norm_kinds"], ["bin", "binlog"])
        self.assertEqual(overrides["runs"], 3)
        self.assertEqual(overrides["lambda"], 0.2)
        self.assertEqual(overrides["output"], "out")
        self.assertIsNone(overrides["patience"])
        self.assertNotIn("command", overrides)
        self.assertNotIn("log_level", overrides)


class ConfigTests(unittest.TestCase):
    def test_flags_win_over_file_and_defaults(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "config.json"
            path.write_text(json.dumps({"paths": {"output": "from_file"}, "spiral": {"runs": 5, "lr": 0.5}}))
            config = resolve_config("spiral", path, {"runs": 2, "patience": None})
        self.assertEqual(config["command"], "spiral")
        self.assertEqual(config["settings"]["runs"], 2)
        self.assertEqual(config["settings"]["lr"], 0.5)
        self.assertEqual(config["settings"]["patience"], 1000)
        self.assertEqual(config["settings"]["median_window"], 15)

    def test_missing_config_is_created_from_defaults(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "nested" / "config.json"
            args = CLIArgumentParser(["--config", str(path), "report", "--results", "r.csv"]).get_args()
            config = resolve_args_config(args)
            self.assertTrue(path.exists())
        self.assertEqual(config["settings"]["precision"], 9)

    def test_invalid_config_is_a_usage_error(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "broken.json"
            path.write_text("{not json")
            with contextlib.redirect_stderr(io.StringIO()):
                code = main(["--config", str(path), "report", "--results", "r.csv"])
        self.assertEqual(code, EXIT_USAGE)

    def test_unknown_command(self):
        with self.assertRaises(ValueError):
            resolve_config("train")


class ReportTests(unittest.TestCase):
    def write_runs(self, directory):
        results = [
            RunResult(RunConfig("spiral", "binlog", 4, seed=1), val_loss=0.25, fluctuation=0.01, converged=True,
                      batches_to_convergence=1500),
            RunResult(RunConfig("spiral", "binlog", 4, seed=2, run_index=1), val_loss=0.75, fluctuation=0.03,
                      converged=True, batches_to_convergence=2500),
            RunResult(RunConfig("spiral", "bn", 1, seed=3), status="inapplicable"),
        ]
        return write_runs_csv(results, Path(directory) / "runs.csv", {"command": "spiral", "base_seed": 4})

    def test_report_is_deterministic(self):
        with tempfile.TemporaryDirectory() as tmp:
            runs = self.write_runs(tmp)
            first_dir, second_dir = Path(tmp) / "a", Path(tmp) / "b"
            code, printed = run_cli(["report", "--results", str(runs), "--out-dir", str(first_dir)])
            self.assertEqual(code, EXIT_OK)
            self.assertEqual(run_cli(["report", "--results", str(runs), "--out-dir", str(second_dir)])[0], EXIT_OK)

            names = sorted(p.name for p in first_dir.iterdir())
            self.assertEqual(names, sorted(p.name for p in second_dir.iterdir()))
            self.assertIn("runs_val_loss.csv", names)
            self.assertIn("runs_val_loss.svg", names)
            for name in names:
                self.assertEqual((first_dir / name).read_bytes(), (second_dir / name).read_bytes())

            table = (first_dir / "runs_val_loss.csv").read_text(encoding="utf-8").splitlines()
            chart = (first_dir / "runs_val_loss.svg").read_text(encoding="utf-8")
        self.assertIn("# base_seed: 4", table)
        self.assertIn("# base_seed: 4", chart.splitlines())
        self.assertIn('# command: "spiral"', chart.splitlines())
        self.assertIn("batch_size,bn,binlog", table)
        self.assertIn("1,-,", table)
        self.assertIn("4,,0.5", table)
        self.assertIn("validation loss", printed)

    def test_report_defaults_to_the_input_directory(self):
        with tempfile.TemporaryDirectory() as tmp:
            runs = self.write_runs(tmp)
            self.assertEqual(run_cli(["report", "--results", str(runs)])[0], EXIT_OK)
            self.assertTrue((Path(tmp) / "runs_fluctuation.csv").exists())

    def test_bad_inputs_are_usage_errors(self):
        with tempfile.TemporaryDirectory() as tmp:
            self.assertEqual(run_cli(["report", "--results", str(Path(tmp) / "absent.csv")])[0], EXIT_USAGE)
            bad = Path(tmp) / "bad.csv"
            bad.write_text("experiment,norm_kind\nspiral,bn\n", encoding="utf-8")
            self.assertEqual(run_cli(["report", "--results", str(bad)])[0], EXIT_USAGE)


class CheckpointCommandTests(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.dir = Path(self.tmp.name)

    def save(self, model, name):
        return str(save_checkpoint(model.to_checkpoint(), self.dir / name))

    def test_init_stats(self):
        source = self.save(build_spiral_mlp("binlog", 0), "binlog.json")
        out = self.dir / "initialized.json"
        code, printed = run_cli(["init-stats", "--checkpoint", source, "--out", str(out), "--sample-size", "300"])
        self.assertEqual(code, EXIT_OK)
        self.assertIn("norm0: gauged metric", printed)
        checkpoint = load_checkpoint(out)
        self.assertEqual(checkpoint.metadata["init_stats"]["sample_size"], 300)
        mu = Model.from_checkpoint(checkpoint).norm_states["norm1"].mu
        self.assertTrue(np.any(mu != 0.0))

    def test_migrate_batchnorm(self):
        model = build_spiral_mlp("bn", 1)
        rng = np.random.default_rng(0)
        for state in model.batchnorm_states():
            state.moving_mu[...] = rng.normal(size=state.moving_mu.shape)
            state.moving_var[...] = rng.uniform(0.5, 2.0, size=state.moving_var.shape)
        source = self.save(model, "bn.json")
        out = self.dir / "migrated.json"
        code, printed = run_cli(["migrate", "--checkpoint", source, "--out", str(out)])
        self.assertEqual(code, EXIT_OK)
        self.assertIn("Max abs output difference", printed)
        migrated = load_checkpoint(out)
        self.assertEqual(migrated.norm_kind, "binlog")
        self.assertLessEqual(migrated.metadata["verification"]["max_abs_difference"], 1e-6)

    def test_migrate_plain_with_inverse_sigma(self):
        source = self.save(build_spiral_mlp("none", 2), "plain.json")
        out = self.dir / "migrated.json"
        argv = ["migrate", "--checkpoint", source, "--out", str(out), "--mode", "plain", "--sigma-mode", "inverse"]
        code, _ = run_cli(argv + ["--sample-size", "200"])
        self.assertEqual(code, EXIT_OK)
        migrated = load_checkpoint(out)
        self.assertEqual(migrated.norm_kind, "bininv")
        self.assertEqual(migrated.metadata["migrated_from"], "plain")
        plain, batchless = Model.from_checkpoint(load_checkpoint(source)), Model.from_checkpoint(migrated)
        inputs = np.random.default_rng(5).uniform(-1.5, 1.5, (64, 2))
        self.assertLess(output_difference(plain, batchless, inputs), 1e-9)

    def test_migrate_rejects_mismatched_checkpoints(self):
        plain = self.save(build_spiral_mlp("none", 0), "plain.json")
        code, _ = run_cli(["migrate", "--checkpoint", plain, "--out", str(self.dir / "x.json")])
        self.assertEqual(code, EXIT_USAGE)
        code, _ = run_cli(["init-stats", "--checkpoint", str(self.dir / "absent.json"), "--out", "y.json"])
        self.assertEqual(code, EXIT_USAGE)

    def test_degenerate_sample_is_a_failure(self):
        model = build_spiral_mlp("binlog", 0)
        model.params["dense0.weight"][...] = 0.0
        source = self.save(model, "dead.json")
        code, _ = run_cli(["init-stats", "--checkpoint", source, "--out", str(self.dir / "z.json")])
        self.assertEqual(code, EXIT_FAILURE)


class PlotTests(unittest.TestCase):
    def test_chart_contains_one_polyline_per_series(self):
        svg = svg_line_chart({"bn": [(1, 0.5), (4, 0.2)], "bin<log>": [(1, 0.6)]}, "loss", "batch size", "loss", True)
        self.assertTrue(svg.startswith("<svg"))
        self.assertEqual(svg.count("<polyline"), 2)
        self.assertIn("bin&lt;log&gt;", svg)

    def test_chart_embeds_configuration_and_seed(self):
        metadata = {"base_seed": 7, "settings": {"lr": 0.01, "norm_kinds": ["bn", "binlog"]}}
        svg = svg_line_chart({"bn": [(1, 0.5)]}, "loss", "batch size", "loss", metadata=metadata)
        self.assertIn("<desc>\n# base_seed: 7\n", svg)
        self.assertIn('# settings: {"lr": 0.01, "norm_kinds": ["bn", "binlog"]}', svg)
        self.assertNotIn("<desc>", svg_line_chart({"bn": [(1, 0.5)]}, "loss", "batch size", "loss"))

    def test_empty_chart(self):
        self.assertEqual(svg_line_chart({}, "t", "x", "y").count("<polyline"), 0)


if __name__ == "__main__":
    unittest.main()
