import functools
import json
import math
import os
import tempfile
import unittest
from pathlib import Path

import numpy as np
import pytest

from BatchlessNorm.data.dataset import Dataset
from BatchlessNorm.data.sampler import Batch, BatchSampler
from BatchlessNorm.data.spirals import generate_spirals
from BatchlessNorm.experiments.protocol import (
    ConvergenceDetector,
    classification_metrics,
    detect_convergence,
    evaluate_validation,
    fluctuation_grid,
    fluctuation_score,
    measure_fluctuation,
)
from BatchlessNorm.experiments.results import (
    INAPPLICABLE_MARK,
    aggregate,
    format_value,
    read_runs_csv,
    run_row,
    tables_for,
    write_runs_csv,
)
from BatchlessNorm.experiments.suites import (
    STATUS_INAPPLICABLE,
    STATUS_OK,
    RunConfig,
    derive_seed,
    resolve_seed,
    run_cifar,
    run_cifar_suite,
    run_spiral,
    run_spiral_suite,
)
from BatchlessNorm.experiments.trainer import Trainer, accumulate_gradients, batch_gradients
from BatchlessNorm.nn.checkpoint import load_checkpoint
from BatchlessNorm.nn.network import build_spiral_mlp
from BatchlessNorm.nn.optimizers import make_optimizer
from BatchlessNorm.utils.config_initializer import load_packaged_defaults
from BatchlessNorm.utils.errors import ConfigError, ContractError, DimensionError, SchemaError


def small_spiral_settings(**changes):
    settings = load_packaged_defaults()["spiral"]
    settings.update(
        norm_kinds=["none", "bn", "binlog"],
        batch_sizes=[1, 4],
        runs=1,
        seed=3,
        n_train_per_class=20,
        n_val_per_class=5,
        patience=15,
        median_window=5,
        hard_cap=30,
        fluctuation_batches=3,
        grid_size=2,
        init_sample_size=30,
    )
    settings.update(changes)
    return settings


def spiral_batch(size, seed=0):
    train, _ = generate_spirals(50, 1, seed)
    picks = np.random.default_rng(seed).choice(len(train), size=size, replace=False)
    return Batch(train.inputs[picks], train.labels[picks], picks)


class ConvergenceTests(unittest.TestCase):
    def test_constant_losses_converge_after_patience(self):
        self.assertEqual(detect_convergence([1.0] * 2000), 1015)

    def test_improving_losses_never_converge(self):
        losses = np.linspace(2.0, 0.1, 3000)
        self.assertIsNone(detect_convergence(losses))

    def test_hard_cap_stops_the_stream(self):
        self.assertIsNone(detect_convergence([1.0] * 2000, hard_cap=500))

    def test_new_low_resets_the_wait(self):
        detector = ConvergenceDetector(patience=20, window=5)
        for _ in range(10):
            detector.update(1.0)
        for _ in range(5):
            detector.update(0.5)
        self.assertEqual(detector.best_batch, 13)
        while not detector.converged:
            detector.update(0.5)
        self.assertEqual(detector.converged_at, 33)

    def test_invalid_parameters(self):
        with self.assertRaises(ConfigError):
            ConvergenceDetector(patience=10, window=15)
        with self.assertRaises(ConfigError):
            ConvergenceDetector(patience=10, window=0)


class FluctuationTests(unittest.TestCase):
    def test_identical_snapshots_score_zero(self):
        snapshot = np.array([[0.2, 0.3, 0.5], [0.6, 0.2, 0.2]])
        self.assertAlmostEqual(fluctuation_score(np.stack([snapshot] * 4)), 0.0, places=12)

    def test_opposite_snapshots(self):
        snapshots = np.array([[[1.0, 0.0]], [[0.0, 1.0]]])
        self.assertAlmostEqual(fluctuation_score(snapshots), math.log(2.0))

    def test_shape_errors(self):
        with self.assertRaises(DimensionError):
            fluctuation_score(np.zeros((2, 3)))
        with self.assertRaises(DimensionError):
            fluctuation_score(np.zeros((0, 2, 3)))

    def test_grid_spans_the_box(self):
        sites = fluctuation_grid(np.array([0.0, 0.0]), np.array([1.0, 2.0]), size=3)
        self.assertEqual(sites.shape, (9, 2))
        np.testing.assert_array_equal(sites[0], [0.0, 0.0])
        np.testing.assert_array_equal(sites[-1], [1.0, 2.0])
        with self.assertRaises(ConfigError):
            fluctuation_grid(np.zeros(2), np.ones(2), size=0)

    def test_no_training_means_no_fluctuation(self):
        model = build_spiral_mlp("binlog", 0)
        sites = fluctuation_grid(np.array([-1.0, -1.0]), np.array([1.0, 1.0]), size=4)
        self.assertAlmostEqual(measure_fluctuation(model, sites, 3, lambda: None), 0.0, places=12)


class MetricTests(unittest.TestCase):
    def test_confident_and_uniform_predictions(self):
        labels = np.array([0, 2, 1])
        loss, accuracy = classification_metrics(np.eye(3)[labels], labels)
        self.assertAlmostEqual(loss, 0.0)
        self.assertEqual(accuracy, 1.0)

        loss, _ = classification_metrics(np.full((3, 3), 1.0 / 3.0), labels)
        self.assertAlmostEqual(loss, math.log(3.0))

    def test_zero_probability_is_floored(self):
        loss, accuracy = classification_metrics(np.array([[0.0, 1.0]]), np.array([0]))
        self.assertAlmostEqual(loss, -math.log(1e-12))
        self.assertEqual(accuracy, 0.0)

    def test_shape_mismatch(self):
        with self.assertRaises(DimensionError):
            classification_metrics(np.ones((2, 3)), np.array([0]))

    def test_validation_matches_predicted_probabilities(self):
        model = build_spiral_mlp("none", 1)
        _, val = generate_spirals(10, 10, seed=1)
        loss, accuracy = evaluate_validation(model, val, chunk=7)
        expected = classification_metrics(model.predict_proba(val.inputs), val.labels)
        self.assertAlmostEqual(loss, expected[0], places=12)
        self.assertEqual(accuracy, expected[1])


class GradientAccumulationTests(unittest.TestCase):
    def test_accumulated_equals_batched(self):
        batch = spiral_batch(32)
        for kind in ("none", "bin", "binlog", "bininv"):
            model = build_spiral_mlp(kind, 2, dropout_rate=0.0)
            full, full_step = batch_gradients(model, batch, None)
            summed, summed_step = accumulate_gradients(model, batch, None)
            self.assertEqual(set(full), set(summed))
            for name in full:
                np.testing.assert_allclose(summed[name], full[name], rtol=1e-9, atol=1e-12, err_msg=f"{kind} {name}")
            self.assertAlmostEqual(summed_step.task_loss, full_step.task_loss, places=10)
            self.assertAlmostEqual(summed_step.nll_loss, full_step.nll_loss, places=10)
            self.assertAlmostEqual(summed_step.decay_loss, full_step.decay_loss, places=12)

    def test_accumulated_equals_batched_with_dropout(self):
        batch = spiral_batch(16)
        for kind in ("none", "bin", "binlog", "bininv"):
            model = build_spiral_mlp(kind, 2, dropout_rate=0.25)
            full_rng, summed_rng = np.random.default_rng(6), np.random.default_rng(6)
            full, full_step = batch_gradients(model, batch, full_rng)
            summed, summed_step = accumulate_gradients(model, batch, summed_rng)
            for name in full:
                np.testing.assert_allclose(summed[name], full[name], rtol=1e-9, atol=1e-12, err_msg=f"{kind} {name}")
            self.assertAlmostEqual(summed_step.task_loss, full_step.task_loss, places=10)
            self.assertAlmostEqual(summed_step.nll_loss, full_step.nll_loss, places=10)
            self.assertEqual(full_rng.random(), summed_rng.random())

    def test_batch_statistics_are_rejected(self):
        model = build_spiral_mlp("bn", 0, dropout_rate=0.0)
        with self.assertRaises(ContractError):
            accumulate_gradients(model, spiral_batch(4), None)

    def test_batchnorm_gradient_depends_on_batch_composition(self):
        model = build_spiral_mlp("bn", 0, dropout_rate=0.0)
        batch = spiral_batch(8)
        full, _ = batch_gradients(model, batch, None)
        halves = [Batch(batch.inputs[s], batch.labels[s], batch.indices[s]) for s in (slice(0, 4), slice(4, 8))]
        first, _ = batch_gradients(model, halves[0], None)
        second, _ = batch_gradients(model, halves[1], None)
        averaged = 0.5 * (first["dense0.weight"] + second["dense0.weight"])
        self.assertFalse(np.allclose(full["dense0.weight"], averaged))


class TrainerTests(unittest.TestCase):
    def test_step_updates_parameters(self):
        train, _ = generate_spirals(20, 1, seed=0)
        for accumulate in (False, True):
            model = build_spiral_mlp("binlog", 0)
            before = {name: p.copy() for name, p in model.params.items()}
            trainer = Trainer(
                model,
                make_optimizer("amsgrad", 0.01, model.lr_multipliers()),
                BatchSampler(train, 4, seed=0),
                np.random.default_rng(0),
                accumulate=accumulate,
            )
            result = trainer.step()
            self.assertEqual(trainer.steps, 1)
            self.assertTrue(np.isfinite(result.task_loss))
            self.assertEqual(set(result.gauged_metrics), {"norm0", "norm1", "norm2"})
            self.assertFalse(np.array_equal(before["dense0.weight"], model.params["dense0.weight"]))

    def test_accumulated_training_tracks_batched_training(self):
        train, _ = generate_spirals(50, 1, seed=3)
        runs = []
        for accumulate in (False, True):
            model = build_spiral_mlp("binlog", 0)
            trainer = Trainer(
                model,
                make_optimizer("amsgrad", 0.01, model.lr_multipliers()),
                BatchSampler(train, 8, seed=0),
                np.random.default_rng(0),
                accumulate=accumulate,
            )
            losses = [trainer.step().task_loss for _ in range(4)]
            runs.append((losses, model.params))
        (full_losses, full_params), (summed_losses, summed_params) = runs
        np.testing.assert_allclose(summed_losses, full_losses, rtol=1e-9)
        for name in full_params:
            np.testing.assert_allclose(summed_params[name], full_params[name], rtol=1e-8, atol=1e-12, err_msg=name)


class SeedTests(unittest.TestCase):
    def test_derived_seeds_depend_only_on_the_cell(self):
        seed = derive_seed(7, "binlog", 8, 2)
        self.assertEqual(seed, derive_seed(7, "binlog", 8, 2))
        others = {
            derive_seed(8, "binlog", 8, 2),
            derive_seed(7, "bin", 8, 2),
            derive_seed(7, "binlog", 16, 2),
            derive_seed(7, "binlog", 8, 3),
        }
        self.assertNotIn(seed, others)
        self.assertEqual(len(others), 4)

    def test_resolve_seed(self):
        self.assertEqual(resolve_seed(12), 12)
        drawn = resolve_seed(None)
        self.assertTrue(0 <= drawn < 2**32)

    def test_run_config_from_settings(self):
        settings = {"lambda": 0.5, "lr": 0.002, "unrelated": True}
        config = RunConfig.from_settings("spiral", settings, "bn", 1, 0, 11)
        self.assertEqual(config.lam, 0.5)
        self.assertEqual(config.lr, 0.002)
        self.assertEqual(config.seed, derive_seed(11, "bn", 1, 0))
        self.assertTrue(config.inapplicable)
        self.assertEqual(config.tag, "spiral_bn_b1_r0")
        with self.assertRaises(ConfigError):
            RunConfig("spiral", "layernorm", 4, 0)
        with self.assertRaises(ConfigError):
            RunConfig("mnist", "none", 4, 0)
        with self.assertRaises(ConfigError):
            RunConfig("spiral", "none", 4, 0, lambda_mode="both")


class SpiralRunTests(unittest.TestCase):
    def setUp(self):
        self.train, self.val = generate_spirals(40, 10, seed=0)

    def config(self, norm_kind, batch_size, **changes):
        values = dict(
            patience=20,
            median_window=5,
            hard_cap=60,
            fluctuation_batches=5,
            grid_size=3,
            init_sample_size=50,
            trace_every=10,
        )
        values.update(changes)
        return RunConfig("spiral", norm_kind, batch_size, seed=1, **values)

    def test_run_reports_every_metric(self):
        with tempfile.TemporaryDirectory() as tmp:
            result = run_spiral(self.config("binlog", 4, report_train_loss=True), self.train, self.val, Path(tmp))
            self.assertEqual(result.status, STATUS_OK)
            self.assertTrue(np.isfinite(result.val_loss))
            self.assertTrue(np.isfinite(result.train_loss))
            self.assertGreaterEqual(result.fluctuation, 0.0)
            self.assertGreater(len(result.loss_trace), 0)
            self.assertEqual(set(result.gauged_traces), {"norm0", "norm1", "norm2"})
            self.assertTrue(result.metadata["dropout_rate_is_drop_probability"])
            self.assertEqual(result.metadata["convergence_counted_from_batch"], 1)
            checkpoint = load_checkpoint(result.checkpoint)
        self.assertEqual(checkpoint.metadata["status"], STATUS_OK)
        self.assertEqual(checkpoint.metadata["run"]["norm_kind"], "binlog")

    def test_same_seed_same_result(self):
        a = run_spiral(self.config("bn", 4), self.train, self.val)
        b = run_spiral(self.config("bn", 4), self.train, self.val)
        self.assertEqual(a.val_loss, b.val_loss)
        self.assertEqual(a.fluctuation, b.fluctuation)
        self.assertEqual(a.loss_trace, b.loss_trace)

    def test_batch_statistics_at_batch_size_one_are_inapplicable(self):
        result = run_spiral(self.config("brn", 1), self.train, self.val)
        self.assertEqual(result.status, STATUS_INAPPLICABLE)
        self.assertIsNone(result.val_loss)

    def test_suite_is_independent_of_worker_count(self):
        serial = run_spiral_suite(small_spiral_settings(workers=1))
        threaded = run_spiral_suite(small_spiral_settings(workers=3))
        self.assertEqual(serial.base_seed, 3)
        self.assertEqual(len(serial.results), 6)
        for a, b in zip(serial.results, threaded.results):
            self.assertEqual(a.config.tag, b.config.tag)
            self.assertEqual(a.status, b.status)
            self.assertEqual(a.val_loss, b.val_loss)
        self.assertEqual([r.status for r in serial.cell("bn", 1)], [STATUS_INAPPLICABLE])
        self.assertEqual(serial.fully_diverged_cells(), [])


class CifarRunTests(unittest.TestCase):
    def test_one_epoch_on_synthetic_images(self):
        rng = np.random.default_rng(0)
        images = Dataset(rng.uniform(0.0, 1.0, (8, 3, 32, 32)), np.arange(8) % 10, "train", 10)
        config = RunConfig(
            "cifar", "binlog", 4, seed=2, epochs=1, init_sample_size=4, eval_chunk=4, dropout_rate=0.25
        )
        result = run_cifar(config, images, images)
        self.assertEqual(result.status, STATUS_OK)
        self.assertEqual(len(result.epoch_trace), 1)
        self.assertEqual(result.max_val_acc, result.epoch_trace[0]["val_acc"])
        self.assertIn("norm_in", result.epoch_trace[0])

    def test_renorm_is_not_offered(self):
        images = Dataset(np.zeros((4, 3, 32, 32)), np.zeros(4, dtype=int), "train", 10)
        with self.assertRaises(ConfigError):
            run_cifar(RunConfig("cifar", "brn", 4, seed=0), images, images)


class ResultFileTests(unittest.TestCase):
    def rows(self):
        base = {"experiment": "spiral", "batch_size": "4", "run_index": "0", "seed": "1", "converged": "true"}
        return [
            {**base, "norm_kind": "binlog", "status": "ok", "val_loss": "1.0"},
            {**base, "norm_kind": "binlog", "status": "ok", "val_loss": "2.0"},
            {**base, "norm_kind": "bin", "status": "ok", "val_loss": "3.0"},
            {**base, "norm_kind": "bin", "status": "diverged", "val_loss": ""},
            {**base, "norm_kind": "bininv", "status": "diverged", "val_loss": ""},
            {**base, "norm_kind": "bn", "batch_size": "1", "status": "inapplicable", "val_loss": ""},
        ]

    def test_aggregate_cells(self):
        table = aggregate(self.rows(), "val_loss")
        self.assertEqual(table.batch_sizes, [1, 4])
        self.assertEqual(table.norm_kinds, ["bn", "bin", "binlog", "bininv"])
        self.assertEqual(table.value(4, "binlog"), "1.5")
        self.assertEqual(table.value(4, "bin"), "3")
        self.assertEqual(table.value(4, "bininv"), "diverged")
        self.assertEqual(table.value(1, "bn"), INAPPLICABLE_MARK)
        self.assertEqual(table.diverged, {(4, "bin"): 1, (4, "bininv"): 1})
        self.assertEqual(table.render().splitlines()[0], "batch_size,bn,bin,binlog,bininv")

    def test_format_value(self):
        self.assertEqual(format_value(None), "")
        self.assertEqual(format_value(True), "true")
        self.assertEqual(format_value(np.int64(7)), "7")
        self.assertEqual(format_value(1.0 / 3.0, 3), "0.333")

    def test_runs_csv_round_trip(self):
        train, val = generate_spirals(20, 5, seed=0)
        configs = [
            RunConfig("spiral", "none", 4, seed=0, patience=5, median_window=5, hard_cap=10, fluctuation_batches=2),
            RunConfig("spiral", "bn", 1, seed=0),
        ]
        results = [run_spiral(config, train, val) for config in configs]
        with tempfile.TemporaryDirectory() as tmp:
            path = write_runs_csv(results, Path(tmp) / "runs.csv", {"command": "spiral", "base_seed": 0})
            rows, metadata = read_runs_csv(path)
        self.assertEqual(metadata, {"base_seed": 0, "command": "spiral"})
        self.assertEqual(rows, [run_row(r) for r in results])
        metrics = [table.metric for table in tables_for(rows)]
        self.assertEqual(metrics[0], "val_loss")
        self.assertIn("fluctuation", metrics)
        self.assertNotIn("train_loss", metrics)

    def test_missing_columns(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "runs.csv"
            header = "# command: " + json.dumps("spiral") + "\n"
            path.write_text(header + "experiment,norm_kind\nspiral,bn\n", encoding="utf-8")
            with self.assertRaises(SchemaError) as ctx:
                read_runs_csv(path)
        self.assertIn("batch_size", ctx.exception.missing)


def _spiral_protocol_suite(batch_size, norm_kinds):
    settings = load_packaged_defaults()["spiral"]
    settings.update(norm_kinds=list(norm_kinds), batch_sizes=[batch_size], runs=10, seed=0, workers=os.cpu_count() or 1)
    return run_spiral_suite(settings)


@functools.lru_cache(maxsize=None)
def batch_one_suite():
    return _spiral_protocol_suite(1, ("none", "bn", "brn", "binlog"))


@functools.lru_cache(maxsize=None)
def batch_sixteen_suite():
    return _spiral_protocol_suite(16, ("none", "bn", "brn", "binlog"))


def finished_mean(runs, attribute):
    values = [getattr(r, attribute) for r in runs if r.status == STATUS_OK]
    return float(np.mean(values))


def per_run_numbers(suite):
    return [
        (r.config.tag, r.status, r.val_loss, r.val_acc, r.batches_to_convergence, r.fluctuation, r.loss_trace)
        for r in suite.results
    ]


@pytest.mark.slow
class ReproductionTests(unittest.TestCase):
    """Reduced-scale protocol runs; deselected by default."""

    def test_batch_one_gap(self):
        suite = batch_one_suite()
        self.assertGreaterEqual(finished_mean(suite.cell("none", 1), "val_loss"), 0.75)
        self.assertLessEqual(finished_mean(suite.cell("binlog", 1), "val_loss"), 0.55)
        for kind in ("bn", "brn"):
            self.assertTrue(all(r.status == STATUS_INAPPLICABLE for r in suite.cell(kind, 1)))

    def test_fluctuation_ordering_at_batch_sixteen(self):
        suite = batch_sixteen_suite()
        means = {kind: finished_mean(suite.cell(kind, 16), "fluctuation") for kind in ("none", "bn", "brn", "binlog")}
        self.assertLess(means["binlog"], means["brn"])
        self.assertLess(means["brn"], means["none"])
        self.assertLess(means["binlog"], means["bn"])

    def test_finished_runs_converge_within_bounds(self):
        for suite in (batch_one_suite(), batch_sixteen_suite()):
            for result in suite.results:
                if result.status != STATUS_OK:
                    continue
                self.assertTrue(result.converged, result.config.tag)
                self.assertGreaterEqual(result.batches_to_convergence, 500, result.config.tag)
                self.assertLessEqual(result.batches_to_convergence, 20000, result.config.tag)

    def test_repeated_suite_is_bitwise_identical(self):
        again = _spiral_protocol_suite(1, ("none", "bn", "brn", "binlog"))
        self.assertEqual(per_run_numbers(again), per_run_numbers(batch_one_suite()))

    def test_cifar_binlog_beats_no_normalization(self):
        data_dir = Path(load_packaged_defaults()["paths"]["cifar_data"])
        if not data_dir.is_dir():
            self.skipTest(f"CIFAR-10 binaries not found in {data_dir}")
        settings = load_packaged_defaults()["cifar"]
        settings.update(
            norm_kinds=["none", "bn", "binlog"],
            batch_sizes=[1, 4],
            runs=1,
            seed=0,
            epochs=5,
            subset=5000,
            workers=os.cpu_count() or 1,
        )
        suite = run_cifar_suite(settings, data_dir)
        binlog = suite.cell("binlog", 4)[0]
        self.assertEqual(binlog.status, STATUS_OK)
        self.assertGreater(binlog.val_acc, 0.30)
        self.assertGreater(binlog.val_acc, suite.cell("none", 4)[0].val_acc)
        self.assertEqual(suite.cell("binlog", 1)[0].status, STATUS_OK)
        self.assertEqual(suite.cell("bn", 1)[0].status, STATUS_INAPPLICABLE)


if __name__ == "__main__":
    unittest.main()
