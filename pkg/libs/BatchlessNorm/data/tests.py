import tempfile
import unittest
from pathlib import Path

import numpy as np

from BatchlessNorm.data.cifar import (
    CIFAR_CLASSES,
    RECORD_BYTES,
    TEST_FILE,
    TRAIN_FILES,
    load_cifar10,
    read_cifar_batch,
    write_cifar_batch,
)
from BatchlessNorm.data.dataset import Dataset
from BatchlessNorm.data.sampler import BatchSampler, sample_batches
from BatchlessNorm.data.spirals import SPIRAL_CLASSES, bounding_box, generate_spirals, spiral_curve, write_spirals_csv
from BatchlessNorm.utils.errors import ConfigError, DimensionError, IngestionError, LabelIndexError


def random_images(rng, count):
    pixels = rng.integers(0, 256, size=(count, 3, 32, 32))
    labels = rng.integers(0, CIFAR_CLASSES, size=count)
    return Dataset(pixels / 255.0, labels, "train", CIFAR_CLASSES)


class DatasetTests(unittest.TestCase):
    def test_validation(self):
        with self.assertRaises(DimensionError):
            Dataset(np.zeros((3, 2)), np.zeros(2, dtype=int), "train", 3)
        with self.assertRaises(LabelIndexError):
            Dataset(np.zeros((2, 2)), np.array([0, 3]), "train", 3)

    def test_arrays_are_read_only(self):
        dataset = Dataset(np.zeros((2, 2)), np.array([0, 1]), "train", 2)
        self.assertEqual(len(dataset), 2)
        self.assertEqual(dataset.input_shape, (2,))
        with self.assertRaises(ValueError):
            dataset.inputs[0, 0] = 1.0


class SpiralTests(unittest.TestCase):
    def test_same_seed_same_data(self):
        a_train, a_val = generate_spirals(100, 20, seed=4)
        b_train, b_val = generate_spirals(100, 20, seed=4)
        np.testing.assert_array_equal(a_train.inputs, b_train.inputs)
        np.testing.assert_array_equal(a_val.inputs, b_val.inputs)
        c_train, _ = generate_spirals(100, 20, seed=5)
        self.assertFalse(np.array_equal(a_train.inputs, c_train.inputs))

    def test_shapes_and_class_order(self):
        train, val = generate_spirals(100, 20, seed=0)
        self.assertEqual(train.inputs.shape, (300, 2))
        self.assertEqual(val.inputs.shape, (60, 2))
        np.testing.assert_array_equal(train.labels, np.repeat(np.arange(SPIRAL_CLASSES), 100))
        self.assertEqual((train.split, val.split), ("train", "val"))
        self.assertEqual(train.num_classes, 3)
        self.assertEqual(train.metadata["seed"], 0)

    def test_points_scatter_around_their_arm(self):
        train, _ = generate_spirals(500, 10, seed=2, noise=0.12)
        t = train.metadata["t"]
        arms = np.concatenate([spiral_curve(t[train.labels == k], k) for k in range(SPIRAL_CLASSES)])
        distance = np.linalg.norm(train.inputs - arms, axis=1)
        # Noise scale is 0.12 * t per coordinate.
        self.assertLess(float(np.max(distance / np.maximum(t, 1e-9))), 0.12 * 6)

    def test_noiseless_points_lie_on_the_curve(self):
        train, _ = generate_spirals(50, 10, seed=1, noise=0.0)
        t = train.metadata["t"]
        np.testing.assert_allclose(train.inputs[:50], spiral_curve(t[:50], 0), atol=1e-12)
        lo, hi = bounding_box(train)
        self.assertTrue(np.all(lo >= -1.0) and np.all(hi <= 1.0))

    def test_arms_are_separated_near_the_centre(self):
        train, _ = generate_spirals(2000, 1, seed=6)
        t = train.metadata["t"]
        grid = np.linspace(0.0, 1.0, 4001)
        curves = [spiral_curve(grid, k) for k in range(SPIRAL_CLASSES)]
        # Noise grows with t, so the arms only separate cleanly near the centre.
        for k in range(SPIRAL_CLASSES):
            points = train.inputs[(train.labels == k) & (t <= 0.3)]
            nearest = np.stack(
                [np.min(np.linalg.norm(points[:, None, :] - curve[None, :, :], axis=2), axis=1) for curve in curves]
            )
            own = np.argmin(nearest, axis=0) == k
            self.assertGreaterEqual(own.mean(), 0.99, f"arm {k}")

    def test_invalid_parameters(self):
        with self.assertRaises(ConfigError):
            generate_spirals(0, 10)
        with self.assertRaises(ConfigError):
            generate_spirals(10, 10, noise=-0.1)
        with self.assertRaises(ConfigError):
            generate_spirals(10, 10, r_max=0.0)

    def test_csv_export(self):
        train, _ = generate_spirals(5, 5, seed=9)
        with tempfile.TemporaryDirectory() as tmp:
            path = write_spirals_csv(train, Path(tmp) / "spirals.csv")
            lines = path.read_text(encoding="utf-8").splitlines()
        self.assertIn("# seed: 9", lines)
        header = lines.index("x,y,label")
        self.assertEqual(len(lines) - header - 1, 15)
        x, y, label = lines[header + 1].split(",")
        self.assertEqual(float(x), float(train.inputs[0, 0]))
        self.assertEqual(int(label), 0)


class CifarTests(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.dir = Path(self.tmp.name)

    def write_all(self, rng, per_file=4, test_count=3):
        train = []
        for name in TRAIN_FILES:
            dataset = random_images(rng, per_file)
            write_cifar_batch(self.dir / name, dataset)
            train.append(dataset)
        test = random_images(rng, test_count)
        write_cifar_batch(self.dir / TEST_FILE, test)
        return train, test

    def test_load_keeps_file_order(self):
        train_parts, test = self.write_all(np.random.default_rng(0))
        train, val = load_cifar10(self.dir)
        self.assertEqual(train.inputs.shape, (20, 3, 32, 32))
        np.testing.assert_allclose(train.inputs, np.concatenate([d.inputs for d in train_parts]))
        np.testing.assert_array_equal(train.labels, np.concatenate([d.labels for d in train_parts]))
        np.testing.assert_allclose(val.inputs, test.inputs)
        self.assertEqual(val.split, "val")
        self.assertGreaterEqual(float(train.inputs.min()), 0.0)
        self.assertLessEqual(float(train.inputs.max()), 1.0)

    def test_reserialization_reproduces_source_bytes(self):
        rng = np.random.default_rng(7)
        sources = {}
        for name in (*TRAIN_FILES, TEST_FILE):
            records = rng.integers(0, 256, size=(3, RECORD_BYTES), dtype=np.uint8)
            records[:, 0] = rng.integers(0, CIFAR_CLASSES, size=3)
            sources[name] = records.tobytes()
            (self.dir / name).write_bytes(sources[name])
        train, val = load_cifar10(self.dir)
        write_cifar_batch(self.dir / "train_again.bin", train)
        write_cifar_batch(self.dir / "test_again.bin", val)
        self.assertEqual((self.dir / "train_again.bin").read_bytes(), b"".join(sources[n] for n in TRAIN_FILES))
        self.assertEqual((self.dir / "test_again.bin").read_bytes(), sources[TEST_FILE])

    def test_limit_spans_files(self):
        train_parts, _ = self.write_all(np.random.default_rng(1))
        train, val = load_cifar10(self.dir, limit=6, val_limit=1)
        self.assertEqual(len(train), 6)
        self.assertEqual(len(val), 1)
        self.assertEqual(train.metadata["files"], list(TRAIN_FILES[:2]))
        np.testing.assert_array_equal(train.labels[4:], train_parts[1].labels[:2])

    def test_missing_directory_or_file(self):
        with self.assertRaises(IngestionError):
            load_cifar10(self.dir / "absent")
        write_cifar_batch(self.dir / TRAIN_FILES[0], random_images(np.random.default_rng(2), 2))
        with self.assertRaises(IngestionError):
            load_cifar10(self.dir)

    def test_truncated_file_reports_offset(self):
        path = self.dir / "bad.bin"
        path.write_bytes(bytes(2 * RECORD_BYTES + 10))
        with self.assertRaises(IngestionError) as ctx:
            read_cifar_batch(path)
        self.assertEqual(ctx.exception.offset, 2 * RECORD_BYTES)
        self.assertEqual(ctx.exception.file_name, "bad.bin")

    def test_label_out_of_range(self):
        record = bytearray(RECORD_BYTES * 2)
        record[RECORD_BYTES] = 12
        path = self.dir / "labels.bin"
        path.write_bytes(bytes(record))
        with self.assertRaises(IngestionError) as ctx:
            read_cifar_batch(path)
        self.assertEqual(ctx.exception.offset, RECORD_BYTES)


class SamplerTests(unittest.TestCase):
    def setUp(self):
        self.dataset = Dataset(np.arange(20.0).reshape(10, 2), np.arange(10) % 2, "train", 2)

    def test_iid_batches_have_distinct_members(self):
        sampler = BatchSampler(self.dataset, 10, seed=3)
        for batch in sample_batches(sampler, 5):
            self.assertEqual(sorted(batch.indices.tolist()), list(range(10)))
            np.testing.assert_array_equal(batch.inputs, self.dataset.inputs[batch.indices])
            np.testing.assert_array_equal(batch.labels, self.dataset.labels[batch.indices])

    def test_same_seed_same_stream(self):
        a = sample_batches(BatchSampler(self.dataset, 3, seed=7), 4)
        b = sample_batches(BatchSampler(self.dataset, 3, seed=7), 4)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.indices, y.indices)

    def test_single_instance_batches_are_class_balanced(self):
        train, _ = generate_spirals(100, 1, seed=0)
        sampler = BatchSampler(train, 1, seed=11)
        labels = np.array([sampler.next_batch().labels[0] for _ in range(100_000)])
        frequencies = np.bincount(labels, minlength=SPIRAL_CLASSES) / len(labels)
        np.testing.assert_allclose(frequencies, np.full(SPIRAL_CLASSES, 1.0 / 3.0), atol=0.01)

    def test_epoch_mode_covers_each_instance_once(self):
        sampler = BatchSampler(self.dataset, 3, seed=1, mode="epoch")
        self.assertEqual(sampler.batches_per_epoch, 3)
        for _ in range(2):
            seen = np.concatenate([batch.indices for batch in sampler.epoch()])
            self.assertEqual(len(seen), 9)
            self.assertEqual(len(set(seen.tolist())), 9)

    def test_invalid_configuration(self):
        with self.assertRaises(ConfigError):
            BatchSampler(self.dataset, 0, seed=0)
        with self.assertRaises(ConfigError):
            BatchSampler(self.dataset, 11, seed=0)
        with self.assertRaises(ConfigError):
            BatchSampler(self.dataset, 2, seed=0, mode="stratified")


if __name__ == "__main__":
    unittest.main()
