import contextlib
import io
import tempfile
import unittest
from pathlib import Path

from loguru import logger

from BatchlessNorm.utils.config_initializer import PACKAGED_CONFIG, ensure_config_exists, load_packaged_defaults
from BatchlessNorm.utils.config_loader import COMMANDS
from BatchlessNorm.utils.errors import DegenerateSampleError, IngestionError, SchemaError
from BatchlessNorm.utils.logger import LoggerWrapper, NoOpLogger


class LoggerTests(unittest.TestCase):
    def test_run_tag_reaches_the_log_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            with contextlib.redirect_stdout(io.StringIO()) as console:
                wrapper = LoggerWrapper({"paths": {"logs": tmp}}, level="INFO")
                wrapper.for_run("spiral_bin_b4_r0").info("hello")
                wrapper.debug("quiet")
                logger.complete()
            logger.remove()
            text = Path(wrapper.log_file).read_text(encoding="utf-8")
        self.assertIn("spiral_bin_b4_r0 | hello", text)
        self.assertIn("quiet", text)
        self.assertIn("hello", console.getvalue())
        self.assertNotIn("quiet", console.getvalue())

    def test_noop_logger(self):
        silent = NoOpLogger()
        self.assertIs(silent.for_run("x"), silent)
        with silent.progress_bar(3, "steps") as progress:
            progress.update(3)


class ConfigFileTests(unittest.TestCase):
    def test_packaged_defaults_cover_every_command(self):
        defaults = load_packaged_defaults()
        for command in COMMANDS:
            self.assertIn(command, defaults)
        self.assertEqual(set(defaults["paths"]), {"output", "logs", "cifar_data"})

    def test_existing_file_is_left_alone(self):
        self.assertEqual(ensure_config_exists(None), PACKAGED_CONFIG)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "mine.json"
            path.write_text('{"paths": {}}', encoding="utf-8")
            ensure_config_exists(path)
            self.assertEqual(path.read_text(encoding="utf-8"), '{"paths": {}}')


class ErrorTests(unittest.TestCase):
    def test_errors_keep_their_context(self):
        error = DegenerateSampleError("norm1", 7, 0.0)
        self.assertIsInstance(error, ValueError)
        self.assertEqual((error.layer, error.unit), ("norm1", 7))
        self.assertIn("norm1", str(error))

        cause = FileNotFoundError("gone")
        error = IngestionError("data_batch_1.bin", 3073, "cannot read file", cause)
        self.assertIsInstance(error, OSError)
        self.assertIs(error.__cause__, cause)
        self.assertIn("byte offset 3073", str(error))

        self.assertEqual(SchemaError("runs.csv", ["seed"]).missing, ["seed"])


if __name__ == "__main__":
    unittest.main()
