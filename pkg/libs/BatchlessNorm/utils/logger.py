"""Logging for BatchlessNorm: a loguru run log plus console output, and a silent stand-in."""

import copy
import os
from contextlib import contextmanager
from datetime import datetime

from loguru import logger
from tqdm import tqdm

FILE_FORMAT = "{time:HH:mm:ss.SSS} | {level: <8} | {thread.name} | {extra[run]} | {message}"
CONSOLE_FORMAT = "<green>{time:HH:mm:ss}</green> | <level>{level: <8}</level> | {extra[run]} | <level>{message}</level>"


class NoOpLogger:
    """Drops every message. Injected wherever no logger is given."""

    def debug(self, message):
        pass

    def info(self, message):
        pass

    def warning(self, message):
        pass

    def error(self, message):
        pass

    def critical(self, message):
        pass

    def for_run(self, tag):
        return self

    @contextmanager
    def progress_bar(self, total, description=""):
        with tqdm(total=total, desc=description, disable=True) as progress:
            yield progress


class LoggerWrapper:
    """DEBUG run log under ``paths.logs`` plus a console sink at ``level``.

    Every line carries a run tag; ``for_run`` returns a view bound to one run so
    lines from concurrent runs stay attributable.
    """

    def __init__(self, config=None, level="INFO"):
        log_dir = "logs"
        if config is not None:
            log_dir = config.get("paths", {}).get("logs", log_dir)
        os.makedirs(log_dir, exist_ok=True)
        timestamp = datetime.now().strftime("%Y-%m-%d_%H-%M-%S")
        self.log_file = os.path.join(log_dir, f"{timestamp}_run.log")

        logger.remove()
        logger.configure(extra={"run": "-"})
        # enqueue: worker threads write through one queue.
        logger.add(self.log_file, format=FILE_FORMAT, level="DEBUG", enqueue=True)
        logger.add(
            lambda msg: print(msg, end=""),
            format=CONSOLE_FORMAT,
            colorize=True,
            level=level,
            diagnose=True,
        )
        self._logger = logger

    def for_run(self, tag):
        view = copy.copy(self)
        view._logger = logger.bind(run=tag)
        return view

    def debug(self, message):
        self._logger.debug(message)

    def info(self, message):
        self._logger.info(message)

    def warning(self, message):
        self._logger.warning(message)

    def error(self, message):
        self._logger.error(message)

    def critical(self, message):
        self._logger.critical(message)

    @contextmanager
    def progress_bar(self, total, description=""):
        with tqdm(total=total, desc=description, leave=False) as progress:
            yield progress
