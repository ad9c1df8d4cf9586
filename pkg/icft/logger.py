################################################################################
"""
ICFT - Incremental curriculum fine-tuning for small medical language models.

Loguru configuration shared by every command. Standard-library logging and
Python warnings are routed into loguru.

(c) 2025 Stanley Solutions
"""
################################################################################

import json
import logging
import sys
from pathlib import Path
from typing import Optional

from loguru import logger

LOG_CONFIG = Path(__file__).with_name("log_conf.json")


class InterceptHandler(logging.Handler):
    """Handle Logging Interceptions."""

    loglevel_mapping = {
        50: "CRITICAL",
        40: "ERROR",
        30: "WARNING",
        20: "INFO",
        10: "DEBUG",
        0: "NOTSET",
    }

    def emit(self, record: logging.LogRecord):
        try:
            level = logger.level(record.levelname).name
        except ValueError:
            level = self.loglevel_mapping.get(record.levelno, record.levelno)

        frame, depth = logging.currentframe(), 2
        while frame and frame.f_code.co_filename == logging.__file__:
            frame = frame.f_back
            depth += 1

        logger.bind(stage=None, step=None).opt(
            depth=depth,
            exception=record.exc_info,
        ).log(level, record.getMessage())


class CustomLogger:
    """Use Additional Logging Configurations."""

    @classmethod
    def make_logger(
        cls,
        config_path: Path = LOG_CONFIG,
        log_dir: Optional[Path] = None,
        level: Optional[str] = None,
    ):
        """Create the logger; a file sink is added when `log_dir` is set."""
        logging_config = cls.load_logging_config(config_path)["logger"]
        filepath = None
        if log_dir is not None:
            filepath = Path(log_dir) / Path(logging_config["path"]).name
        return cls.customize_logging(
            filepath,
            level=level or logging_config.get("level", "info"),
            retention=logging_config.get("retention"),
            rotation=logging_config.get("rotation"),
            format=logging_config.get("format"),
        )

    @classmethod
    def customize_logging(
        cls,
        filepath: Optional[Path],
        level: str,
        rotation: str,
        retention: str,
        format: str,  # pylint: disable=redefined-builtin
    ):
        """Customize the Logging."""
        logger.remove()
        logger.add(
            sys.stderr,
            backtrace=True,
            level=level.upper(),
            format=format,
        )
        if filepath is not None:
            Path(filepath).parent.mkdir(parents=True, exist_ok=True)
            logger.add(
                str(filepath),
                rotation=rotation,
                retention=retention,
                enqueue=True,
                backtrace=True,
                level="DEBUG",
                format=format,
            )
        logging.basicConfig(handlers=[InterceptHandler()], level=0, force=True)
        logging.captureWarnings(True)
        logging.getLogger("py.warnings").handlers = [InterceptHandler()]
        return logger.bind(stage=None, step=None)

    @classmethod
    def load_logging_config(cls, config_path: Path) -> dict:
        """Load the Logging Configuration."""
        with open(config_path, encoding="utf-8") as config_file:
            return json.load(config_file)
