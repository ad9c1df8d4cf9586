import json
import logging

from loguru import logger

from icft.logger import LOG_CONFIG, CustomLogger, InterceptHandler


def _config(tmp_path, level="info"):
    config_path = tmp_path / "log_conf.json"
    config_data = {
        "logger": {
            "path": "icft.log",
            "level": level,
            "rotation": "1 MB",
            "retention": "1 day",
            "format": "{message}",
        }
    }
    config_path.write_text(json.dumps(config_data), encoding="utf-8")
    return config_path, config_data


def test_load_logging_config_reads_json_file(tmp_path):
    config_path, config_data = _config(tmp_path)
    assert CustomLogger.load_logging_config(config_path) == config_data


def test_bundled_config_names_a_log_file():
    loaded = CustomLogger.load_logging_config(LOG_CONFIG)["logger"]
    assert loaded["path"] == "icft.log"
    assert {"level", "rotation", "retention", "format"} <= set(loaded)


def test_make_logger_writes_debug_lines_to_the_run_directory(tmp_path):
    config_path, _ = _config(tmp_path)
    run_dir = tmp_path / "run"
    configured_logger = CustomLogger.make_logger(config_path, log_dir=run_dir)
    configured_logger.debug("file only")
    logger.complete()
    logger.remove()
    assert "file only" in (run_dir / "icft.log").read_text(encoding="utf-8")


def test_make_logger_without_directory_writes_no_file(tmp_path):
    config_path, _ = _config(tmp_path)
    CustomLogger.make_logger(config_path, level="warning")
    logger.info("stderr only")
    logger.remove()
    assert not (tmp_path / "icft.log").exists()


def test_standard_logging_reaches_loguru(tmp_path):
    config_path, _ = _config(tmp_path)
    CustomLogger.make_logger(config_path)
    captured = []
    logger.add(captured.append, format="{message}")
    logging.getLogger("numpy").warning("from stdlib")
    logger.remove()
    text = "".join(str(message) for message in captured)
    assert "from stdlib" in text


def test_intercept_handler_emit_accepts_unknown_levels():
    handler = InterceptHandler()
    record = logging.LogRecord(
        name="test",
        level=logging.INFO,
        pathname=__file__,
        lineno=1,
        msg="hello from record",
        args=(),
        exc_info=None,
    )
    record.levelname = "CUSTOM"
    handler.emit(record)
