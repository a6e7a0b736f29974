import logging
import tempfile
from pathlib import Path

import pytest

from smoothguard.logging import Logger


@pytest.fixture
def temp_dir():
    """Create a temporary directory for testing."""
    with tempfile.TemporaryDirectory() as tmpdirname:
        yield Path(tmpdirname)


@pytest.fixture
def logger():
    """Console-only logger; closes its handlers afterwards."""
    yield Logger()
    for handler in list(logging.getLogger("smoothguard").handlers):
        logging.getLogger("smoothguard").removeHandler(handler)
        handler.close()


def test_log_file_created(temp_dir):
    """Messages reach the log file, creating its directory."""
    path = temp_dir / "logs" / "run.log"
    log = Logger(str(path))
    log.info("hello")
    log.error("boom")
    for handler in log.logger.handlers:
        handler.flush()
    text = path.read_text()
    assert "INFO - hello" in text
    assert "ERROR - boom" in text
    for handler in list(log.logger.handlers):
        log.logger.removeHandler(handler)
        handler.close()


def test_handlers_are_not_duplicated(logger):
    """A second Logger replaces the first one's handlers."""
    Logger()
    assert len(logging.getLogger("smoothguard").handlers) == 1


def test_log_epoch(logger, caplog):
    """Epoch lines carry loss, accuracies and the noise scales."""
    row = {
        "epoch": 3,
        "train_loss": 0.5,
        "clean_val_acc": 80.0,
        "adv_val_acc": float("nan"),
        "lr": 0.1,
        "alpha_0": 0.25,
    }
    with caplog.at_level(logging.INFO, logger="smoothguard"):
        logger.log_epoch(row)
    assert "Epoch 3: loss=0.5000" in caplog.text
    assert "adv_val=nan" in caplog.text
    assert "[alpha_0=0.2500]" in caplog.text


def test_run_complete(logger, caplog):
    """Failed runs are logged as errors with their message."""
    with caplog.at_level(logging.INFO, logger="smoothguard"):
        logger.log_run_start("evaluate", Path("runs/x"))
        logger.log_run_complete(False, "no checkpoint")
    assert "Starting evaluate" in caplog.text
    assert any(r.levelno == logging.ERROR and "no checkpoint" in r.message for r in caplog.records)
