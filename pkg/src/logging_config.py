"""Logging configuration for clipreid-desk."""

import json
import logging
import sys
from pathlib import Path

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
RUN_LOG_NAME = "run.log"


def setup_logging(level: str = "INFO") -> None:
    """
    Configure console logging for one command.

    Log records go to stderr; stdout is left to command output (checkpoint
    paths, metric tables) so it can be piped.

    Args:
        level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
    """
    root_logger = logging.getLogger()
    root_logger.setLevel(getattr(logging, level.upper(), logging.INFO))
    root_logger.handlers.clear()

    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root_logger.addHandler(console_handler)

    # PNG decoding logs every chunk at DEBUG
    logging.getLogger("PIL").setLevel(logging.WARNING)

    root_logger.debug(f"Logging configured at {level} level")


def attach_run_log(run_dir: Path) -> logging.Handler | None:
    """Mirror every record into ``run_dir/run.log`` until ``detach_run_log``."""
    path = Path(run_dir) / RUN_LOG_NAME
    try:
        handler = logging.FileHandler(path)
    except OSError as e:
        logger.warning(f"Could not create log file {path}: {e}")
        return None
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logging.getLogger().addHandler(handler)
    return handler


def detach_run_log(handler: logging.Handler | None) -> None:
    if handler is None:
        return
    logging.getLogger().removeHandler(handler)
    handler.close()


class JsonLinesLogger:
    """Appends structured training records to a JSON-lines file.

    With no path, records are only kept in memory (``records``), which is what
    tests and in-process experiments read back.
    """

    def __init__(self, path: Path | None = None):
        self.path = path
        self.records: list[dict] = []
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)

    def log(self, **record) -> None:
        self.records.append(record)
        if self.path is None:
            return
        try:
            with self.path.open("a") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")
        except OSError as e:
            logger.warning(f"Could not append to {self.path}: {e}")

    def log_losses(self, step: int, stage: str, losses: dict[str, float]) -> None:
        """One record per loss component."""
        for name, value in losses.items():
            self.log(step=step, stage=stage, loss=name, value=float(value))

    def values(self, loss: str) -> list[float]:
        return [r["value"] for r in self.records if r.get("loss") == loss]
