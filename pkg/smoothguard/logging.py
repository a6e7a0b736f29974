import logging
from pathlib import Path
from typing import Dict, Optional


class Logger:
    """Handles all logging operations for the toolkit."""

    def __init__(self, log_file: Optional[str] = None, level: int = logging.INFO):
        self.logger = self._setup_logger(log_file, level)

    def _setup_logger(self, log_file: Optional[str], level: int) -> logging.Logger:
        """Setup logging configuration."""
        logger = logging.getLogger("smoothguard")
        logger.setLevel(level)
        # A fresh Logger replaces the handlers of the previous one
        for handler in list(logger.handlers):
            logger.removeHandler(handler)
            handler.close()

        formatter = logging.Formatter("%(asctime)s - %(levelname)s - %(message)s")

        ch = logging.StreamHandler()
        ch.setLevel(level)
        ch.setFormatter(formatter)
        logger.addHandler(ch)

        if log_file:
            Path(log_file).parent.mkdir(parents=True, exist_ok=True)
            fh = logging.FileHandler(log_file)
            fh.setLevel(level)
            fh.setFormatter(formatter)
            logger.addHandler(fh)

        return logger

    def info(self, message: str):
        """Log an info message."""
        self.logger.info(message)

    def warning(self, message: str):
        """Log a warning message."""
        self.logger.warning(message)

    def error(self, message: str):
        """Log an error message."""
        self.logger.error(message)

    def debug(self, message: str):
        """Log a debug message."""
        self.logger.debug(message)

    def log_run_start(self, command: str, out_dir: Path):
        """Log the start of a CLI run."""
        self.info(f"Starting {command}, writing results to {out_dir}")
        self.info(f"Output directory exists: {out_dir.exists()}")

    def log_epoch(self, row: Dict[str, float]):
        """Log one completed training epoch."""
        alphas = ", ".join(f"{k}={v:.4f}" for k, v in row.items() if k.startswith("alpha_"))
        self.info(
            f"Epoch {int(row['epoch'])}: loss={row['train_loss']:.4f} "
            f"clean_val={row['clean_val_acc']:.2f} adv_val={row['adv_val_acc']:.2f} "
            f"lr={row['lr']:.5f}" + (f" [{alphas}]" if alphas else "")
        )

    def log_run_complete(self, success: bool, error: Optional[str] = None):
        """Log the completion of a CLI run."""
        if success:
            self.info("Run completed successfully")
        else:
            self.error(f"Run failed: {error}")
