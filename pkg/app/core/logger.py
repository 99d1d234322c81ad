import json
import logging
import logging.handlers
import os
import sys
from datetime import datetime, timezone
from typing import Optional

from app.core.config import Settings, settings

# Context attributes copied into structured records when present
CONTEXT_FIELDS = ("run_id", "command", "model", "epoch", "batch", "seed")


class StructuredFormatter(logging.Formatter):
    """Custom formatter for structured JSON logging"""

    def format(self, record):
        log_entry = {
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
            "module": record.module,
            "function": record.funcName,
            "line": record.lineno,
        }

        if record.exc_info:
            log_entry["exception"] = self.formatException(record.exc_info)

        for field in CONTEXT_FIELDS:
            if hasattr(record, field):
                log_entry[field] = getattr(record, field)

        return json.dumps(log_entry, default=str)


def setup_logging(config: Optional[Settings] = None) -> logging.Logger:
    """Setup logging for a CLI process"""
    config = config or settings

    root_logger = logging.getLogger()
    root_logger.setLevel(logging.DEBUG if config.DEBUG else config.LOG_LEVEL)
    root_logger.handlers.clear()

    console_handler = logging.StreamHandler(sys.stderr)
    if config.DEBUG or not config.LOG_JSON:
        console_format = logging.Formatter(
            "%(asctime)s - %(name)s - %(levelname)s - %(message)s",
            datefmt="%Y-%m-%d %H:%M:%S"
        )
    else:
        console_format = StructuredFormatter()
    console_handler.setFormatter(console_format)
    root_logger.addHandler(console_handler)

    if config.LOG_DIR:
        os.makedirs(config.LOG_DIR, exist_ok=True)

        file_handler = logging.handlers.RotatingFileHandler(
            os.path.join(config.LOG_DIR, "mdt.log"),
            maxBytes=20*1024*1024,  # 20MB
            backupCount=5
        )
        file_handler.setFormatter(StructuredFormatter())
        file_handler.setLevel(logging.INFO)
        root_logger.addHandler(file_handler)

        error_handler = logging.handlers.RotatingFileHandler(
            os.path.join(config.LOG_DIR, "errors.log"),
            maxBytes=5*1024*1024,  # 5MB
            backupCount=3
        )
        error_handler.setFormatter(StructuredFormatter())
        error_handler.setLevel(logging.ERROR)
        root_logger.addHandler(error_handler)

    # Suppress noisy third-party loggers
    logging.getLogger("matplotlib").setLevel(logging.WARNING)
    logging.getLogger("PIL").setLevel(logging.WARNING)

    return logging.getLogger("mdt")


def get_logger_with_context(name: str, **context) -> logging.LoggerAdapter:
    """Get a logger with additional context"""
    base_logger = logging.getLogger(name)
    return logging.LoggerAdapter(base_logger, context)
