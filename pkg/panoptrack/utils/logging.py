from logging import (
    DEBUG,
    INFO,
    FileHandler,
    Formatter,
    Logger,
    StreamHandler,
    getLogger,
)
from typing import Optional

from panoptrack.config.defaults import (
    LOG_CONSOLE_FORMAT,
    LOG_DATE_FORMAT,
    LOG_FILE_FORMAT,
)


def get_logger(
    name: str = "panoptrack",
    level: int = DEBUG,
    console_level: int = INFO,
    file_level: int = DEBUG,
    log_file: Optional[str] = None,
) -> Logger:
    logger = getLogger(name)
    logger.setLevel(level)
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()
    console_handler = StreamHandler()
    console_handler.setLevel(console_level)
    console_handler.setFormatter(Formatter(LOG_CONSOLE_FORMAT, datefmt=LOG_DATE_FORMAT))
    logger.addHandler(console_handler)
    if log_file:
        file_handler = FileHandler(log_file)
        file_handler.setLevel(file_level)
        file_handler.setFormatter(Formatter(LOG_FILE_FORMAT, datefmt=LOG_DATE_FORMAT))
        logger.addHandler(file_handler)
    return logger


def log_written(path: str, logger: Logger) -> None:
    logger.info(f"wrote: {path}")
    return None
