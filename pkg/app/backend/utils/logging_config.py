import logging
import sys
from typing import Union

NOISY_LOGGERS = [
    "matplotlib",
    "PIL",
    "torch._dynamo",
    "torch.distributed",
]


def setup_logging(level: Union[str, int] = "INFO") -> logging.Logger:
    """Configure the root logger for CLI runs.

    Existing handlers are replaced so repeated calls (tests, grid cells) do not
    duplicate output.
    """
    if isinstance(level, str):
        log_level = logging.getLevelName(level.upper())
        if not isinstance(log_level, int):
            log_level = logging.INFO
    else:
        log_level = level

    formatter = logging.Formatter(
        fmt="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )

    root_logger = logging.getLogger()
    root_logger.setLevel(log_level)

    for handler in root_logger.handlers[:]:
        root_logger.removeHandler(handler)

    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setLevel(log_level)
    console_handler.setFormatter(formatter)
    root_logger.addHandler(console_handler)

    for logger_name in NOISY_LOGGERS:
        logging.getLogger(logger_name).setLevel(logging.WARNING)

    root_logger.debug(f"log level: {logging.getLevelName(log_level)}")
    return root_logger
