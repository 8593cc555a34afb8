"""
Logger construction shared by trainers, the pipeline and the recovery system
"""
import logging
import os
from pathlib import Path
from typing import Optional

import colorlog

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def setup_logger(name: str, log_file: Optional[Path] = None, console: bool = True) -> logging.Logger:
    """Configure a named logger with a coloured console handler and an optional file handler"""
    logger = logging.getLogger(name)
    logger.setLevel(logging.DEBUG)
    logger.propagate = True

    level_name = os.getenv('SEAS_LOG_LEVEL', 'INFO').upper()
    console_level = getattr(logging, level_name, logging.INFO)

    has_console = any(getattr(h, '_seas_console', False) for h in logger.handlers)
    if console and not has_console:
        console_handler = colorlog.StreamHandler()
        console_handler.setLevel(console_level)
        console_handler.setFormatter(colorlog.ColoredFormatter(
            '%(log_color)s' + LOG_FORMAT,
            log_colors={
                'DEBUG': 'cyan',
                'INFO': 'green',
                'WARNING': 'yellow',
                'ERROR': 'red',
                'CRITICAL': 'red,bg_white',
            },
        ))
        console_handler._seas_console = True
        logger.addHandler(console_handler)

    if log_file is not None:
        log_file = Path(log_file)
        log_file.parent.mkdir(parents=True, exist_ok=True)
        target = str(log_file.resolve())
        known = {getattr(h, 'baseFilename', None) for h in logger.handlers}
        if target not in known:
            file_handler = logging.FileHandler(log_file)
            file_handler.setLevel(logging.DEBUG)
            file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
            logger.addHandler(file_handler)

    return logger
