# logger.py - Coloured console logging

"""
Console logging for the calibration and training harness.

Every module asks for a logger through get_logger(); the first call
installs one coloured handler on the package root logger.
"""

import logging
import os

from colorama import Fore, Style, init
from dotenv import load_dotenv

load_dotenv()
init(autoreset=True)

SUCCESS = 25
logging.addLevelName(SUCCESS, 'SUCCESS')

ROOT_NAME = 'conformal_risk'

LEVEL_COLORS = {
    'DEBUG': Fore.WHITE,
    'INFO': Fore.CYAN,
    'SUCCESS': Fore.GREEN,
    'WARNING': Fore.YELLOW,
    'ERROR': Fore.RED,
    'CRITICAL': Fore.RED,
}


class ColorFormatter(logging.Formatter):
    """Render records as [HH:MM:SS] [LEVEL] message in the level's colour"""

    def __init__(self, use_color=True):
        super().__init__(datefmt='%H:%M:%S')
        self.use_color = use_color

    def format(self, record):
        timestamp = self.formatTime(record, self.datefmt)
        line = f"[{timestamp}] [{record.levelname}] {record.getMessage()}"
        if record.exc_info:
            line = f"{line}\n{self.formatException(record.exc_info)}"
        if not self.use_color:
            return line
        color = LEVEL_COLORS.get(record.levelname, Fore.WHITE)
        return f"{color}{line}{Style.RESET_ALL}"


def _install_handler():
    root = logging.getLogger(ROOT_NAME)
    if root.handlers:
        return root
    handler = logging.StreamHandler()
    handler.setFormatter(ColorFormatter())
    root.addHandler(handler)
    root.setLevel(os.getenv('CONFORMAL_RISK_LOG_LEVEL', 'INFO').upper())
    root.propagate = False
    return root


def get_logger(name=None):
    """
    Get a package logger

    Args:
        name (str): Module name; dotted under the package root

    Returns:
        logging.Logger: Configured logger
    """
    _install_handler()
    if not name or name == ROOT_NAME:
        return logging.getLogger(ROOT_NAME)
    if not name.startswith(ROOT_NAME + '.'):
        name = f"{ROOT_NAME}.{name.rsplit('.', 1)[-1]}"
    return logging.getLogger(name)


def set_level(level):
    """Change the package log level (name or number)"""
    _install_handler().setLevel(level.upper() if isinstance(level, str) else level)


def log_success(logger, message, *args):
    """Log at the SUCCESS level"""
    logger.log(SUCCESS, message, *args)
