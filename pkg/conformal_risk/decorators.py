# decorators.py - Decorators for long-running harness calls

import functools
import time

from .formatters import format_duration
from .logger import get_logger

logger = get_logger(__name__)


def timer(func):
    """
    Decorator to log how long a call took

    Usage:
        @timer
        def validate_guarantee(...):
            ...
    """
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        start_time = time.perf_counter()
        try:
            return func(*args, **kwargs)
        finally:
            duration = time.perf_counter() - start_time
            logger.debug("%s took %s", func.__name__, format_duration(duration))
    return wrapper
