# validators.py - Argument and config validation

"""
Validation utilities for risk-control inputs and configs.

Every validator returns (is_valid, error_message) so config classes can
collect all problems before raising a single ConfigError.
"""

import math


def validate_finite(value, name='value'):
    """
    Validate that a value is a finite real number

    Args:
        value (float): Value to validate
        name (str): Name used in the error message

    Returns:
        tuple: (is_valid, error_message)

    Examples:
        >>> validate_finite(1.5)
        (True, None)
        >>> validate_finite(float('nan'), 'alpha')
        (False, 'alpha must be a finite number')
    """
    try:
        value = float(value)
    except (ValueError, TypeError):
        return False, f"{name} must be a number"

    if not math.isfinite(value):
        return False, f"{name} must be a finite number"

    return True, None


def validate_positive(value, name='value'):
    """
    Validate a strictly positive finite number

    Returns:
        tuple: (is_valid, error_message)
    """
    is_valid, error = validate_finite(value, name)
    if not is_valid:
        return is_valid, error

    if float(value) <= 0:
        return False, f"{name} must be positive"

    return True, None


def validate_probability(value, name='value', allow_zero=True, allow_one=False):
    """
    Validate a probability level

    Args:
        value (float): Value to validate
        name (str): Name used in the error message
        allow_zero (bool): Whether 0 is admissible
        allow_one (bool): Whether 1 is admissible

    Returns:
        tuple: (is_valid, error_message)

    Examples:
        >>> validate_probability(0.9, 'delta')
        (True, None)
        >>> validate_probability(1.0, 'delta')
        (False, 'delta must lie in [0, 1)')
    """
    is_valid, error = validate_finite(value, name)
    if not is_valid:
        return is_valid, error

    value = float(value)
    lower_ok = value >= 0 if allow_zero else value > 0
    upper_ok = value <= 1 if allow_one else value < 1
    if not (lower_ok and upper_ok):
        left = '[' if allow_zero else '('
        right = ']' if allow_one else ')'
        return False, f"{name} must lie in {left}0, 1{right}"

    return True, None


def validate_count(value, name='count', min_count=1):
    """
    Validate an integer count

    Returns:
        tuple: (is_valid, error_message)
    """
    if isinstance(value, bool) or not isinstance(value, int):
        return False, f"{name} must be an integer"

    if value < min_count:
        return False, f"{name} must be at least {min_count}"

    return True, None


def validate_interval(lo, hi, name='interval'):
    """
    Validate a closed parameter interval [lo, hi]

    Returns:
        tuple: (is_valid, error_message)
    """
    for end, label in ((lo, 'lo'), (hi, 'hi')):
        is_valid, error = validate_finite(end, f"{name}.{label}")
        if not is_valid:
            return is_valid, error

    if float(lo) > float(hi):
        return False, f"{name} must satisfy lo <= hi (got [{lo}, {hi}])"

    return True, None


def validate_choice(value, choices, name='value'):
    """
    Validate that a value is one of a fixed set

    Returns:
        tuple: (is_valid, error_message)
    """
    if value not in choices:
        return False, f"Invalid {name}. Must be one of: {', '.join(map(str, choices))}"

    return True, None


def collect_errors(*results):
    """
    Gather the messages of failed validations

    Args:
        *results: (is_valid, error_message) tuples

    Returns:
        list: Error messages of the failed checks
    """
    return [error for is_valid, error in results if not is_valid]
