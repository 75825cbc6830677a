# formatters.py - Console formatting for reports

"""
Formatting helpers for harness summaries printed by the CLI.
"""

import math

from tabulate import tabulate


def format_number(number, decimals=4):
    """
    Format a float for a summary table

    Args:
        number (float): Value to format
        decimals (int): Decimal places

    Returns:
        str: Formatted number; 'nan' and 'inf' are passed through
    """
    if number is None:
        return '-'
    number = float(number)
    if not math.isfinite(number):
        return str(number)
    return f"{number:.{decimals}f}"


def format_mean_std(mean, std, decimals=4):
    """Format a mean ± std pair"""
    return f"{format_number(mean, decimals)} ± {format_number(std, decimals)}"


def format_duration(seconds):
    """
    Format duration in human-readable format

    Args:
        seconds (float): Duration in seconds

    Returns:
        str: Formatted duration string
    """
    if seconds < 60:
        return f"{seconds:.2f} seconds"
    elif seconds < 3600:
        return f"{seconds / 60:.2f} minutes"
    return f"{seconds / 3600:.2f} hours"


def json_ready(value):
    """
    Replace NaN and infinite floats with None so json.dump(allow_nan=False) accepts the value

    Args:
        value: Float, dict, list or tuple (nested)

    Returns:
        Same structure with non-finite floats as None
    """
    if isinstance(value, dict):
        return {key: json_ready(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [json_ready(item) for item in value]
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def format_table(rows, headers=None, decimals=4):
    """
    Format a list of dicts as a plain-text table

    Args:
        rows (list): List of dictionaries
        headers (list): Columns to show (default: keys of the first row)
        decimals (int): Decimal places for floats

    Returns:
        str: Table, or a placeholder when there are no rows
    """
    if not rows:
        return "No data to display"
    if headers is None:
        headers = list(rows[0].keys())
    body = [
        [format_number(row.get(h), decimals) if isinstance(row.get(h), float) else row.get(h, '')
         for h in headers]
        for row in rows
    ]
    return tabulate(body, headers=headers, tablefmt='github')
