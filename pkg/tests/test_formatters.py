# tests/test_formatters.py - Unit tests for report formatting and logging helpers

import logging

import pytest

from conformal_risk.decorators import timer
from conformal_risk.formatters import (
    format_duration, format_mean_std, format_number, format_table, json_ready,
)
from conformal_risk.logger import SUCCESS, get_logger, log_success, set_level


class TestFormatNumber:
    """Test number formatting"""

    def test_basic(self):
        assert format_number(0.123456) == '0.1235'
        assert format_number(2, decimals=1) == '2.0'

    def test_special_values(self):
        assert format_number(None) == '-'
        assert format_number(float('nan')) == 'nan'
        assert format_number(float('inf')) == 'inf'

    def test_mean_std(self):
        assert format_mean_std(0.5, 0.25, 2) == '0.50 ± 0.25'


class TestFormatDuration:
    """Test duration formatting"""

    def test_units(self):
        assert format_duration(5) == '5.00 seconds'
        assert format_duration(90) == '1.50 minutes'
        assert format_duration(5400) == '1.50 hours'


class TestFormatTable:
    """Test summary tables"""

    def test_empty(self):
        assert format_table([]) == 'No data to display'

    def test_columns(self):
        table = format_table([{'run': 'trained', 'risk': 0.0812345, 'passed': True}],
                             ['run', 'risk'])
        assert 'trained' in table
        assert '0.0812' in table
        assert 'passed' not in table


class TestJsonReady:
    """Test conversion of report values for strict JSON"""

    def test_non_finite_become_none(self):
        value = {'h': float('nan'), 'rows': [1.5, float('inf')], 'ok': True}
        assert json_ready(value) == {'h': None, 'rows': [1.5, None], 'ok': True}


class TestLogging:
    """Test the package logger and the timer decorator"""

    def test_names_are_under_package(self):
        assert get_logger('conformal_risk.cli').name == 'conformal_risk.cli'
        assert get_logger('other.module').name == 'conformal_risk.module'
        assert get_logger().name == 'conformal_risk'

    def test_success_level(self):
        records = []
        handler = logging.Handler()
        handler.emit = records.append
        logger = get_logger('conformal_risk.test')
        logger.addHandler(handler)
        try:
            log_success(logger, "done %d", 3)
        finally:
            logger.removeHandler(handler)
        assert [(r.levelno, r.getMessage()) for r in records] == [(SUCCESS, 'done 3')]

    def test_set_level(self):
        set_level('warning')
        try:
            assert get_logger().level == logging.WARNING
        finally:
            set_level('INFO')

    def test_timer_keeps_function(self):
        @timer
        def add(a, b):
            """Add two numbers"""
            return a + b

        assert add(2, 3) == 5
        assert add.__name__ == 'add'
        assert add.__doc__ == 'Add two numbers'


if __name__ == "__main__":
    pytest.main([__file__, '-v'])
