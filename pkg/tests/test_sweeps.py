# tests/test_sweeps.py - Unit tests for sensitivity sweeps

import json
import logging
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

from conformal_risk.exceptions import ConfigError, UnsupportedProblem
from conformal_risk.logger import get_logger
from conformal_risk.seg_task import SegTask, SegTaskConfig
from conformal_risk.storage_task import StorageTask, StorageTaskConfig
from conformal_risk.sweeps import (
    SweepConfig, check_calib_size_trend, sweep, sweep_passed, write_sweep,
)
from conformal_risk.training import TrainConfig, train

SEG_CONFIG = SegTaskConfig(d=16, n_train=40, n_cal=30, n_test=30)
STORAGE_CONFIG = StorageTaskConfig(n_train=100, n_cal=100, n_test=100)
POST_HOC = TrainConfig(epochs=0)


class TestSweepConfig:
    """Test SweepConfig validation"""

    def test_defaults_valid(self):
        assert SweepConfig().validate() == []

    def test_lists_become_tuples(self):
        config = SweepConfig.from_dict({'kind': 'alpha', 'values': [0.1, 0.2]})
        assert config.values == (0.1, 0.2)

    @pytest.mark.parametrize('values', [
        {'kind': 'beta'},
        {'values': []},
        {'n_seeds': 0},
        {'kind': 'n', 'values': [10, 0]},
    ])
    def test_invalid(self, values):
        with pytest.raises(ConfigError):
            SweepConfig.from_dict(values)


class TestSweep:
    """Test sweeps on the synthetic tasks"""

    def test_singleton_matches_direct_run(self):
        """Test that a one-point, one-seed sweep reproduces train()"""
        task = SegTask(SEG_CONFIG)
        frame = sweep(task, POST_HOC, SweepConfig('alpha', (0.1,), n_seeds=1), progress=False)
        direct = train(SegTask(replace(SEG_CONFIG, seed=0)), replace(POST_HOC, seed=0),
                       progress=False)
        assert len(frame) == 1
        assert frame.loc[0, 'lambda_mean'] == pytest.approx(direct.lambda_hat)
        assert frame.loc[0, 'risk_mean'] == pytest.approx(direct.report.risk)
        assert frame.loc[0, 'lambda_std'] == 0.0

    def test_alpha_sweep_monotone(self):
        frame = sweep(SegTask(SEG_CONFIG), POST_HOC, SweepConfig('alpha', (0.1, 0.3), n_seeds=2),
                      progress=False)
        assert list(frame['value']) == [0.1, 0.3]
        assert (frame['n_seeds'] == 2).all()
        assert frame.loc[1, 'lambda_mean'] >= frame.loc[0, 'lambda_mean']

    def test_t_sweep_needs_cvar(self):
        with pytest.raises(UnsupportedProblem):
            sweep(SegTask(SEG_CONFIG), POST_HOC, SweepConfig('t', (0.0,), n_seeds=1),
                  progress=False)

    def test_relative_t_sweep(self):
        frame = sweep(StorageTask(STORAGE_CONFIG), POST_HOC,
                      SweepConfig('t', (0.0,), n_seeds=1), progress=False)
        assert frame.loc[0, 'n_seeds'] == 1
        assert 0.0 <= frame.loc[0, 'lambda_mean'] <= 1.0

    def test_zero_t0_uses_absolute_offsets(self, monkeypatch):
        """Test that a tuned t0 of zero still spreads the t grid"""
        monkeypatch.setattr(StorageTask, 'tune_t', lambda self, theta, holdout: 0.0)
        records = []
        handler = logging.Handler()
        handler.emit = records.append
        logger = get_logger('conformal_risk.sweeps')
        logger.addHandler(handler)
        try:
            frame = sweep(StorageTask(STORAGE_CONFIG), POST_HOC,
                          SweepConfig('t', (0.0, 0.5), n_seeds=1), progress=False)
        finally:
            logger.removeHandler(handler)
        assert frame['t_mean'].tolist() == pytest.approx([0.0, 0.5])
        assert any(r.levelno == logging.WARNING and 't0' in r.getMessage() for r in records)

    def test_t_outside_window_skipped(self):
        frame = sweep(StorageTask(STORAGE_CONFIG), POST_HOC,
                      SweepConfig('t', (100.0,), n_seeds=2, relative_t=False), progress=False)
        assert frame.loc[0, 'n_seeds'] == 0
        assert np.isnan(frame.loc[0, 'lambda_mean'])
        assert sweep_passed(frame)

    def test_calib_size_sweep(self):
        frame = sweep(StorageTask(STORAGE_CONFIG), POST_HOC,
                      SweepConfig('n', (25, 100, 400), n_seeds=4), progress=False)
        assert list(frame['value']) == [25, 100, 400]
        assert frame['trend_ok'].all()

    def test_report_reproducible(self, tmp_path):
        """Test that a fixed seed gives byte-identical reports for any thread count"""
        config = SweepConfig('alpha', (4.0, 6.0), n_seeds=2)
        first = sweep(StorageTask(STORAGE_CONFIG), POST_HOC, config, threads=1, progress=False)
        second = sweep(StorageTask(STORAGE_CONFIG), POST_HOC, config, threads=3,
                       progress=False)
        paths = [write_sweep(first, tmp_path / 'one.csv'),
                 write_sweep(second, tmp_path / 'two.csv')]
        for one, two in zip(*paths):
            assert one.read_bytes() == two.read_bytes()

    def test_non_finite_rows_written_as_null(self, tmp_path):
        frame = sweep(StorageTask(STORAGE_CONFIG), POST_HOC,
                      SweepConfig('t', (100.0,), n_seeds=1, relative_t=False), progress=False)
        _, json_path = write_sweep(frame, tmp_path / 'sweep.csv')
        rows = json.loads(json_path.read_text(encoding='utf-8'))
        assert rows[0]['lambda_mean'] is None


@pytest.mark.slow
class TestCalibSizeAcceptance:
    """Mean lambda_hat over the full calibration-size grid"""

    def test_lambda_nondecreasing_in_n(self):
        frame = sweep(StorageTask(STORAGE_CONFIG), POST_HOC,
                      SweepConfig('n', (25, 100, 400, 1600), n_seeds=10), progress=False)
        assert (frame['n_seeds'] == 10).all()
        assert frame['trend_ok'].all()
        assert sweep_passed(frame)


class TestHelpers:
    """Test trend checks and output"""

    def test_trend(self):
        frame = pd.DataFrame({'value': [25, 100, 400], 'n_seeds': [10, 10, 10],
                              'lambda_mean': [0.5, 0.6, 0.3],
                              'lambda_std': [0.01, 0.01, 0.01]})
        assert check_calib_size_trend(frame).tolist() == [True, True, False]

    def test_trend_within_se(self):
        frame = pd.DataFrame({'value': [25, 100], 'n_seeds': [4, 4],
                              'lambda_mean': [0.50, 0.49], 'lambda_std': [0.1, 0.1]})
        assert check_calib_size_trend(frame).all()

    def test_sweep_passed(self):
        frame = pd.DataFrame({'passed': [True, None, True]})
        assert sweep_passed(frame)
        assert not sweep_passed(pd.DataFrame({'passed': [True, False]}))
        assert not sweep_passed(pd.DataFrame({'passed': [True], 'trend_ok': [False]}))

    def test_write(self, tmp_path):
        frame = pd.DataFrame({'kind': ['n'], 'value': [25.0], 'passed': [True]})
        csv_path, json_path = write_sweep(frame, tmp_path / 'sweep.csv')
        assert pd.read_csv(csv_path).loc[0, 'value'] == 25.0
        assert json_path.suffix == '.json'


if __name__ == "__main__":
    pytest.main([__file__, '-v'])
