# tests/test_training.py - Unit tests for conformal risk training

import json
from dataclasses import replace

import numpy as np
import pytest

from conformal_risk.calibrate import CalibrationResult
from conformal_risk.conftr_task import ClassDataset
from conformal_risk.exceptions import (
    BatchTooSmall, ConfigError, TieDetected, UnsupportedProblem,
)
from conformal_risk.grad import LambdaGrad
from conformal_risk.seg_task import SegTask, SegTaskConfig
from conformal_risk.storage_task import StorageTask, StorageTaskConfig
from conformal_risk.training import (
    TrainConfig, check_disjoint, fine_tune, post_hoc, sign_test, split_batch, train, train_step,
)

SEG = SegTask(SegTaskConfig(d=16, n_train=40, n_cal=30, n_test=30))
STORAGE = StorageTask(StorageTaskConfig(n_train=100, n_cal=100, n_test=100))


class StubTask:
    """Task whose lambda gradient and cost partials are fixed"""

    name = 'stub'
    risk_kind = 'expectation'

    def __init__(self, d_lambda=0.0, degenerate=False):
        self.d_lambda = d_lambda
        self.degenerate = degenerate

    def lambda_grad(self, theta, cal, pred, train_config, t=None):
        if self.degenerate:
            raise TieDetected("tied thresholds")
        return LambdaGrad(0.5, [1.0, 1.0], 'kkt', mu=1.0)

    def recalibrate(self, theta, cal, policy='fixed', t=None, eps=1e-6):
        return CalibrationResult(0.25, 0.0, 0.0, True, 1)

    def cost_partials(self, theta, lam, pred):
        return 1.0, np.array([1.0, 0.0]), self.d_lambda


def stub_batch(n=6):
    return ClassDataset(np.zeros((n, 2)), np.zeros(n, dtype=int))


class TestTrainConfig:
    """Test TrainConfig validation"""

    def test_defaults_valid(self):
        assert TrainConfig().validate() == []

    @pytest.mark.parametrize('values', [
        {'learning_rate': 0.0},
        {'cal_fraction': 1.0},
        {'t_policy': 'bogus'},
        {'batch_size': 1},
        {'delta': 1.5},
    ])
    def test_invalid(self, values):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict(values)


class TestSplitBatch:
    """Test the random pseudo-calibration split"""

    def test_partition(self):
        cal, pred = split_batch(10, 0.5, np.random.default_rng(0))
        assert cal.size == pred.size == 5
        assert sorted(np.concatenate([cal, pred]).tolist()) == list(range(10))

    def test_both_parts_nonempty(self):
        cal, pred = split_batch(2, 0.99, np.random.default_rng(0))
        assert cal.size == pred.size == 1

    def test_too_small(self):
        with pytest.raises(BatchTooSmall):
            split_batch(1, 0.5, np.random.default_rng(0))


class TestTrainStep:
    """Test one training update"""

    def test_zero_lambda_partial_is_gradient_descent(self):
        config = TrainConfig(learning_rate=0.1)
        step = train_step(StubTask(0.0), np.zeros(2), stub_batch(), config,
                          np.random.default_rng(0))
        np.testing.assert_allclose(step.theta, [-0.1, 0.0])
        assert not step.skipped
        assert step.lambda_value == 0.5

    def test_chain_rule(self):
        config = TrainConfig(learning_rate=0.1)
        step = train_step(StubTask(2.0), np.zeros(2), stub_batch(), config,
                          np.random.default_rng(0))
        np.testing.assert_allclose(step.theta, [-0.3, -0.2])

    def test_degenerate_gradient_skips_lambda_term(self):
        config = TrainConfig(learning_rate=0.1)
        step = train_step(StubTask(2.0, degenerate=True), np.zeros(2), stub_batch(), config,
                          np.random.default_rng(0))
        np.testing.assert_allclose(step.theta, [-0.1, 0.0])
        assert step.skipped
        assert step.lambda_value == 0.25


class TestCheckDisjoint:
    """Test calibration hygiene"""

    def test_overlap(self):
        data = {'train': stub_batch(4), 'cal': stub_batch(3)}
        with pytest.raises(ConfigError):
            check_disjoint(data)

    def test_disjoint(self):
        data = {'train': stub_batch(4),
                'cal': ClassDataset(np.zeros((2, 2)), [0, 0], ids=[10, 11])}
        check_disjoint(data)


class TestTrain:
    """Test the training loop on the synthetic tasks"""

    def test_post_hoc_equals_zero_epochs(self):
        config = TrainConfig(epochs=0)
        trained = train(SEG, config, progress=False)
        baseline = post_hoc(SEG, config)
        assert trained.lambda_hat == baseline.lambda_hat
        np.testing.assert_array_equal(trained.theta, baseline.theta)
        assert trained.history == []

    def test_tiny_learning_rate_keeps_theta(self):
        data = SEG.generate()
        start = SEG.initial_theta(data['train'])
        result = train(SEG, TrainConfig(epochs=2, batch_size=20, learning_rate=1e-12), data,
                       progress=False)
        np.testing.assert_allclose(result.theta, start, atol=1e-8)

    def test_seg_training(self):
        result = train(SEG, TrainConfig(epochs=3, batch_size=20), progress=False)
        assert len(result.history) == 3
        assert result.t_used is None
        assert result.report.n_trials == 30
        summary = result.to_dict()
        json.dumps(summary)
        assert summary['lambda_hat'] == result.lambda_hat

    def test_seg_cost_falls_over_first_epochs(self):
        task = SegTask(SegTaskConfig(d=16, n_train=200, n_cal=50, n_test=50))
        result = train(task, TrainConfig(epochs=10, batch_size=40, learning_rate=0.05),
                       progress=False)
        assert len(result.history) == 10
        assert result.history[0] >= result.history[9]

    def test_alpha_override(self):
        result = train(SEG, TrainConfig(epochs=0, alpha=0.2), progress=False)
        assert result.report.alpha == 0.2

    def test_storage_fixed_t(self):
        config = TrainConfig(epochs=1, batch_size=50, learning_rate=0.01, t_policy='fixed', t=1.0)
        result = train(STORAGE, config, progress=False)
        assert result.t_used == 1.0
        assert result.report.risk_kind == 'cvar'

    def test_storage_joint(self):
        config = TrainConfig(epochs=1, batch_size=50, learning_rate=0.01)
        result = train(STORAGE, config, progress=False)
        assert 0.0 <= result.t_used <= STORAGE.alpha
        assert np.all(np.isfinite(result.theta))

    def test_storage_retune(self):
        config = TrainConfig(epochs=2, batch_size=50, learning_rate=0.01,
                             t_policy='retune_per_epoch')
        result = train(STORAGE, config, progress=False)
        assert result.t_used is not None

    def test_fine_tune(self):
        config = TrainConfig(epochs=1, batch_size=50, learning_rate=0.01)
        result = fine_tune(STORAGE, config, progress=False)
        assert len(result.history) == 1
        with pytest.raises(UnsupportedProblem):
            fine_tune(SEG, config, progress=False)


def paired_runs(make_task, train_config, n_seeds=10):
    """(trained, post-hoc) results on the same data for each seed"""
    runs = []
    for seed in range(n_seeds):
        task = make_task(seed)
        config = replace(train_config, seed=seed)
        data = task.generate()
        runs.append((train(task, config, data, progress=False), post_hoc(task, config, data)))
    return runs


@pytest.mark.slow
class TestTrainingDirection:
    """Conformal risk training against post-hoc calibration, paired over seeds"""

    def test_seg_fpr_drops(self):
        runs = paired_runs(
            lambda seed: SegTask(SegTaskConfig(alpha=0.1, n_train=400, n_cal=100, n_test=200,
                                               seed=seed)),
            TrainConfig(epochs=50, batch_size=40, learning_rate=0.05))
        trained = [r.report.mean_cost for r, _ in runs]
        baseline = [b.report.mean_cost for _, b in runs]
        wins, untied, p_value = sign_test(trained, baseline)
        assert p_value < 0.05, f"{wins}/{untied} wins"
        assert all(r.report.passed for r, _ in runs)

        falling = [np.all(np.diff(r.history[:10]) < 0) for r, _ in runs]
        assert sum(falling) >= 8

    def test_storage_task_loss_not_worse(self):
        runs = paired_runs(
            lambda seed: StorageTask(StorageTaskConfig(n_train=400, n_cal=400, n_test=400,
                                                       seed=seed)),
            TrainConfig(epochs=20, batch_size=100, learning_rate=0.01))
        trained = np.mean([r.report.mean_cost for r, _ in runs])
        baseline = np.mean([b.report.mean_cost for _, b in runs])
        assert trained <= baseline


class TestSignTest:
    """Test the paired sign test"""

    def test_all_wins(self):
        wins, untied, p = sign_test([1, 1, 1, 1, 1], [2, 2, 2, 2, 2])
        assert (wins, untied) == (5, 5)
        assert p == pytest.approx(0.03125)

    def test_ties_dropped(self):
        wins, untied, _ = sign_test([1, 2, 3], [2, 2, 2])
        assert (wins, untied) == (1, 2)

    def test_all_tied(self):
        assert sign_test([1, 2], [1, 2]) == (0, 0, 1.0)

    def test_unpaired(self):
        with pytest.raises(ValueError):
            sign_test([1, 2], [1])


if __name__ == "__main__":
    pytest.main([__file__, '-v'])
