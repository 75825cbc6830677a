# tests/test_storage_task.py - Unit tests for the battery storage task

import numpy as np
import pytest

from conformal_risk.exceptions import BoundViolation, ConfigError
from conformal_risk.grad import central_difference, relative_gradient_error
from conformal_risk.risk_core import cvar_empirical
from conformal_risk.storage_task import (
    FULL_HORIZON_DEFAULTS, StorageDataset, StorageTask, StorageTaskConfig,
    fine_tune_task_loss_grad, financial_losses,
    storage_decision, storage_decisions, storage_generate, storage_generate_splits,
    storage_losses, storage_pretrain, storage_slopes, task_loss,
)
from conformal_risk.training import TrainConfig, train

SMALL = StorageTaskConfig(n_train=100, n_cal=100, n_test=100)


@pytest.fixture(scope='module')
def splits():
    return storage_generate_splits(SMALL)


@pytest.fixture(scope='module')
def theta(splits):
    return storage_pretrain(splits['train'])


class TestStorageTaskConfig:
    """Test StorageTaskConfig validation"""

    def test_defaults_valid(self):
        assert StorageTaskConfig().validate() == []

    def test_bound_too_small(self):
        """Test that the slope envelope must fit under the bound"""
        with pytest.raises(ConfigError, match='bound_slope'):
            StorageTaskConfig.from_dict({'bound_slope': 20.0})

    def test_power_limits_from_full_horizon(self):
        config = StorageTaskConfig()
        assert (config.c_in, config.c_out) == (FULL_HORIZON_DEFAULTS['c_in'],
                                               FULL_HORIZON_DEFAULTS['c_out'])

    def test_invalid_delta(self):
        with pytest.raises(ConfigError):
            StorageTaskConfig.from_dict({'delta': 1.0})


class TestDecision:
    """Test the single-period storage decision"""

    def test_unclipped(self):
        assert storage_decision(-4.0, SMALL).z == pytest.approx(0.2)
        assert storage_decision(2.0, SMALL).z == pytest.approx(-0.1)

    def test_clipped(self):
        assert storage_decision(-100.0, SMALL).z == 0.5
        assert storage_decision(100.0, SMALL).z == -0.2

    def test_matches_grid_argmin(self):
        rng = np.random.default_rng(12)
        grid = np.linspace(-SMALL.c_out, SMALL.c_in, 70001)
        spacing = grid[1] - grid[0]
        for y_hat in rng.uniform(-20.0, 20.0, 200):
            objective = y_hat * grid + SMALL.eps_quad * grid ** 2
            assert storage_decision(y_hat, SMALL).z == pytest.approx(
                grid[np.argmin(objective)], abs=spacing)

    def test_scaled(self):
        assert storage_decision(-4.0, SMALL).scaled(0.5).z == pytest.approx(0.1)

    def test_vectorised_derivative(self):
        z, dz = storage_decisions([-4.0, -100.0, 100.0], SMALL)
        np.testing.assert_allclose(z, [0.2, 0.5, -0.2])
        np.testing.assert_allclose(dz, [-0.05, 0.0, 0.0])


class TestGenerate:
    """Test synthetic price generation"""

    def test_prices_clipped(self):
        data = storage_generate(SMALL, 500, np.random.default_rng(0))
        assert np.all(np.abs(data.prices) <= SMALL.price_clip)
        np.testing.assert_array_equal(data.features[:, 0], 1.0)

    def test_splits_disjoint(self, splits):
        assert [len(splits[k]) for k in ('train', 'cal', 'test')] == [100, 100, 100]
        assert not np.intersect1d(splits['train'].ids, splits['test'].ids).size

    def test_csv(self, tmp_path, splits):
        path = tmp_path / 'test.csv'
        splits['test'].to_csv(path)
        loaded = StorageDataset.read_csv(path)
        np.testing.assert_allclose(loaded.prices, splits['test'].prices)


class TestLosses:
    """Test financial losses and the task-loss cost"""

    def test_slopes_bounded(self, splits, theta):
        losses, _ = storage_losses(theta, splits['cal'], SMALL)
        slopes = np.array([loss.slope for loss in losses])
        assert np.all(np.abs(slopes) <= 0.9 * SMALL.bound_slope)
        assert np.any(slopes < 0) and np.any(slopes > 0)

    def test_bound_violation(self):
        config = StorageTaskConfig(bound_slope=1.0)
        data = StorageDataset([[1.0, 0.0, 0.0, 0.0]], [60.0])
        with pytest.raises(BoundViolation):
            storage_losses(np.array([-60.0, 0.0, 0.0, 0.0]), data, config)

    def test_financial_and_task_loss(self, splits, theta):
        losses, cost = storage_losses(theta, splits['test'], SMALL)
        np.testing.assert_allclose(financial_losses(theta, 0.7, splits['test'], SMALL),
                                   [loss(0.7) for loss in losses])
        assert cost.value(0.7) == pytest.approx(
            np.mean(task_loss(theta, 0.7, splits['test'], SMALL)))

    def test_cost_partials(self, splits, theta):
        """Test the cost partials against central differences"""
        data = splits['test']
        value, d_theta, d_lambda = storage_losses(theta, data, SMALL)[1].partials(0.6)

        def cost_at(th, lam=0.6):
            return storage_losses(th, data, SMALL)[1].value(lam)

        assert value == pytest.approx(cost_at(theta))
        assert relative_gradient_error(d_theta, central_difference(cost_at, theta)) < 1e-5
        numeric = (cost_at(theta, 0.6 + 1e-6) - cost_at(theta, 0.6 - 1e-6)) / 2e-6
        assert d_lambda == pytest.approx(numeric, abs=1e-5)

    def test_cross_gradient(self, splits, theta):
        data = splits['test']
        cost = storage_losses(theta, data, SMALL)[1]
        numeric = central_difference(lambda th: storage_losses(th, data, SMALL)[1].deriv(0.6),
                                     theta)
        assert relative_gradient_error(cost.cross_grad(0.6), numeric) < 1e-5

    def test_slope_gradients(self, splits, theta):
        data = splits['cal'].subset(np.arange(5))
        slopes, grads = storage_slopes(theta, data, SMALL)
        numeric = central_difference(lambda th: storage_slopes(th, data, SMALL)[0][2], theta)
        assert relative_gradient_error(grads[2], numeric) < 1e-5
        assert slopes.size == 5

    def test_convexity(self, splits, theta):
        cost = storage_losses(theta, splits['test'], SMALL)[1]
        assert cost.is_strictly_convex
        assert cost.objective().kind == 'strictly_convex'
        assert cost.second_deriv(0.3) > 0

    def test_fine_tune_gradient(self, splits, theta):
        value, grad = fine_tune_task_loss_grad(theta, splits['train'], SMALL)
        expected = storage_losses(theta, splits['train'], SMALL)[1].partials(1.0)
        assert value == pytest.approx(expected[0])
        np.testing.assert_allclose(grad, expected[1])


class TestStorageTask:
    """Test the storage task adapter"""

    def test_with_risk(self):
        task = StorageTask(SMALL).with_risk(4.0, 0.8)
        assert (task.alpha, task.delta) == (4.0, 0.8)
        assert StorageTask(SMALL).with_risk().alpha == 5.0

    def test_recalibrate_joint(self, splits, theta):
        task = StorageTask(SMALL)
        result = task.recalibrate(theta, splits['cal'])
        assert result.feasible
        assert 0.0 <= result.t_used <= task.alpha

    def test_recalibrate_fixed(self, splits, theta):
        task = StorageTask(SMALL)
        t = task.tune_t(theta, splits['train'])
        result = task.recalibrate(theta, splits['cal'], 'fixed', t)
        assert result.t_used == t
        assert 0.0 <= result.lambda_hat <= 1.0

    def test_lambda_grad_policies(self, splits, theta):
        task = StorageTask(SMALL)
        cal, pred = splits['cal'].subset(np.arange(50)), splits['cal'].subset(np.arange(50, 100))
        joint = task.lambda_grad(theta, cal, pred, TrainConfig(t_policy='joint'))
        assert joint.t is not None
        t = task.tune_t(theta, splits['train'])
        fixed = task.lambda_grad(theta, cal, pred, TrainConfig(t_policy='fixed'), t)
        assert fixed.t == t
        assert joint.grad.size == fixed.grad.size == theta.size

    def test_tuned_t_ignores_calibration_order(self, splits):
        """Test that t is tuned on training data only"""
        data = dict(splits)
        order = np.random.default_rng(4).permutation(100)
        permuted = dict(splits, cal=splits['cal'].subset(order))
        config = TrainConfig(epochs=0, t_policy='fixed')
        first = train(StorageTask(SMALL), config, data, progress=False)
        second = train(StorageTask(SMALL), config, permuted, progress=False)
        assert first.t_used == second.t_used
        assert first.lambda_hat == pytest.approx(second.lambda_hat, abs=1e-6)

    def test_evaluate(self, splits, theta):
        task = StorageTask(SMALL)
        metrics = task.evaluate(theta, 0.5, splits['test'])
        assert metrics['risk'] == pytest.approx(cvar_empirical(metrics['losses'], 0.9))
        assert metrics['cost'] == pytest.approx(np.mean(metrics['costs']))

    def test_calibrator(self, theta):
        task = StorageTask(SMALL)
        losses = task.loss_sampler(theta)(np.random.default_rng(0), 50)
        assert len(losses) == 50
        assert task.calibrator(t=1.0)(losses).t_used == 1.0
        assert 0.0 <= task.calibrator()(losses).lambda_hat <= 1.0


if __name__ == "__main__":
    pytest.main([__file__, '-v'])
