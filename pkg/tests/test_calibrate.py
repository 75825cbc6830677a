# tests/test_calibrate.py - Unit tests for post-hoc calibration

import math

import numpy as np
import pytest

from conformal_risk.calibrate import (
    CalibrationResult, conformal_cvar_control, corc_bisect, crc_bisect, default_t_grid,
    joint_lambda_t, lambda_hat_curve, tune_t,
)
from conformal_risk.exceptions import (
    EmptyCalibration, EmptyGrid, NonMonotoneLoss, UnsupportedProblem,
)
from conformal_risk.loss_models import BoundFn, LinearLoss, ParamInterval, StepLoss
from conformal_risk.risk_core import Disutility, RiskSpec

EPS = 1e-6
GRID = np.linspace(0.0, 1.0, 10001)


def indicator_losses(qs):
    return [StepLoss(0.0, [(q, 1.0)]) for q in qs]


def random_step_losses(rng, n, n_jumps=4):
    return [StepLoss(0.0, [(g, 1.0 / n_jumps) for g in rng.uniform(0, 1, n_jumps)])
            for _ in range(n)]


def grid_oracle(losses, bound, alpha, t=0.0, phi=None, grid=GRID):
    """Largest grid point with h~_t <= alpha (the first grid point if none)"""
    phi = phi or Disutility.identity()
    values = np.array([loss.evaluate(grid) for loss in losses])
    bound_values = np.broadcast_to(bound.evaluate(grid), grid.shape)
    h = (phi.transform(bound_values, t) + phi.transform(values, t).sum(axis=0)) / (len(losses) + 1)
    feasible = np.flatnonzero(h <= alpha)
    return grid[feasible[-1]] if feasible.size else grid[0]


def random_linear_instance(rng, n=30, bound_slope=34.0):
    slopes = np.clip(2.0 + 5.0 * rng.standard_t(3, n), -0.9 * bound_slope, 0.9 * bound_slope)
    return [LinearLoss(float(s)) for s in slopes]


class TestCRCBisect:
    """Test conformal risk control of the expected loss"""

    def test_indicator_example(self):
        """Test q = (0.2, 0.4, 0.6, 0.8), alpha = 0.5 gives 0.4"""
        result = crc_bisect(indicator_losses([0.2, 0.4, 0.6, 0.8]), BoundFn.constant(1.0),
                            0.5, EPS)
        assert 0.4 - EPS <= result.lambda_hat <= 0.4
        assert result.feasible
        assert result.h_tilde_at_lambda <= 0.5

    def test_slack_constraint(self):
        """Test that a never-binding constraint returns lambda_max"""
        result = crc_bisect(indicator_losses([0.2, 0.4]), BoundFn.constant(1.0), 1.0, EPS)
        assert result.lambda_hat == 1.0
        assert result.iterations == 0

    def test_infeasible(self):
        """Test the lambda_min fallback when h(lambda_min) > alpha"""
        result = crc_bisect([StepLoss(1.0)], BoundFn.constant(1.0), 0.5, EPS)
        assert result.lambda_hat == 0.0
        assert result.feasible == False

    def test_custom_interval(self):
        result = crc_bisect(indicator_losses([2.0, 4.0, 6.0, 8.0]), BoundFn.constant(1.0), 0.5,
                            EPS, ParamInterval(0.0, 10.0))
        assert result.lambda_hat == pytest.approx(4.0, abs=EPS)

    def test_errors(self):
        with pytest.raises(EmptyCalibration):
            crc_bisect([], BoundFn.constant(1.0), 0.5)
        with pytest.raises(ValueError):
            crc_bisect(indicator_losses([0.5]), BoundFn.constant(1.0), 0.5, eps=0.0)

    def test_matches_grid_oracle(self):
        """Test bisection against a dense grid on random instances"""
        rng = np.random.default_rng(0)
        bound = BoundFn.constant(1.0)
        for _ in range(100):
            losses = random_step_losses(rng, int(rng.integers(5, 40)))
            alpha = rng.uniform(0.05, 0.6)
            result = crc_bisect(losses, bound, alpha, EPS)
            assert abs(result.lambda_hat - grid_oracle(losses, bound, alpha)) <= EPS + 1e-4

    def test_result_dict(self):
        result = CalibrationResult(0.4, 0.0, 0.5, True, 20)
        assert result.to_dict() == {'lambda_hat': 0.4, 't_used': 0.0, 'h_tilde_at_lambda': 0.5,
                                    'feasible': True, 'iterations': 20}


class TestCORCBisect:
    """Test conformal OCE risk control"""

    def test_identity_equals_crc(self):
        """Test that identity phi reproduces crc_bisect exactly"""
        rng = np.random.default_rng(1)
        bound = BoundFn.constant(1.0)
        for _ in range(20):
            losses = random_step_losses(rng, 25)
            alpha = rng.uniform(0.1, 0.5)
            spec = RiskSpec(alpha, rng.normal(), Disutility.identity())
            crc = crc_bisect(losses, bound, alpha, EPS)
            corc = corc_bisect(losses, bound, spec, EPS)
            assert corc.lambda_hat == crc.lambda_hat
            assert corc.iterations == crc.iterations

    def test_cvar_matches_grid_oracle(self):
        rng = np.random.default_rng(2)
        losses = indicator_losses(rng.uniform(0, 1, 100))
        bound = BoundFn.constant(1.0)
        phi = Disutility.cvar(0.9)
        result = corc_bisect(losses, bound, RiskSpec(0.5, 0.3, phi), EPS)
        oracle = grid_oracle(losses, bound, 0.5, 0.3, phi)
        assert abs(result.lambda_hat - oracle) <= EPS + 1e-4

    def test_t_above_bound(self):
        """Test h~ = t once t >= B: lambda_max if t <= alpha, else lambda_min"""
        losses = indicator_losses([0.3, 0.6])
        bound = BoundFn.constant(1.0)
        phi = Disutility.cvar(0.9)
        assert corc_bisect(losses, bound, RiskSpec(1.0, 1.0, phi), EPS).lambda_hat == 1.0
        assert corc_bisect(losses, bound, RiskSpec(0.9, 1.0, phi), EPS).lambda_hat == 0.0

    def test_entropic(self):
        rng = np.random.default_rng(3)
        losses = random_step_losses(rng, 50)
        bound = BoundFn.constant(1.0)
        phi = Disutility.entropic()
        result = corc_bisect(losses, bound, RiskSpec(0.4, 0.0, phi), EPS)
        assert abs(result.lambda_hat - grid_oracle(losses, bound, 0.4, 0.0, phi)) <= EPS + 1e-4

    def test_rejects_decreasing_losses(self):
        with pytest.raises(NonMonotoneLoss):
            corc_bisect([LinearLoss(-1.0)], BoundFn.linear(1.0), RiskSpec(0.5), EPS)


class TestConformalCVaRControl:
    """Test CVaR control for losses monotone in either direction"""

    def test_guard_alpha_below_bound(self):
        """Test B(lambda_min) = 1 > alpha = 0.5 returns lambda_min at once"""
        result = conformal_cvar_control(indicator_losses([0.5]), BoundFn.constant(1.0), 0.5,
                                        0.9, 0.5, EPS)
        assert result.lambda_hat == 0.0
        assert result.feasible == False
        assert result.iterations == 0
        assert math.isnan(result.h_tilde_at_lambda)

    def test_guard_property(self):
        """Test that every t outside [B(lambda_min), alpha] gives lambda_min"""
        rng = np.random.default_rng(4)
        for _ in range(1000):
            bound = BoundFn.linear(34.0)
            losses = random_linear_instance(rng, 5)
            alpha = rng.uniform(0.5, 10.0)
            gap = rng.uniform(1e-6, 10.0)
            t = alpha + gap if rng.uniform() < 0.5 else -gap
            result = conformal_cvar_control(losses, bound, alpha, 0.9, t, EPS)
            assert result.lambda_hat == 0.0
            assert result.feasible == False

    def test_mixed_signs(self):
        """Test L1 = lam, L2 = -lam, B = 2 lam, t = 0, delta = 0.5 gives 0.5"""
        losses = [LinearLoss(1.0), LinearLoss(-1.0)]
        bound = BoundFn.linear(2.0)
        result = conformal_cvar_control(losses, bound, 1.0, 0.5, 0.0, EPS)
        oracle = grid_oracle(losses, bound, 1.0, 0.0, Disutility.cvar(0.5))
        assert result.lambda_hat == pytest.approx(0.5, abs=EPS)
        assert abs(result.lambda_hat - oracle) <= EPS + 1e-4

    def test_curve(self):
        rng = np.random.default_rng(5)
        losses = random_linear_instance(rng)
        grid = default_t_grid(BoundFn.linear(34.0), 5.0)
        curve = lambda_hat_curve(losses, BoundFn.linear(34.0), 5.0, 0.9, grid, EPS)
        assert len(curve) == 33
        assert [r.t_used for r in curve] == list(grid)

    def test_default_grid(self):
        grid = default_t_grid(BoundFn.linear(34.0), 5.0)
        assert grid[0] == 0.0 and grid[-1] == 5.0
        assert default_t_grid(BoundFn.constant(1.0), 0.5).size == 0


class TestTuneT:
    """Test t tuning on a holdout set"""

    def test_single_valid_t(self):
        rng = np.random.default_rng(6)
        holdout = random_linear_instance(rng)
        assert tune_t(holdout, BoundFn.linear(34.0), 5.0, 0.9, t_grid=[-1.0, 2.5, 7.0]) == 2.5

    def test_empty_grid(self):
        with pytest.raises(EmptyGrid):
            tune_t([LinearLoss(1.0)], BoundFn.linear(34.0), 5.0, 0.9, t_grid=[-1.0, 6.0])

    def test_ties_prefer_smaller_t(self):
        """Test that zero losses reach lambda_max for many t and the smallest wins"""
        holdout = [LinearLoss(0.0)] * 100
        assert tune_t(holdout, BoundFn.linear(34.0), 5.0, 0.9) == 0.0

    def test_picks_best_lambda(self):
        rng = np.random.default_rng(7)
        holdout = random_linear_instance(rng, 60)
        bound = BoundFn.linear(34.0)
        grid = default_t_grid(bound, 5.0)
        best = tune_t(holdout, bound, 5.0, 0.9, t_grid=grid)
        curve = lambda_hat_curve(holdout, bound, 5.0, 0.9, grid, EPS)
        assert (conformal_cvar_control(holdout, bound, 5.0, 0.9, best, EPS).lambda_hat
                == max(r.lambda_hat for r in curve))


class TestJointLambdaT:
    """Test the jointly optimal (lambda, t)"""

    def test_single_loss(self):
        """Test slope 1, B = lam, N = 1, delta = 0, alpha = 1 on [0, 10]"""
        result = joint_lambda_t([LinearLoss(1.0)], BoundFn.linear(1.0), 1.0, 0.0, EPS,
                                ParamInterval(0.0, 10.0))
        assert result.lambda_hat == pytest.approx(1.0, abs=1e-3)
        assert result.lambda_hat <= 1.0
        assert 0.0 <= result.t_used <= 1.0

    def test_dominates_fixed_t_grid(self):
        rng = np.random.default_rng(8)
        bound = BoundFn.linear(34.0)
        for _ in range(10):
            losses = random_linear_instance(rng)
            alpha = rng.uniform(2.0, 10.0)
            joint = joint_lambda_t(losses, bound, alpha, 0.9, EPS)
            grid = np.linspace(0.0, alpha, 100)
            curve = lambda_hat_curve(losses, bound, alpha, 0.9, grid, EPS)
            best = max(r.lambda_hat for r in curve)
            assert joint.lambda_hat >= best - 1e-4

    def test_infeasible(self):
        result = joint_lambda_t([LinearLoss(0.5)], BoundFn.constant(1.0), 0.5, 0.9, EPS)
        assert result.lambda_hat == 0.0
        assert result.feasible == False

    def test_unsupported_inputs(self):
        with pytest.raises(UnsupportedProblem):
            joint_lambda_t(indicator_losses([0.5]), BoundFn.linear(1.0), 0.5, 0.9)
        step_bound = BoundFn.from_step(StepLoss(1.0))
        with pytest.raises(UnsupportedProblem):
            joint_lambda_t([LinearLoss(0.5)], step_bound, 0.5, 0.9)


@pytest.mark.slow
class TestCalibrationOracles:
    """Full-size oracle comparisons"""

    def test_bisection_oracle_1000(self):
        rng = np.random.default_rng(10)
        bound = BoundFn.constant(1.0)
        for _ in range(1000):
            losses = random_step_losses(rng, int(rng.integers(5, 60)))
            alpha = rng.uniform(0.05, 0.6)
            result = crc_bisect(losses, bound, alpha, EPS)
            assert abs(result.lambda_hat - grid_oracle(losses, bound, alpha)) <= EPS + 1e-4

    def test_joint_dominance_200(self):
        rng = np.random.default_rng(11)
        bound = BoundFn.linear(34.0)
        for _ in range(200):
            losses = random_linear_instance(rng)
            alpha = rng.uniform(2.0, 10.0)
            joint = joint_lambda_t(losses, bound, alpha, 0.9, EPS)
            grid = np.linspace(0.0, alpha, 100)
            curve = lambda_hat_curve(losses, bound, alpha, 0.9, grid, EPS)
            best = max(r.lambda_hat for r in curve)
            assert joint.lambda_hat >= best - 1e-4


if __name__ == "__main__":
    pytest.main([__file__, '-v'])
