# calibrate.py - Post-hoc conformal risk control

"""
Post-hoc calibration of the risk-control parameter lambda.

    crc_bisect             - conformal risk control of the expected loss
    corc_bisect            - conformal OCE risk control for any disutility
    conformal_cvar_control - CVaR control for losses monotone in either direction
    tune_t                 - pick t on a holdout set (largest lambda wins)
    joint_lambda_t         - jointly optimal (lambda, t) for linear losses

Every routine bisects on h~_t, which is nondecreasing in lambda, and
returns the lower bracket so the returned lambda always satisfies
h~_t(lambda) <= alpha. If even lambda_min violates the constraint the
result falls back to lambda_min with feasible=False.
"""

from dataclasses import asdict, dataclass

import numpy as np

from .exceptions import EmptyCalibration, EmptyGrid, NonMonotoneLoss, UnsupportedProblem
from .logger import get_logger
from .loss_models import LinearLoss, ParamInterval, as_loss_set, check_nondecreasing
from .risk_core import Disutility, RiskSpec, empirical_h_tilde
from .search import bisect_sup, golden_section_minimize

logger = get_logger(__name__)

DEFAULT_EPS = 1e-6
DEFAULT_T_GRID_SIZE = 33
JOINT_ITERATIONS = 80


@dataclass(frozen=True)
class CalibrationResult:
    """Outcome of one calibration"""

    lambda_hat: float
    t_used: float
    h_tilde_at_lambda: float
    feasible: bool
    iterations: int

    def to_dict(self):
        return asdict(self)


def _check_eps(eps):
    if not eps > 0:
        raise ValueError(f"eps must be positive (got {eps})")


def _bisect(loss_set, bound, alpha, eps, t, phi, interval):
    def h_tilde(lam):
        return empirical_h_tilde(loss_set, bound, lam, t, phi)

    h_min = h_tilde(interval.lo)
    if h_min > alpha:
        logger.debug("h~(lambda_min)=%.6g > alpha=%.6g; falling back to lambda_min", h_min, alpha)
        return CalibrationResult(interval.lo, float(t), h_min, False, 0)

    h_max = h_tilde(interval.hi)
    if h_max <= alpha:
        return CalibrationResult(interval.hi, float(t), h_max, True, 0)

    lam, _, iterations = bisect_sup(lambda x: h_tilde(x) <= alpha, interval.lo, interval.hi, eps)
    return CalibrationResult(lam, float(t), h_tilde(lam), True, iterations)


def _nonempty_loss_set(losses):
    loss_set = as_loss_set(losses)
    if loss_set.n == 0:
        raise EmptyCalibration("At least one calibration loss is required")
    return loss_set


def crc_bisect(losses, bound, alpha, eps=DEFAULT_EPS, interval=None):
    """
    Conformal risk control of the expected loss

    Args:
        losses (list | LossSet): Nondecreasing calibration losses
        bound (BoundFn): Upper bound B
        alpha (float): Target expected loss
        eps (float): Bisection tolerance
        interval (ParamInterval): Lambda (default [0, 1])

    Returns:
        CalibrationResult: lambda_hat within eps of sup{lam : h(lam) <= alpha}
    """
    return corc_bisect(losses, bound, RiskSpec(alpha, 0.0, Disutility.identity(),
                                               interval or ParamInterval()), eps)


def corc_bisect(losses, bound, spec, eps=DEFAULT_EPS):
    """
    Conformal OCE risk control

    Args:
        losses (list | LossSet): Nondecreasing calibration losses
        bound (BoundFn): Upper bound B
        spec (RiskSpec): alpha, t, disutility and interval
        eps (float): Bisection tolerance

    Returns:
        CalibrationResult: Calibrated lambda
    """
    _check_eps(eps)
    loss_set = _nonempty_loss_set(losses)
    if not check_nondecreasing(loss_set):
        raise NonMonotoneLoss("CORC requires losses nondecreasing in lambda")
    return _bisect(loss_set, bound, spec.alpha, eps, spec.t, spec.disutility, spec.interval)


def conformal_cvar_control(losses, bound, alpha, delta, t, eps=DEFAULT_EPS, interval=None):
    """
    Conformal CVaR control for losses monotone in either direction

    Returns lambda_min at once (feasible=False) when alpha < B(lambda_min)
    or t lies outside [B(lambda_min), alpha]; otherwise runs CORC with
    the CVaR disutility.

    Args:
        losses (list | LossSet): Monotone calibration losses
        bound (BoundFn): Upper bound B
        alpha (float): CVaR target
        delta (float): CVaR quantile level
        t (float): Shift hyperparameter
        eps (float): Bisection tolerance
        interval (ParamInterval): Lambda (default [0, 1])

    Returns:
        CalibrationResult: Calibrated lambda
    """
    _check_eps(eps)
    interval = interval or ParamInterval()
    phi = Disutility.cvar(delta)
    loss_set = _nonempty_loss_set(losses)

    b_min = bound.evaluate(interval.lo)
    if alpha < b_min or not (b_min <= t <= alpha):
        logger.debug("t=%.6g outside [B(lambda_min)=%.6g, alpha=%.6g]; returning lambda_min",
                     t, b_min, alpha)
        return CalibrationResult(interval.lo, float(t), float('nan'), False, 0)

    return _bisect(loss_set, bound, alpha, eps, t, phi, interval)


def default_t_grid(bound, alpha, interval=None, size=DEFAULT_T_GRID_SIZE):
    """Uniform grid of t on [B(lambda_min), alpha] (empty if the window is empty)"""
    interval = interval or ParamInterval()
    b_min = bound.evaluate(interval.lo)
    if b_min > alpha:
        return np.empty(0)
    return np.linspace(b_min, alpha, size)


def lambda_hat_curve(losses, bound, alpha, delta, t_grid, eps=DEFAULT_EPS, interval=None):
    """
    Conformal CVaR control at every t of a grid

    Returns:
        list: CalibrationResult per grid value, in grid order
    """
    loss_set = _nonempty_loss_set(losses)
    return [conformal_cvar_control(loss_set, bound, alpha, delta, float(t), eps, interval)
            for t in t_grid]


def tune_t(holdout_losses, bound, alpha, delta, t_grid=None, eps=DEFAULT_EPS, interval=None):
    """
    Pick the t giving the largest lambda_hat on a holdout set

    The holdout must be disjoint from the calibration data. Grid values
    outside [B(lambda_min), alpha] are skipped; ties go to the smaller t.

    Args:
        holdout_losses (list | LossSet): Holdout losses
        bound (BoundFn): Upper bound B
        alpha (float): CVaR target
        delta (float): CVaR quantile level
        t_grid (list): Candidate t values (default: 33 points on the window)
        eps (float): Bisection tolerance
        interval (ParamInterval): Lambda (default [0, 1])

    Returns:
        float: Selected t

    Raises:
        EmptyGrid: No candidate inside the window
    """
    interval = interval or ParamInterval()
    if t_grid is None:
        t_grid = default_t_grid(bound, alpha, interval)

    b_min = bound.evaluate(interval.lo)
    candidates = sorted(float(t) for t in t_grid if b_min <= t <= alpha)
    if not candidates:
        raise EmptyGrid(f"No t in the grid lies inside [{b_min:.6g}, {alpha:.6g}]")

    loss_set = _nonempty_loss_set(holdout_losses)
    best_t, best_lambda = None, -np.inf
    for t, result in zip(candidates, lambda_hat_curve(loss_set, bound, alpha, delta,
                                                      candidates, eps, interval)):
        if result.lambda_hat > best_lambda:
            best_t, best_lambda = t, result.lambda_hat

    logger.debug("tune_t picked t=%.6g (lambda_hat=%.6g)", best_t, best_lambda)
    return best_t


def joint_lambda_t(losses, bound, alpha, delta, eps=DEFAULT_EPS, interval=None,
                   iterations=JOINT_ITERATIONS):
    """
    Jointly optimal (lambda, t) for linear losses

    Maximises lambda over {(lam, t) : h~_t(lam) <= alpha,
    B(lambda_min) <= t <= alpha}. That set is convex, so the best lambda
    for a fixed t is concave in t and golden-section search over t
    finds the optimum.

    Args:
        losses (list): LinearLoss instances
        bound (BoundFn): Linear (or constant) bound
        alpha (float): CVaR target
        delta (float): CVaR quantile level
        eps (float): Inner bisection tolerance
        interval (ParamInterval): Lambda (default [0, 1])
        iterations (int): Golden-section steps over t

    Returns:
        CalibrationResult: Best lambda with the t that achieves it
    """
    _check_eps(eps)
    interval = interval or ParamInterval()
    loss_set = _nonempty_loss_set(losses)
    if not all(isinstance(loss, LinearLoss) for loss in loss_set.losses):
        raise UnsupportedProblem("joint_lambda_t requires linear losses")
    if bound.kind not in ('linear', 'constant'):
        raise UnsupportedProblem("joint_lambda_t requires a linear bound")

    b_min = bound.evaluate(interval.lo)
    if alpha < b_min:
        logger.debug("alpha=%.6g < B(lambda_min)=%.6g; returning lambda_min", alpha, b_min)
        return CalibrationResult(interval.lo, float(b_min), float('nan'), False, 0)

    results = {}

    def negative_lambda(t):
        if t not in results:
            results[t] = conformal_cvar_control(loss_set, bound, alpha, delta, t, eps, interval)
        return -results[t].lambda_hat

    best_t, _, evaluations = golden_section_minimize(negative_lambda, b_min, alpha,
                                                     iterations=iterations)
    best = results[best_t]
    return CalibrationResult(best.lambda_hat, best.t_used, best.h_tilde_at_lambda,
                             best.feasible, evaluations)
