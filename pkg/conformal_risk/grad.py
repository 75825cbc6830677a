# grad.py - Derivatives of the calibrated parameter lambda(theta)

"""
Exact derivatives of lambda(theta) with respect to the model parameters.

    lambda_grad_piecewise - step losses: lambda is one of the thresholds
    lambda_grad_kkt       - linear losses, fixed t: implicit differentiation
                            of the 2x2 KKT system of the inner problem
    lambda_grad_joint     - linear losses with t chosen jointly (CVaR)
    conftr_quantile_grad  - conformal training quantile special case
    full_cost_grad        - chain rule dl/dtheta + dl/dlambda * dlambda/dtheta

Models are linear in theta, so threshold and slope gradients are feature
vectors supplied by the caller. Degenerate points (tied thresholds,
losses on the CVaR kink, singular KKT systems) raise a subclass of
DegenerateGradient and the training loop skips the lambda term.
"""

from dataclasses import dataclass, field
from typing import Callable
import math

import numpy as np

from .exceptions import (
    DimensionMismatch, KinkAtSolution, SingularKKT, TieDetected, UnsupportedProblem,
)
from .logger import get_logger
from .loss_models import ParamInterval
from .risk_core import Disutility
from .search import bisect_sup
from .validators import validate_probability

logger = get_logger(__name__)

TIE_TOLERANCE = 1e-12
KINK_TOLERANCE = 1e-9
MAX_CONDITION = 1e12

# Guards ceil((N+1)(1-alpha)) against products like 9.000000000000002
QUANTILE_ROUNDING = 1e-9

KINDS = ('interior_max', 'active_jump', 'kkt', 'fallback_zero', 'boundary')
OBJECTIVE_KINDS = ('strictly_increasing', 'strictly_decreasing', 'strictly_convex')


@dataclass(frozen=True)
class ModelParams:
    """Parameter vector theta of a linear scorer or predictor"""

    theta: np.ndarray

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float).ravel()
        if not np.all(np.isfinite(theta)):
            raise ValueError("theta must have finite entries")
        theta.setflags(write=False)
        object.__setattr__(self, 'theta', theta)

    @property
    def dim(self):
        return self.theta.size


@dataclass(frozen=True)
class LambdaGrad:
    """
    lambda(theta) with its gradient

    kind is one of:
        interior_max  - lambda_max with the constraint slack, zero gradient
        active_jump   - a threshold of a step loss (index = its position)
        kkt           - solution of the convex inner problem (mu = multiplier)
        fallback_zero - infeasible, lambda_min with zero gradient
        boundary      - lambda_min chosen by the objective, zero gradient
    """

    value: float
    grad: np.ndarray
    kind: str
    index: int | None = None
    mu: float | None = None
    t: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"Unknown LambdaGrad kind: {self.kind}")
        grad = np.array(self.grad, dtype=float).ravel()
        grad.setflags(write=False)
        object.__setattr__(self, 'grad', grad)
        object.__setattr__(self, 'value', float(self.value))

    @property
    def is_zero(self):
        return self.kind in ('interior_max', 'fallback_zero', 'boundary')


def _zero(value, dim, kind, **extra):
    return LambdaGrad(value, np.zeros(dim), kind, **extra)


# -- piecewise constant losses ------------------------------------------------

def lambda_grad_piecewise(thresholds, bound, alpha, interval=None, phi=None, t=0.0,
                          bases=None, dim=None, average_neighbors=0):
    """
    lambda(theta) and its gradient for piecewise-constant losses

    h~ only changes at thresholds, so the largest feasible lambda is the
    first threshold at which the running h~ exceeds alpha, and its
    gradient is that threshold's gradient.

    Args:
        thresholds (list): Per calibration loss, a list of
            (threshold g, gradient of g, jump size) triples
        bound (BoundFn): Constant or step bound (step jumps do not move with theta)
        alpha (float): Target level
        interval (ParamInterval): Lambda (default [0, 1])
        phi (Disutility): Disutility (default identity)
        t (float): OCE shift
        bases (list): Loss values below every threshold (default 0)
        dim (int): Parameter dimension (inferred from the gradients)
        average_neighbors (int): If > 1, average the gradients of this many
            thresholds closest to the active one

    Returns:
        LambdaGrad: active_jump, interior_max or fallback_zero

    Raises:
        TieDetected: Two thresholds within 1e-12 of each other
        UnsupportedProblem: Linear bound (not piecewise constant)
    """
    interval = interval or ParamInterval()
    phi = phi or Disutility.identity()
    if bound.kind == 'linear':
        raise UnsupportedProblem("Piecewise gradients need a constant or step bound")

    n_losses = len(thresholds)
    locations, owners, sizes, grads = [], [], [], []
    for i, jumps in enumerate(thresholds):
        for g, g_grad, size in jumps:
            locations.append(float(g))
            owners.append(i)
            sizes.append(float(size))
            grads.append(np.asarray(g_grad, dtype=float).ravel())

    if dim is None:
        dim = grads[0].size if grads else 0
    if any(g.size != dim for g in grads):
        raise DimensionMismatch("Threshold gradients must all have the same length")

    # bound jumps act as thresholds owned by the bound (owner -1)
    for g, size in zip(bound.jump_locations.tolist(),
                       bound.step.sizes.tolist() if bound.kind == 'step' else []):
        locations.append(g)
        owners.append(-1)
        sizes.append(size)
        grads.append(np.zeros(dim))

    locations = np.asarray(locations, dtype=float)
    order = np.argsort(locations, kind='stable')
    locations = locations[order]
    if locations.size > 1:
        gaps = np.diff(locations)
        if np.any(gaps < TIE_TOLERANCE):
            k = int(np.argmin(gaps))
            raise TieDetected(
                f"Thresholds {locations[k]:.15g} and {locations[k + 1]:.15g} coincide")

    owners = np.asarray(owners, dtype=int)[order]
    sizes = np.asarray(sizes, dtype=float)[order]

    values = np.zeros(n_losses) if bases is None else np.array(bases, dtype=float)
    bound_value = bound.evaluate(interval.lo) if bound.kind == 'constant' else bound.step.base

    def transformed(x):
        return phi.transform(x, t)

    # state at lambda_min: every jump strictly below it has happened
    start = int(np.searchsorted(locations, interval.lo, side='left'))
    for owner, size in zip(owners[:start], sizes[:start]):
        if owner < 0:
            bound_value += size
        else:
            values[owner] += size

    terms = np.array(transformed(values), dtype=float)
    bound_term = float(transformed(bound_value))
    total = bound_term + float(np.sum(terms))
    n = n_losses + 1

    if total / n > alpha:
        return _zero(interval.lo, dim, 'fallback_zero')

    for position in range(start, locations.size):
        g = locations[position]
        if g >= interval.hi:
            break
        owner, size = owners[position], sizes[position]
        if owner < 0:
            bound_value += size
            new_term = float(transformed(bound_value))
            total += new_term - bound_term
            bound_term = new_term
        else:
            values[owner] += size
            new_term = float(transformed(values[owner]))
            total += new_term - terms[owner]
            terms[owner] = new_term

        if total / n > alpha:
            grad = _threshold_gradient(grads, order, locations, owners, position,
                                       average_neighbors)
            return LambdaGrad(g, grad, 'active_jump', index=position)

    return _zero(interval.hi, dim, 'interior_max')


def _threshold_gradient(grads, order, locations, owners, position, average_neighbors):
    active = grads[order[position]]
    if average_neighbors <= 1:
        return active.copy()

    movable = np.flatnonzero(owners >= 0)
    distance = np.abs(locations[movable] - locations[position])
    nearest = movable[np.argsort(distance, kind='stable')[:average_neighbors]]
    return np.mean([grads[order[j]] for j in nearest], axis=0)


# -- convex inner problems ----------------------------------------------------

@dataclass(frozen=True)
class ConvexObjective:
    """
    Objective of the inner problem in lambda

    Monotone objectives are replaced by lambda or -lambda, which leaves
    the solution unchanged. A strictly convex objective supplies its
    first and second lambda-derivatives and the theta-gradient of the
    first derivative.
    """

    kind: str = 'strictly_decreasing'
    deriv: Callable | None = None
    second_deriv: Callable | None = None
    cross_grad: Callable | None = None

    def __post_init__(self):
        if self.kind not in OBJECTIVE_KINDS:
            raise UnsupportedProblem(f"Unknown objective kind: {self.kind}")
        if self.kind == 'strictly_convex' and (self.deriv is None or self.second_deriv is None):
            raise UnsupportedProblem("A strictly convex objective needs deriv and second_deriv")

    @classmethod
    def increasing(cls):
        return cls('strictly_increasing')

    @classmethod
    def decreasing(cls):
        return cls('strictly_decreasing')

    @classmethod
    def convex(cls, deriv, second_deriv, cross_grad=None):
        return cls('strictly_convex', deriv, second_deriv, cross_grad)

    def d1(self, lam):
        if self.kind == 'strictly_increasing':
            return 1.0
        if self.kind == 'strictly_decreasing':
            return -1.0
        return float(self.deriv(lam))

    def d2(self, lam):
        if self.kind == 'strictly_convex':
            return float(self.second_deriv(lam))
        return 0.0

    def cross(self, lam, dim):
        if self.kind == 'strictly_convex' and self.cross_grad is not None:
            return np.asarray(self.cross_grad(lam), dtype=float).ravel()
        return np.zeros(dim)


def _as_objective(objective):
    if objective is None:
        return ConvexObjective.decreasing()
    if isinstance(objective, str):
        return ConvexObjective(objective)
    return objective


@dataclass
class _LinearConstraint:
    """h~_t for linear losses a_i * lam and bound b * lam"""

    slopes: np.ndarray
    slope_grads: np.ndarray
    bound_slope: float
    phi: Disutility
    t: float
    n: int = field(init=False)

    def __post_init__(self):
        self.n = self.slopes.size + 1

    def __call__(self, lam):
        bound_term = float(self.phi.transform(self.bound_slope * lam, self.t))
        return (bound_term + np.sum(self.phi.transform(self.slopes * lam, self.t))) / self.n

    def check_kinks(self, lam):
        if not self.phi.has_kink:
            return
        shifted = np.concatenate(([self.bound_slope * lam], self.slopes * lam)) - self.t
        close = np.abs(shifted) < KINK_TOLERANCE
        if np.any(close):
            raise KinkAtSolution(
                f"{int(close.sum())} transformed loss(es) on the CVaR kink at lambda={lam:.6g}")

    def derivatives(self, lam):
        """(h~', h~'', dh~/dtheta, dh~'/dtheta) at lam"""
        a, b = self.slopes, self.bound_slope
        d1 = np.asarray(self.phi.deriv(a * lam - self.t), dtype=float)
        d2 = np.asarray(self.phi.second_deriv(a * lam - self.t), dtype=float)
        b1 = float(self.phi.deriv(b * lam - self.t))
        b2 = float(self.phi.second_deriv(b * lam - self.t))
        h1 = (b * b1 + np.sum(a * d1)) / self.n
        h2 = (b * b * b2 + np.sum(a * a * d2)) / self.n
        h_theta = (d1 * lam) @ self.slope_grads / self.n
        h1_theta = (d1 + a * lam * d2) @ self.slope_grads / self.n
        return h1, h2, h_theta, h1_theta


@dataclass
class _JointCVaRConstraint:
    """G(lam) = min over t in [t_lo, alpha] of h~_t(lam) with the CVaR disutility"""

    slopes: np.ndarray
    slope_grads: np.ndarray
    bound_slope: float
    delta: float
    t_lo: float
    t_hi: float

    def _state(self, lam):
        v = np.concatenate(([self.bound_slope * lam], self.slopes * lam))
        n = v.size
        m = n * (1.0 - self.delta)
        k = max(1, math.ceil(n * self.delta))
        order = np.argsort(v, kind='stable')
        t_star = v[order[k - 1]]
        t = min(max(t_star, self.t_lo), self.t_hi)
        tail = v > t
        weights = tail / m
        if t == t_star:
            weights[order[k - 1]] += 1.0 - tail.sum() / m
        value = t + np.sum(np.maximum(v - t, 0.0)) / m
        return v, t, t == t_star, weights, value

    def __call__(self, lam):
        return self._state(lam)[4]

    def t_at(self, lam):
        return float(self._state(lam)[1])

    def check_kinks(self, lam):
        v, t, unclipped, _, _ = self._state(lam)
        close = np.abs(v - t) < KINK_TOLERANCE
        # the quantile point itself sits at t when t is not clipped
        if np.count_nonzero(close) > (1 if unclipped else 0):
            raise KinkAtSolution(f"Tied or kinked values at the CVaR quantile t={t:.6g}")

    def derivatives(self, lam):
        _, _, _, w, _ = self._state(lam)
        g1 = w[0] * self.bound_slope + np.sum(w[1:] * self.slopes)
        g_theta = (w[1:] * lam) @ self.slope_grads
        g1_theta = w[1:] @ self.slope_grads
        return g1, 0.0, g_theta, g1_theta


def _solve_inner(objective, constraint, interval, alpha):
    """Solve min objective s.t. constraint <= alpha; returns (lam, state)"""
    lo, hi = interval.lo, interval.hi
    if constraint(lo) > alpha:
        return lo, 'infeasible'

    if constraint(hi) <= alpha:
        lam_c, can_bind = hi, False
    else:
        lam_c = bisect_sup(lambda x: constraint(x) <= alpha, lo, hi, 0.0)[0]
        can_bind = True

    if objective.kind == 'strictly_increasing':
        return lo, 'lower'
    if objective.kind == 'strictly_convex':
        if objective.d1(lo) >= 0:
            return lo, 'lower'
        if objective.d1(lam_c) > 0:
            lam = bisect_sup(lambda x: objective.d1(x) <= 0, lo, lam_c, 0.0)[0]
            return lam, 'interior'

    return lam_c, ('active' if can_bind else 'upper')


def _kkt_solve(objective, constraint, lam, mu, alpha, dim):
    """dlambda/dtheta from the 2x2 implicit-function system"""
    h1, h2, h_theta, h1_theta = constraint.derivatives(lam)
    slack = constraint(lam) - alpha
    l2 = objective.d2(lam)
    jacobian = np.array([[l2 + (mu * h2 if mu else 0.0), h1],
                         [mu * h1, slack]])
    rhs = np.vstack([objective.cross(lam, dim) + (mu * h1_theta if mu else 0.0),
                     mu * h_theta])

    condition = np.linalg.cond(jacobian)
    if not np.isfinite(condition) or condition > MAX_CONDITION:
        raise SingularKKT(f"KKT Jacobian condition number {condition:.3g} at lambda={lam:.6g}")

    solution = -np.linalg.solve(jacobian, rhs)
    return solution[0]


def _differentiate(objective, constraint, interval, alpha, dim, t=None):
    lam, state = _solve_inner(objective, constraint, interval, alpha)
    if state == 'infeasible':
        logger.debug("Inner problem infeasible; lambda = lambda_min")
        return _zero(lam, dim, 'fallback_zero', t=t)
    if state == 'lower':
        return _zero(lam, dim, 'boundary', mu=0.0, t=t)
    if state == 'upper':
        return _zero(lam, dim, 'interior_max', mu=0.0, t=t)
    if state == 'interior':
        grad = _kkt_solve(objective, constraint, lam, 0.0, alpha, dim)
        return LambdaGrad(lam, grad, 'kkt', mu=0.0, t=t)

    constraint.check_kinks(lam)
    h1 = constraint.derivatives(lam)[0]
    if not h1 > 0:
        raise SingularKKT(f"Constraint derivative {h1:.3g} is not positive at the active solution")
    mu = -objective.d1(lam) / h1
    grad = _kkt_solve(objective, constraint, lam, mu, alpha, dim)
    return LambdaGrad(lam, grad, 'kkt', mu=mu, t=t)


def _slope_arrays(slopes, slope_grads):
    slopes = np.asarray(slopes, dtype=float).ravel()
    slope_grads = np.atleast_2d(np.asarray(slope_grads, dtype=float))
    if slopes.size == 0:
        raise UnsupportedProblem("At least one calibration loss is required")
    if slope_grads.shape[0] != slopes.size:
        raise DimensionMismatch(
            f"{slopes.size} slopes but {slope_grads.shape[0]} slope gradients")
    return slopes, slope_grads


def lambda_grad_kkt(slopes, slope_grads, bound_slope, alpha, phi=None, t=0.0, interval=None,
                    objective=None):
    """
    lambda(theta) for linear losses by differentiating the KKT conditions

    Solves  min_lam  l~(lam)  s.t.  h~_t(lam) <= alpha,  lam in Lambda
    where l~ is lambda / -lambda for monotone objectives or the strictly
    convex objective itself, then applies the implicit function theorem
    to the stationarity and complementary-slackness equations.

    Args:
        slopes (list): a_i(theta), loss i is a_i * lam
        slope_grads (array): N x D matrix of da_i/dtheta
        bound_slope (float): b, with B(lam) = b * lam
        alpha (float): Target level
        phi (Disutility): Disutility (default identity)
        t (float): OCE shift
        interval (ParamInterval): Lambda (default [0, 1])
        objective (ConvexObjective | str): Objective (default strictly decreasing)

    Returns:
        LambdaGrad: kkt (with mu), interior_max, boundary or fallback_zero

    Raises:
        KinkAtSolution: Some |a_i * lam - t| < 1e-9 with the CVaR disutility
        SingularKKT: Jacobian condition number above 1e12

    Examples:
        >>> result = lambda_grad_kkt([1.0, 2.0], [[1.0], [2.0]], 3.0, 1.0)
        >>> round(result.value, 12), round(float(result.grad[0]), 12)
        (0.5, -0.25)
    """
    interval = interval or ParamInterval()
    slopes, slope_grads = _slope_arrays(slopes, slope_grads)
    constraint = _LinearConstraint(slopes, slope_grads, float(bound_slope),
                                   phi or Disutility.identity(), float(t))
    return _differentiate(_as_objective(objective), constraint, interval, alpha,
                          slope_grads.shape[1], t=float(t))


def lambda_grad_joint(slopes, slope_grads, bound_slope, alpha, delta, interval=None,
                      objective=None):
    """
    lambda(theta) with t chosen jointly, for CVaR control of linear losses

    The constraint is G(lam) = min over t in [B(lambda_min), alpha] of
    h~_t(lam). Its minimiser is the empirical delta-quantile of the
    N + 1 values {b * lam, a_i * lam} clipped into the window, so G is
    the empirical CVaR of those values and is piecewise linear in lam.
    Its derivatives come from the CVaR sub-gradient weights: 1/m on the
    tail, 1 - c/m on the quantile point (c = tail count,
    m = (N + 1)(1 - delta)), 0 below; with t clipped they are the
    fixed-t weights.

    Args:
        slopes (list): a_i(theta)
        slope_grads (array): N x D matrix of da_i/dtheta
        bound_slope (float): b, with B(lam) = b * lam
        alpha (float): CVaR target
        delta (float): CVaR level
        interval (ParamInterval): Lambda (default [0, 1])
        objective (ConvexObjective | str): Objective (default strictly decreasing)

    Returns:
        LambdaGrad: as lambda_grad_kkt, with t set to the optimal shift
    """
    interval = interval or ParamInterval()
    slopes, slope_grads = _slope_arrays(slopes, slope_grads)
    dim = slope_grads.shape[1]
    t_lo = float(bound_slope) * interval.lo
    if alpha < t_lo:
        return _zero(interval.lo, dim, 'fallback_zero', t=t_lo)

    constraint = _JointCVaRConstraint(slopes, slope_grads, float(bound_slope), float(delta),
                                      t_lo, float(alpha))
    result = _differentiate(_as_objective(objective), constraint, interval, alpha, dim)
    return LambdaGrad(result.value, result.grad, result.kind, result.index, result.mu,
                      constraint.t_at(result.value))


# -- conformal training -------------------------------------------------------

def conftr_quantile_grad(scores, alpha, interval=None):
    """
    lambda(theta) = 1 - s_(k) for conformal training, k = ceil((N+1)(1-alpha))

    s_(k) is the k-th smallest of the N scores and a +inf sentinel. When
    the sentinel is selected (alpha < 1/(N+1)) the result is lambda_min
    with a zero gradient.

    Args:
        scores (list): (score value, score gradient) pairs
        alpha (float): Miscoverage level in (0, 1)
        interval (ParamInterval): Lambda (default [0, 1])

    Returns:
        LambdaGrad: active_jump (index = position of the selected score
            in the input) or fallback_zero

    Raises:
        TieDetected: The selected score is not unique
        ValueError: alpha outside (0, 1)

    Examples:
        >>> scores = [(s / 10, [1.0]) for s in range(1, 10)]
        >>> round(conftr_quantile_grad(scores, 0.1).value, 12)
        0.1
    """
    is_valid, error = validate_probability(alpha, 'alpha', allow_zero=False)
    if not is_valid:
        raise ValueError(error)
    interval = interval or ParamInterval()
    values = np.array([float(s) for s, _ in scores])
    grads = [np.asarray(g, dtype=float).ravel() for _, g in scores]
    dim = grads[0].size if grads else 0
    n = values.size

    k = math.ceil((n + 1) * (1.0 - alpha) - QUANTILE_ROUNDING)
    if k > n:
        return _zero(interval.lo, dim, 'fallback_zero')

    order = np.argsort(values, kind='stable')
    selected = int(order[k - 1])
    neighbours = [values[order[j]] for j in (k - 2, k) if 0 <= j < n]
    if any(abs(values[selected] - s) < TIE_TOLERANCE for s in neighbours):
        raise TieDetected(f"Score {values[selected]:.15g} at the order statistic is tied")

    return LambdaGrad(1.0 - values[selected], -grads[selected], 'active_jump', index=selected)


# -- chain rule and finite differences ----------------------------------------

def full_cost_grad(theta, lambda_grad, cost_partials):
    """
    dl/dtheta = partial_theta l + partial_lambda l * dlambda/dtheta

    Args:
        theta (array): Current parameters
        lambda_grad (LambdaGrad): lambda(theta) and its gradient
        cost_partials (tuple): (partial_theta l vector, partial_lambda l scalar)

    Returns:
        np.ndarray: Total gradient

    Raises:
        DimensionMismatch: Vector lengths disagree
    """
    dim = np.asarray(theta).size
    dl_dtheta, dl_dlambda = cost_partials
    dl_dtheta = np.asarray(dl_dtheta, dtype=float).ravel()
    if dl_dtheta.size != dim or lambda_grad.grad.size != dim:
        raise DimensionMismatch(
            f"theta has {dim} entries, dl/dtheta {dl_dtheta.size}, "
            f"dlambda/dtheta {lambda_grad.grad.size}")
    return dl_dtheta + float(dl_dlambda) * lambda_grad.grad


def central_difference(f, theta, step=1e-6):
    """Central finite-difference gradient of a scalar function of theta"""
    theta = np.asarray(theta, dtype=float).ravel()
    grad = np.empty_like(theta)
    for i in range(theta.size):
        shift = np.zeros_like(theta)
        shift[i] = step
        grad[i] = (f(theta + shift) - f(theta - shift)) / (2 * step)
    return grad


def relative_gradient_error(analytic, numeric):
    """max |analytic - numeric| / max(1, max |analytic|)"""
    analytic = np.asarray(analytic, dtype=float).ravel()
    numeric = np.asarray(numeric, dtype=float).ravel()
    if analytic.size != numeric.size:
        raise DimensionMismatch("Gradients must have the same length")
    if analytic.size == 0:
        return 0.0
    scale = max(1.0, float(np.max(np.abs(analytic))))
    return float(np.max(np.abs(analytic - numeric)) / scale)

