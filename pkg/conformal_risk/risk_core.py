# risk_core.py - Disutilities, OCE risks and the empirical functionals h / h~

"""
Optimized certainty-equivalent (OCE) risk measures

    R[X] = inf_t  t + E[phi(X - t)]

for a convex nondecreasing disutility phi with phi(0) = 0 and
1 in the subdifferential of phi at 0. Built-in disutilities:

    identity   phi(x) = x                 -> expectation
    cvar(d)    phi(x) = [x]_+ / (1 - d)   -> CVaR at level d
    entropic   phi(x) = exp(x) - 1        -> entropic risk

The calibration functionals mix N losses with the bound B:

    h(lam)    = (B(lam) + sum_i L_i(lam)) / (N + 1)
    h~_t(lam) = (t + phi(B(lam) - t) + sum_i (t + phi(L_i(lam) - t))) / (N + 1)
"""

from dataclasses import dataclass, field
import math

import numpy as np

from .exceptions import BoundViolation, EmptyCalibration, EmptySamples, NonFiniteObjective
from .loss_models import BOUND_TOLERANCE, ParamInterval, as_loss_set
from .search import golden_section_minimize
from .validators import validate_probability

ENTROPIC_CLAMP = 700.0
OCE_TOLERANCE = 1e-10

KINDS = ('identity', 'cvar', 'entropic')


def _scalar_or_array(value):
    return float(value) if np.ndim(value) == 0 else value


@dataclass(frozen=True)
class Disutility:
    """
    Disutility function phi of an OCE risk

    Args:
        kind (str): 'identity', 'cvar' or 'entropic'
        delta (float): CVaR quantile level in [0, 1) (cvar kind only)
    """

    kind: str = 'identity'
    delta: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"Unknown disutility kind: {self.kind}")
        if self.kind == 'cvar':
            is_valid, error = validate_probability(self.delta, 'delta')
            if not is_valid:
                raise ValueError(error)
        object.__setattr__(self, 'delta', float(self.delta))

    @classmethod
    def identity(cls):
        return cls('identity')

    @classmethod
    def cvar(cls, delta):
        return cls('cvar', delta)

    @classmethod
    def entropic(cls):
        return cls('entropic')

    @classmethod
    def parse(cls, text):
        """
        Parse 'identity', 'entropic' or 'cvar:<delta>'

        Examples:
            >>> Disutility.parse('cvar:0.9').delta
            0.9
        """
        kind, _, arg = str(text).strip().lower().partition(':')
        if kind == 'cvar':
            return cls.cvar(float(arg))
        if kind in ('identity', 'mean', 'expectation'):
            return cls.identity()
        if kind == 'entropic':
            return cls.entropic()
        raise ValueError(f"Unknown disutility '{text}'")

    def eval(self, x):
        """phi(x)"""
        x = np.asarray(x, dtype=float)
        if self.kind == 'identity':
            return _scalar_or_array(x.copy() if x.ndim else x)
        if self.kind == 'cvar':
            return _scalar_or_array(np.maximum(x, 0.0) / (1.0 - self.delta))
        if np.any(x > ENTROPIC_CLAMP):
            raise NonFiniteObjective(
                f"Entropic disutility argument exceeds {ENTROPIC_CLAMP:g}; exp would overflow")
        return _scalar_or_array(np.expm1(x))

    __call__ = eval

    def deriv(self, x):
        """phi'(x); the right derivative at the CVaR kink"""
        x = np.asarray(x, dtype=float)
        if self.kind == 'identity':
            return _scalar_or_array(np.ones_like(x))
        if self.kind == 'cvar':
            return _scalar_or_array(np.where(x >= 0, 1.0 / (1.0 - self.delta), 0.0))
        if np.any(x > ENTROPIC_CLAMP):
            raise NonFiniteObjective(
                f"Entropic disutility argument exceeds {ENTROPIC_CLAMP:g}; exp would overflow")
        return _scalar_or_array(np.exp(x))

    def second_deriv(self, x):
        """phi''(x); nan at the CVaR kink where it is undefined"""
        x = np.asarray(x, dtype=float)
        if self.kind == 'identity':
            return _scalar_or_array(np.zeros_like(x))
        if self.kind == 'cvar':
            return _scalar_or_array(np.where(x == 0, np.nan, 0.0))
        return self.deriv(x)

    @property
    def has_kink(self):
        return self.kind == 'cvar'

    def transform(self, values, t):
        """
        t + phi(values - t)

        The identity kind returns the values untouched so h~ with the
        identity disutility reproduces h bit for bit.
        """
        values = np.asarray(values, dtype=float)
        if self.kind == 'identity':
            return values
        return t + np.asarray(self.eval(values - t), dtype=float)

    def describe(self):
        return f"cvar:{self.delta!r}" if self.kind == 'cvar' else self.kind


@dataclass(frozen=True)
class RiskSpec:
    """
    Target risk level and OCE parameters for one calibration

    Args:
        alpha (float): Target risk level
        t (float): OCE shift hyperparameter
        disutility (Disutility): phi
        interval (ParamInterval): Lambda = [lambda_min, lambda_max]
    """

    alpha: float
    t: float = 0.0
    disutility: Disutility = field(default_factory=Disutility.identity)
    interval: ParamInterval = field(default_factory=ParamInterval)

    def t_window(self, bound):
        """[B(lambda_min), alpha], the admissible range of t for CVaR control"""
        return bound.evaluate(self.interval.lo), self.alpha

    def is_t_valid(self, bound):
        lo, hi = self.t_window(bound)
        return lo <= self.t <= hi


def _checked_values(loss_set, bound, lam):
    if loss_set.n == 0:
        raise EmptyCalibration("At least one calibration loss is required")
    values = loss_set.values(lam)
    bound_value = bound.evaluate(lam)
    limit = bound_value + BOUND_TOLERANCE * max(1.0, abs(bound_value))
    if np.any(values > limit):
        worst = int(np.argmax(values))
        raise BoundViolation(
            f"Loss {worst} equals {values[worst]:.6g} > B({lam:.6g}) = {bound_value:.6g}")
    return values, bound_value


def _aggregate(bound_term, loss_terms):
    # bound term first, then the losses in input order
    return float((bound_term + np.sum(loss_terms)) / (loss_terms.size + 1))


def empirical_h(losses, bound, lam):
    """
    h(lam) = (B(lam) + sum_i L_i(lam)) / (N + 1)

    Args:
        losses (list | LossSet): Calibration losses
        bound (BoundFn): Upper bound B
        lam (float): Parameter value

    Returns:
        float: h(lam)

    Raises:
        EmptyCalibration: No losses given
        BoundViolation: Some L_i(lam) > B(lam)
    """
    values, bound_value = _checked_values(as_loss_set(losses), bound, lam)
    return _aggregate(bound_value, values)


def empirical_h_tilde(losses, bound, lam, t, phi):
    """
    h~_t(lam) = (t + phi(B - t) + sum_i (t + phi(L_i - t))) / (N + 1)

    Args:
        losses (list | LossSet): Calibration losses
        bound (BoundFn): Upper bound B
        lam (float): Parameter value
        t (float): OCE shift
        phi (Disutility): Disutility

    Returns:
        float: h~_t(lam)
    """
    values, bound_value = _checked_values(as_loss_set(losses), bound, lam)
    return _aggregate(float(phi.transform(bound_value, t)), phi.transform(values, t))


def empirical_h_tilde_grid(losses, bound, lams, t, phi):
    """h~_t evaluated on every lambda of a grid"""
    loss_set = as_loss_set(losses)
    return np.array([empirical_h_tilde(loss_set, bound, lam, t, phi) for lam in lams])


def _validated_samples(samples):
    x = np.asarray(samples, dtype=float).ravel()
    if x.size == 0:
        raise EmptySamples("At least one sample is required")
    return x


def value_at_risk_empirical(samples, delta):
    """
    Lower empirical delta-quantile, the minimiser t* of the CVaR objective

    Returns:
        float: x_(k) with k = max(1, ceil(n * delta)) in ascending order
    """
    x = np.sort(_validated_samples(samples))
    is_valid, error = validate_probability(delta, 'delta')
    if not is_valid:
        raise ValueError(error)
    k = max(1, math.ceil(x.size * delta))
    return float(x[k - 1])


def cvar_empirical(samples, delta):
    """
    Empirical CVaR at level delta by the sorted-tail closed form

    min_t  t + mean([x_i - t]_+) / (1 - delta), attained at the lower
    empirical delta-quantile.

    Args:
        samples (list): Loss samples
        delta (float): Quantile level in [0, 1)

    Returns:
        float: CVaR estimate

    Examples:
        >>> cvar_empirical(range(1, 11), 0.8)
        9.5
    """
    x = _validated_samples(samples)
    t_star = value_at_risk_empirical(x, delta)
    tail = np.maximum(x - t_star, 0.0)
    return float(t_star + tail.sum() / (x.size * (1.0 - delta)))


def oce_objective(samples, phi, t):
    """t + mean(phi(x_i - t))"""
    x = _validated_samples(samples)
    return float(t + np.mean(phi.eval(x - t)))


def oce_risk_empirical(samples, phi, tol=OCE_TOLERANCE):
    """
    Empirical OCE risk inf_t t + mean(phi(x_i - t))

    The objective is convex in t and its minimiser lies in
    [min(x), max(x)], so golden-section search is exact up to tol; the
    result is polished at the samples next to the minimiser, where a
    piecewise-linear objective attains its minimum.

    Args:
        samples (list): Loss samples
        phi (Disutility): Disutility
        tol (float): Final bracket width in t

    Returns:
        float: OCE risk estimate

    Raises:
        EmptySamples: No samples
        NonFiniteObjective: phi overflowed
    """
    x = np.sort(_validated_samples(samples))

    def objective(t):
        value = oce_objective(x, phi, t)
        if not math.isfinite(value):
            raise NonFiniteObjective(f"OCE objective is not finite at t={t}")
        return value

    lo, hi = float(x[0]), float(x[-1])
    if lo == hi:
        return objective(lo)

    best_t, best_value, _ = golden_section_minimize(objective, lo, hi, tol=tol)

    k = int(np.searchsorted(x, best_t))
    for candidate in x[max(k - 2, 0):k + 2]:
        value = objective(float(candidate))
        if value < best_value:
            best_value = value

    return best_value
