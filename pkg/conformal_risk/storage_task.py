# storage_task.py - Single-period battery storage with CVaR-controlled financial risk

"""
Synthetic battery storage task.

A linear price forecaster y_hat = theta . x drives the single-period
decision

    z*(y_hat) = argmin_{-c_out <= z <= c_in}  y_hat * z + eps * z^2
              = clip(-y_hat / (2 eps), -c_out, c_in)

and lambda in [0, 1] scales it ("decision scaling"; lambda * z* stays in
the box since the box contains 0). The controlled financial risk is the
linear loss L(lambda) = lambda * z* * y with slope of either sign, and
the training cost is the task loss f(y, lambda z*) = y lambda z* +
eps (lambda z*)^2, strictly convex in lambda whenever z* != 0.
"""

from dataclasses import dataclass, replace

import numpy as np
import pandas as pd

from .calibrate import DEFAULT_EPS, conformal_cvar_control, joint_lambda_t, tune_t
from .config import dataclass_from_dict
from .exceptions import BoundViolation
from .grad import ConvexObjective, lambda_grad_joint, lambda_grad_kkt
from .logger import get_logger
from .loss_models import BOUND_TOLERANCE, BoundFn, LinearLoss, ParamInterval
from .risk_core import Disutility, cvar_empirical
from .validators import (
    collect_errors, validate_count, validate_finite, validate_positive, validate_probability,
)

logger = get_logger(__name__)

# Constants of the 24-period battery problem the single-period task is scaled down from
FULL_HORIZON_DEFAULTS = {
    'horizon': 24,
    'capacity': 1.0,
    'efficiency': 0.9,
    'c_in': 0.5,
    'c_out': 0.2,
    'eps_flex': 0.1,
    'eps_ramp': 0.05,
    'bound_slope': 100.0,
}

# Generated slopes never exceed this share of the bound slope
BOUND_SAFETY = 0.9


@dataclass(frozen=True)
class StorageTaskConfig:
    """
    Args:
        c_in, c_out (float): Maximum charge / discharge per period
        eps_quad (float): Quadratic penalty weight eps
        delta (float): CVaR level
        alpha (float): CVaR cap on the financial loss
        bound_slope (float): b in B(lambda) = b * lambda
        feature_dim (int): D, including the bias feature
        price_scale (float): Scale of the price signal
        noise_scale (float): Scale of the Student-t (3 dof) price noise
        price_clip (float): Prices are clipped to [-price_clip, price_clip]
        n_train, n_cal, n_test (int): Examples per split
        seed (int): Seed of the ground truth and the default data draw
    """

    c_in: float = FULL_HORIZON_DEFAULTS['c_in']
    c_out: float = FULL_HORIZON_DEFAULTS['c_out']
    eps_quad: float = 10.0
    delta: float = 0.9
    alpha: float = 5.0
    bound_slope: float = 34.0
    feature_dim: int = 4
    price_scale: float = 10.0
    noise_scale: float = 5.0
    price_clip: float = 60.0
    n_train: int = 400
    n_cal: int = 400
    n_test: int = 400
    seed: int = 0

    @property
    def slope_envelope(self):
        """Largest |z* y| the generator can produce"""
        return max(self.c_in, self.c_out) * self.price_clip

    def validate(self):
        errors = collect_errors(
            validate_positive(self.c_in, 'c_in'),
            validate_positive(self.c_out, 'c_out'),
            validate_positive(self.eps_quad, 'eps_quad'),
            validate_probability(self.delta, 'delta'),
            validate_finite(self.alpha, 'alpha'),
            validate_positive(self.bound_slope, 'bound_slope'),
            validate_count(self.feature_dim, 'feature_dim', min_count=2),
            validate_positive(self.price_scale, 'price_scale'),
            validate_positive(self.noise_scale, 'noise_scale'),
            validate_positive(self.price_clip, 'price_clip'),
            validate_count(self.n_train, 'n_train'),
            validate_count(self.n_cal, 'n_cal'),
            validate_count(self.n_test, 'n_test'),
            validate_count(self.seed, 'seed', min_count=0),
        )
        if not errors and self.slope_envelope > BOUND_SAFETY * self.bound_slope:
            errors.append(
                f"bound_slope {self.bound_slope:g} too small: generated slopes reach "
                f"{self.slope_envelope:g} > {BOUND_SAFETY} * bound_slope")
        return errors

    @classmethod
    def from_dict(cls, values):
        return dataclass_from_dict(cls, values)


@dataclass(frozen=True)
class Decision:
    """Net charge z (negative = sell)"""

    z: float

    def scaled(self, lam):
        return Decision(lam * self.z)


class StorageDataset:
    """Examples as a (n, D) feature matrix and an (n,) price vector"""

    def __init__(self, features, prices, ids=None):
        self.features = np.atleast_2d(np.asarray(features, dtype=float))
        self.prices = np.asarray(prices, dtype=float).ravel()
        if self.features.shape[0] != self.prices.size:
            raise ValueError("features and prices must have the same number of rows")
        self.ids = np.arange(self.prices.size) if ids is None else np.asarray(ids, dtype=int)

    def __len__(self):
        return self.prices.size

    def subset(self, indices):
        indices = np.asarray(indices, dtype=int)
        return StorageDataset(self.features[indices], self.prices[indices], self.ids[indices])

    def to_frame(self):
        frame = pd.DataFrame(self.features,
                             columns=[f"x{k}" for k in range(self.features.shape[1])])
        frame.insert(0, 'example_id', self.ids)
        frame['price'] = self.prices
        return frame

    @classmethod
    def from_frame(cls, frame):
        feature_cols = [c for c in frame.columns if c.startswith('x')]
        return cls(frame[feature_cols].to_numpy(dtype=float),
                   frame['price'].to_numpy(dtype=float),
                   frame['example_id'].to_numpy(dtype=int))

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False)

    @classmethod
    def read_csv(cls, path):
        return cls.from_frame(pd.read_csv(path))


def storage_true_weights(config):
    """Ground-truth price weights, fixed by config.seed"""
    rng = np.random.default_rng(config.seed)
    weights = rng.normal(0.0, 1.0, config.feature_dim) / np.sqrt(config.feature_dim)
    weights[0] = 0.3
    return weights


def storage_generate(config, n=None, rng=None, start_id=0):
    """
    Draw (features, price) examples

    Prices are linear in the features plus heavy-tailed Student-t noise,
    clipped so |z* y| stays under BOUND_SAFETY * bound_slope.
    """
    if n is None:
        n = config.n_train + config.n_cal + config.n_test
    if rng is None:
        rng = np.random.default_rng([config.seed, 2])

    weights = storage_true_weights(config)
    x = rng.normal(size=(n, config.feature_dim))
    x[:, 0] = 1.0
    y = config.price_scale * (x @ weights) + config.noise_scale * rng.standard_t(3, size=n)
    y = np.clip(y, -config.price_clip, config.price_clip)
    return StorageDataset(x, y, np.arange(start_id, start_id + n))


def storage_generate_splits(config):
    """Disjoint train / cal / test splits of one seeded draw"""
    data = storage_generate(config)
    bounds = np.cumsum([config.n_train, config.n_cal])
    indices = np.arange(len(data))
    return {
        'train': data.subset(indices[:bounds[0]]),
        'cal': data.subset(indices[bounds[0]:bounds[1]]),
        'test': data.subset(indices[bounds[1]:]),
    }


def storage_pretrain(train):
    """Least-squares price forecaster"""
    theta, *_ = np.linalg.lstsq(train.features, train.prices, rcond=None)
    return theta


def storage_decision(y_hat, config):
    """
    Exact argmin of y_hat * z + eps * z^2 over [-c_out, c_in]

    Examples:
        >>> storage_decision(0.0, StorageTaskConfig()).z
        0.0
    """
    raw = -float(y_hat) / (2.0 * config.eps_quad)
    return Decision(float(np.clip(raw, -config.c_out, config.c_in)))


def storage_decisions(y_hat, config):
    """
    Vectorised decisions and dz*/dy_hat

    Returns:
        tuple: (z, dz_dyhat); the derivative is -1/(2 eps) inside the box
            and 0 where the box clips
    """
    raw = -np.asarray(y_hat, dtype=float) / (2.0 * config.eps_quad)
    z = np.clip(raw, -config.c_out, config.c_in)
    inside = (raw > -config.c_out) & (raw < config.c_in)
    return z, np.where(inside, -1.0 / (2.0 * config.eps_quad), 0.0)


class StorageCost:
    """
    Mean task loss over a batch as a function of lambda, with exact partials

        l(lam) = mean(y * lam * z + eps * lam^2 * z^2)
    """

    def __init__(self, z, prices, dz_dtheta, eps_quad):
        self.z = z
        self.prices = prices
        self.dz_dtheta = dz_dtheta
        self.eps = eps_quad

    def value(self, lam):
        return float(np.mean(self.prices * lam * self.z + self.eps * (lam * self.z) ** 2))

    def deriv(self, lam):
        return float(np.mean(self.prices * self.z + 2 * self.eps * lam * self.z ** 2))

    def second_deriv(self, lam):
        return float(2 * self.eps * np.mean(self.z ** 2))

    def cross_grad(self, lam):
        weights = self.prices + 4 * self.eps * lam * self.z
        return weights @ self.dz_dtheta / self.z.size

    def partials(self, lam):
        """(value, d/dtheta, d/dlambda)"""
        weights = self.prices * lam + 2 * self.eps * lam ** 2 * self.z
        return self.value(lam), weights @ self.dz_dtheta / self.z.size, self.deriv(lam)

    @property
    def is_strictly_convex(self):
        # examples with z* = 0 contribute a constant
        return bool(np.any(self.z != 0))

    def objective(self):
        if not self.is_strictly_convex:
            return ConvexObjective.decreasing()
        return ConvexObjective.convex(self.deriv, self.second_deriv, self.cross_grad)


def _decision_terms(theta, data, config):
    y_hat = data.features @ np.asarray(theta, dtype=float)
    z, dz_dyhat = storage_decisions(y_hat, config)
    return z, dz_dyhat[:, None] * data.features


def storage_losses(theta, data, config):
    """
    Financial-risk losses and the task-loss cost of a batch

    Args:
        theta (array): Forecaster parameters
        data (StorageDataset): Examples
        config (StorageTaskConfig): Task settings

    Returns:
        tuple: (list of LinearLoss with slope z* y, StorageCost)

    Raises:
        BoundViolation: A slope exceeds bound_slope
    """
    z, dz_dtheta = _decision_terms(theta, data, config)
    slopes = z * data.prices
    if slopes.size and slopes.max() > config.bound_slope * (1 + BOUND_TOLERANCE):
        raise BoundViolation(
            f"Slope {slopes.max():.6g} exceeds bound_slope {config.bound_slope:g}")
    losses = [LinearLoss(float(a)) for a in slopes]
    return losses, StorageCost(z, data.prices, dz_dtheta, config.eps_quad)


def storage_slopes(theta, data, config):
    """Slopes a_i = z*_i y_i and their theta-gradients y_i dz*_i/dtheta"""
    z, dz_dtheta = _decision_terms(theta, data, config)
    return z * data.prices, data.prices[:, None] * dz_dtheta


def task_loss(theta, lam, data, config):
    """Per-example task loss f(y, lam z*)"""
    z, _ = _decision_terms(theta, data, config)
    scaled = lam * z
    return data.prices * scaled + config.eps_quad * scaled ** 2


def financial_losses(theta, lam, data, config):
    """Per-example financial loss lam z* y"""
    z, _ = _decision_terms(theta, data, config)
    return lam * z * data.prices


def fine_tune_task_loss_grad(theta, data, config, lam=1.0):
    """
    Decision-focused gradient of the mean task loss at a fixed lambda

    The only theta-dependence is through the clip of z*, so the gradient
    vanishes for examples whose decision sits on the box.

    Returns:
        tuple: (mean task loss, gradient)
    """
    _, cost = storage_losses(theta, data, config)
    value, grad, _ = cost.partials(lam)
    return value, grad


class StorageTask:
    """Storage task adapter used by the training and validation harness"""

    name = 'storage'
    risk_kind = 'cvar'

    def __init__(self, config=None):
        self.config = config or StorageTaskConfig()
        self.bound = BoundFn.linear(self.config.bound_slope)
        self.interval = ParamInterval(0.0, 1.0)

    @property
    def alpha(self):
        return self.config.alpha

    @property
    def delta(self):
        return self.config.delta

    def with_risk(self, alpha=None, delta=None):
        changes = {k: v for k, v in (('alpha', alpha), ('delta', delta)) if v is not None}
        return StorageTask(replace(self.config, **changes)) if changes else self

    def generate(self):
        return storage_generate_splits(self.config)

    def sample(self, rng, n):
        return storage_generate(self.config, n, rng)

    def initial_theta(self, train):
        return storage_pretrain(train)

    def lambda_grad(self, theta, cal, pred, train_config, t=None):
        slopes, slope_grads = storage_slopes(theta, cal, self.config)
        _, cost = storage_losses(theta, pred, self.config)
        if train_config.t_policy == 'joint':
            return lambda_grad_joint(slopes, slope_grads, self.config.bound_slope, self.alpha,
                                     self.delta, self.interval, cost.objective())
        return lambda_grad_kkt(slopes, slope_grads, self.config.bound_slope, self.alpha,
                               Disutility.cvar(self.delta), t, self.interval, cost.objective())

    def cost_partials(self, theta, lam, pred):
        _, cost = storage_losses(theta, pred, self.config)
        return cost.partials(lam)

    def task_loss_grad(self, theta, batch):
        return fine_tune_task_loss_grad(theta, batch, self.config)

    def calibration_losses(self, theta, data):
        return storage_losses(theta, data, self.config)[0]

    def tune_t(self, theta, holdout):
        return tune_t(self.calibration_losses(theta, holdout), self.bound, self.alpha,
                      self.delta, interval=self.interval)

    def recalibrate(self, theta, cal, policy='joint', t=None, eps=DEFAULT_EPS):
        losses = self.calibration_losses(theta, cal)
        if policy == 'joint' or t is None:
            return joint_lambda_t(losses, self.bound, self.alpha, self.delta, eps, self.interval)
        return conformal_cvar_control(losses, self.bound, self.alpha, self.delta, t, eps,
                                      self.interval)

    def evaluate(self, theta, lam, test):
        risk = financial_losses(theta, lam, test, self.config)
        cost = task_loss(theta, lam, test, self.config)
        return {
            'losses': risk,
            'costs': cost,
            'risk': cvar_empirical(risk, self.delta),
            'cost': float(np.mean(cost)),
        }

    def loss_sampler(self, theta):
        """(rng, n) -> financial losses of n fresh examples under a fixed model"""
        def sample(rng, n):
            return self.calibration_losses(theta, storage_generate(self.config, n, rng))
        return sample

    def calibrator(self, eps=DEFAULT_EPS, t=None):
        """Joint (lambda, t) calibration, or fixed-t CVaR control when t is given"""
        def calibrate(losses):
            if t is None:
                return joint_lambda_t(losses, self.bound, self.alpha, self.delta, eps,
                                      self.interval)
            return conformal_cvar_control(losses, self.bound, self.alpha, self.delta, t, eps,
                                          self.interval)
        return calibrate
