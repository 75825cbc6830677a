# conftr_task.py - Conformal training as a special case of conformal risk training

"""
Multi-class classification with a linear softmax model.

Nonconformity scores are s(x, k) = 1 - softmax(W x)_k, the prediction set
is C(x; lambda) = {k : s(x, k) <= 1 - lambda} and the controlled loss is
miscoverage 1[s(x, y) > 1 - lambda]. Calibration reduces to an order
statistic, lambda = 1 - s_(ceil((N+1)(1-alpha))), and the training cost
is the soft set size

    max(0, sum_k sigmoid(((1 - lambda) - s(x, k)) / T) - 1)
"""

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit, softmax

from .calibrate import DEFAULT_EPS, crc_bisect
from .config import dataclass_from_dict
from .grad import conftr_quantile_grad
from .logger import get_logger
from .loss_models import BoundFn, ParamInterval, miscoverage_step_loss
from .validators import (
    collect_errors, validate_count, validate_positive, validate_probability,
)

logger = get_logger(__name__)

PRETRAIN_STEPS = 200
PRETRAIN_RATE = 0.5


@dataclass(frozen=True)
class ConfTrTaskConfig:
    """
    Args:
        n_classes (int): K
        feature_dim (int): D, including the bias feature
        n_train, n_cal, n_test (int): Examples per split
        alpha (float): Target miscoverage
        temperature (float): Soft set-size temperature T
        class_sep (float): Spread of the class centres
        seed (int): Seed of the class centres and the default data draw
    """

    n_classes: int = 5
    feature_dim: int = 4
    n_train: int = 400
    n_cal: int = 200
    n_test: int = 400
    alpha: float = 0.1
    temperature: float = 0.1
    class_sep: float = 1.5
    seed: int = 0

    def validate(self):
        return collect_errors(
            validate_count(self.n_classes, 'n_classes', min_count=2),
            validate_count(self.feature_dim, 'feature_dim', min_count=2),
            validate_count(self.n_train, 'n_train'),
            validate_count(self.n_cal, 'n_cal'),
            validate_count(self.n_test, 'n_test'),
            validate_probability(self.alpha, 'alpha', allow_zero=False),
            validate_positive(self.temperature, 'temperature'),
            validate_positive(self.class_sep, 'class_sep'),
            validate_count(self.seed, 'seed', min_count=0),
        )

    @classmethod
    def from_dict(cls, values):
        return dataclass_from_dict(cls, values)


class ClassDataset:
    """(n, D) features and (n,) integer labels"""

    def __init__(self, features, labels, ids=None):
        self.features = np.atleast_2d(np.asarray(features, dtype=float))
        self.labels = np.asarray(labels, dtype=int).ravel()
        self.ids = np.arange(self.labels.size) if ids is None else np.asarray(ids, dtype=int)

    def __len__(self):
        return self.labels.size

    def subset(self, indices):
        indices = np.asarray(indices, dtype=int)
        return ClassDataset(self.features[indices], self.labels[indices], self.ids[indices])


def class_centres(config):
    rng = np.random.default_rng(config.seed)
    return rng.normal(0.0, config.class_sep, (config.n_classes, config.feature_dim - 1))


def conftr_generate(config, n=None, rng=None, start_id=0):
    """Gaussian classes around seeded centres"""
    if n is None:
        n = config.n_train + config.n_cal + config.n_test
    if rng is None:
        rng = np.random.default_rng([config.seed, 3])

    centres = class_centres(config)
    labels = rng.integers(0, config.n_classes, n)
    x = np.ones((n, config.feature_dim))
    x[:, 1:] = centres[labels] + rng.normal(size=(n, config.feature_dim - 1))
    return ClassDataset(x, labels, np.arange(start_id, start_id + n))


def conftr_generate_splits(config):
    data = conftr_generate(config)
    bounds = np.cumsum([config.n_train, config.n_cal])
    indices = np.arange(len(data))
    return {
        'train': data.subset(indices[:bounds[0]]),
        'cal': data.subset(indices[bounds[0]:bounds[1]]),
        'test': data.subset(indices[bounds[1]:]),
    }


def _weights(theta, n_classes):
    return np.asarray(theta, dtype=float).reshape(n_classes, -1)


def conftr_probabilities(theta, data, n_classes):
    return softmax(data.features @ _weights(theta, n_classes).T, axis=1)


def conftr_pretrain(train, n_classes):
    """Softmax regression by plain gradient descent on cross-entropy"""
    dim = train.features.shape[1]
    weights = np.zeros((n_classes, dim))
    onehot = np.eye(n_classes)[train.labels]
    for _ in range(PRETRAIN_STEPS):
        probs = softmax(train.features @ weights.T, axis=1)
        weights -= PRETRAIN_RATE * (probs - onehot).T @ train.features / len(train)
    return weights.ravel()


def conftr_scores(theta, data, n_classes):
    """
    Nonconformity scores and their gradients

    Returns:
        tuple: (n, K) scores and (n, K, K*D) gradients of each score
    """
    probs = conftr_probabilities(theta, data, n_classes)
    x = data.features
    eye = np.eye(n_classes)
    # d p_k / d W_j = p_k (1[j = k] - p_j) x
    dp = probs[:, :, None] * (eye[None, :, :] - probs[:, None, :])
    grads = -(dp[:, :, :, None] * x[:, None, None, :]).reshape(len(data), n_classes, -1)
    return 1.0 - probs, grads


def conftr_true_scores(theta, data, n_classes):
    """(score, gradient) of the true class for each example"""
    scores, grads = conftr_scores(theta, data, n_classes)
    rows = np.arange(len(data))
    return list(zip(scores[rows, data.labels], grads[rows, data.labels]))


def soft_set_size(theta, lam, data, n_classes, temperature):
    """
    Mean soft set size over a batch with its partial derivatives

    Returns:
        tuple: (value, d/dtheta, d/dlambda)
    """
    scores, grads = conftr_scores(theta, data, n_classes)
    sigma = expit(((1.0 - lam) - scores) / temperature)
    slope = sigma * (1.0 - sigma) / temperature
    excess = sigma.sum(axis=1) - 1.0
    active = excess > 0

    value = float(np.mean(np.where(active, excess, 0.0)))
    d_theta = -np.einsum('nk,nkp->np', slope, grads)
    d_theta = (d_theta * active[:, None]).sum(axis=0) / len(data)
    d_lambda = float(-(slope.sum(axis=1) * active).sum() / len(data))
    return value, d_theta, d_lambda


def prediction_sets(theta, lam, data, n_classes):
    """Boolean (n, K) membership of the conformal prediction sets"""
    scores, _ = conftr_scores(theta, data, n_classes)
    return scores <= 1.0 - lam


def coverage_and_size(theta, lam, data, n_classes):
    """Per-example coverage indicator and hard set size"""
    sets = prediction_sets(theta, lam, data, n_classes)
    covered = sets[np.arange(len(data)), data.labels]
    return covered.astype(float), sets.sum(axis=1).astype(float)


def conftr_demo(theta, cal_data, alpha, n_classes, pred_data=None, temperature=0.1):
    """
    Conformal training step quantities

    Args:
        theta (array): Flattened K x D weights
        cal_data (ClassDataset): Pseudo-calibration examples
        alpha (float): Miscoverage level
        n_classes (int): K
        pred_data (ClassDataset): Examples for the set-size cost (default cal_data)
        temperature (float): Soft set-size temperature

    Returns:
        tuple: (lambda, dlambda/dtheta, average soft set size)
    """
    result = conftr_quantile_grad(conftr_true_scores(theta, cal_data, n_classes), alpha)
    size, _, _ = soft_set_size(theta, result.value, pred_data or cal_data, n_classes,
                               temperature)
    return result.value, result.grad, size


class ConfTrTask:
    """ConfTr task adapter used by the training and validation harness"""

    name = 'conftr'
    risk_kind = 'expectation'

    def __init__(self, config=None):
        self.config = config or ConfTrTaskConfig()
        self.bound = BoundFn.constant(1.0)
        self.interval = ParamInterval(0.0, 1.0)

    @property
    def alpha(self):
        return self.config.alpha

    def with_risk(self, alpha=None, delta=None):
        if alpha is None:
            return self
        return ConfTrTask(replace(self.config, alpha=alpha))

    def generate(self):
        return conftr_generate_splits(self.config)

    def sample(self, rng, n):
        return conftr_generate(self.config, n, rng)

    def initial_theta(self, train):
        return conftr_pretrain(train, self.config.n_classes)

    def lambda_grad(self, theta, cal, pred, train_config, t=None):
        scores = conftr_true_scores(theta, cal, self.config.n_classes)
        return conftr_quantile_grad(scores, self.alpha, self.interval)

    def cost_partials(self, theta, lam, pred):
        return soft_set_size(theta, lam, pred, self.config.n_classes, self.config.temperature)

    def calibration_losses(self, theta, data):
        scores = conftr_true_scores(theta, data, self.config.n_classes)
        return [miscoverage_step_loss(s) for s, _ in scores]

    def tune_t(self, theta, holdout):
        return None

    def recalibrate(self, theta, cal, policy='fixed', t=None, eps=DEFAULT_EPS):
        return crc_bisect(self.calibration_losses(theta, cal), self.bound, self.alpha, eps,
                          self.interval)

    def evaluate(self, theta, lam, test):
        covered, size = coverage_and_size(theta, lam, test, self.config.n_classes)
        return {
            'losses': 1.0 - covered,
            'costs': size,
            'risk': float(1.0 - covered.mean()),
            'cost': float(size.mean()),
        }

    def loss_sampler(self, theta):
        def sample(rng, n):
            return self.calibration_losses(theta, conftr_generate(self.config, n, rng))
        return sample

    def calibrator(self, eps=DEFAULT_EPS):
        def calibrate(losses):
            return crc_bisect(losses, self.bound, self.alpha, eps, self.interval)
        return calibrate
