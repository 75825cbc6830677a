# training.py - Conformal risk training loop

"""
Conformal risk training.

Every mini-batch is split at random into a pseudo-calibration part and a
prediction part. lambda(theta) is calibrated on the first and
differentiated with respect to the model parameters, and the cost on the
second is minimised through

    dl/dtheta = partial_theta l + partial_lambda l * dlambda/dtheta

After training, lambda_hat is recalibrated on a held-out calibration
split that no batch ever touched, then the model is scored on the test
split.
"""

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import binomtest
from tqdm import tqdm

from .calibrate import DEFAULT_EPS
from .config import dataclass_from_dict
from .decorators import timer
from .exceptions import BatchTooSmall, ConfigError, DegenerateGradient, UnsupportedProblem
from .grad import full_cost_grad
from .logger import get_logger, log_success
from .validation import TrialReport
from .validators import (
    collect_errors, validate_choice, validate_count, validate_finite, validate_positive,
    validate_probability,
)

logger = get_logger(__name__)

T_POLICIES = ('fixed', 'retune_per_epoch', 'joint')


@dataclass(frozen=True)
class TrainConfig:
    """
    Args:
        epochs (int): Passes over the training split
        batch_size (int): Mini-batch size
        cal_fraction (float): Share of each batch used as pseudo-calibration data
        learning_rate (float): Gradient-descent step size
        alpha (float): Risk level override (default: the task's)
        delta (float): CVaR level override (default: the task's)
        t_policy (str): 'fixed', 'retune_per_epoch' or 'joint'
        t (float): t for the fixed policy (default: tuned once on the training split)
        average_neighbors (int): Neighbour averaging of piecewise gradients
        eps (float): Bisection tolerance of the final recalibration
        seed (int): Seed of batch order and splits
    """

    epochs: int = 20
    batch_size: int = 100
    cal_fraction: float = 0.5
    learning_rate: float = 0.05
    alpha: float | None = None
    delta: float | None = None
    t_policy: str = 'joint'
    t: float | None = None
    average_neighbors: int = 0
    eps: float = DEFAULT_EPS
    seed: int = 0

    def validate(self):
        checks = [
            validate_count(self.epochs, 'epochs', min_count=0),
            validate_count(self.batch_size, 'batch_size', min_count=2),
            validate_probability(self.cal_fraction, 'cal_fraction', allow_zero=False),
            validate_positive(self.learning_rate, 'learning_rate'),
            validate_choice(self.t_policy, T_POLICIES, 't_policy'),
            validate_count(self.average_neighbors, 'average_neighbors', min_count=0),
            validate_positive(self.eps, 'eps'),
            validate_count(self.seed, 'seed', min_count=0),
        ]
        if self.alpha is not None:
            checks.append(validate_finite(self.alpha, 'alpha'))
        if self.delta is not None:
            checks.append(validate_probability(self.delta, 'delta'))
        if self.t is not None:
            checks.append(validate_finite(self.t, 't'))
        return collect_errors(*checks)

    @classmethod
    def from_dict(cls, values):
        return dataclass_from_dict(cls, values)


@dataclass(frozen=True)
class StepResult:
    theta: np.ndarray
    cost: float
    lambda_value: float
    skipped: bool


@dataclass
class TrainResult:
    """Trained parameters, test report and training curve"""

    theta: np.ndarray
    report: TrialReport
    calibration: object
    history: list = field(default_factory=list)
    skipped_steps: int = 0
    t_used: float | None = None

    @property
    def lambda_hat(self):
        return self.calibration.lambda_hat

    def to_dict(self):
        return {
            'theta': np.asarray(self.theta).tolist(),
            'lambda_hat': float(self.lambda_hat),
            'calibration': self.calibration.to_dict(),
            't_used': None if self.t_used is None else float(self.t_used),
            'history': [float(c) for c in self.history],
            'skipped_steps': int(self.skipped_steps),
            'report': self.report.summary(),
        }


def split_batch(n, cal_fraction, rng):
    """
    Random (calibration, prediction) index split of a batch

    Raises:
        BatchTooSmall: Either part would be empty
    """
    if n < 2:
        raise BatchTooSmall(f"A batch of {n} cannot be split into two nonempty parts")
    n_cal = min(max(int(round(n * cal_fraction)), 1), n - 1)
    order = rng.permutation(n)
    return order[:n_cal], order[n_cal:]


def train_step(task, theta, batch, config, rng, t=None):
    """
    One conformal risk training update

    Args:
        task: Task adapter
        theta (np.ndarray): Current parameters
        batch: Task dataset holding one mini-batch
        config (TrainConfig): Training settings
        rng (np.random.Generator): Stream for the batch split
        t (float): Fixed CVaR shift (ignored by expectation tasks and the joint policy)

    Returns:
        StepResult: Updated theta with the batch cost and lambda
    """
    cal_idx, pred_idx = split_batch(len(batch), config.cal_fraction, rng)
    cal, pred = batch.subset(cal_idx), batch.subset(pred_idx)

    try:
        lambda_grad = task.lambda_grad(theta, cal, pred, config, t)
        lam = lambda_grad.value
    except DegenerateGradient as e:
        logger.warning("Degenerate dlambda/dtheta (%s); taking a partial_theta-only step", e)
        lambda_grad = None
        lam = task.recalibrate(theta, cal, config.t_policy, t, config.eps).lambda_hat

    cost, d_theta, d_lambda = task.cost_partials(theta, lam, pred)
    if lambda_grad is None:
        grad = np.asarray(d_theta, dtype=float)
    else:
        grad = full_cost_grad(theta, lambda_grad, (d_theta, d_lambda))

    new_theta = np.asarray(theta, dtype=float) - config.learning_rate * grad
    return StepResult(new_theta, float(cost), float(lam), lambda_grad is None)


def check_disjoint(data):
    """
    Raise if the calibration split shares example ids with training

    Raises:
        ConfigError: Overlapping splits
    """
    overlap = np.intersect1d(data['train'].ids, data['cal'].ids)
    if overlap.size:
        raise ConfigError(f"Calibration split overlaps training data ({overlap.size} ids)")


def _prepare(task, config, data):
    task = task.with_risk(config.alpha, config.delta)
    data = data if data is not None else task.generate()
    check_disjoint(data)
    return task, data


def _initial_t(task, config, theta, train):
    if task.risk_kind != 'cvar' or config.t_policy == 'joint':
        return None
    if config.t_policy == 'fixed' and config.t is not None:
        return float(config.t)
    t = task.tune_t(theta, train)
    logger.info("t=%.4f tuned on the training split", t)
    return t


def _finish(task, config, theta, data, t, history, skipped):
    calibration = task.recalibrate(theta, data['cal'], config.t_policy, t, config.eps)
    if not calibration.feasible:
        logger.warning("Final calibration infeasible; lambda_hat falls back to %.4f",
                       calibration.lambda_hat)
    metrics = task.evaluate(theta, calibration.lambda_hat, data['test'])
    report = TrialReport(calibration.lambda_hat, metrics['losses'], metrics['costs'],
                         task.risk_kind, task.alpha, getattr(task, 'delta', None),
                         seed=config.seed)
    t_used = calibration.t_used if task.risk_kind == 'cvar' else None
    return TrainResult(np.asarray(theta, dtype=float), report, calibration, history, skipped,
                       t_used)


@timer
def train(task, config, data=None, progress=True):
    """
    Conformal risk training followed by recalibration on held-out data

    Args:
        task: Task adapter (SegTask, StorageTask or ConfTrTask)
        config (TrainConfig): Training settings
        data (dict): 'train', 'cal' and 'test' splits (default: task.generate())
        progress (bool): Show a progress bar over epochs

    Returns:
        TrainResult: Final theta, test report and per-epoch mean cost

    Examples:
        >>> result = train(SegTask(), TrainConfig(epochs=0))  # doctest: +SKIP
        >>> result.report.passed  # doctest: +SKIP
        True
    """
    task, data = _prepare(task, config, data)
    train_data = data['train']
    rng = np.random.default_rng(config.seed)
    theta = task.initial_theta(train_data)
    t = _initial_t(task, config, theta, train_data)

    history, skipped = [], 0
    for epoch in tqdm(range(config.epochs), desc=f"train {task.name}", disable=not progress):
        if task.risk_kind == 'cvar' and config.t_policy == 'retune_per_epoch' and epoch > 0:
            t = task.tune_t(theta, train_data)

        order = rng.permutation(len(train_data))
        costs = []
        for start in range(0, order.size, config.batch_size):
            indices = order[start:start + config.batch_size]
            if indices.size < 2:
                continue
            step = train_step(task, theta, train_data.subset(indices), config, rng, t)
            theta = step.theta
            costs.append(step.cost)
            skipped += step.skipped

        history.append(float(np.mean(costs)) if costs else float('nan'))
        logger.debug("epoch %d: mean batch cost %.6g", epoch + 1, history[-1])

    if task.risk_kind == 'cvar' and config.t_policy == 'retune_per_epoch' and config.epochs:
        t = task.tune_t(theta, train_data)
    if skipped:
        logger.warning("%d of the training steps skipped dlambda/dtheta", skipped)

    result = _finish(task, config, theta, data, t, history, skipped)
    log_success(logger, "Trained %s: test risk %.4f, cost %.4f, lambda_hat %.4f",
                task.name, result.report.risk, result.report.mean_cost, result.lambda_hat)
    return result


def post_hoc(task, config, data=None):
    """Pretrained model with post-hoc calibration only"""
    return train(task, replace(config, epochs=0), data, progress=False)


@timer
def fine_tune(task, config, data=None, progress=True):
    """
    Decision-focused fine-tuning of the task loss at lambda = 1

    No risk control during training; lambda_hat is calibrated post-hoc
    on the held-out split afterwards.

    Raises:
        UnsupportedProblem: The task has no task-loss gradient
    """
    if not hasattr(task, 'task_loss_grad'):
        raise UnsupportedProblem(f"Task '{task.name}' has no task-loss gradient")

    task, data = _prepare(task, config, data)
    train_data = data['train']
    rng = np.random.default_rng(config.seed)
    theta = task.initial_theta(train_data)

    history = []
    for _ in tqdm(range(config.epochs), desc=f"fine-tune {task.name}", disable=not progress):
        order = rng.permutation(len(train_data))
        costs = []
        for start in range(0, order.size, config.batch_size):
            batch = train_data.subset(order[start:start + config.batch_size])
            cost, grad = task.task_loss_grad(theta, batch)
            theta = theta - config.learning_rate * np.asarray(grad, dtype=float)
            costs.append(cost)
        history.append(float(np.mean(costs)))

    t = _initial_t(task, config, theta, train_data)
    return _finish(task, config, theta, data, t, history, 0)


def sign_test(treated, baseline):
    """
    One-sided paired sign test that treated < baseline

    Ties are dropped.

    Returns:
        tuple: (wins, n_untied, p_value)

    Examples:
        >>> sign_test([1, 1, 1, 1, 1], [2, 2, 2, 2, 2])[2]
        0.03125
    """
    treated = np.asarray(treated, dtype=float)
    baseline = np.asarray(baseline, dtype=float)
    if treated.shape != baseline.shape:
        raise ValueError("sign_test needs paired samples of equal length")
    differences = baseline - treated
    wins = int(np.sum(differences > 0))
    untied = int(np.sum(differences != 0))
    if untied == 0:
        return 0, 0, 1.0
    return wins, untied, float(binomtest(wins, untied, 0.5, alternative='greater').pvalue)
