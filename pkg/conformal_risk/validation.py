# validation.py - Monte Carlo checks of the risk-control guarantees

"""
Monte Carlo validation of the marginal guarantees.

Each trial draws N calibration losses and one test loss, calibrates
lambda on the N and records the test loss at lambda_hat. The guarantees
are marginal over calibration and test draw, so the pooled test losses
across trials are the right sample for the risk estimate:

    expectation  mean(L_test)               <= alpha + 3 SE
    cvar         cvar_delta(L_test pooled)  <= alpha + 0.05 |alpha|

Also home of TrialReport, the per-trial table shared with training and
sweeps, and two synthetic loss samplers.
"""

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from tqdm import tqdm

from .calibrate import DEFAULT_EPS, conformal_cvar_control, crc_bisect, tune_t
from .config import thread_count
from .decorators import timer
from .exceptions import DimensionMismatch, EmptyCalibration, EmptySamples
from .formatters import json_ready
from .logger import get_logger, log_success
from .loss_models import BoundFn, LinearLoss, ParamInterval, StepLoss, eval_loss
from .risk_core import cvar_empirical

logger = get_logger(__name__)

RISK_KINDS = ('expectation', 'cvar')
N_BOOTSTRAP = 1000
MEAN_SE_MULTIPLIER = 3.0
CVAR_SLACK = 0.05
MIN_TRIALS = 1000


def bootstrap_se(values, statistic=np.mean, n_resamples=N_BOOTSTRAP, rng=None):
    """
    Bootstrap standard error of a statistic

    Args:
        values (array): Sample
        statistic (callable): array -> float
        n_resamples (int): Bootstrap resamples
        rng (np.random.Generator): Random stream (default seeded with 0)

    Returns:
        float: Standard deviation of the resampled statistic (0 for one value)
    """
    values = np.asarray(values, dtype=float).ravel()
    if values.size == 0:
        raise EmptySamples("Cannot bootstrap an empty sample")
    if values.size == 1:
        return 0.0
    rng = rng or np.random.default_rng(0)
    stats = np.empty(n_resamples)
    for i in range(n_resamples):
        stats[i] = statistic(values[rng.integers(0, values.size, values.size)])
    return float(np.std(stats, ddof=1))


@dataclass(eq=False)
class TrialReport:
    """
    Per-trial lambda_hat, realised loss and cost with pooled aggregates

    A scalar lambdas is broadcast over the losses (one trained model
    evaluated on many test examples).
    """

    lambdas: np.ndarray
    losses: np.ndarray
    costs: np.ndarray | None = None
    risk_kind: str = 'expectation'
    alpha: float = 0.0
    delta: float | None = None
    n_bootstrap: int = N_BOOTSTRAP
    seed: int = 0
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.risk_kind not in RISK_KINDS:
            raise ValueError(f"risk_kind must be one of {RISK_KINDS} (got {self.risk_kind!r})")
        if self.risk_kind == 'cvar' and self.delta is None:
            raise ValueError("cvar reports need delta")

        self.losses = np.asarray(self.losses, dtype=float).ravel()
        if self.losses.size == 0:
            raise EmptySamples("A report needs at least one trial")
        self.lambdas = np.asarray(self.lambdas, dtype=float).ravel()
        if self.lambdas.size == 1:
            self.lambdas = np.full(self.losses.size, self.lambdas[0])
        if self.costs is not None:
            self.costs = np.asarray(self.costs, dtype=float).ravel()

        sizes = {self.lambdas.size, self.losses.size}
        if self.costs is not None:
            sizes.add(self.costs.size)
        if len(sizes) != 1:
            raise DimensionMismatch(
                f"lambdas ({self.lambdas.size}), losses ({self.losses.size}) and costs "
                f"({None if self.costs is None else self.costs.size}) differ in length")

    @property
    def n_trials(self):
        return self.losses.size

    def _statistic(self, values):
        if self.risk_kind == 'cvar':
            return cvar_empirical(values, self.delta)
        return float(np.mean(values))

    @property
    def risk(self):
        """Pooled mean or pooled empirical CVaR of the test losses"""
        return self._statistic(self.losses)

    @property
    def risk_se(self):
        if 'risk_se' not in self._cache:
            self._cache['risk_se'] = bootstrap_se(self.losses, self._statistic, self.n_bootstrap,
                                                  np.random.default_rng(self.seed))
        return self._cache['risk_se']

    @property
    def limit(self):
        if self.risk_kind == 'cvar':
            return self.alpha + CVAR_SLACK * abs(self.alpha)
        return self.alpha + MEAN_SE_MULTIPLIER * self.risk_se

    @property
    def passed(self):
        return bool(self.risk <= self.limit)

    @property
    def mean_cost(self):
        if self.costs is None or np.all(np.isnan(self.costs)):
            return float('nan')
        return float(np.nanmean(self.costs))

    @property
    def cost_se(self):
        if self.costs is None:
            return float('nan')
        finite = self.costs[np.isfinite(self.costs)]
        if finite.size < 2:
            return 0.0 if finite.size else float('nan')
        return float(np.std(finite, ddof=1) / np.sqrt(finite.size))

    def summary(self):
        """JSON-ready aggregates"""
        summary = {
            'risk_kind': self.risk_kind,
            'alpha': float(self.alpha),
            'delta': None if self.delta is None else float(self.delta),
            'n_trials': int(self.n_trials),
            'mean_lambda': float(np.mean(self.lambdas)),
            'std_lambda': float(np.std(self.lambdas)),
            'mean_loss': float(np.mean(self.losses)),
            'risk': self.risk,
            'risk_se': self.risk_se,
            'limit': self.limit,
            'passed': self.passed,
            'mean_cost': self.mean_cost,
            'cost_se': self.cost_se,
        }
        if self.delta is not None:
            summary['cvar'] = cvar_empirical(self.losses, self.delta)
        return summary

    def to_frame(self):
        return pd.DataFrame({
            'trial': np.arange(self.n_trials),
            'lambda_hat': self.lambdas,
            'loss': self.losses,
            'cost': self.costs if self.costs is not None else np.nan,
        })

    def write(self, path):
        """
        Write the per-trial CSV and a JSON summary next to it

        Returns:
            tuple: (csv path, json path)
        """
        csv_path = Path(path)
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        json_path = csv_path.with_suffix('.json')
        self.to_frame().to_csv(csv_path, index=False)
        with open(json_path, 'w', encoding='utf-8') as f:
            json.dump(json_ready(self.summary()), f, indent=2, allow_nan=False)
        return csv_path, json_path


def _lambda_of(result):
    return float(getattr(result, 'lambda_hat', result))


@timer
def validate_guarantee(loss_sampler, calibrator, n_trials, risk_kind='expectation', alpha=0.1,
                       delta=None, n_cal=100, seed=0, threads=None, progress=True,
                       n_bootstrap=N_BOOTSTRAP):
    """
    Monte Carlo check of a marginal risk guarantee

    Args:
        loss_sampler (callable): (rng, n) -> list of n i.i.d. losses
        calibrator (callable): losses -> CalibrationResult (or a float lambda)
        n_trials (int): Monte Carlo trials
        risk_kind (str): 'expectation' or 'cvar'
        alpha (float): Target level
        delta (float): CVaR level for risk_kind='cvar'
        n_cal (int): Calibration losses per trial
        seed (int): Base seed; trial i uses the i-th spawned child stream
        threads (int): Worker threads (default CONFORMAL_RISK_THREADS)
        progress (bool): Show a progress bar
        n_bootstrap (int): Resamples for the standard error

    Returns:
        TrialReport: Pooled test losses with the pass/fail verdict
    """
    if n_trials < 1:
        raise ValueError(f"n_trials must be at least 1 (got {n_trials})")
    if n_cal < 1:
        raise EmptyCalibration("n_cal must be at least 1")
    if n_trials < MIN_TRIALS:
        logger.debug("Only %d trials; the acceptance tolerance assumes %d or more",
                     n_trials, MIN_TRIALS)

    def run_trial(seed_sequence):
        rng = np.random.default_rng(seed_sequence)
        losses = loss_sampler(rng, n_cal + 1)
        if len(losses) < 2:
            raise EmptyCalibration("Loss sampler returned fewer than two losses")
        lam = _lambda_of(calibrator(losses[:-1]))
        return lam, eval_loss(losses[-1], lam)

    streams = np.random.SeedSequence(seed).spawn(n_trials)
    with ThreadPoolExecutor(max_workers=threads or thread_count()) as pool:
        results = list(tqdm(pool.map(run_trial, streams), total=n_trials,
                            desc=f"validate {risk_kind}", disable=not progress))

    lambdas, losses = (np.array(column, dtype=float) for column in zip(*results))
    report = TrialReport(lambdas, losses, None, risk_kind, alpha, delta, n_bootstrap, seed)

    if report.passed:
        log_success(logger, "Guarantee holds: %s risk %.4f <= %.4f over %d trials",
                    risk_kind, report.risk, report.limit, n_trials)
    else:
        logger.warning("Guarantee check failed: %s risk %.4f > %.4f over %d trials",
                       risk_kind, report.risk, report.limit, n_trials)
    return report


# -- synthetic loss samplers --------------------------------------------------

def synthetic_step_sampler(n_jumps=10):
    """
    FNR-style step losses: n_jumps jumps of size 1/n_jumps at Uniform(0, 1)

    Bounded by B = 1 on [0, 1].
    """
    def sample(rng, n):
        locations = rng.uniform(0.0, 1.0, (n, n_jumps))
        return [StepLoss(0.0, [(x, 1.0 / n_jumps) for x in row]) for row in locations]
    return sample


def synthetic_linear_sampler(bound_slope=34.0, scale=5.0, shift=2.0):
    """
    Mixed-sign linear losses slope * lam with heavy-tailed slopes

    Slopes are shift + scale * t(3), clipped to 0.9 of the bound slope so
    |L(lam)| <= B(lam) = bound_slope * lam.
    """
    limit = 0.9 * bound_slope

    def sample(rng, n):
        slopes = np.clip(shift + scale * rng.standard_t(3, n), -limit, limit)
        return [LinearLoss(float(s)) for s in slopes]
    return sample


def synthetic_problem(risk_kind, alpha, delta=None, n_cal=100, seed=0, eps=DEFAULT_EPS,
                      bound_slope=34.0):
    """
    Sampler and calibrator for the synthetic validation task

    The expectation kind uses step losses and CRC. The cvar kind uses
    linear losses with t tuned once on a holdout drawn from a stream
    disjoint from every trial.

    Returns:
        tuple: (loss_sampler, calibrator)
    """
    interval = ParamInterval(0.0, 1.0)
    if risk_kind == 'expectation':
        bound = BoundFn.constant(1.0)

        def calibrate(losses):
            return crc_bisect(losses, bound, alpha, eps, interval)
        return synthetic_step_sampler(), calibrate

    bound = BoundFn.linear(bound_slope)
    sampler = synthetic_linear_sampler(bound_slope)
    holdout = sampler(np.random.default_rng([seed, 99]), n_cal)
    t = tune_t(holdout, bound, alpha, delta, eps=eps, interval=interval)
    logger.info("Synthetic cvar task: t=%.4f tuned on a %d-loss holdout", t, n_cal)

    def calibrate(losses):
        return conformal_cvar_control(losses, bound, alpha, delta, t, eps, interval)
    return sampler, calibrate
