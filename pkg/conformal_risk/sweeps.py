# sweeps.py - Sensitivity sweeps over t, calibration size, alpha and delta

"""
Grid experiments on top of train().

Each grid point is run for n_seeds seeds (the seed drives both the
synthetic world and the batch order). One row per grid point reports
mean and std over seeds of lambda_hat, realised risk and realised cost,
plus the pooled risk over every seed's test losses and its acceptance
limit.

    t      fixed t; relative values mean t = (1 + value) * t0, where t0 is
           tuned on the training split of the same seed
    n      calibration split size (rows also carry the trend check)
    alpha  risk level
    delta  CVaR level (cvar tasks only)
"""

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import pandas as pd
from tqdm import tqdm

from .config import dataclass_from_dict, thread_count
from .decorators import timer
from .exceptions import UnsupportedProblem
from .formatters import json_ready
from .logger import get_logger, log_success
from .training import train
from .validation import TrialReport
from .validators import collect_errors, validate_choice, validate_count, validate_finite

logger = get_logger(__name__)

SWEEP_KINDS = ('t', 'n', 'alpha', 'delta')
RELATIVE_T_FLOOR = 1e-12


@dataclass(frozen=True)
class SweepConfig:
    """
    Args:
        kind (str): 't', 'n', 'alpha' or 'delta'
        values (tuple): Grid values
        n_seeds (int): Seeds per grid point
        relative_t (bool): Interpret t values as relative changes around the tuned t0
            (absolute offsets from t0 when t0 is zero)
        seed (int): First seed
    """

    kind: str = 't'
    values: tuple = (-0.1, -0.05, 0.0, 0.05, 0.1)
    n_seeds: int = 10
    relative_t: bool = True
    seed: int = 0

    def validate(self):
        checks = [
            validate_choice(self.kind, SWEEP_KINDS, 'kind'),
            validate_count(len(self.values), 'number of grid values'),
            validate_count(self.n_seeds, 'n_seeds'),
            validate_count(self.seed, 'seed', min_count=0),
        ]
        checks += [validate_finite(v, 'grid value') for v in self.values]
        if self.kind == 'n':
            checks += [validate_count(v, 'calibration size') for v in self.values]
        return collect_errors(*checks)

    @classmethod
    def from_dict(cls, values):
        return dataclass_from_dict(cls, values)


def _point_task(task, kind, value, seed):
    config = replace(task.config, seed=seed)
    if kind == 'alpha':
        config = replace(config, alpha=float(value))
    elif kind == 'delta':
        config = replace(config, delta=float(value))
    elif kind == 'n':
        config = replace(config, n_cal=int(value))
    return type(task)(config)


def _point_train_config(train_config, kind, seed):
    changes = {'seed': seed}
    if kind == 'alpha':
        changes['alpha'] = None
    if kind == 'delta':
        changes['delta'] = None
    return replace(train_config, **changes)


def _run_point(task, train_config, sweep_config, value, seed):
    kind = sweep_config.kind
    point_task = _point_task(task, kind, value, seed)
    config = _point_train_config(train_config, kind, seed)
    point_task = point_task.with_risk(config.alpha, config.delta)
    data = point_task.generate()

    if kind == 't':
        t = float(value)
        if sweep_config.relative_t:
            theta0 = point_task.initial_theta(data['train'])
            t0 = point_task.tune_t(theta0, data['train'])
            if abs(t0) < RELATIVE_T_FLOOR:
                logger.warning("Tuned t0=%.3g for seed %d; sweeping t0 + %.4g instead of a "
                               "relative change", t0, seed, value)
                t = t0 + float(value)
            else:
                t = (1.0 + value) * t0
        b_min = point_task.bound.evaluate(point_task.interval.lo)
        if not b_min <= t <= point_task.alpha:
            logger.debug("t=%.4f outside [%.4f, %.4f]; skipping seed %d", t, b_min,
                         point_task.alpha, seed)
            return None
        config = replace(config, t_policy='fixed', t=t)

    result = train(point_task, config, data, progress=False)
    return {
        'lambda_hat': result.lambda_hat,
        't': result.t_used,
        'risk': result.report.risk,
        'cost': result.report.mean_cost,
        'losses': result.report.losses,
        'costs': result.report.costs,
        'alpha': point_task.alpha,
        'delta': getattr(point_task, 'delta', None),
    }


def _row(task, sweep_config, value, runs):
    row = {'kind': sweep_config.kind, 'value': float(value), 'n_seeds': len(runs)}
    if not runs:
        for name in ('lambda', 'risk', 'cost'):
            row[f'{name}_mean'] = row[f'{name}_std'] = float('nan')
        row.update(pooled_risk=float('nan'), limit=float('nan'), passed=None)
        if sweep_config.kind == 't':
            row['t_mean'] = float('nan')
        return row

    for name, key in (('lambda', 'lambda_hat'), ('risk', 'risk'), ('cost', 'cost')):
        values = np.array([run[key] for run in runs], dtype=float)
        row[f'{name}_mean'] = float(np.mean(values))
        row[f'{name}_std'] = float(np.std(values))
    if sweep_config.kind == 't':
        row['t_mean'] = float(np.mean([run['t'] for run in runs]))

    pooled = TrialReport(
        np.concatenate([np.full(run['losses'].size, run['lambda_hat']) for run in runs]),
        np.concatenate([run['losses'] for run in runs]),
        np.concatenate([run['costs'] for run in runs]),
        task.risk_kind, runs[0]['alpha'], runs[0]['delta'], seed=sweep_config.seed)
    row.update(pooled_risk=pooled.risk, limit=pooled.limit, passed=pooled.passed)
    return row


def check_calib_size_trend(frame):
    """
    Mean lambda_hat nondecreasing in N within one pooled SE per step

    Args:
        frame (pd.DataFrame): Sweep rows with value, n_seeds, lambda_mean, lambda_std

    Returns:
        pd.Series: Per-row flag (the first row is always True)
    """
    ordered = frame.sort_values('value')
    means = ordered['lambda_mean'].to_numpy()
    variances = ordered['lambda_std'].to_numpy() ** 2 / np.maximum(ordered['n_seeds'], 1)
    ok = [True]
    for i in range(1, len(ordered)):
        pooled_se = np.sqrt(variances[i] + variances[i - 1])
        ok.append(bool(means[i] >= means[i - 1] - pooled_se))
    return pd.Series(ok, index=ordered.index).reindex(frame.index)


@timer
def sweep(task, train_config, sweep_config, threads=None, progress=True):
    """
    Run a sensitivity sweep

    Args:
        task: Task adapter
        train_config (TrainConfig): Training settings (epochs=0 gives post-hoc only)
        sweep_config (SweepConfig): Grid and seeds
        threads (int): Worker threads (default CONFORMAL_RISK_THREADS)
        progress (bool): Show a progress bar over grid points

    Returns:
        pd.DataFrame: One row per grid value, in grid order

    Raises:
        UnsupportedProblem: t or delta sweep on an expectation task
    """
    if sweep_config.kind in ('t', 'delta') and task.risk_kind != 'cvar':
        raise UnsupportedProblem(f"A {sweep_config.kind} sweep needs a cvar task")

    jobs = [(value, sweep_config.seed + i)
            for value in sweep_config.values for i in range(sweep_config.n_seeds)]

    def run(job):
        return _run_point(task, train_config, sweep_config, *job)

    with ThreadPoolExecutor(max_workers=threads or thread_count()) as pool:
        results = list(tqdm(pool.map(run, jobs), total=len(jobs),
                            desc=f"sweep {sweep_config.kind}", disable=not progress))

    rows = []
    for value in sweep_config.values:
        runs = [r for (v, _), r in zip(jobs, results) if v == value and r is not None]
        rows.append(_row(task, sweep_config, value, runs))
    frame = pd.DataFrame(rows)

    failed = frame[frame['passed'].eq(False)]
    if len(failed):
        logger.warning("Risk above the limit at %s = %s", sweep_config.kind,
                       failed['value'].tolist())

    if sweep_config.kind == 'n':
        frame['trend_ok'] = check_calib_size_trend(frame)
        if not frame['trend_ok'].all():
            logger.warning("Mean lambda_hat decreases with N beyond one pooled SE")
        else:
            log_success(logger, "Mean lambda_hat is nondecreasing in N")
    return frame


def sweep_passed(frame):
    """True when every evaluated row passed and any trend check held"""
    passed = frame['passed'].dropna()
    ok = bool(passed.astype(bool).all())
    if 'trend_ok' in frame:
        ok = ok and bool(frame['trend_ok'].all())
    return ok


def write_sweep(frame, path):
    """
    Write sweep rows as CSV with a JSON copy next to it

    Returns:
        tuple: (csv path, json path)
    """
    csv_path = Path(path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    json_path = csv_path.with_suffix('.json')
    frame.to_csv(csv_path, index=False)
    with open(json_path, 'w', encoding='utf-8') as f:
        json.dump(json_ready(frame.to_dict(orient='records')), f, indent=2, allow_nan=False)
    return csv_path, json_path
