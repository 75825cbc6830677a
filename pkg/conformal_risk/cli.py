# cli.py - Command line interface

"""
conformal-risk command line.

    conformal-risk calibrate --losses FILE --bound SPEC --alpha A
                             [--delta D --t T | --tune-t HOLDOUT | --joint] [--eps E]
    conformal-risk validate  --task {seg|storage|synthetic} --risk {mean|cvar}
                             --alpha A [--delta D] --trials K --out report.csv
    conformal-risk train     --task {seg|storage|conftr} --config FILE --out DIR
    conformal-risk sweep     --kind {t|n|alpha|delta} --config FILE --out report.csv

Exit status: 0 on success, 1 if a guarantee check failed, 2 on invalid
input.
"""

import argparse
import json
import sys
from pathlib import Path

import pandas as pd

from .calibrate import (
    DEFAULT_EPS, conformal_cvar_control, corc_bisect, joint_lambda_t, tune_t,
)
from .config import load_config
from .conftr_task import ConfTrTask, ConfTrTaskConfig
from .exceptions import ConfigError, ConformalRiskError, UnsupportedProblem
from .formatters import format_table, json_ready
from .logger import get_logger, set_level
from .loss_models import BoundFn, ParamInterval, read_losses
from .risk_core import Disutility, RiskSpec
from .seg_task import SegTask, SegTaskConfig
from .storage_task import StorageTask, StorageTaskConfig
from .sweeps import SWEEP_KINDS, SweepConfig, sweep, sweep_passed, write_sweep
from .training import TrainConfig, fine_tune, post_hoc, train
from .validation import synthetic_problem, validate_guarantee

logger = get_logger(__name__)

TASKS = {
    'seg': (SegTask, SegTaskConfig),
    'storage': (StorageTask, StorageTaskConfig),
    'conftr': (ConfTrTask, ConfTrTaskConfig),
}

SUMMARY_COLUMNS = ['run', 'mean_lambda', 'risk', 'limit', 'passed', 'mean_cost', 'cost_se']


def make_task(name, values=None):
    """Build a task adapter from its name and config overrides"""
    if name not in TASKS:
        raise ConfigError(f"Unknown task '{name}'. Must be one of: {', '.join(TASKS)}")
    task_cls, config_cls = TASKS[name]
    return task_cls(config_cls.from_dict(values or {}))


# -- calibrate ----------------------------------------------------------------

def _require_delta(args, mode):
    if args.delta is None:
        raise ConfigError(f"{mode} needs --delta")


def run_calibrate(args):
    losses = read_losses(args.losses)
    bound = BoundFn.parse(args.bound)
    interval = ParamInterval(args.lambda_min, args.lambda_max)

    if args.joint:
        _require_delta(args, '--joint')
        result = joint_lambda_t(losses, bound, args.alpha, args.delta, args.eps, interval)
    elif args.tune_t:
        _require_delta(args, '--tune-t')
        t = tune_t(read_losses(args.tune_t), bound, args.alpha, args.delta, eps=args.eps,
                   interval=interval)
        result = conformal_cvar_control(losses, bound, args.alpha, args.delta, t, args.eps,
                                        interval)
    elif args.delta is not None:
        if args.t is None:
            raise ConfigError("--delta needs --t, --tune-t or --joint")
        result = conformal_cvar_control(losses, bound, args.alpha, args.delta, args.t, args.eps,
                                        interval)
    else:
        spec = RiskSpec(args.alpha, args.t or 0.0, Disutility.parse(args.phi), interval)
        result = corc_bisect(losses, bound, spec, args.eps)

    if not result.feasible:
        logger.warning("No feasible lambda; returning lambda_min=%.6g", result.lambda_hat)
    print(json.dumps(json_ready(result.to_dict()), indent=2, allow_nan=False))
    return 0


# -- validate -----------------------------------------------------------------

def run_validate(args):
    risk_kind = 'expectation' if args.risk == 'mean' else 'cvar'
    if risk_kind == 'cvar' and args.delta is None:
        raise ConfigError("--risk cvar needs --delta")

    if args.task == 'synthetic':
        sampler, calibrator = synthetic_problem(risk_kind, args.alpha, args.delta, args.n_cal,
                                                args.seed)
    else:
        task = make_task(args.task, load_config(args.config)['task'])
        task = task.with_risk(args.alpha, args.delta)
        if task.risk_kind != risk_kind:
            raise UnsupportedProblem(f"Task '{args.task}' controls {task.risk_kind} risk")
        data = task.generate()
        theta = task.initial_theta(data['train'])
        sampler = task.loss_sampler(theta)
        if risk_kind == 'cvar':
            # joint calibration is too slow per trial; t is tuned once on training data
            calibrator = task.calibrator(t=task.tune_t(theta, data['train']))
        else:
            calibrator = task.calibrator()

    report = validate_guarantee(sampler, calibrator, args.trials, risk_kind, args.alpha,
                                args.delta, args.n_cal, args.seed, progress=args.progress)
    csv_path, json_path = report.write(args.out)
    summary = report.summary()
    print(format_table([{'run': args.task, **summary}], SUMMARY_COLUMNS))
    logger.info("Wrote %s and %s", csv_path, json_path)
    return 0 if report.passed else 1


# -- train --------------------------------------------------------------------

def run_train(args):
    config = load_config(args.config)
    task = make_task(args.task, config['task'])
    train_config = TrainConfig.from_dict(config['train'])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    data = task.with_risk(train_config.alpha, train_config.delta).generate()
    runs = {'trained': train(task, train_config, data, progress=args.progress)}
    if args.baseline:
        runs['post_hoc'] = post_hoc(task, train_config, data)
        if hasattr(task, 'task_loss_grad'):
            runs['fine_tuned'] = fine_tune(task, train_config, data, progress=args.progress)

    rows = []
    for name, result in runs.items():
        result.report.write(out / f'{name}_report.csv')
        with open(out / f'{name}_result.json', 'w', encoding='utf-8') as f:
            json.dump(json_ready(result.to_dict()), f, indent=2, allow_nan=False)
        rows.append({'run': name, **result.report.summary()})

    history = runs['trained'].history
    pd.DataFrame({'epoch': range(1, len(history) + 1), 'mean_cost': history}).to_csv(
        out / 'history.csv', index=False)

    print(format_table(rows, SUMMARY_COLUMNS))
    return 0 if all(row['passed'] for row in rows) else 1


# -- sweep --------------------------------------------------------------------

def run_sweep(args):
    config = load_config(args.config)
    task = make_task(args.task, config['task'])
    train_config = TrainConfig.from_dict(config['train'])
    values = dict(config['sweep'])
    if args.kind:
        values['kind'] = args.kind
    sweep_config = SweepConfig.from_dict(values)

    frame = sweep(task, train_config, sweep_config, progress=args.progress)
    csv_path, json_path = write_sweep(frame, args.out)
    print(format_table(frame.to_dict(orient='records')))
    logger.info("Wrote %s and %s", csv_path, json_path)
    return 0 if sweep_passed(frame) else 1


def build_parser():
    parser = argparse.ArgumentParser(
        prog='conformal-risk',
        description='Conformal risk control, conformal risk training and Monte Carlo checks')
    parser.add_argument('--log-level', help='DEBUG, INFO, WARNING or ERROR')
    parser.add_argument('--no-progress', dest='progress', action='store_false',
                        help='Hide progress bars')
    commands = parser.add_subparsers(dest='command', required=True)

    calibrate = commands.add_parser('calibrate', help='Calibrate lambda on a loss file')
    calibrate.add_argument('--losses', required=True, help='Loss file, one loss per line')
    calibrate.add_argument('--bound', required=True,
                           help="Bound spec, e.g. 'constant:1' or 'linear:100'")
    calibrate.add_argument('--alpha', type=float, required=True)
    calibrate.add_argument('--delta', type=float, help='CVaR level')
    calibrate.add_argument('--t', type=float, help='OCE shift t')
    mode = calibrate.add_mutually_exclusive_group()
    mode.add_argument('--tune-t', metavar='HOLDOUT', help='Tune t on a holdout loss file')
    mode.add_argument('--joint', action='store_true', help='Joint (lambda, t) for linear losses')
    calibrate.add_argument('--phi', default='identity',
                           help="Disutility without --delta: 'identity', 'entropic' or 'cvar:D'")
    calibrate.add_argument('--eps', type=float, default=DEFAULT_EPS)
    calibrate.add_argument('--lambda-min', type=float, default=0.0)
    calibrate.add_argument('--lambda-max', type=float, default=1.0)
    calibrate.set_defaults(handler=run_calibrate)

    validate = commands.add_parser('validate', help='Monte Carlo check of a guarantee')
    validate.add_argument('--task', choices=('seg', 'storage', 'synthetic'), required=True)
    validate.add_argument('--risk', choices=('mean', 'cvar'), required=True)
    validate.add_argument('--alpha', type=float, required=True)
    validate.add_argument('--delta', type=float)
    validate.add_argument('--trials', type=int, default=1000)
    validate.add_argument('--n-cal', type=int, default=100)
    validate.add_argument('--seed', type=int, default=0)
    validate.add_argument('--config', help='JSON config (task section)')
    validate.add_argument('--out', required=True, help='Per-trial CSV report')
    validate.set_defaults(handler=run_validate)

    train_cmd = commands.add_parser('train', help='Conformal risk training')
    train_cmd.add_argument('--task', choices=sorted(TASKS), required=True)
    train_cmd.add_argument('--config', help='JSON config (task and train sections)')
    train_cmd.add_argument('--out', required=True, help='Output directory')
    train_cmd.add_argument('--baseline', action='store_true',
                           help='Also run the post-hoc (and fine-tuned) baselines')
    train_cmd.set_defaults(handler=run_train)

    sweep_cmd = commands.add_parser('sweep', help='Sensitivity sweep')
    sweep_cmd.add_argument('--kind', choices=SWEEP_KINDS)
    sweep_cmd.add_argument('--task', choices=sorted(TASKS), default='storage')
    sweep_cmd.add_argument('--config', help='JSON config (task, train and sweep sections)')
    sweep_cmd.add_argument('--out', required=True, help='Sweep CSV report')
    sweep_cmd.set_defaults(handler=run_sweep)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.log_level:
        set_level(args.log_level)
    try:
        return args.handler(args)
    except (ConformalRiskError, ValueError, OSError) as e:
        logger.error("%s", e)
        return 2


if __name__ == '__main__':
    sys.exit(main())
