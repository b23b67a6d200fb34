from __future__ import annotations

import argparse
import json
import sys

from jsonschema.exceptions import ValidationError

from finmdp_pg.experiments import (
    DYNAMIC_STOPS,
    BudgetExhaustedError,
    ExperimentSpec,
    compare_schemes,
    estimate_rate,
    estimate_rate_runs,
    run_experiment,
)
from finmdp_pg.gradients import AssumptionError
from finmdp_pg.logger import logger
from finmdp_pg.mdp import MdpValidationError
from finmdp_pg.trainers import TrainLog

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_BUDGET = 3


def _eps_list(text):
    try:
        return [float(value) for value in text.split(",") if value.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"Expected comma-separated numbers, got {text!r}")


def parse_arguments(argv=None):
    """
    Parse command line arguments.
    """
    parser = argparse.ArgumentParser(
        prog="finmdp-pg",
        description="Policy gradient training for finite-horizon tabular MDPs.",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    run = subparsers.add_parser("run", help="Train one scheme and write log.csv, summary.json, checkpoint.json.")
    run.add_argument("--model", required=True, help="Model file or generator (dice:H=5, bandit2, zero:H=3, random:...).")
    run.add_argument("--scheme", choices=["sim", "dyn"], default="dyn", help="Simultaneous or dynamic policy gradient.")
    run.add_argument("--mode", choices=["exact", "stoch"], default="exact", help="Exact gradients or REINFORCE estimates.")
    run.add_argument("--eps", type=float, required=True, help="Target accuracy epsilon.")
    run.add_argument("--delta", type=float, default=0.1, help="Failure probability for stochastic schedules.")
    run.add_argument("--seed", type=int, default=0, help="64-bit seed of the trajectory substreams.")
    run.add_argument("--eta", type=float, help="Step size override.")
    run.add_argument("--steps", type=int, help="Step count override (per epoch for the dynamic scheme).")
    run.add_argument("--batch", type=int, help="Batch size for stochastic runs.")
    run.add_argument("--theorem-scale", action="store_true", help="Use the guaranteed (N, eta, K) sizes.")
    run.add_argument("--early-stop", action="store_true", help="Stop once the suboptimality is <= eps.")
    run.add_argument("--c-estimate", type=float, help="c used to size the simultaneous schedule.")
    run.add_argument("--allow-varying-states", action="store_true", help="Size the simultaneous schedule anyway.")
    run.add_argument("--init", help="Checkpoint file with the initial parameters.")
    run.add_argument("--log-every", type=int, help="Keep one log row every n gradient computations.")
    run.add_argument("--workers", type=int, help="Threads for batch sampling.")
    run.add_argument("--certify", action="store_true", default=None, help="Attach PL certificates to log rows.")
    run.add_argument("--out", required=True, help="Output directory.")

    rate = subparsers.add_parser("rate", help="Fit the convergence rate of a training log.")
    rate.add_argument("--log", nargs="+", required=True, help="log.csv written by 'run'; several logs fit their end points.")
    rate.add_argument(
        "--optimal",
        type=float,
        required=True,
        help="Value the run converges to: V_0*(mu), or phase_zero_limit of a dynamic summary.json.",
    )
    rate.add_argument("--targets", type=_eps_list, default=None, help="Accuracies to report the first hit for.")

    compare = subparsers.add_parser("compare", help="Gradient computations per scheme for several accuracies.")
    compare.add_argument("--model", required=True, help="Model file or generator.")
    compare.add_argument("--eps", type=_eps_list, required=True, help="Comma-separated accuracies, e.g. 5,1,0.5.")
    compare.add_argument("--eta-dyn", type=float, help="Step size override for the dynamic scheme.")
    compare.add_argument("--eta-sim", type=float, help="Step size override for the simultaneous scheme.")
    compare.add_argument("--dynamic-stop", choices=list(DYNAMIC_STOPS), help="How dynamic cells terminate.")
    compare.add_argument("--workers", type=int, help="Threads for the comparison cells.")
    compare.add_argument("--out", help="Output directory for comparison.json.")
    return parser.parse_args(argv)


def command_run(args):
    spec = ExperimentSpec(
        model=args.model,
        scheme=args.scheme,
        mode=args.mode,
        epsilon=args.eps,
        delta=args.delta,
        seed=args.seed,
        eta=args.eta,
        steps=args.steps,
        batch=args.batch,
        theorem_scale=args.theorem_scale,
        early_stop=args.early_stop,
        c_estimate=args.c_estimate,
        allow_varying_states=args.allow_varying_states,
        init=args.init,
        out_dir=args.out,
        log_every=args.log_every,
        workers=args.workers,
        certify=args.certify,
    )
    _, summary = run_experiment(spec)
    print(json.dumps(summary, indent=2))


def command_rate(args):
    logs = [TrainLog.from_csv(path) for path in args.log]
    if len(logs) > 1:
        estimate = estimate_rate_runs(logs, args.optimal)
    else:
        estimate = estimate_rate(logs[0], args.optimal, targets=args.targets)
    result = estimate.to_dict()
    result["in_band"] = estimate.in_band()
    print(json.dumps(result, indent=2))


def command_compare(args):
    comparison = compare_schemes(
        args.model,
        args.eps,
        eta_dynamic=args.eta_dyn,
        eta_simultaneous=args.eta_sim,
        out_dir=args.out,
        max_workers=args.workers,
        dynamic_stop=args.dynamic_stop,
    )
    print(json.dumps(comparison, indent=2))


COMMANDS = {"run": command_run, "rate": command_rate, "compare": command_compare}


def main(argv=None):
    """
    Entry point of the finmdp-pg command.

    Exit codes: 0 on success, 2 on invalid input (model, arguments, checkpoint,
    violated assumptions), 3 when a budget is exhausted.
    """
    args = parse_arguments(argv)
    try:
        COMMANDS[args.command](args)
    except BudgetExhaustedError as e:
        logger.critical(f"Budget exhausted: {e}")
        return EXIT_BUDGET
    except (MdpValidationError, ValidationError, AssumptionError, FileNotFoundError, KeyError, ValueError) as e:
        logger.critical(f"Invalid input: {e}")
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
