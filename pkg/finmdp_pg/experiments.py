from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np

from finmdp_pg.config import config
from finmdp_pg.data import Data
from finmdp_pg.logger import logger
from finmdp_pg.mdp import backward_induction_optimal, default_start_distributions
from finmdp_pg.models import resolve_model
from finmdp_pg.softmax import ParamTensor, load_checkpoint, save_checkpoint
from finmdp_pg.stochastic import (
    CouplingTracker,
    StochasticSchedule,
    Substreams,
    train_stochastic_dynamic,
    train_stochastic_simultaneous,
)
from finmdp_pg.trainers import (
    DynamicSchedule,
    SimultaneousSchedule,
    TrainLog,
    final_errors,
    schedule_dynamic,
    schedule_simultaneous,
    train_dynamic,
    train_simultaneous,
)

SCHEMES = {"sim": "simultaneous", "dyn": "dynamic", "simultaneous": "simultaneous", "dynamic": "dynamic"}
MODES = {"exact", "stoch", "stochastic"}


class BudgetExhaustedError(RuntimeError):
    """A schedule exceeds the configured budget, or an early-stopped run missed its target."""


@dataclass
class ExperimentSpec:
    model: str
    scheme: str = "dynamic"
    mode: str = "exact"
    epsilon: float = 1.0
    delta: float = 0.1
    seed: int = 0
    eta: Optional[float] = None
    steps: Optional[int] = None
    batch: Optional[int] = None
    theorem_scale: bool = False
    early_stop: bool = False
    c_estimate: Optional[float] = None
    allow_varying_states: bool = False
    init: Optional[str] = None
    out_dir: Optional[str] = None
    log_every: Optional[int] = None
    workers: Optional[int] = None
    certify: Optional[bool] = None

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"Unknown scheme {self.scheme!r}")
        self.scheme = SCHEMES[self.scheme]
        if self.mode not in MODES:
            raise ValueError(f"Unknown mode {self.mode!r}")
        self.mode = "stochastic" if self.mode.startswith("stoch") else "exact"

    @property
    def stochastic(self):
        return self.mode == "stochastic"

    def validate(self):
        """
        Raises:
            ValueError: On epsilon <= 0, delta outside (0, 1) for stochastic runs, or
                non-positive overrides.
            FileNotFoundError: If the initialisation checkpoint does not exist.
        """
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.stochastic and not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")
        for name in ("eta", "steps", "batch"):
            value = getattr(self, name)
            if value is not None and not value > 0:
                raise ValueError(f"{name} must be positive, got {value}")
        if self.stochastic and not self.theorem_scale and (self.steps is None or self.batch is None):
            raise ValueError("stochastic runs need --steps and --batch unless --theorem-scale is set")
        if self.init is not None and not os.path.isfile(self.init):
            raise FileNotFoundError(f"Initialisation checkpoint not found: {self.init}")


def _exact_schedule(spec, mdp, mu, mu_list):
    if spec.scheme == "simultaneous":
        if spec.steps is not None:
            eta = spec.eta or 1.0 / (5.0 * mdp.horizon**2 * mdp.r_star)
            return SimultaneousSchedule(eta=eta, n_steps=spec.steps)
        if spec.early_stop:
            eta = spec.eta or 1.0 / (5.0 * mdp.horizon**2 * mdp.r_star)
            return SimultaneousSchedule(eta=eta, n_steps=config.get_or("trainer_max_grad_evals", 2000000))
        schedule = schedule_simultaneous(mdp, mu, spec.epsilon, spec.c_estimate, spec.allow_varying_states)
        if spec.eta is not None:
            schedule.eta = spec.eta
        return schedule

    if spec.steps is not None:
        etas = [spec.eta or 1.0 / (2.0 * (mdp.horizon - h) * mdp.r_star) for h in range(mdp.horizon)]
        return DynamicSchedule(etas=etas, n_steps=[spec.steps] * mdp.horizon, c_values=[1.0 / mdp.n_actions] * mdp.horizon)
    schedule = schedule_dynamic(mdp, mu_list, spec.epsilon)
    if spec.eta is not None:
        schedule.etas = [spec.eta] * mdp.horizon
    return schedule


def _stochastic_schedule(spec, mdp, mu, mu_list):
    if spec.theorem_scale:
        c = spec.c_estimate or 1.0 / mdp.n_actions
        if spec.scheme == "simultaneous":
            schedule = StochasticSchedule.theorem_simultaneous(mdp, mu, spec.epsilon, spec.delta, c)
        else:
            schedule = StochasticSchedule.theorem_dynamic(mdp, mu_list, spec.epsilon, spec.delta)
        budget = config.get_or("stochastic_theorem_budget", 10**8)
        if schedule.total_trajectories > budget:
            logger.warning(
                f"Theorem-scale schedule needs {schedule.total_trajectories} trajectories, budget is {budget}",
            )
            raise BudgetExhaustedError(
                f"theorem-scale schedule needs {schedule.total_trajectories} trajectories (N={schedule.n_steps}, "
                f"K={schedule.batches}), budget is {budget}",
            )
        return schedule
    return StochasticSchedule.from_user(mdp, spec.scheme, spec.steps, spec.batch, spec.eta, spec.delta, spec.epsilon)


def run_experiment(spec):
    """
    Run one trainer and write log.csv, summary.json and checkpoint.json to `spec.out_dir`.

    Returns:
        tuple: (TrainLog, summary dict).

    Raises:
        BudgetExhaustedError: Theorem-scale schedule above budget, or an early-stopped
            run that never reached epsilon (outputs are written first).
    """
    spec.validate()
    mdp = resolve_model(spec.model)
    mu = mdp.start
    mu_list = default_start_distributions(mdp, mu)
    theta0 = load_checkpoint(mdp, spec.init) if spec.init else ParamTensor.zeros(mdp)
    log = TrainLog(stochastic=spec.stochastic, log_every=spec.log_every)

    if spec.stochastic:
        schedule = _stochastic_schedule(spec, mdp, mu, mu_list)
        rng = Substreams(spec.seed)
        if spec.scheme == "simultaneous":
            theta, log = train_stochastic_simultaneous(mdp, theta0, mu, schedule, rng, log, max_workers=spec.workers)
        else:
            theta, log = train_stochastic_dynamic(mdp, theta0, mu_list, schedule, rng, log, mu, max_workers=spec.workers)
        total = schedule.total_grad_evals
    else:
        schedule = _exact_schedule(spec, mdp, mu, mu_list)
        early = spec.epsilon if spec.early_stop else None
        if spec.scheme == "simultaneous":
            theta, log = train_simultaneous(mdp, theta0, mu, schedule, log, early_stop=early, certify=spec.certify)
        else:
            theta, log = train_dynamic(mdp, theta0, mu_list, schedule, log, mu, early_stop=early, certify=spec.certify)
        total = log.final()["grad_evals"]

    final_subopt, worst_state = final_errors(mdp, theta, mu)
    summary = {
        "model": mdp.name,
        "scheme": spec.scheme,
        "mode": spec.mode,
        "epsilon": spec.epsilon,
        "seed": spec.seed,
        "optimal_value": backward_induction_optimal(mdp)[0].value(mu),
        "final_subopt": final_subopt,
        "final_subopt_max_state": worst_state,
        "grad_evals_total": int(total),
        "schedule_used": schedule.to_dict(),
        "early_stop": spec.early_stop,
        "phase_zero_limit": log.phase_limits.get(0),
    }
    if spec.out_dir:
        Data.create_folders([spec.out_dir])
        log.to_csv(os.path.join(spec.out_dir, "log.csv"))
        Data.dict_to_json(summary, os.path.join(spec.out_dir, "summary.json"))
        save_checkpoint(theta, mdp, os.path.join(spec.out_dir, "checkpoint.json"))
        logger.info(f"Experiment outputs written to {spec.out_dir}")

    if spec.early_stop and final_subopt > spec.epsilon:
        raise BudgetExhaustedError(f"early-stopped run ended at suboptimality {final_subopt} > {spec.epsilon}")
    return log, summary


@dataclass
class RateEstimate:
    slope: float
    intercept: float
    r_squared: float
    window: List[int]
    final_error: float
    evals_to_target: Dict[str, Optional[int]] = field(default_factory=dict)

    def in_band(self, band=None):
        low, high = band or config.get_or("rate_slope_band", [-1.15, -0.85])
        return low <= self.slope <= high

    def to_dict(self):
        return asdict(self)


def _fit(evals, subopts):
    x = np.log(np.asarray(evals, dtype=np.float64))
    y = np.log(np.asarray(subopts, dtype=np.float64))
    slope, intercept = np.polyfit(x, y, 1)
    residual = np.sum((y - (slope * x + intercept)) ** 2)
    spread = np.sum((y - y.mean()) ** 2)
    r_squared = 1.0 - residual / spread if spread > 0 else 1.0
    if not np.isfinite(slope):
        raise ValueError("Fitted slope is not finite")
    return float(slope), float(intercept), float(r_squared)


def _phase_zero_start(rows):
    earlier = [row["grad_evals"] for row in rows if row["phase"] not in ("all", 0)]
    return max(earlier) if earlier else 0


def estimate_rate(log, oracle_value, targets=None, min_rows=None):
    """
    Least-squares slope of log(subopt) against log(grad_evals) over the tail of the
    run, the rows with grad_evals >= final / `rate_window_ratio`.

    Dynamic logs are restricted to the phase-0 rows and their gradient computations
    are counted from the start of phase 0. Against V_0*(mu) the phase-0 tail levels
    off at the error left by the later epochs; pass `log.phase_limits[0]` (the
    `phase_zero_limit` of summary.json) to measure phase 0 on its own, or fit the end
    points of several runs with `estimate_rate_runs`.

    Args:
        log (TrainLog): Training log.
        oracle_value (float): Value the run converges to, V_0*(mu) for a simultaneous log.
        targets (list, optional): Accuracies for which the first reaching row is reported.

    Raises:
        ValueError: Too few rows, or every suboptimality below 1e-14.
    """
    min_rows = min_rows or config.get_or("rate_min_rows", 50)
    ratio = config.get_or("rate_window_ratio", 4.0)
    rows = log.rows
    offset = 0
    if any(row["phase"] != "all" for row in rows):
        offset = _phase_zero_start(rows)
        rows = [row for row in rows if row["phase"] == 0]
    evals = np.array([row["grad_evals"] for row in rows], dtype=np.float64)
    subopts = np.array([oracle_value - row["J"] for row in rows])

    positive = subopts > 1e-14
    if len(rows) and not np.any(positive):
        raise ValueError("All suboptimalities are below 1e-14; converged exactly and the rate is undefined")
    if int(np.sum(positive)) < min_rows:
        raise ValueError(f"Rate fit needs at least {min_rows} rows with positive suboptimality, got {int(np.sum(positive))}")

    counted = evals - offset
    window = positive & (counted >= counted[-1] / ratio)
    if int(np.sum(window)) < 2:
        raise ValueError("Fit window has fewer than two rows with positive suboptimality")
    slope, intercept, r_squared = _fit(counted[window], subopts[window])

    evals_to_target = {}
    for target in targets or []:
        reached = np.nonzero(subopts <= target)[0]
        evals_to_target[str(target)] = int(evals[reached[0]]) if len(reached) else None

    estimate = RateEstimate(
        slope=slope,
        intercept=intercept,
        r_squared=r_squared,
        window=[int(evals[window][0]), int(evals[window][-1])],
        final_error=float(subopts[-1]),
        evals_to_target=evals_to_target,
    )
    logger.info(f"Rate estimate: slope={slope:.4f}, intercept={intercept:.4f}, R^2={r_squared:.4f}")
    return estimate


def estimate_rate_points(evals, subopts):
    """Fit through the end points of several runs (one per target accuracy)."""
    pairs = [(e, s) for e, s in zip(evals, subopts) if e is not None and s is not None and s > 1e-14]
    if len(pairs) < 2:
        raise ValueError("Rate fit over end points needs at least two points with positive suboptimality")
    x, y = zip(*sorted(pairs))
    slope, intercept, r_squared = _fit(x, y)
    return RateEstimate(
        slope=slope,
        intercept=intercept,
        r_squared=r_squared,
        window=[int(x[0]), int(x[-1])],
        final_error=float(y[-1]),
    )


def estimate_rate_runs(logs, oracle_value):
    """
    Rate through the last rows of several runs of the same scheme, typically dynamic
    runs sized for a list of accuracies: total gradient computations against the
    suboptimality reached.
    """
    ends = [log.final() for log in logs if len(log)]
    estimate = estimate_rate_points([row["grad_evals"] for row in ends], [oracle_value - row["J"] for row in ends])
    logger.info(f"Rate over {len(ends)} run end points: slope={estimate.slope:.4f}, intercept={estimate.intercept:.4f}")
    return estimate


DYNAMIC_STOPS = ("search", "early", "schedule")


def _dynamic_cell(mdp, mu, mu_list, epsilon, eta, stop_mode, log_every):
    """
    One dynamic run per schedule size. "schedule" and "early" size the run for
    epsilon, "early" stopping in phase 0 once epsilon is reached. "search" tries the
    schedules sized for epsilon * 2^k, k = `compare_search_octaves` .. 0, each
    stopping early, and keeps the first (cheapest) one that reaches epsilon.
    """
    if stop_mode == "search":
        octaves = config.get_or("compare_search_octaves", 6)
        scales = [2.0**k for k in range(octaves, -1, -1)]
    else:
        scales = [1.0]
    early = None if stop_mode == "schedule" else epsilon

    for scale in scales:
        schedule = schedule_dynamic(mdp, mu_list, epsilon * scale)
        if eta is not None:
            schedule.etas = [eta] * mdp.horizon
        theta, log = train_dynamic(mdp, ParamTensor.zeros(mdp), mu_list, schedule, TrainLog(log_every=log_every), mu, early_stop=early)
        subopt, _ = final_errors(mdp, theta, mu)
        if subopt <= epsilon:
            break
    logger.info(f"Dynamic cell epsilon={epsilon}: schedule sized for {epsilon * scale}, {log.grad_evals} gradient computations")
    return {
        "evals": log.grad_evals,
        "final_subopt": subopt,
        "exhausted": subopt > epsilon,
        "schedule_epsilon": epsilon * scale,
    }


def compare_schemes(model, eps_list, eta_dynamic=None, eta_simultaneous=None, out_dir=None, max_workers=None, dynamic_stop=None):
    """
    Gradient computations each scheme needs to reach suboptimality <= epsilon.

    Dynamic cells run in a thread pool. By default (`dynamic_stop="search"`) a cell
    reports the cheapest schedule on a grid of sizes that reaches epsilon, counted up
    to the phase-0 row that reaches it; `"early"` keeps the schedule sized for
    epsilon and stops at that row, `"schedule"` reports the full schedule length.
    The simultaneous scheme is one early-stopped run to the smallest epsilon; the
    count for each epsilon is the first row reaching it. A cell that misses its
    target is reported with `exhausted` set rather than failing the comparison.

    Returns:
        dict: {"model", "rows": [...], "rate_dynamic", "rate_simultaneous"}.
    """
    if not eps_list or any(not eps > 0 for eps in eps_list):
        raise ValueError(f"Accuracies must be positive, got {eps_list}")
    dynamic_stop = dynamic_stop or config.get_or("compare_dynamic_stop", "search")
    if dynamic_stop not in DYNAMIC_STOPS:
        raise ValueError(f"Unknown dynamic stop mode {dynamic_stop!r}, expected one of {DYNAMIC_STOPS}")
    mdp = resolve_model(model) if isinstance(model, str) else model
    mu = mdp.start
    mu_list = default_start_distributions(mdp, mu)
    max_workers = max_workers or config.get_or("compare_max_workers", 4)
    log_every = config.get_or("compare_log_every", 100)

    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        futures = [executor.submit(_dynamic_cell, mdp, mu, mu_list, eps, eta_dynamic, dynamic_stop, log_every) for eps in eps_list]
        dynamic_cells = [future.result() for future in futures]

    eta = eta_simultaneous or 1.0 / (5.0 * mdp.horizon**2 * mdp.r_star)
    budget = config.get_or("trainer_max_grad_evals", 2000000)
    _, sim_log = train_simultaneous(
        mdp,
        ParamTensor.zeros(mdp),
        mu,
        SimultaneousSchedule(eta=eta, n_steps=budget),
        TrainLog(log_every=log_every, targets=eps_list),
        early_stop=min(eps_list),
    )
    last_subopt = sim_log.final()["subopt"]

    rows = []
    for eps, cell in zip(eps_list, dynamic_cells):
        reached = sim_log.reached.get(eps)
        rows.append(
            {
                "epsilon": eps,
                "evals_dynamic": cell["evals"],
                "final_subopt_dynamic": cell["final_subopt"],
                "exhausted_dynamic": cell["exhausted"],
                "schedule_epsilon_dynamic": cell["schedule_epsilon"],
                "evals_simultaneous": reached,
                "final_subopt_simultaneous": sim_log.reached_subopt.get(eps, last_subopt),
                "exhausted_simultaneous": reached is None,
            },
        )
        if rows[-1]["exhausted_simultaneous"]:
            logger.warning(f"Simultaneous run exhausted its budget of {budget} before reaching {eps}")

    comparison = {"model": mdp.name, "rows": rows, "rate_dynamic": None, "rate_simultaneous": None}
    for scheme in ("dynamic", "simultaneous"):
        try:
            comparison[f"rate_{scheme}"] = estimate_rate_points(
                [row[f"evals_{scheme}"] for row in rows],
                [row[f"final_subopt_{scheme}"] for row in rows],
            ).to_dict()
        except ValueError as e:
            logger.info(f"No {scheme} rate fit: {e}")

    if out_dir:
        Data.create_folders([out_dir])
        Data.dict_to_json(comparison, os.path.join(out_dir, "comparison.json"))
    return comparison


def _sweep_cell(mdp, scheme, n_steps, batch, seed, threshold, mu, mu_list, etas=None):
    schedule = StochasticSchedule.from_user(mdp, scheme, n_steps, batch, etas)
    tracker = CouplingTracker(mdp)
    theta0 = ParamTensor.zeros(mdp)
    log = TrainLog(stochastic=True)
    if scheme == "simultaneous":
        theta, _ = train_stochastic_simultaneous(mdp, theta0, mu, schedule, Substreams(seed), log, coupling=tracker)
    else:
        theta, _ = train_stochastic_dynamic(mdp, theta0, mu_list, schedule, Substreams(seed), log, mu, coupling=tracker)
    subopt, _ = final_errors(mdp, theta, mu)
    return subopt, tracker.crossing is not None


def stochastic_sweep(mdp, batches, n_steps, seeds, scheme="dynamic", threshold=0.5, max_workers=None, etas=None):
    """
    Success fraction (final suboptimality < threshold), coupling-crossing frequency
    and spread of the final suboptimality over seeds, for each batch size.

    With the theorem step size 1/(2 (H-h) R* sqrt(N)) a short run barely leaves the
    uniform policy and every batch size fails alike; pass `etas` (a scalar or one
    step size per epoch, e.g. 1/(2 (H-h) R*)) to compare batch sizes at a step size
    where the runs converge.

    Returns:
        list: One dict per batch size
        {batch, success_fraction, crossing_fraction, final_subopts, subopt_spread}.
    """
    scheme = SCHEMES[scheme]
    mu = mdp.start
    mu_list = default_start_distributions(mdp, mu)
    max_workers = max_workers or config.get_or("compare_max_workers", 4)
    results = []
    for batch in batches:
        with ThreadPoolExecutor(max_workers=max_workers) as executor:
            outcomes = list(
                executor.map(lambda seed: _sweep_cell(mdp, scheme, n_steps, batch, seed, threshold, mu, mu_list, etas), seeds),
            )
        subopts = [subopt for subopt, _ in outcomes]
        successes = sum(subopt < threshold for subopt in subopts)
        crossings = sum(crossed for _, crossed in outcomes)
        results.append(
            {
                "batch": batch,
                "success_fraction": successes / len(seeds),
                "crossing_fraction": crossings / len(seeds),
                "final_subopts": subopts,
                "subopt_spread": float(np.std(subopts)),
            },
        )
        logger.info(f"Sweep K={batch}: success {results[-1]['success_fraction']}, crossing {results[-1]['crossing_fraction']}")
    return results
