from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np
import pandas as pd

from finmdp_pg.config import config
from finmdp_pg.data import Data
from finmdp_pg.gradients import (
    AssumptionError,
    PlCertificate,
    continuation_q,
    dynamic_parts,
    optimal_start_mismatch,
    pl_certificate_simultaneous,
    simultaneous_parts,
)
from finmdp_pg.logger import logger
from finmdp_pg.mdp import _q_from_next, backward_induction_optimal, evaluate_policy, forward_measure, greedy_with_ties
from finmdp_pg.softmax import min_optimal_probability, policy_of, softmax_rows

COLUMNS = ["grad_evals", "phase", "J", "grad_norm", "min_opt_prob", "pl_lhs", "pl_rhs", "subopt"]
STOCHASTIC_COLUMNS = COLUMNS + ["batch_size", "coupling_dist", "crossed"]


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, step, phase="all"):
        self.step = step
        self.phase = phase
        super().__init__(f"Non-finite gradient at step {step} (phase {phase})")


def _ceil(value):
    # Relative slack absorbs float noise on values that are integers in exact arithmetic
    return max(1, int(math.ceil(value * (1.0 - 1e-12))))


@dataclass
class SimultaneousSchedule:
    eta: float
    n_steps: int
    c_estimate: float = 0.5
    mismatch: Optional[float] = None
    n_raw: Optional[float] = None

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError(f"Step size must be positive, got {self.eta}")
        if self.n_steps < 1:
            raise ValueError(f"Number of steps must be at least 1, got {self.n_steps}")

    @property
    def total(self):
        return self.n_steps

    def to_dict(self):
        return {"scheme": "simultaneous", **asdict(self)}


@dataclass
class DynamicSchedule:
    """Per-epoch (eta_h, N_h, c_h), indexed by epoch h."""

    etas: List[float]
    n_steps: List[int]
    c_values: List[float]
    n_raw: List[float] = field(default_factory=list)

    def __post_init__(self):
        if any(not eta > 0 for eta in self.etas):
            raise ValueError(f"Step sizes must be positive, got {self.etas}")
        if any(n < 1 for n in self.n_steps):
            raise ValueError(f"Numbers of steps must be at least 1, got {self.n_steps}")

    @property
    def total(self):
        return int(sum(self.n_steps))

    def to_dict(self):
        return {"scheme": "dynamic", **asdict(self)}


def _check_epsilon(epsilon):
    if not epsilon > 0:
        raise ValueError(f"Target accuracy epsilon must be positive, got {epsilon}")


def _check_c(c):
    if not 0 < c <= 1:
        raise ValueError(f"c estimate must lie in (0, 1], got {c}")


def schedule_simultaneous(mdp, mu=None, epsilon=1.0, c_estimate=None, allow_varying_states=False):
    """
    Step size and step count for exact simultaneous training.

    eta = 1/(5 H^2 R*) and N = ceil(10 H^5 R* |S| ||d*/mu||^2 / (c^2 epsilon)).

    Args:
        c_estimate (float, optional): Lower bound guess for the optimal-action
            probabilities along the run, 1/|A| by default.
        allow_varying_states (bool, optional): Accept models whose state space changes
            over epochs. The mismatch term is then taken over S_0 and |S| = max_h |S_h|.

    Raises:
        ValueError: On epsilon <= 0, c outside (0, 1], or an unbounded mismatch term.
        AssumptionError: Varying state spaces without the override.
    """
    _check_epsilon(epsilon)
    c_estimate = 1.0 / mdp.n_actions if c_estimate is None else c_estimate
    _check_c(c_estimate)
    mu = mdp.start if mu is None else np.asarray(mu, dtype=np.float64)
    if not mdp.constant_state_space:
        if not allow_varying_states:
            raise AssumptionError("simultaneous schedule needs a constant state space; pass the override flag")
        logger.warning("State space varies over epochs; simultaneous schedule computed under override")

    _, pi_star = backward_induction_optimal(mdp)
    mismatch = optimal_start_mismatch(mdp, mu, pi_star)
    if math.isinf(mismatch):
        raise ValueError("start distribution vanishes on a state visited by the optimal policy; ||d*/mu|| is unbounded")

    n_states = max(mdp.sizes)
    horizon = mdp.horizon
    eta = 1.0 / (5.0 * horizon**2 * mdp.r_star)
    n_raw = 10.0 * horizon**5 * mdp.r_star * n_states * mismatch**2 / (c_estimate**2 * epsilon)
    schedule = SimultaneousSchedule(eta=eta, n_steps=_ceil(n_raw), c_estimate=c_estimate, mismatch=mismatch, n_raw=n_raw)
    logger.info(f"Simultaneous schedule: eta={eta}, N={schedule.n_steps}, mismatch={mismatch}, c={c_estimate}")
    return schedule


def schedule_dynamic(mdp, mu_list, epsilon=1.0, uniform_init=True, c_values=None):
    """
    Per-epoch step sizes eta_h = 1/(2 (H-h) R*) and step counts
    N_h = ceil(4 (H-h) H R* ||1/mu_h||_inf / (c_h^2 epsilon)).

    Raises:
        ValueError: On epsilon <= 0, some mu_h(s) = 0, or missing/invalid c values.
    """
    _check_epsilon(epsilon)
    horizon = mdp.horizon
    if uniform_init:
        c_values = [1.0 / mdp.n_actions] * horizon
    elif c_values is None or len(c_values) != horizon:
        raise ValueError("c values for every epoch are required without uniform initialisation")
    for c in c_values:
        _check_c(c)

    etas, n_steps, n_raw = [], [], []
    for h in range(horizon):
        mu_h = np.asarray(mu_list[h], dtype=np.float64)
        if np.any(mu_h <= 0):
            raise ValueError(f"mu_{h} must be strictly positive on S_{h}")
        inverse = float(np.max(1.0 / mu_h))
        etas.append(1.0 / (2.0 * (horizon - h) * mdp.r_star))
        n_raw.append(4.0 * (horizon - h) * horizon * mdp.r_star * inverse / (c_values[h] ** 2 * epsilon))
        n_steps.append(_ceil(n_raw[-1]))
    schedule = DynamicSchedule(etas=etas, n_steps=n_steps, c_values=list(c_values), n_raw=n_raw)
    logger.info(f"Dynamic schedule: N_h={n_steps}, total={schedule.total}")
    return schedule


def _cell(value):
    if value is None:
        return None
    if isinstance(value, float) and math.isnan(value):
        return None
    return value


class TrainLog:
    """
    Rows of training diagnostics, one per logged gradient computation.

    Args:
        stochastic (bool, optional): Add the batch_size, coupling_dist and crossed columns.
        log_every (int, optional): Keep one row every `log_every` gradient computations.
            Phase ends and early stops are always kept.
        snapshot_every (int, optional): Also keep parameter copies at this cadence.
        targets (list, optional): Suboptimality levels whose first reaching step is
            recorded in `reached` regardless of thinning.

    Dynamic trainers also fill `phase_limits`: for each epoch h, V_0(mu) once epoch h acts
    greedily against the continuation it was trained for. The CSV does not carry it.
    """

    def __init__(self, stochastic=False, log_every=None, snapshot_every=None, targets=None):
        self.stochastic = stochastic
        self.columns = STOCHASTIC_COLUMNS if stochastic else COLUMNS
        self.log_every = log_every or config.get_or("trainer_log_every", 1)
        self.snapshot_every = snapshot_every
        self.rows = []
        self.snapshots = []
        self.targets = sorted(targets or [], reverse=True)
        self.reached = {}
        self.reached_subopt = {}
        self.phase_limits = {}
        self._last = 0

    def __len__(self):
        return len(self.rows)

    @property
    def grad_evals(self):
        """Gradient computations seen so far, logged or thinned."""
        return self._last

    def __eq__(self, other):
        return isinstance(other, TrainLog) and self.columns == other.columns and self.rows == other.rows

    def append(self, grad_evals, phase, J, grad_norm, min_opt_prob, subopt, certificate=None, force=False, **extra):
        if grad_evals <= self._last:
            raise ValueError(f"Gradient counter must increase: {grad_evals} after {self._last}")
        self._last = grad_evals
        for target in self.targets:
            if target not in self.reached and subopt <= target:
                self.reached[target] = int(grad_evals)
                self.reached_subopt[target] = float(subopt)
        if not force and grad_evals % self.log_every != 0:
            return
        row = {
            "grad_evals": int(grad_evals),
            "phase": phase,
            "J": float(J),
            "grad_norm": float(grad_norm),
            "min_opt_prob": float(min_opt_prob),
            "pl_lhs": None if certificate is None else float(certificate.lhs),
            "pl_rhs": None if certificate is None or certificate.rhs is None else float(certificate.rhs),
            "subopt": float(subopt),
        }
        if self.stochastic:
            row["batch_size"] = extra.get("batch_size")
            row["coupling_dist"] = extra.get("coupling_dist")
            row["crossed"] = extra.get("crossed")
        self.rows.append(row)

    def snapshot(self, grad_evals, theta):
        if self.snapshot_every and grad_evals % self.snapshot_every == 0:
            self.snapshots.append((grad_evals, theta.copy()))

    def column(self, name):
        return np.array([np.nan if row[name] is None else row[name] for row in self.rows], dtype=np.float64)

    def final(self):
        return self.rows[-1] if self.rows else None

    def to_frame(self):
        return pd.DataFrame(self.rows, columns=self.columns)

    def to_csv(self, path):
        Data.frame_to_csv(self.to_frame(), path)

    @classmethod
    def from_csv(cls, path):
        frame = Data.csv_to_frame(path, dtype={"phase": str})
        if list(frame.columns) not in (COLUMNS, STOCHASTIC_COLUMNS):
            raise ValueError(f"Unexpected log columns {list(frame.columns)} in {path}")
        log = cls(stochastic=list(frame.columns) == STOCHASTIC_COLUMNS, log_every=1)
        for record in frame.to_dict(orient="records"):
            row = {}
            for column in log.columns:
                value = _cell(record[column])
                if value is None:
                    row[column] = None
                elif column == "phase":
                    row[column] = "all" if value == "all" else int(value)
                elif column in ("grad_evals", "batch_size"):
                    row[column] = int(value)
                elif column == "crossed":
                    row[column] = value if isinstance(value, bool) else str(value) == "True"
                else:
                    row[column] = float(value)
            log.rows.append(row)
        log._last = log.rows[-1]["grad_evals"] if log.rows else 0
        return log


def _optimal_reference(mdp, mu):
    tables_star, pi_star = backward_induction_optimal(mdp)
    rho_star = forward_measure(mdp, pi_star, mu)
    return tables_star, pi_star, rho_star


def train_simultaneous(mdp, theta0, mu, schedule, log_sink=None, early_stop=None, certify=None):
    """
    Exact simultaneous policy gradient: theta <- theta + eta * grad J(theta, mu) for N steps.

    Args:
        early_stop (float, optional): Stop once V_0*(mu) - V_0(mu) <= early_stop. The
            row reaching the target is logged and no further update is applied.
        certify (bool, optional): Attach PL certificates to the rows.

    Returns:
        tuple: (final ParamTensor, TrainLog).

    Raises:
        NonFiniteGradientError: With the index of the offending step.
    """
    log = log_sink if log_sink is not None else TrainLog()
    certify = config.get_or("trainer_certify", False) if certify is None else certify
    mu = np.asarray(mu, dtype=np.float64)
    optimal = _optimal_reference(mdp, mu)
    tables_star, pi_star, _ = optimal
    optimum = tables_star.value(mu)
    choices = pi_star.greedy_actions()
    offset = log.grad_evals

    theta = theta0.copy()
    logger.info(f"Simultaneous training on {mdp.name}: eta={schedule.eta}, N={schedule.n_steps}")
    for n in range(schedule.n_steps):
        parts = simultaneous_parts(mdp, theta, mu)
        policy, tables, _, grad = parts
        if not grad.is_finite():
            logger.error(f"Non-finite gradient at step {n}")
            raise NonFiniteGradientError(n)

        J = tables.value(mu)
        subopt = optimum - J
        certificate = pl_certificate_simultaneous(mdp, theta, mu, optimal=optimal, parts=parts) if certify else None
        stop = early_stop is not None and subopt <= early_stop
        log.append(
            offset + n + 1,
            "all",
            J,
            grad.norm(),
            min_optimal_probability(policy, choices),
            subopt,
            certificate,
            force=stop or n == schedule.n_steps - 1,
        )
        log.snapshot(offset + n + 1, theta)
        if stop:
            logger.info(f"Early stop after {n + 1} gradient computations, suboptimality {subopt}")
            break
        theta = theta + grad.scaled(schedule.eta)
    return theta, log


class _ForwardValue:
    """
    V_0(mu) of (pi_0, .., pi_{h-1}, pi_h) where epochs < h are frozen during phase h.
    Recomputes only the frozen prefix once per phase.
    """

    def __init__(self, mdp, theta, h, mu):
        self.mdp = mdp
        self.h = h
        self.policies = [softmax_rows(theta.blocks[k], mdp.mask[k]) for k in range(h)]
        self.mu = mu

    def __call__(self, v_h):
        v_next = v_h
        for k in reversed(range(self.h)):
            q = _q_from_next(self.mdp, k, v_next)
            v_next = np.sum(self.policies[k] * q, axis=1)
        return float(np.dot(self.mu, v_next))


def phase_targets(mdp, tilde_pi, h):
    """Continuation Q_h, greedy actions a_h* and their values against a fixed continuation."""
    q = continuation_q(mdp, tilde_pi, h)
    masked = np.where(mdp.mask[h], q, -np.inf)
    a_star = greedy_with_ties(masked)
    return q, a_star, masked[np.arange(masked.shape[0]), a_star]


def train_dynamic(mdp, theta0, mu_list, schedule, log_sink=None, mu=None, early_stop=None, certify=None):
    """
    Exact dynamic policy gradient: backward over epochs, N_h ascent steps on theta_h
    against the already-trained continuation.

    The logged J is V_0(mu) of the current composite policy, mu being the model's
    start distribution unless given. `early_stop` applies during phase 0 only.

    Returns:
        tuple: (final ParamTensor, TrainLog).
    """
    log = log_sink if log_sink is not None else TrainLog()
    certify = config.get_or("trainer_certify", False) if certify is None else certify
    mu = mdp.start if mu is None else np.asarray(mu, dtype=np.float64)
    optimum = backward_induction_optimal(mdp)[0].value(mu)
    counter = log.grad_evals

    theta = theta0.copy()
    for h in reversed(range(mdp.horizon)):
        tilde_pi = policy_of(theta)
        q, a_star, best = phase_targets(mdp, tilde_pi, h)
        mu_h = np.asarray(mu_list[h], dtype=np.float64)
        value_of = _ForwardValue(mdp, theta, h, mu)
        rows = np.arange(len(a_star))
        eta, n_steps = schedule.etas[h], schedule.n_steps[h]
        log.phase_limits[h] = value_of(best)
        logger.info(f"Dynamic phase {h}: eta={eta}, N={n_steps}")

        block = theta.blocks[h]
        for n in range(n_steps):
            pi_h, v_h, grad = dynamic_parts(mdp, block, q, mu_h, h)
            if not np.all(np.isfinite(grad)):
                logger.error(f"Non-finite gradient at step {n} of phase {h}")
                raise NonFiniteGradientError(n, h)
            counter += 1
            J = value_of(v_h)
            subopt = optimum - J
            grad_norm = float(np.sqrt(np.sum(grad**2)))
            min_opt = float(np.min(pi_h[rows, a_star]))
            certificate = None
            if certify:
                gap = float(np.dot(mu_h, best) - np.dot(mu_h, v_h))
                # same bound as pl_certificate_dynamic, sqrt(|S_h|) from the L1 to L2 step
                certificate = PlCertificate(
                    lhs=grad_norm,
                    rhs=min_opt * gap / math.sqrt(len(rows)),
                    suboptimality=gap,
                    min_opt_prob=min_opt,
                )
            stop = early_stop is not None and h == 0 and subopt <= early_stop
            log.append(counter, h, J, grad_norm, min_opt, subopt, certificate, force=stop or n == n_steps - 1)
            if log.snapshot_every and counter % log.snapshot_every == 0:
                log.snapshots.append((counter, theta.with_block(h, block)))
            if stop:
                logger.info(f"Early stop after {counter} gradient computations, suboptimality {subopt}")
                break
            block = block + eta * grad
        theta = theta.with_block(h, block)
        logger.info(f"Dynamic phase {h} done after {counter} gradient computations")
    return theta, log


def final_errors(mdp, theta, mu=None):
    """
    Returns:
        tuple: (V_0*(mu) - V_0(mu), max over s in S_0 of V_0*(s) - V_0(s)).
    """
    mu = mdp.start if mu is None else mu
    tables_star, _ = backward_induction_optimal(mdp)
    tables = evaluate_policy(mdp, policy_of(theta))
    return tables_star.value(mu) - tables.value(mu), float(np.max(tables_star.v[0] - tables.v[0]))
