from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import List, Optional

import numpy as np

from finmdp_pg.config import config
from finmdp_pg.gradients import dynamic_parts, optimal_start_mismatch, simultaneous_parts
from finmdp_pg.logger import logger
from finmdp_pg.mdp import backward_induction_optimal, reward_to_go, sample_batch
from finmdp_pg.softmax import GradTensor, min_optimal_probability, policy_of, softmax_rows
from finmdp_pg.trainers import NonFiniteGradientError, TrainLog, _ForwardValue, phase_targets


class Substreams:
    """
    Counter-based random streams: the generator for a key tuple depends only on
    (seed, *prefix, *keys), never on how many draws were made elsewhere.
    """

    def __init__(self, seed, prefix=()):
        if seed < 0:
            raise ValueError(f"Seed must be non-negative, got {seed}")
        self.seed = int(seed)
        self.prefix = tuple(int(k) for k in prefix)

    def child(self, *keys):
        return Substreams(self.seed, self.prefix + tuple(keys))

    def generator(self, *keys):
        return np.random.default_rng(np.random.SeedSequence([self.seed, *self.prefix, *[int(k) for k in keys]]))


@dataclass
class StochasticSchedule:
    """
    Per-epoch lists for the dynamic scheme; single-entry lists for the simultaneous one.
    A batch of None means the exact gradient replaces the estimator.
    """

    scheme: str
    n_steps: List[int]
    etas: List[float]
    batches: List[Optional[int]]
    delta: float = 0.1
    epsilon: float = 1.0

    def __post_init__(self):
        if self.scheme not in ("simultaneous", "dynamic"):
            raise ValueError(f"Unknown scheme {self.scheme!r}")
        if not (len(self.n_steps) == len(self.etas) == len(self.batches)):
            raise ValueError("n_steps, etas and batches must have the same length")
        if any(n < 1 for n in self.n_steps) or any(not eta > 0 for eta in self.etas):
            raise ValueError("Step counts and step sizes must be positive")
        if any(k is not None and k < 1 for k in self.batches):
            raise ValueError("Batch sizes must be at least 1")
        if not 0 < self.delta < 1 or not self.epsilon > 0:
            raise ValueError(f"Need 0 < delta < 1 and epsilon > 0, got {self.delta}, {self.epsilon}")

    @property
    def total_grad_evals(self):
        return int(sum(self.n_steps))

    @property
    def total_trajectories(self):
        return int(sum(n * (k or 0) for n, k in zip(self.n_steps, self.batches)))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def theorem_simultaneous(cls, mdp, mu, epsilon, delta, c):
        """N, eta and K at the sizes that guarantee success with probability 1 - delta."""
        _, pi_star = backward_induction_optimal(mdp)
        mismatch = optimal_start_mismatch(mdp, mu, pi_star)
        horizon, r_star = mdp.horizon, mdp.r_star
        n_raw = (21.0 * max(mdp.sizes) * horizon**5 * r_star / (epsilon * delta * c**2)) ** 2 * mismatch**4
        n_steps = int(math.ceil(n_raw))
        eta = 1.0 / (5.0 * horizon**2 * r_star * math.sqrt(n_steps))
        batch = int(math.ceil(10.0 * max(r_star, 1.0) ** 2 * float(n_steps) ** 3 / (c**2 * delta**2)))
        return cls("simultaneous", [n_steps], [eta], [batch], delta, epsilon)

    @classmethod
    def theorem_dynamic(cls, mdp, mu_list, epsilon, delta, c_values=None):
        horizon, r_star = mdp.horizon, mdp.r_star
        c_values = c_values or [1.0 / mdp.n_actions] * horizon
        n_steps, etas, batches = [], [], []
        for h in range(horizon):
            inverse = float(np.max(1.0 / np.asarray(mu_list[h], dtype=np.float64)))
            n_h = int(math.ceil((12.0 * (horizon - h) * r_star * horizon**2 * inverse / (delta * c_values[h] ** 2 * epsilon)) ** 2))
            n_steps.append(n_h)
            etas.append(1.0 / (2.0 * (horizon - h) * r_star * math.sqrt(n_h)))
            batches.append(int(math.ceil(5.0 * float(n_h) ** 3 * horizon**2 / (c_values[h] ** 2 * delta**2))))
        return cls("dynamic", n_steps, etas, batches, delta, epsilon)

    @classmethod
    def from_user(cls, mdp, scheme, n_steps, batch, eta=None, delta=0.1, epsilon=1.0):
        """
        User-sized schedule; without `eta` the step size follows the theorem form
        1/(5 H^2 R* sqrt(N)) or 1/(2 (H-h) R* sqrt(N_h)). A dynamic `eta` may be
        a list with one step size per epoch.
        """
        horizon, r_star = mdp.horizon, mdp.r_star
        if isinstance(eta, (list, tuple)):
            if scheme == "simultaneous" or len(eta) != horizon:
                raise ValueError(f"Per-epoch step sizes need a dynamic schedule with {horizon} entries, got {len(eta)}")
            return cls(scheme, [int(n_steps)] * horizon, [float(step) for step in eta], [batch] * horizon, delta, epsilon)
        if scheme == "simultaneous":
            step = eta if eta is not None else 1.0 / (5.0 * horizon**2 * r_star * math.sqrt(n_steps))
            return cls(scheme, [int(n_steps)], [step], [batch], delta, epsilon)
        etas = [
            eta if eta is not None else 1.0 / (2.0 * (horizon - h) * r_star * math.sqrt(n_steps))
            for h in range(horizon)
        ]
        return cls(scheme, [int(n_steps)] * horizon, etas, [batch] * horizon, delta, epsilon)


def variance_bound_simultaneous(mdp):
    """xi = 3 H^4 max(R*, 1)^4, so that E||g_hat - g||^2 <= xi / K."""
    return 3.0 * mdp.horizon**4 * max(mdp.r_star, 1.0) ** 4


def variance_bound_dynamic(mdp, h):
    """psi_h = 5 (H-h)^2 R*^2, so that E||g_hat_h - g_h||^2 <= psi_h / K_h."""
    return 5.0 * (mdp.horizon - h) ** 2 * mdp.r_star**2


def _chunks(total, chunk_size):
    chunk_size = chunk_size or config.get_or("stochastic_chunk_size", 1024)
    sizes = [chunk_size] * (total // chunk_size)
    if total % chunk_size:
        sizes.append(total % chunk_size)
    return sizes


def _score_terms(policy_h, states, actions, weights):
    """Per-trajectory (onehot(a) - pi(.|s)) * w, shape (n, |S_h|, n_actions)."""
    n = len(states)
    rows = np.arange(n)
    contribution = -policy_h[states] * weights[:, None]
    contribution[rows, actions] += weights
    terms = np.zeros((n,) + policy_h.shape)
    terms[rows, states] = contribution
    return terms


def simultaneous_terms(mdp, policy, mu, gen, size):
    """Single-trajectory REINFORCE estimates, one list of per-epoch arrays."""
    states, actions, rewards = sample_batch(mdp, policy, mu, 0, gen, size)
    to_go = reward_to_go(rewards)
    return [_score_terms(policy[h], states[:, h], actions[:, h], to_go[:, h]) for h in range(mdp.horizon)]


def dynamic_terms(mdp, composite, mu_h, h, gen, size):
    states, actions, rewards = sample_batch(mdp, composite, mu_h, h, gen, size)
    to_go = reward_to_go(rewards)
    return _score_terms(composite[h], states[:, 0], actions[:, 0], to_go[:, 0])


def _map_chunks(work, sizes, max_workers):
    max_workers = config.get_or("stochastic_max_workers", 1) if max_workers is None else max_workers
    if max_workers <= 1 or len(sizes) == 1:
        return [work(j, size) for j, size in enumerate(sizes)]
    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        return list(executor.map(work, range(len(sizes)), sizes))


def estimate_grad_simultaneous(mdp, theta, mu, batch, rng, max_workers=None, chunk_size=None):
    """
    REINFORCE estimate (1/K) sum_i sum_h grad log pi(a_h^i|s_h^i) R_h^i.

    Trajectories are drawn in chunks, chunk j from `rng.generator(j)`, and chunk sums
    are added in chunk order, so the result does not depend on `max_workers`.
    """
    if batch < 1:
        raise ValueError(f"Batch size must be at least 1, got {batch}")
    policy = policy_of(theta)
    mu = np.asarray(mu, dtype=np.float64)

    def _chunk_sum(j, size):
        return [terms.sum(axis=0) for terms in simultaneous_terms(mdp, policy, mu, rng.generator(j), size)]

    partials = _map_chunks(_chunk_sum, _chunks(batch, chunk_size), max_workers)
    total = partials[0]
    for partial in partials[1:]:
        total = [a + b for a, b in zip(total, partial)]
    return GradTensor([block / batch for block in total], theta.mask)


def estimate_grad_dynamic(mdp, theta_h, tilde_pi, mu_h, h, batch, rng, max_workers=None, chunk_size=None):
    """
    REINFORCE estimate of the epoch-h block gradient: trajectories start at epoch h
    from mu_h, take the first action from pi^theta_h and the rest from tilde_pi.
    """
    if batch < 1:
        raise ValueError(f"Batch size must be at least 1, got {batch}")
    composite = tilde_pi.with_epoch(h, softmax_rows(theta_h, mdp.mask[h]))
    mu_h = np.asarray(mu_h, dtype=np.float64)

    def _chunk_sum(j, size):
        return dynamic_terms(mdp, composite, mu_h, h, rng.generator(j), size).sum(axis=0)

    partials = _map_chunks(_chunk_sum, _chunks(batch, chunk_size), max_workers)
    total = partials[0]
    for partial in partials[1:]:
        total = total + partial
    return total / batch


@dataclass
class CouplingTrace:
    """
    Distances ||theta_bar^(n) - theta^(n)|| after every update against an exact run from
    the same start and step size, with the stopping threshold in force at that step.
    """

    distances: np.ndarray
    thresholds: np.ndarray
    min_opt_stochastic: np.ndarray
    crossing: Optional[int]
    c_reference: float

    @property
    def stayed_above_half_c(self):
        """Stochastic optimal-action probabilities stayed >= c/2 before the first crossing."""
        end = len(self.distances) if self.crossing is None else self.crossing - 1
        return bool(np.all(self.min_opt_stochastic[:end] >= self.thresholds[:end] * 2.0))


class CouplingTracker:
    """
    Runs the exact-gradient companion of a stochastic run in lockstep.

    For the simultaneous scheme the threshold is c_hat / 4, c_hat being the running
    minimum of the exact iterates' optimal-action probability. For the dynamic
    scheme it is c_h / 4 with c_h = 1/|A| unless `c_threshold` is given.
    """

    def __init__(self, mdp, c_threshold=None):
        self.mdp = mdp
        self.c_threshold = c_threshold
        self.distances = []
        self.thresholds = []
        self.min_opt_stochastic = []
        self.crossing = None

    def _record(self, distance, c_value, min_opt_bar):
        self.distances.append(distance)
        self.thresholds.append(c_value / 4.0)
        self.min_opt_stochastic.append(min_opt_bar)
        crossed = distance >= c_value / 4.0
        if crossed and self.crossing is None:
            self.crossing = len(self.distances)
            logger.info(f"Coupling threshold {c_value / 4.0} crossed at step {self.crossing}")
        return distance, crossed

    def start_simultaneous(self, theta0, mu, eta, choices):
        self.theta = theta0.copy()
        self.mu = mu
        self.eta = eta
        self.choices = choices
        self.c_hat = min_optimal_probability(policy_of(self.theta), choices)

    def step_simultaneous(self, theta_bar):
        grad = simultaneous_parts(self.mdp, self.theta, self.mu)[3]
        self.theta = self.theta + grad.scaled(self.eta)
        self.c_hat = min(self.c_hat, min_optimal_probability(policy_of(self.theta), self.choices))
        c_value = self.c_threshold if self.c_threshold is not None else self.c_hat
        min_opt_bar = min_optimal_probability(policy_of(theta_bar), self.choices)
        return self._record((theta_bar - self.theta).norm(), c_value, min_opt_bar)

    def start_phase(self, h, block0, q, mu_h, eta_h, a_star):
        self.h = h
        self.block = np.array(block0, dtype=np.float64)
        self.q = q
        self.mu_h = mu_h
        self.eta = eta_h
        self.a_star = a_star

    def step_dynamic(self, block_bar):
        grad = dynamic_parts(self.mdp, self.block, self.q, self.mu_h, self.h)[2]
        self.block = self.block + self.eta * grad
        mask = self.mdp.mask[self.h]
        distance = float(np.sqrt(np.sum(np.where(mask, block_bar - self.block, 0.0) ** 2)))
        pi_bar = softmax_rows(block_bar, mask)
        min_opt_bar = float(np.min(pi_bar[np.arange(len(self.a_star)), self.a_star]))
        c_value = self.c_threshold if self.c_threshold is not None else 1.0 / self.mdp.n_actions
        return self._record(distance, c_value, min_opt_bar)

    def trace(self):
        thresholds = np.array(self.thresholds)
        return CouplingTrace(
            distances=np.array(self.distances),
            thresholds=thresholds,
            min_opt_stochastic=np.array(self.min_opt_stochastic),
            crossing=self.crossing,
            c_reference=float(4.0 * thresholds.min()) if len(thresholds) else float("nan"),
        )


def train_stochastic_simultaneous(mdp, theta0, mu, schedule, rng, log_sink=None, coupling=None, max_workers=None):
    """
    theta_bar <- theta_bar + eta * g_hat with batch K for N steps. J, min_opt_prob and
    subopt in the log are exact evaluations of the current iterate.

    Args:
        rng (Substreams): Step n draws from `rng.child(0, n)`, the keys of epoch 0 in the dynamic trainer.
        coupling (CouplingTracker, optional): Exact companion advanced in lockstep.
    """
    log = log_sink if log_sink is not None else TrainLog(stochastic=True)
    mu = np.asarray(mu, dtype=np.float64)
    tables_star, pi_star = backward_induction_optimal(mdp)
    optimum = tables_star.value(mu)
    choices = pi_star.greedy_actions()
    eta, batch = schedule.etas[0], schedule.batches[0]
    if coupling is not None:
        coupling.start_simultaneous(theta0, mu, eta, choices)

    offset = log.grad_evals

    theta = theta0.copy()
    n_steps = schedule.n_steps[0]
    logger.info(f"Stochastic simultaneous training: eta={eta}, N={n_steps}, K={batch}")
    for n in range(n_steps):
        policy, tables, _, exact = simultaneous_parts(mdp, theta, mu)
        grad = exact if batch is None else estimate_grad_simultaneous(mdp, theta, mu, batch, rng.child(0, n), max_workers)
        if not grad.is_finite():
            logger.error(f"Non-finite gradient estimate at step {n}")
            raise NonFiniteGradientError(n)
        J = tables.value(mu)
        min_opt = min_optimal_probability(policy, choices)
        theta = theta + grad.scaled(eta)

        distance, crossed = coupling.step_simultaneous(theta) if coupling is not None else (None, None)
        log.append(
            offset + n + 1,
            "all",
            J,
            grad.norm(),
            min_opt,
            optimum - J,
            force=n == n_steps - 1,
            batch_size=batch,
            coupling_dist=distance,
            crossed=crossed,
        )
    return theta, log


def train_stochastic_dynamic(mdp, theta0, mu_list, schedule, rng, log_sink=None, mu=None, coupling=None, max_workers=None):
    """
    Backward sweep h = H-1 .. 0 with N_h batched updates per epoch against the
    continuation trained so far. Step n of phase h draws from `rng.child(h, n)`.
    """
    log = log_sink if log_sink is not None else TrainLog(stochastic=True)
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
        log.phase_limits[h] = value_of(best)
        eta, batch, n_steps = schedule.etas[h], schedule.batches[h], schedule.n_steps[h]
        if coupling is not None:
            coupling.start_phase(h, theta.blocks[h], q, mu_h, eta, a_star)
        logger.info(f"Stochastic dynamic phase {h}: eta={eta}, N={n_steps}, K={batch}")

        block = theta.blocks[h]
        for n in range(n_steps):
            pi_h, v_h, exact = dynamic_parts(mdp, block, q, mu_h, h)
            if batch is None:
                grad = exact
            else:
                grad = estimate_grad_dynamic(mdp, block, tilde_pi, mu_h, h, batch, rng.child(h, n), max_workers)
            if not np.all(np.isfinite(grad)):
                logger.error(f"Non-finite gradient estimate at step {n} of phase {h}")
                raise NonFiniteGradientError(n, h)
            counter += 1
            J = value_of(v_h)
            block = block + eta * grad

            distance, crossed = coupling.step_dynamic(block) if coupling is not None else (None, None)
            log.append(
                counter,
                h,
                J,
                float(np.sqrt(np.sum(grad**2))),
                float(np.min(pi_h[rows, a_star])),
                optimum - J,
                force=n == n_steps - 1,
                batch_size=batch,
                coupling_dist=distance,
                crossed=crossed,
            )
        theta = theta.with_block(h, block)
    return theta, log


def coupling_trace(mdp, theta0, mu, eta, batch, n_steps, rng, scheme="simultaneous", c_threshold=None):
    """
    Exact and stochastic runs in lockstep from the same theta0 and step size.

    Args:
        mu: Start distribution (simultaneous) or list of mu_h (dynamic).
        batch (int | None): Batch size; None runs the exact gradient on both sides.

    Returns:
        CouplingTrace
    """
    tracker = CouplingTracker(mdp, c_threshold)
    log = TrainLog(stochastic=True, log_every=1)
    if scheme == "simultaneous":
        schedule = StochasticSchedule(scheme, [n_steps], [eta], [batch])
        train_stochastic_simultaneous(mdp, theta0, mu, schedule, rng, log, coupling=tracker)
    else:
        horizon = mdp.horizon
        schedule = StochasticSchedule(scheme, [n_steps] * horizon, [eta] * horizon, [batch] * horizon)
        train_stochastic_dynamic(mdp, theta0, mu, schedule, rng, log, coupling=tracker)
    return tracker.trace()


@dataclass
class EstimatorMoments:
    mean: np.ndarray
    exact: np.ndarray
    stderr: np.ndarray
    mse: float
    bound: float
    n_samples: int

    def unbiased(self, width=4.0):
        """|mean - exact| <= width * sqrt(bound / M) componentwise."""
        return bool(np.all(np.abs(self.mean - self.exact) <= width * math.sqrt(self.bound / self.n_samples)))


def estimator_moments(mdp, theta, mu, n_samples, rng, h=None, tilde_pi=None):
    """
    Empirical mean and mean squared error of single-trajectory estimates over
    `n_samples` seeded draws. Simultaneous estimator unless `h` is given, in which case
    `theta` is the epoch-h block and `mu` is mu_h.

    Returns:
        EstimatorMoments: flat valid-entry vectors; `bound` is xi or psi_h.
    """
    sizes = _chunks(n_samples, None)
    if h is None:
        policy = policy_of(theta)
        exact = simultaneous_parts(mdp, theta, mu)[3].flat()
        mask = np.concatenate([m.ravel() for m in mdp.mask])

        def _flat(j, size):
            terms = simultaneous_terms(mdp, policy, mu, rng.generator(j), size)
            return np.concatenate([t.reshape(size, -1) for t in terms], axis=1)[:, mask]

        bound = variance_bound_simultaneous(mdp)
    else:
        block = np.asarray(theta, dtype=np.float64)
        q = phase_targets(mdp, tilde_pi, h)[0]
        exact = dynamic_parts(mdp, block, q, mu, h)[2][mdp.mask[h]]
        composite = tilde_pi.with_epoch(h, softmax_rows(block, mdp.mask[h]))
        mask = mdp.mask[h].ravel()

        def _flat(j, size):
            return dynamic_terms(mdp, composite, mu, h, rng.generator(j), size).reshape(size, -1)[:, mask]

        bound = variance_bound_dynamic(mdp, h)

    samples = np.concatenate([_flat(j, size) for j, size in enumerate(sizes)], axis=0)
    moments = EstimatorMoments(
        mean=samples.mean(axis=0),
        exact=exact,
        stderr=samples.std(axis=0, ddof=1) / math.sqrt(n_samples),
        mse=float(np.mean(np.sum((samples - exact) ** 2, axis=1))),
        bound=bound,
        n_samples=n_samples,
    )
    logger.info(f"Estimator moments over {n_samples} samples: mse={moments.mse}, bound={bound}")
    return moments
