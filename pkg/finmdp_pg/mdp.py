from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import List

import numpy as np

from finmdp_pg.config import config
from finmdp_pg.data import Data
from finmdp_pg.logger import logger
from finmdp_pg.schema import model_validator

STOCHASTIC_TOL = 1e-12
TIE_TOL = 1e-12


class MdpValidationError(ValueError):
    def __init__(self, message, location=None):
        self.reason = message
        self.location = location
        super().__init__(f"{message} at (h, s, a) = {location}" if location is not None else message)


class FiniteMdp:
    """
    A finite-time-horizon MDP over an epoch-tagged state space.

    States and actions keep their external identifiers; internally epoch `h`
    is a dense block of `len(states[h])` states and every table is padded to
    `n_actions` columns. Padded columns are masked out by `mask[h]`.

    Args:
        states (list): Per-epoch list of state identifiers.
        actions (list): Per-epoch, per-state list of action identifiers.
        rewards (list): Per-epoch arrays of shape (|S_h|, n_actions).
        transitions (list): Arrays of shape (|S_h|, n_actions, |S_{h+1}|) for h < H-1.
        r_star (float): Reward bound R*.
        start (array, optional): Start distribution on S_0, uniform when omitted.
        name (str, optional): Label used in logs and summaries.
    """

    def __init__(self, states, actions, rewards, transitions, r_star, start=None, name="mdp"):
        self.states = [list(epoch_states) for epoch_states in states]
        self.actions = [[list(state_actions) for state_actions in epoch_actions] for epoch_actions in actions]
        self.horizon = len(self.states)
        self.n_actions = max(len(a) for epoch_actions in self.actions for a in epoch_actions)
        self.rewards = [np.asarray(r, dtype=np.float64) for r in rewards]
        self.transitions = [np.asarray(p, dtype=np.float64) for p in transitions]
        self.r_star = float(r_star)
        self.name = name

        self.mask = []
        for epoch_actions in self.actions:
            mask = np.zeros((len(epoch_actions), self.n_actions), dtype=bool)
            for s, state_actions in enumerate(epoch_actions):
                mask[s, : len(state_actions)] = True
            self.mask.append(mask)
        self.n_valid = [mask.sum(axis=1) for mask in self.mask]

        if start is None:
            start = np.full(len(self.states[0]), 1.0 / len(self.states[0]))
        self.start = np.asarray(start, dtype=np.float64)

        self._state_lookup = [{str(s): i for i, s in enumerate(epoch_states)} for epoch_states in self.states]

    @property
    def sizes(self):
        return [len(epoch_states) for epoch_states in self.states]

    @property
    def dimension(self):
        """Total number of softmax parameters, sum over epochs of d_h."""
        return int(sum(mask.sum() for mask in self.mask))

    @property
    def n_enlarged_states(self):
        return int(sum(self.sizes))

    @property
    def constant_state_space(self):
        first = [str(s) for s in self.states[0]]
        return all([str(s) for s in epoch_states] == first for epoch_states in self.states)

    def state_index(self, h, state):
        try:
            return self._state_lookup[h][str(state)]
        except KeyError:
            raise KeyError(f"State {state!r} is not part of epoch {h}")

    def action_index(self, h, state_index, action):
        labels = [str(a) for a in self.actions[h][state_index]]
        try:
            return labels.index(str(action))
        except ValueError:
            raise KeyError(f"Action {action!r} is not available in state {self.states[h][state_index]!r}")

    def location(self, h, s=None, a=None):
        state = self.states[h][s] if s is not None else None
        action = self.actions[h][s][a] if s is not None and a is not None else None
        return (h, state, action)

    @classmethod
    def from_dict(cls, document, name="mdp"):
        """
        Build a model from the JSON document layout of a model file.

        Raises:
            MdpValidationError: On structural problems that cannot be represented
                (unknown identifiers, transition targets outside the next epoch).
        """
        horizon = document["horizon"]
        epochs = document["epochs"]
        if horizon != len(epochs):
            raise MdpValidationError(f"horizon {horizon} does not match {len(epochs)} epochs")

        states = [list(epoch["states"]) for epoch in epochs]
        actions = []
        for h, epoch in enumerate(epochs):
            epoch_actions = []
            for state in states[h]:
                state_actions = epoch["actions"].get(str(state))
                if not state_actions:
                    raise MdpValidationError("empty action set", (h, state, None))
                epoch_actions.append(list(state_actions))
            actions.append(epoch_actions)

        n_actions = max(len(a) for epoch_actions in actions for a in epoch_actions)
        lookups = [{str(s): i for i, s in enumerate(epoch_states)} for epoch_states in states]

        def _action_position(h, s, action):
            labels = [str(a) for a in actions[h][s]]
            if str(action) not in labels:
                raise MdpValidationError("unknown action", (h, states[h][s], action))
            return labels.index(str(action))

        def _state_position(h, state):
            if str(state) not in lookups[h]:
                raise MdpValidationError("unknown state", (h, state, None))
            return lookups[h][str(state)]

        rewards = []
        for h, epoch in enumerate(epochs):
            table = np.zeros((len(states[h]), n_actions))
            for state, row in epoch["rewards"].items():
                s = _state_position(h, state)
                for action, value in row.items():
                    table[s, _action_position(h, s, action)] = value
            rewards.append(table)

        transitions = []
        for h, epoch in enumerate(epochs):
            rows = epoch.get("transitions") or {}
            if h == horizon - 1:
                if rows:
                    raise MdpValidationError("transitions defined on the last epoch", (h, None, None))
                continue
            kernel = np.zeros((len(states[h]), n_actions, len(states[h + 1])))
            for state, by_action in rows.items():
                s = _state_position(h, state)
                for action, targets in by_action.items():
                    a = _action_position(h, s, action)
                    for target, probability in targets.items():
                        if str(target) not in lookups[h + 1]:
                            raise MdpValidationError(
                                "transition target not in next epoch",
                                (h, states[h][s], actions[h][s][a]),
                            )
                        kernel[s, a, lookups[h + 1][str(target)]] = probability
            transitions.append(kernel)

        start = None
        if "start" in document:
            start = np.zeros(len(states[0]))
            for state, probability in document["start"].items():
                start[_state_position(0, state)] = probability

        return cls(states, actions, rewards, transitions, document["r_star"], start=start, name=name)

    def to_dict(self):
        """Inverse of `from_dict`; zero rewards and transitions are omitted."""
        epochs = []
        for h in range(self.horizon):
            epoch = {
                "states": self.states[h],
                "actions": {str(s): self.actions[h][i] for i, s in enumerate(self.states[h])},
                "rewards": {},
            }
            for i, state in enumerate(self.states[h]):
                row = {
                    str(action): float(self.rewards[h][i, a])
                    for a, action in enumerate(self.actions[h][i])
                    if self.rewards[h][i, a] != 0.0
                }
                if row:
                    epoch["rewards"][str(state)] = row
            if h < self.horizon - 1:
                epoch["transitions"] = {
                    str(state): {
                        str(action): {
                            str(target): float(self.transitions[h][i, a, t])
                            for t, target in enumerate(self.states[h + 1])
                            if self.transitions[h][i, a, t] != 0.0
                        }
                        for a, action in enumerate(self.actions[h][i])
                    }
                    for i, state in enumerate(self.states[h])
                }
            epochs.append(epoch)
        return {
            "horizon": self.horizon,
            "epochs": epochs,
            "r_star": self.r_star,
            "start": {str(s): float(p) for s, p in zip(self.states[0], self.start) if p != 0.0},
        }


class TabularPolicy:
    """Per-epoch action distributions, one array of shape (|S_h|, n_actions) per epoch."""

    def __init__(self, probs):
        self.probs = [np.asarray(p, dtype=np.float64) for p in probs]

    def __getitem__(self, h):
        return self.probs[h]

    def __len__(self):
        return len(self.probs)

    def with_epoch(self, h, block):
        """The composite policy (block, pi_(h+1)) with earlier epochs kept from self."""
        probs = list(self.probs)
        probs[h] = np.asarray(block, dtype=np.float64)
        return TabularPolicy(probs)

    def check(self, mdp):
        for h, (probs, mask) in enumerate(zip(self.probs, mdp.mask)):
            if probs.shape != mask.shape:
                raise ValueError(f"Policy block {h} has shape {probs.shape}, expected {mask.shape}")
            if np.any(probs < 0) or np.any(probs[~mask] != 0):
                raise ValueError(f"Policy block {h} has negative or misplaced mass")
            if np.any(np.abs(probs.sum(axis=1) - 1.0) > STOCHASTIC_TOL):
                raise ValueError(f"Policy block {h} rows do not sum to 1")

    @classmethod
    def uniform(cls, mdp):
        return cls([mask / mask.sum(axis=1, keepdims=True) for mask in mdp.mask])

    @classmethod
    def deterministic(cls, mdp, choices):
        """`choices[h][s]` is the dense action index taken in state s at epoch h."""
        probs = []
        for h, mask in enumerate(mdp.mask):
            block = np.zeros(mask.shape)
            block[np.arange(mask.shape[0]), np.asarray(choices[h], dtype=int)] = 1.0
            probs.append(block)
        return cls(probs)

    def greedy_actions(self):
        return [np.argmax(block, axis=1) for block in self.probs]


@dataclass
class ValueTables:
    v: List[np.ndarray]
    q: List[np.ndarray]
    adv: List[np.ndarray]

    def value(self, mu, h=0):
        return float(np.dot(mu, self.v[h]))


@dataclass
class VisitationMeasures:
    rho: List[np.ndarray]
    state_ids: List[str]
    d: np.ndarray

    def total(self):
        return float(sum(block.sum() for block in self.rho))


@dataclass
class Trajectory:
    start_epoch: int
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    reward_to_go: np.ndarray

    def __len__(self):
        return len(self.states)

    def labels(self, mdp):
        return [
            (
                mdp.states[self.start_epoch + k][s],
                mdp.actions[self.start_epoch + k][s][a],
                float(r),
            )
            for k, (s, a, r) in enumerate(zip(self.states, self.actions, self.rewards))
        ]


def validate(mdp):
    """
    Check every model invariant and report the first violation.

    Raises:
        MdpValidationError: With the (h, s, a) location of the first violated invariant.
    """
    if mdp.horizon < 1:
        raise MdpValidationError("horizon must be positive")
    if not mdp.r_star > 0:
        raise MdpValidationError("r_star must be positive")
    if len(mdp.transitions) != mdp.horizon - 1:
        raise MdpValidationError(f"expected {mdp.horizon - 1} transition kernels, got {len(mdp.transitions)}")

    for h in range(mdp.horizon):
        mask = mdp.mask[h]
        for s in range(len(mdp.states[h])):
            if not mask[s].any():
                raise MdpValidationError("empty action set", mdp.location(h, s))
        rewards = mdp.rewards[h]
        if rewards.shape != mask.shape:
            raise MdpValidationError(f"reward table has shape {rewards.shape}, expected {mask.shape}", (h, None, None))
        for s, a in zip(*np.nonzero(mask)):
            value = rewards[s, a]
            if not np.isfinite(value) or value < 0 or value > mdp.r_star:
                raise MdpValidationError("reward out of bounds", mdp.location(h, s, a))

        if h == mdp.horizon - 1:
            continue
        kernel = mdp.transitions[h]
        expected = (len(mdp.states[h]), mdp.n_actions, len(mdp.states[h + 1]))
        if kernel.shape != expected:
            raise MdpValidationError(f"transition kernel has shape {kernel.shape}, expected {expected}", (h, None, None))
        for s, a in zip(*np.nonzero(mask)):
            row = kernel[s, a]
            if np.any(row < 0) or not np.all(np.isfinite(row)):
                raise MdpValidationError("negative transition probability", mdp.location(h, s, a))
            if abs(row.sum() - 1.0) > STOCHASTIC_TOL:
                raise MdpValidationError("transition not stochastic", mdp.location(h, s, a))

    if mdp.start.shape != (len(mdp.states[0]),) or np.any(mdp.start < 0) or abs(mdp.start.sum() - 1.0) > STOCHASTIC_TOL:
        raise MdpValidationError("start distribution not stochastic", (0, None, None))

    logger.debug(f"Model {mdp.name} validated: H={mdp.horizon}, |S^[H]|={mdp.n_enlarged_states}, d={mdp.dimension}")


def load_model(path):
    """
    Read, schema-check and validate a model file.
    """
    document = Data.json_to_dict(path)
    model_validator.validate(document, source=str(path))
    mdp = FiniteMdp.from_dict(document, name=str(path))
    validate(mdp)
    logger.info(f"Model loaded from {path}")
    return mdp


def _q_from_next(mdp, h, v_next):
    if h == mdp.horizon - 1:
        return mdp.rewards[h].copy()
    return mdp.rewards[h] + mdp.transitions[h] @ v_next


def evaluate_policy(mdp, policy):
    """
    Backward recursion for V, Q and A of a tabular policy.

    Args:
        mdp (FiniteMdp): The model.
        policy (TabularPolicy): Policy with a row for every (h, s).

    Returns:
        ValueTables: V_h, Q_h and A_h = Q_h - V_h for all epochs.
    """
    v = [None] * mdp.horizon
    q = [None] * mdp.horizon
    adv = [None] * mdp.horizon
    v_next = None
    for h in reversed(range(mdp.horizon)):
        q[h] = _q_from_next(mdp, h, v_next)
        v[h] = np.sum(policy[h] * q[h], axis=1)
        adv[h] = np.where(mdp.mask[h], q[h] - v[h][:, None], 0.0)
        v_next = v[h]
    return ValueTables(v=v, q=q, adv=adv)


def policy_value(mdp, policy, mu=None, h=0):
    mu = mdp.start if mu is None else mu
    return evaluate_policy(mdp, policy).value(mu, h)


def greedy_with_ties(q_row_masked):
    """Smallest action index among the maximisers (within TIE_TOL)."""
    best = np.max(q_row_masked, axis=-1, keepdims=True)
    return np.argmax(q_row_masked >= best - TIE_TOL, axis=-1)


def backward_induction_optimal(mdp):
    """
    Dynamic programming oracle.

    Returns:
        tuple: (ValueTables of V*, Q*, A*; deterministic optimal TabularPolicy). Ties are
            broken towards the smallest action index.
    """
    choices = [None] * mdp.horizon
    v = [None] * mdp.horizon
    q = [None] * mdp.horizon
    adv = [None] * mdp.horizon
    v_next = None
    for h in reversed(range(mdp.horizon)):
        q[h] = _q_from_next(mdp, h, v_next)
        masked = np.where(mdp.mask[h], q[h], -np.inf)
        choices[h] = greedy_with_ties(masked)
        v[h] = masked[np.arange(masked.shape[0]), choices[h]]
        adv[h] = np.where(mdp.mask[h], q[h] - v[h][:, None], 0.0)

        ties = np.sum(masked >= v[h][:, None] - TIE_TOL, axis=1)
        for s in np.nonzero(ties > 1)[0]:
            logger.debug(f"Tie at epoch {h}, state {mdp.states[h][s]!r}: picked action {mdp.actions[h][s][choices[h][s]]!r}")
        v_next = v[h]
    return ValueTables(v=v, q=q, adv=adv), TabularPolicy.deterministic(mdp, choices)


def forward_measure(mdp, policy, mu, start_epoch=0):
    """State occupation probabilities P(S_k = s) for k = start_epoch .. H-1."""
    rho = [np.asarray(mu, dtype=np.float64)]
    for h in range(start_epoch, mdp.horizon - 1):
        rho.append(np.einsum("s,sa,sat->t", rho[-1], policy[h], mdp.transitions[h]))
    return rho


def state_visitation(mdp, policy, mu=None):
    """
    Visitation measure on the enlarged state space and its normalised
    aggregation over state identifiers, d(s) = (1/H) * sum_h P(S_h = s).
    """
    mu = mdp.start if mu is None else mu
    rho = forward_measure(mdp, policy, mu)
    state_ids = []
    positions = {}
    for epoch_states in mdp.states:
        for state in epoch_states:
            if str(state) not in positions:
                positions[str(state)] = len(state_ids)
                state_ids.append(str(state))
    d = np.zeros(len(state_ids))
    for h, block in enumerate(rho):
        for i, state in enumerate(mdp.states[h]):
            d[positions[str(state)]] += block[i]
    return VisitationMeasures(rho=rho, state_ids=state_ids, d=d / mdp.horizon)


def _categorical(cdf, uniforms, n_valid):
    draws = np.sum(uniforms[:, None] >= cdf, axis=1)
    return np.minimum(draws, n_valid - 1)


def sample_batch(mdp, policy, mu_h, start_epoch, rng, size):
    """
    Sample `size` trajectories from epoch `start_epoch` to H-1.

    Returns:
        tuple: Integer arrays (states, actions) and float rewards, each of shape
            (size, H - start_epoch), in dense indices.
    """
    length = mdp.horizon - start_epoch
    states = np.zeros((size, length), dtype=np.int64)
    actions = np.zeros((size, length), dtype=np.int64)
    rewards = np.zeros((size, length))

    mu_h = np.asarray(mu_h, dtype=np.float64)
    current = _categorical(np.cumsum(mu_h)[None, :], rng.random(size), np.full(size, len(mu_h)))
    for k in range(length):
        h = start_epoch + k
        states[:, k] = current
        action_cdf = np.cumsum(policy[h][current], axis=1)
        chosen = _categorical(action_cdf, rng.random(size), mdp.n_valid[h][current])
        actions[:, k] = chosen
        rewards[:, k] = mdp.rewards[h][current, chosen]
        if h < mdp.horizon - 1:
            kernel_cdf = np.cumsum(mdp.transitions[h][current, chosen], axis=1)
            current = _categorical(kernel_cdf, rng.random(size), np.full(size, len(mdp.states[h + 1])))
    return states, actions, rewards


def reward_to_go(rewards):
    """Suffix sums along the last axis, R_h = sum_{k >= h} r_k."""
    return np.cumsum(rewards[..., ::-1], axis=-1)[..., ::-1]


def sample_trajectory(mdp, policy, mu_h, start_epoch, rng):
    states, actions, rewards = sample_batch(mdp, policy, mu_h, start_epoch, rng, 1)
    return Trajectory(
        start_epoch=start_epoch,
        states=states[0],
        actions=actions[0],
        rewards=rewards[0],
        reward_to_go=reward_to_go(rewards[0]),
    )


def performance_difference(mdp, pi, pi_prime, h, state):
    """
    Both sides of the performance difference identity at (h, state).

    Returns:
        tuple: (V_h^pi(s) - V_h^pi'(s), sum_{k >= h} E^pi[A_k^pi'(S_k, A_k) | S_h = s]).
    """
    s = mdp.state_index(h, state)
    tables = evaluate_policy(mdp, pi)
    tables_prime = evaluate_policy(mdp, pi_prime)
    lhs = float(tables.v[h][s] - tables_prime.v[h][s])

    delta = np.zeros(len(mdp.states[h]))
    delta[s] = 1.0
    rho = forward_measure(mdp, pi, delta, start_epoch=h)
    rhs = 0.0
    for k, occupation in enumerate(rho, start=h):
        rhs += float(np.sum(occupation[:, None] * pi[k] * tables_prime.adv[k]))
    return lhs, rhs


def uniform_start_distributions(mdp):
    return [np.full(size, 1.0 / size) for size in mdp.sizes]


def pushforward_start_distributions(mdp, mu=None):
    """mu on S_0 followed by the uniform policy: mu_h = P(S_h = .)."""
    mu = mdp.start if mu is None else mu
    return forward_measure(mdp, TabularPolicy.uniform(mdp), mu)


def default_start_distributions(mdp, mu=None):
    if config.get_or("default_start", "uniform") == "pushforward":
        return pushforward_start_distributions(mdp, mu)
    return uniform_start_distributions(mdp)


def _reachable(mdp, mu):
    reachable = [np.asarray(mu) > 0]
    for h in range(mdp.horizon - 1):
        weights = reachable[-1][:, None] & mdp.mask[h]
        reachable.append(np.any(mdp.transitions[h][weights] > 0, axis=0))
    return reachable


def enumerate_optimal(mdp, mu=None, max_policies=None):
    """
    Exhaustive search over deterministic policies, restricted to states
    reachable from mu (choices elsewhere cannot change V_0(mu)).

    Returns:
        tuple: (best V_0(mu), maximising deterministic TabularPolicy, number of policies scored).

    Raises:
        ValueError: If the pruned policy count exceeds `max_policies`.
    """
    mu = mdp.start if mu is None else np.asarray(mu, dtype=np.float64)
    max_policies = max_policies or config.get_or("enumeration_max_policies", 1 << 22)
    reachable = _reachable(mdp, mu)

    combos_per_epoch = []
    values = None
    for h in reversed(range(mdp.horizon)):
        choice_states = [s for s in range(len(mdp.states[h])) if reachable[h][s] and mdp.n_valid[h][s] > 1]
        combos = np.zeros((1, len(mdp.states[h])), dtype=np.int64)
        if choice_states:
            grid = np.array(list(itertools.product(*[range(mdp.n_valid[h][s]) for s in choice_states])))
            combos = np.zeros((len(grid), len(mdp.states[h])), dtype=np.int64)
            combos[:, choice_states] = grid
        combos_per_epoch.append(combos)

        count = (1 if values is None else len(values)) * len(combos)
        if count > max_policies:
            raise ValueError(f"Enumeration needs {count} policy combinations, limit is {max_policies}")

        if values is None:
            q = mdp.rewards[h][None, :, :]
        else:
            q = mdp.rewards[h][None, :, :] + np.einsum("sat,mt->msa", mdp.transitions[h], values)

        if h > 0:
            gathered = q[:, np.arange(q.shape[1])[None, :], combos]
            values = gathered.reshape(-1, q.shape[1])
        else:
            scores = np.zeros((q.shape[0], len(combos)))
            for s in range(q.shape[1]):
                if mu[s] > 0:
                    scores += mu[s] * q[:, s, combos[:, s]]

    combos_per_epoch.reverse()
    flat = int(np.argmax(scores))
    best = float(scores.flat[flat])
    n_scored = int(scores.size)

    choices = []
    index = flat
    for h in range(mdp.horizon):
        n_combos = len(combos_per_epoch[h])
        choices.append(combos_per_epoch[h][index % n_combos])
        index //= n_combos
    logger.info(f"Enumerated {n_scored} reachable deterministic policies, best V_0 = {best}")
    return best, TabularPolicy.deterministic(mdp, choices), n_scored
