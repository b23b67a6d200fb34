from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from finmdp_pg.logger import logger
from finmdp_pg.mdp import (
    _q_from_next,
    backward_induction_optimal,
    evaluate_policy,
    forward_measure,
    greedy_with_ties,
    state_visitation,
)
from finmdp_pg.softmax import GradTensor, ParamTensor, min_optimal_probability, policy_of, softmax_rows


class AssumptionError(ValueError):
    """Constant-state-space assumption violated, or a zero denominator in a mismatch ratio."""


@dataclass
class PlCertificate:
    lhs: float
    rhs: Optional[float]
    suboptimality: float
    min_opt_prob: float
    mismatch: Optional[float] = None

    @property
    def applicable(self):
        return self.rhs is not None

    def holds(self, tol=1e-10):
        return not self.applicable or self.lhs >= self.rhs - tol


@dataclass
class Simultaneous:
    mu: np.ndarray


@dataclass
class Dynamic:
    h: int
    tilde_pi: object
    mu_h: np.ndarray


def smoothness_simultaneous(mdp):
    return mdp.horizon**2 * mdp.r_star * (2.0 - 1.0 / mdp.n_actions)


def smoothness_dynamic(mdp, h):
    return 2.0 * (mdp.horizon - h) * mdp.r_star


def simultaneous_parts(mdp, theta, mu):
    """Policy, value tables, visitation and gradient at theta, sharing one evaluation pass."""
    policy = policy_of(theta)
    tables = evaluate_policy(mdp, policy)
    rho = forward_measure(mdp, policy, mu)
    grad = GradTensor([rho[h][:, None] * policy[h] * tables.adv[h] for h in range(mdp.horizon)], theta.mask)
    return policy, tables, rho, grad


def objective_simultaneous(mdp, theta, mu=None):
    """J(theta, mu) = V_0^{pi^theta}(mu)."""
    mu = mdp.start if mu is None else mu
    return evaluate_policy(mdp, policy_of(theta)).value(mu)


def grad_simultaneous(mdp, theta, mu=None):
    """
    Exact gradient of J: dJ/dtheta(s_h, a) = rho(s_h) pi(a|s_h) A_h(s_h, a).
    """
    mu = mdp.start if mu is None else mu
    return simultaneous_parts(mdp, theta, mu)[3]


def continuation_q(mdp, tilde_pi, h):
    """Q_h(s, a) = r(s, a) + E[V_{h+1}^{tilde_pi}(S')], independent of tilde_pi at epochs <= h."""
    if h == mdp.horizon - 1:
        return _q_from_next(mdp, h, None)
    v_next = None
    for k in reversed(range(h + 1, mdp.horizon)):
        q = _q_from_next(mdp, k, v_next)
        v_next = np.sum(tilde_pi[k] * q, axis=1)
    return _q_from_next(mdp, h, v_next)


def _block(theta_h, h):
    return theta_h.blocks[h] if isinstance(theta_h, ParamTensor) else np.asarray(theta_h, dtype=np.float64)


def dynamic_parts(mdp, theta_h, q, mu_h, h):
    """Epoch-h policy, its values V_h = sum_a pi Q and the block gradient mu_h pi A."""
    pi_h = softmax_rows(theta_h, mdp.mask[h])
    v_h = np.sum(pi_h * q, axis=1)
    adv = np.where(mdp.mask[h], q - v_h[:, None], 0.0)
    return pi_h, v_h, np.asarray(mu_h)[:, None] * pi_h * adv


def objective_dynamic(mdp, theta_h, tilde_pi, mu_h, h):
    """J_h(theta_h, tilde_pi, mu_h) = V_h^{(pi^theta_h, tilde_pi)}(mu_h)."""
    q = continuation_q(mdp, tilde_pi, h)
    _, v_h, _ = dynamic_parts(mdp, _block(theta_h, h), q, mu_h, h)
    return float(np.dot(mu_h, v_h))


def grad_dynamic(mdp, theta_h, tilde_pi, mu_h, h, q=None):
    """
    Exact gradient of J_h with respect to the epoch-h block.

    Returns:
        np.ndarray: Block of shape (|S_h|, n_actions).
    """
    q = continuation_q(mdp, tilde_pi, h) if q is None else q
    return dynamic_parts(mdp, _block(theta_h, h), q, mu_h, h)[2]


def distribution_mismatch(mdp, mu, pi_star, pi_theta):
    """
    Returns:
        tuple: (max_s d*(s) / d^theta(s), H * max_s d*(s) / mu(s)). The second value bounds
            the first for every theta because d^theta >= mu / H.

    Raises:
        AssumptionError: If state spaces differ across epochs or d^theta vanishes somewhere.
    """
    if not mdp.constant_state_space:
        raise AssumptionError("distribution mismatch needs a state space that is constant over epochs")
    d_star = state_visitation(mdp, pi_star, mu).d
    d_theta = state_visitation(mdp, pi_theta, mu).d
    if np.any(d_theta <= 0):
        raise AssumptionError("visitation distribution of the current policy has a zero entry")
    ratio = float(np.max(d_star / d_theta))
    with np.errstate(divide="ignore"):
        uniform = float(mdp.horizon * np.max(np.where(d_star > 0, d_star / np.asarray(mu, dtype=np.float64), 0.0)))
    return ratio, uniform


def optimal_start_mismatch(mdp, mu, pi_star):
    """||d^{pi*}_mu / mu||_inf over the states of S_0, the term entering the step counts."""
    d_star = state_visitation(mdp, pi_star, mu)
    positions = {state: i for i, state in enumerate(d_star.state_ids)}
    mu = np.asarray(mu, dtype=np.float64)
    ratios = []
    for i, state in enumerate(mdp.states[0]):
        value = d_star.d[positions[str(state)]]
        if value > 0:
            ratios.append(np.inf if mu[i] == 0 else value / mu[i])
    return float(max(ratios)) if ratios else 0.0


def enlarged_mismatch(rho_star, rho_theta):
    """max over epoch-tagged states of rho*(s_h) / rho^theta(s_h) on the support of rho*."""
    worst = 0.0
    for star, current in zip(rho_star, rho_theta):
        support = star > 0
        if not np.any(support):
            continue
        if np.any(current[support] <= 0):
            return np.inf
        worst = max(worst, float(np.max(star[support] / current[support])))
    return worst


def pl_certificate_simultaneous(mdp, theta, mu=None, pi_star=None, optimal=None, parts=None):
    """
    Weak PL certificate for the simultaneous objective.

    The lower bound divides by the visitation ratio on the enlarged state space,
    which dominates the aggregated coefficient reported as `mismatch`.

    Args:
        optimal (tuple, optional): Cached (ValueTables, TabularPolicy, rho*) of the optimal policy.
        parts (tuple, optional): Cached `simultaneous_parts` at theta.
    """
    mu = mdp.start if mu is None else mu
    if optimal is None:
        if pi_star is None:
            _, pi_star = backward_induction_optimal(mdp)
        optimal = (evaluate_policy(mdp, pi_star), pi_star, forward_measure(mdp, pi_star, mu))
    tables_star, pi_star, rho_star = optimal
    policy, tables, rho, grad = parts if parts is not None else simultaneous_parts(mdp, theta, mu)

    suboptimality = tables_star.value(mu) - tables.value(mu)
    min_opt = min_optimal_probability(policy, pi_star.greedy_actions())
    lhs = grad.norm()
    if not mdp.constant_state_space:
        return PlCertificate(lhs=lhs, rhs=None, suboptimality=suboptimality, min_opt_prob=min_opt)

    mismatch, _ = distribution_mismatch(mdp, mu, pi_star, policy)
    coefficient = enlarged_mismatch(rho_star, rho)
    rhs = 0.0 if math.isinf(coefficient) else min_opt / math.sqrt(mdp.n_enlarged_states) / coefficient * suboptimality
    return PlCertificate(lhs=lhs, rhs=rhs, suboptimality=suboptimality, min_opt_prob=min_opt, mismatch=mismatch)


def pl_certificate_dynamic(mdp, theta_h, tilde_pi, mu_h, h, q=None):
    """
    Weak PL certificate for J_h: ||grad J_h|| >= min_s pi(a_h*(s)|s) (J_h* - J_h) / sqrt(|S_h|),
    with a_h* greedy against the fixed continuation tilde_pi.
    The 1/sqrt(|S_h|) factor comes from bounding the sum over states by the L2 norm
    of the gradient (Cauchy-Schwarz); without it the bound fails on dice:H=5 at theta = 0.
    """
    q = continuation_q(mdp, tilde_pi, h) if q is None else q
    pi_h, v_h, grad = dynamic_parts(mdp, _block(theta_h, h), q, mu_h, h)
    masked = np.where(mdp.mask[h], q, -np.inf)
    a_star = greedy_with_ties(masked)
    best = masked[np.arange(masked.shape[0]), a_star]

    suboptimality = float(np.dot(mu_h, best) - np.dot(mu_h, v_h))
    min_opt = float(np.min(pi_h[np.arange(pi_h.shape[0]), a_star]))
    lhs = float(np.sqrt(np.sum(grad**2)))
    rhs = min_opt * suboptimality / math.sqrt(len(mdp.states[h]))
    return PlCertificate(lhs=lhs, rhs=rhs, suboptimality=suboptimality, min_opt_prob=min_opt)


def smoothness_witness(mdp, theta_a, theta_b, scheme):
    """
    Returns:
        tuple: (||grad(theta_a) - grad(theta_b)||_2, beta * ||theta_a - theta_b||_2) for the
            simultaneous objective (beta = H^2 R* (2 - 1/|A|)) or the epoch-h objective
            (beta_h = 2 (H - h) R*).
    """
    if isinstance(scheme, Simultaneous):
        gap = (grad_simultaneous(mdp, theta_a, scheme.mu) - grad_simultaneous(mdp, theta_b, scheme.mu)).norm()
        return gap, smoothness_simultaneous(mdp) * (theta_a - theta_b).norm()

    h = scheme.h
    q = continuation_q(mdp, scheme.tilde_pi, h)
    block_a, block_b = _block(theta_a, h), _block(theta_b, h)
    grad_a = dynamic_parts(mdp, block_a, q, scheme.mu_h, h)[2]
    grad_b = dynamic_parts(mdp, block_b, q, scheme.mu_h, h)[2]
    gap = float(np.sqrt(np.sum((grad_a - grad_b) ** 2)))
    distance = float(np.sqrt(np.sum(np.where(mdp.mask[h], block_a - block_b, 0.0) ** 2)))
    if distance == 0.0:
        logger.debug(f"Smoothness witness at epoch {h} evaluated at identical parameters")
    return gap, smoothness_dynamic(mdp, h) * distance
