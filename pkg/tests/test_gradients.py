from __future__ import annotations

import numpy as np
import pytest

from finmdp_pg.diagnostics import finite_difference_gradient
from finmdp_pg.gradients import (
    AssumptionError,
    Dynamic,
    Simultaneous,
    continuation_q,
    distribution_mismatch,
    grad_dynamic,
    grad_simultaneous,
    objective_dynamic,
    objective_simultaneous,
    pl_certificate_dynamic,
    pl_certificate_simultaneous,
    smoothness_dynamic,
    smoothness_simultaneous,
    smoothness_witness,
)
from finmdp_pg.mdp import FiniteMdp, backward_induction_optimal, forward_measure, uniform_start_distributions
from finmdp_pg.models import build_bandit2, build_dice, build_zero, random_mdp
from finmdp_pg.softmax import ParamTensor, policy_of


def _random_instances(count, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        horizon = int(rng.integers(1, 5))
        mdp = random_mdp(rng, horizon, int(rng.integers(1, 5)), int(rng.integers(1, 4)), varying_actions=True)
        yield mdp, ParamTensor.random(mdp, rng, scale=1.5), rng


def test_bandit_gradient_at_zero():
    mdp = build_bandit2()

    grad = grad_simultaneous(mdp, ParamTensor.zeros(mdp))

    np.testing.assert_allclose(grad.blocks[0], [[0.25, -0.25]], atol=1e-15)


def test_zero_rewards_give_zero_gradient():
    mdp = build_zero(3)
    theta = ParamTensor.random(mdp, np.random.default_rng(0))

    assert grad_simultaneous(mdp, theta).norm() == 0.0
    assert objective_simultaneous(mdp, theta) == 0.0


def test_simultaneous_gradient_matches_finite_differences():
    for mdp, theta, _ in _random_instances(100):
        exact = grad_simultaneous(mdp, theta)
        numeric = finite_difference_gradient(mdp, theta, Simultaneous(mdp.start), eps=1e-6)
        np.testing.assert_allclose(exact.flat(), numeric.flat(), atol=1e-5)


def test_dynamic_gradient_matches_finite_differences():
    for mdp, theta, rng in _random_instances(100, seed=1):
        tilde_pi = policy_of(ParamTensor.random(mdp, rng))
        mu_list = uniform_start_distributions(mdp)
        h = int(rng.integers(0, mdp.horizon))
        exact = grad_dynamic(mdp, theta.blocks[h], tilde_pi, mu_list[h], h)
        numeric = finite_difference_gradient(mdp, theta, Dynamic(h, tilde_pi, mu_list[h]), eps=1e-6)
        np.testing.assert_allclose(exact, numeric, atol=1e-5)


def test_gradient_rows_sum_to_zero():
    for mdp, theta, _ in _random_instances(10, seed=2):
        grad = grad_simultaneous(mdp, theta)
        for block in grad.blocks:
            np.testing.assert_allclose(block.sum(axis=1), 0.0, atol=1e-12)


def test_simultaneous_block_is_dynamic_gradient_under_visitation():
    rng = np.random.default_rng(12)
    for _ in range(20):
        mdp = random_mdp(rng, 2, int(rng.integers(1, 5)), int(rng.integers(2, 4)))
        theta = ParamTensor.random(mdp, rng, scale=1.5)
        policy = policy_of(theta)
        rho = forward_measure(mdp, policy, mdp.start)

        simultaneous = grad_simultaneous(mdp, theta)
        for h in range(mdp.horizon):
            dynamic = grad_dynamic(mdp, theta.blocks[h], policy, rho[h], h)
            np.testing.assert_allclose(simultaneous.blocks[h], dynamic, atol=1e-12)


def test_dynamic_objective_ignores_earlier_epochs():
    mdp = build_dice(4)
    rng = np.random.default_rng(3)
    theta = ParamTensor.random(mdp, rng)
    other = theta.with_block(0, rng.normal(size=(7, 2)))
    mu_2 = np.full(7, 1 / 7)

    a = objective_dynamic(mdp, theta.blocks[2], policy_of(theta), mu_2, 2)
    b = objective_dynamic(mdp, theta.blocks[2], policy_of(other), mu_2, 2)

    assert a == b


def test_continuation_q_of_optimal_policy_is_optimal_q():
    mdp = build_dice(5)
    tables, pi_star = backward_induction_optimal(mdp)

    for h in range(mdp.horizon):
        np.testing.assert_allclose(continuation_q(mdp, pi_star, h), tables.q[h], atol=1e-12)


def test_dynamic_pl_certificate_on_dice_last_epoch():
    mdp = build_dice(5)
    theta = ParamTensor.zeros(mdp)
    mu_4 = np.full(7, 1 / 7)

    certificate = pl_certificate_dynamic(mdp, theta, policy_of(theta), mu_4, 4)

    assert certificate.suboptimality == pytest.approx(1.5)
    assert certificate.min_opt_prob == 0.5
    assert certificate.rhs == pytest.approx(0.5 * 1.5 / np.sqrt(7))
    assert certificate.holds()
    # Without the sqrt(|S_h|) factor the bound would be 0.75, above the gradient norm.
    assert certificate.lhs == pytest.approx(np.sqrt(182) / 28)
    assert certificate.lhs < certificate.min_opt_prob * certificate.suboptimality


def test_pl_certificates_hold_on_random_instances():
    rng = np.random.default_rng(4)
    for _ in range(40):
        mdp = random_mdp(rng, int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(2, 4)))
        theta = ParamTensor.random(mdp, rng, scale=2.0)
        simultaneous = pl_certificate_simultaneous(mdp, theta)
        assert simultaneous.applicable
        assert simultaneous.holds()

        h = int(rng.integers(0, mdp.horizon))
        mu_h = uniform_start_distributions(mdp)[h]
        dynamic = pl_certificate_dynamic(mdp, theta, policy_of(ParamTensor.random(mdp, rng)), mu_h, h)
        assert dynamic.holds()


def test_simultaneous_certificate_not_applicable_with_varying_states(two_epoch_document):
    mdp = FiniteMdp.from_dict(two_epoch_document)

    certificate = pl_certificate_simultaneous(mdp, ParamTensor.zeros(mdp))

    assert not certificate.applicable
    assert certificate.rhs is None
    assert certificate.holds()


def test_distribution_mismatch():
    mdp = build_dice(3, start="uniform")
    _, pi_star = backward_induction_optimal(mdp)

    ratio, uniform_bound = distribution_mismatch(mdp, mdp.start, pi_star, policy_of(ParamTensor.zeros(mdp)))

    assert ratio >= 1.0
    assert ratio <= uniform_bound


def test_distribution_mismatch_requires_constant_states(two_epoch_document):
    mdp = FiniteMdp.from_dict(two_epoch_document)
    _, pi_star = backward_induction_optimal(mdp)

    with pytest.raises(AssumptionError):
        distribution_mismatch(mdp, mdp.start, pi_star, pi_star)


def test_smoothness_constants():
    mdp = build_dice(5)

    assert smoothness_simultaneous(mdp) == pytest.approx(25 * 6 * 1.5)
    assert smoothness_dynamic(mdp, 4) == 12.0


def test_smoothness_witnesses_hold():
    rng = np.random.default_rng(5)
    for _ in range(20):
        mdp = random_mdp(rng, int(rng.integers(1, 4)), 3, 2, r_star=2.0)
        theta_a = ParamTensor.random(mdp, rng, scale=2.0)
        theta_b = ParamTensor.random(mdp, rng, scale=2.0)

        gap, bound = smoothness_witness(mdp, theta_a, theta_b, Simultaneous(mdp.start))
        assert gap <= bound + 1e-12

        h = int(rng.integers(0, mdp.horizon))
        scheme = Dynamic(h, policy_of(theta_a), uniform_start_distributions(mdp)[h])
        gap, bound = smoothness_witness(mdp, theta_a, theta_b, scheme)
        assert gap <= bound + 1e-12
