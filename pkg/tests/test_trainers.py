from __future__ import annotations

import numpy as np
import pytest

from finmdp_pg.diagnostics import check_monotone
from finmdp_pg.gradients import AssumptionError
from finmdp_pg.mdp import FiniteMdp, backward_induction_optimal, uniform_start_distributions
from finmdp_pg.models import build_bandit2, build_dice, build_zero
from finmdp_pg.softmax import ParamTensor
from finmdp_pg.trainers import (
    COLUMNS,
    DynamicSchedule,
    NonFiniteGradientError,
    SimultaneousSchedule,
    TrainLog,
    final_errors,
    schedule_dynamic,
    schedule_simultaneous,
    train_dynamic,
    train_simultaneous,
)


def test_dynamic_schedule_on_dice():
    mdp = build_dice(5)

    schedule = schedule_dynamic(mdp, uniform_start_distributions(mdp), epsilon=1.0)

    assert schedule.n_steps == [3360 * (5 - h) for h in range(5)]
    assert schedule.etas[4] == pytest.approx(1 / 12)
    assert schedule.etas[0] == pytest.approx(1 / 60)
    assert all(a > b for a, b in zip(schedule.n_steps, schedule.n_steps[1:]))
    assert schedule.total == 3360 * 15


def test_dynamic_schedule_scales_with_epsilon():
    mdp = build_dice(3)
    mu_list = uniform_start_distributions(mdp)

    coarse = schedule_dynamic(mdp, mu_list, epsilon=2.0)
    fine = schedule_dynamic(mdp, mu_list, epsilon=1.0)

    assert coarse.n_raw == pytest.approx([n / 2 for n in fine.n_raw])


def test_dynamic_schedule_errors():
    mdp = build_dice(2)
    mu_list = uniform_start_distributions(mdp)

    with pytest.raises(ValueError):
        schedule_dynamic(mdp, mu_list, epsilon=0.0)
    with pytest.raises(ValueError):
        schedule_dynamic(mdp, [np.array([0.0] + [1 / 6] * 6)] * 2)
    with pytest.raises(ValueError):
        schedule_dynamic(mdp, mu_list, uniform_init=False)
    with pytest.raises(ValueError):
        schedule_dynamic(mdp, mu_list, uniform_init=False, c_values=[0.5, 1.5])


def test_simultaneous_schedule_step_sizes():
    dice = build_dice(5, start="uniform")
    bandit = build_bandit2()

    assert schedule_simultaneous(dice).eta == pytest.approx(1 / 750)
    assert schedule_simultaneous(bandit).eta == pytest.approx(0.2)


def test_simultaneous_schedule_scales_with_epsilon():
    mdp = build_dice(3, start="uniform")

    coarse = schedule_simultaneous(mdp, epsilon=2.0)
    fine = schedule_simultaneous(mdp, epsilon=1.0)

    assert coarse.n_raw == pytest.approx(fine.n_raw / 2)
    assert coarse.mismatch == fine.mismatch


def test_simultaneous_schedule_on_bandit():
    # |S| = 1, mismatch 1, c = 1/2: N = 10 * 1 * 1 * 1 / (0.25 * eps)
    schedule = schedule_simultaneous(build_bandit2(), epsilon=1.0)

    assert schedule.n_steps == 40
    assert schedule.mismatch == pytest.approx(1.0)


def test_simultaneous_schedule_errors(two_epoch_document):
    with pytest.raises(ValueError):
        schedule_simultaneous(build_bandit2(), epsilon=-1.0)
    with pytest.raises(ValueError):
        schedule_simultaneous(build_bandit2(), c_estimate=0.0)
    # the optimal policy visits the absorbing state, which the start distribution never does
    with pytest.raises(ValueError):
        schedule_simultaneous(build_dice(3))

    varying = FiniteMdp.from_dict(two_epoch_document)
    with pytest.raises(AssumptionError):
        schedule_simultaneous(varying)
    assert schedule_simultaneous(varying, allow_varying_states=True).n_steps >= 1


def test_schedule_validation():
    with pytest.raises(ValueError):
        SimultaneousSchedule(eta=0.0, n_steps=10)
    with pytest.raises(ValueError):
        SimultaneousSchedule(eta=0.1, n_steps=0)
    with pytest.raises(ValueError):
        DynamicSchedule(etas=[0.1, -0.1], n_steps=[1, 1], c_values=[0.5, 0.5])


def test_zero_rewards_leave_parameters_unchanged():
    mdp = build_zero(3)
    theta0 = ParamTensor.random(mdp, np.random.default_rng(0))

    theta_sim, _ = train_simultaneous(mdp, theta0, mdp.start, SimultaneousSchedule(eta=0.1, n_steps=20))
    theta_dyn, _ = train_dynamic(
        mdp,
        theta0,
        uniform_start_distributions(mdp),
        DynamicSchedule(etas=[0.1] * 3, n_steps=[5] * 3, c_values=[0.5] * 3),
    )

    np.testing.assert_array_equal(theta_sim.flat(), theta0.flat())
    np.testing.assert_array_equal(theta_dyn.flat(), theta0.flat())


def test_simultaneous_objective_is_monotone():
    mdp = build_dice(3, start="uniform")
    schedule = SimultaneousSchedule(eta=schedule_simultaneous(mdp).eta, n_steps=300)

    _, log = train_simultaneous(mdp, ParamTensor.zeros(mdp), mdp.start, schedule)

    assert len(log) == 300
    assert check_monotone(log.column("J")) == []
    assert log.column("subopt")[-1] < log.column("subopt")[0]


def test_dynamic_objective_is_monotone_within_phases():
    mdp = build_dice(3)
    schedule = DynamicSchedule(etas=[1 / 36, 1 / 24, 1 / 12], n_steps=[200] * 3, c_values=[0.5] * 3)

    _, log = train_dynamic(mdp, ParamTensor.zeros(mdp), uniform_start_distributions(mdp), schedule)

    phases = np.array([row["phase"] for row in log.rows])
    assert list(dict.fromkeys(phases)) == [2, 1, 0]
    for h in range(3):
        assert check_monotone(log.column("J")[phases == h]) == []


def test_simultaneous_early_stop_on_bandit():
    mdp = build_bandit2()

    theta, log = train_simultaneous(
        mdp,
        ParamTensor.zeros(mdp),
        mdp.start,
        SimultaneousSchedule(eta=0.2, n_steps=10000),
        early_stop=0.1,
    )

    assert len(log) < 10000
    assert log.final()["subopt"] <= 0.1
    assert all(row["subopt"] > 0.1 for row in log.rows[:-1])
    assert final_errors(mdp, theta)[0] <= 0.1


def test_one_epoch_schemes_coincide():
    mdp = build_bandit2()
    theta0 = ParamTensor.random(mdp, np.random.default_rng(1))

    theta_sim, log_sim = train_simultaneous(mdp, theta0, mdp.start, SimultaneousSchedule(eta=0.5, n_steps=50))
    theta_dyn, log_dyn = train_dynamic(
        mdp,
        theta0,
        [mdp.start],
        DynamicSchedule(etas=[0.5], n_steps=[50], c_values=[0.5]),
    )

    np.testing.assert_allclose(theta_sim.flat(), theta_dyn.flat(), rtol=0, atol=1e-12)
    np.testing.assert_allclose(log_sim.column("J"), log_dyn.column("J"), rtol=0, atol=1e-12)


def test_dynamic_training_on_dice_reaches_accuracy():
    mdp = build_dice(3)
    mu_list = uniform_start_distributions(mdp)
    schedule = schedule_dynamic(mdp, mu_list, epsilon=1.0)

    theta, log = train_dynamic(mdp, ParamTensor.zeros(mdp), mu_list, schedule)

    assert schedule.n_steps == [6048, 4032, 2016]
    assert log.final()["grad_evals"] == 12096
    assert np.all(log.column("min_opt_prob") >= 0.5 - 1e-12)
    subopt, worst_state = final_errors(mdp, theta)
    assert 0.0 <= subopt <= worst_state <= 1.0


def test_dynamic_training_counts_across_phases():
    mdp = build_dice(2)
    schedule = DynamicSchedule(etas=[1 / 24, 1 / 12], n_steps=[3, 3], c_values=[0.5, 0.5])

    _, log = train_dynamic(mdp, ParamTensor.zeros(mdp), uniform_start_distributions(mdp), schedule)

    assert [row["grad_evals"] for row in log.rows] == [1, 2, 3, 4, 5, 6]
    assert [row["phase"] for row in log.rows] == [1, 1, 1, 0, 0, 0]
    # epoch 0 is still uniform during phase 1, so the logged value stays below the optimum
    assert all(row["subopt"] > 0 for row in log.rows)


def test_dynamic_training_records_phase_limits():
    mdp = build_dice(3)
    mu_list = uniform_start_distributions(mdp)

    theta, log = train_dynamic(mdp, ParamTensor.zeros(mdp), mu_list, schedule_dynamic(mdp, mu_list, epsilon=1.0))

    optimum = backward_induction_optimal(mdp)[0].value(mdp.start)
    assert sorted(log.phase_limits) == [0, 1, 2]
    subopt, _ = final_errors(mdp, theta)
    assert optimum - subopt <= log.phase_limits[0] + 1e-12
    assert log.phase_limits[0] <= optimum + 1e-12


def test_log_csv_round_trip():
    mdp = build_dice(2)
    schedule = DynamicSchedule(etas=[1 / 24, 1 / 12], n_steps=[4, 4], c_values=[0.5, 0.5])
    _, log = train_dynamic(mdp, ParamTensor.zeros(mdp), uniform_start_distributions(mdp), schedule, certify=True)

    log.to_csv("log.csv")
    restored = TrainLog.from_csv("log.csv")

    assert list(restored.to_frame().columns) == COLUMNS
    assert restored == log
    assert restored.grad_evals == 8


def test_log_counter_must_increase():
    log = TrainLog()
    log.append(1, "all", 0.0, 0.0, 0.5, 1.0)

    with pytest.raises(ValueError):
        log.append(1, "all", 0.0, 0.0, 0.5, 1.0)


def test_log_thinning_keeps_forced_rows_and_targets():
    log = TrainLog(log_every=10, targets=[0.5, 0.1])
    for n, subopt in enumerate(np.linspace(1.0, 0.0, 25), start=1):
        log.append(n, "all", 1.0 - subopt, 0.0, 0.5, subopt, force=n == 25)

    assert [row["grad_evals"] for row in log.rows] == [10, 20, 25]
    assert log.reached == {0.5: 13, 0.1: 23}
    assert log.grad_evals == 25


def test_non_finite_gradient_reports_step():
    mdp = build_dice(2, start="uniform")
    theta0 = ParamTensor.zeros(mdp)
    theta0.blocks[1][0, 0] = np.nan

    with pytest.raises(NonFiniteGradientError) as error:
        train_simultaneous(mdp, theta0, mdp.start, SimultaneousSchedule(eta=0.01, n_steps=5))

    assert error.value.step == 0


def test_certified_rows_hold():
    mdp = build_dice(3, start="uniform")
    schedule = SimultaneousSchedule(eta=1 / 270, n_steps=30)

    _, log = train_simultaneous(mdp, ParamTensor.zeros(mdp), mdp.start, schedule, certify=True)

    assert np.all(log.column("pl_lhs") >= log.column("pl_rhs") - 1e-10)


def test_snapshots():
    mdp = build_bandit2()
    log = TrainLog(snapshot_every=5)

    train_simultaneous(mdp, ParamTensor.zeros(mdp), mdp.start, SimultaneousSchedule(eta=0.2, n_steps=20), log)

    assert [count for count, _ in log.snapshots] == [5, 10, 15, 20]
