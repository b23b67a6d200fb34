from __future__ import annotations

import math

import numpy as np
import pytest

from finmdp_pg.experiments import stochastic_sweep
from finmdp_pg.gradients import grad_dynamic, grad_simultaneous
from finmdp_pg.mdp import backward_induction_optimal, uniform_start_distributions
from finmdp_pg.models import build_bandit2, build_dice, build_zero, random_mdp
from finmdp_pg.softmax import ParamTensor, policy_of
from finmdp_pg.stochastic import (
    CouplingTrace,
    StochasticSchedule,
    Substreams,
    coupling_trace,
    estimate_grad_dynamic,
    estimate_grad_simultaneous,
    estimator_moments,
    train_stochastic_dynamic,
    train_stochastic_simultaneous,
    variance_bound_dynamic,
    variance_bound_simultaneous,
)
from finmdp_pg.trainers import SimultaneousSchedule, TrainLog, train_simultaneous


def test_substreams_depend_only_on_keys():
    rng = Substreams(7)

    first = rng.child(0, 3).generator(1).random(5)
    rng.child(0, 2).generator(0).random(100)
    again = Substreams(7).child(0, 3).generator(1).random(5)

    np.testing.assert_array_equal(first, again)
    assert not np.array_equal(first, rng.child(1, 3).generator(1).random(5))


def test_substreams_reject_negative_seed():
    with pytest.raises(ValueError):
        Substreams(-1)


def test_single_action_estimate_is_zero():
    mdp = random_mdp(np.random.default_rng(0), 3, 3, 1)
    theta = ParamTensor.zeros(mdp)

    grad = estimate_grad_simultaneous(mdp, theta, mdp.start, 50, Substreams(0))

    assert grad.norm() == 0.0


def test_zero_reward_estimate_is_zero():
    mdp = build_zero(3)
    theta = ParamTensor.random(mdp, np.random.default_rng(1))

    grad = estimate_grad_simultaneous(mdp, theta, mdp.start, 50, Substreams(0))
    block = estimate_grad_dynamic(mdp, theta.blocks[1], policy_of(theta), np.full(2, 0.5), 1, 50, Substreams(0))

    assert grad.norm() == 0.0
    assert not np.any(block)


def test_bandit_estimate_concentrates():
    mdp = build_bandit2()
    batch = 100000

    grad = estimate_grad_simultaneous(mdp, ParamTensor.zeros(mdp), mdp.start, batch, Substreams(3))

    tolerance = 3 * math.sqrt(variance_bound_simultaneous(mdp) / batch)
    np.testing.assert_allclose(grad.blocks[0], [[0.25, -0.25]], atol=tolerance)


def test_estimates_do_not_depend_on_workers():
    mdp = build_dice(3, start="uniform")
    theta = ParamTensor.random(mdp, np.random.default_rng(2))

    serial = estimate_grad_simultaneous(mdp, theta, mdp.start, 1000, Substreams(5), max_workers=1, chunk_size=100)
    threaded = estimate_grad_simultaneous(mdp, theta, mdp.start, 1000, Substreams(5), max_workers=4, chunk_size=100)

    np.testing.assert_array_equal(serial.flat(), threaded.flat())

    tilde_pi = policy_of(theta)
    mu_1 = np.full(7, 1 / 7)
    serial = estimate_grad_dynamic(mdp, theta.blocks[1], tilde_pi, mu_1, 1, 1000, Substreams(5), 1, 100)
    threaded = estimate_grad_dynamic(mdp, theta.blocks[1], tilde_pi, mu_1, 1, 1000, Substreams(5), 4, 100)

    np.testing.assert_array_equal(serial, threaded)


def test_batch_size_must_be_positive():
    mdp = build_bandit2()

    with pytest.raises(ValueError):
        estimate_grad_simultaneous(mdp, ParamTensor.zeros(mdp), mdp.start, 0, Substreams(0))


def test_simultaneous_estimator_moments():
    mdp = build_dice(2, start="uniform")
    theta = ParamTensor.random(mdp, np.random.default_rng(4))

    moments = estimator_moments(mdp, theta, mdp.start, 20000, Substreams(11))

    np.testing.assert_allclose(moments.exact, grad_simultaneous(mdp, theta).flat())
    assert moments.unbiased()
    assert moments.mse <= moments.bound


def test_dynamic_estimator_moments():
    mdp = build_dice(3)
    rng = np.random.default_rng(5)
    theta = ParamTensor.random(mdp, rng)
    tilde_pi = policy_of(ParamTensor.random(mdp, rng))
    mu_1 = np.full(7, 1 / 7)

    moments = estimator_moments(mdp, theta.blocks[1], mu_1, 20000, Substreams(12), h=1, tilde_pi=tilde_pi)

    exact = grad_dynamic(mdp, theta.blocks[1], tilde_pi, mu_1, 1)
    np.testing.assert_allclose(moments.exact, exact[mdp.mask[1]])
    assert moments.unbiased()
    assert moments.mse <= moments.bound == variance_bound_dynamic(mdp, 1)


def test_variance_bounds():
    mdp = build_dice(5)

    assert variance_bound_simultaneous(mdp) == 3 * 5**4 * 6**4
    assert variance_bound_dynamic(mdp, 4) == 180


def test_exact_batch_matches_exact_trainer():
    mdp = build_dice(3, start="uniform")
    theta0 = ParamTensor.random(mdp, np.random.default_rng(6))

    exact, _ = train_simultaneous(mdp, theta0, mdp.start, SimultaneousSchedule(eta=1 / 270, n_steps=30))
    schedule = StochasticSchedule("simultaneous", [30], [1 / 270], [None])
    stochastic, log = train_stochastic_simultaneous(mdp, theta0, mdp.start, schedule, Substreams(0))

    np.testing.assert_array_equal(exact.flat(), stochastic.flat())
    assert log.column("batch_size").size == 30
    assert np.all(np.isnan(log.column("batch_size")))


def test_zero_reward_stochastic_run_keeps_parameters():
    mdp = build_zero(2)
    theta0 = ParamTensor.random(mdp, np.random.default_rng(7))
    schedule = StochasticSchedule.from_user(mdp, "simultaneous", 10, 20)

    theta, _ = train_stochastic_simultaneous(mdp, theta0, mdp.start, schedule, Substreams(1))

    np.testing.assert_array_equal(theta.flat(), theta0.flat())


def test_one_epoch_stochastic_schemes_coincide():
    mdp = build_bandit2()
    theta0 = ParamTensor.zeros(mdp)

    sim, _ = train_stochastic_simultaneous(
        mdp,
        theta0,
        mdp.start,
        StochasticSchedule("simultaneous", [40], [0.3], [16]),
        Substreams(9),
    )
    dyn, _ = train_stochastic_dynamic(
        mdp,
        theta0,
        [mdp.start],
        StochasticSchedule("dynamic", [40], [0.3], [16]),
        Substreams(9),
    )

    np.testing.assert_allclose(sim.flat(), dyn.flat(), rtol=0, atol=1e-15)


def test_stochastic_dynamic_run_logs_phases():
    mdp = build_dice(2)
    schedule = StochasticSchedule.from_user(mdp, "dynamic", 5, 8)

    _, log = train_stochastic_dynamic(mdp, ParamTensor.zeros(mdp), uniform_start_distributions(mdp), schedule, Substreams(2))

    assert [row["phase"] for row in log.rows] == [1] * 5 + [0] * 5
    assert log.final()["grad_evals"] == schedule.total_grad_evals == 10
    assert all(row["batch_size"] == 8 for row in log.rows)


def test_coupling_without_noise_stays_at_zero():
    mdp = build_dice(2, start="uniform")
    theta0 = ParamTensor.zeros(mdp)

    trace = coupling_trace(mdp, theta0, mdp.start, 1 / 120, None, 20, Substreams(0))

    assert np.all(trace.distances == 0.0)
    assert trace.crossing is None
    assert trace.stayed_above_half_c

    trace = coupling_trace(mdp, theta0, uniform_start_distributions(mdp), 1 / 24, None, 10, Substreams(0), scheme="dynamic")
    assert np.all(trace.distances == 0.0)
    assert np.all(trace.thresholds == 0.125)


def test_first_coupling_distance():
    mdp = build_dice(2, start="uniform")
    theta0 = ParamTensor.zeros(mdp)
    eta = 1 / 120

    trace = coupling_trace(mdp, theta0, mdp.start, eta, 10, 1, Substreams(4))

    estimate = estimate_grad_simultaneous(mdp, theta0, mdp.start, 10, Substreams(4).child(0, 0))
    expected = eta * (estimate - grad_simultaneous(mdp, theta0)).norm()
    assert trace.distances[0] == pytest.approx(expected, rel=1e-9)


def test_coupling_crossing_is_first_step_at_threshold():
    trace = CouplingTrace(
        distances=np.array([0.01, 0.2, 0.05]),
        thresholds=np.full(3, 0.125),
        min_opt_stochastic=np.array([0.5, 0.3, 0.1]),
        crossing=2,
        c_reference=0.5,
    )

    assert trace.stayed_above_half_c

    trace.min_opt_stochastic = np.array([0.2, 0.3, 0.1])
    assert not trace.stayed_above_half_c


def test_stochastic_trainers_continue_the_sink_counter():
    mdp = build_dice(2)
    mu_list = uniform_start_distributions(mdp)
    sink = TrainLog(stochastic=True)

    first = StochasticSchedule.from_user(mdp, "dynamic", 3, 4)
    _, sink = train_stochastic_dynamic(mdp, ParamTensor.zeros(mdp), mu_list, first, Substreams(0), sink)
    _, sink = train_stochastic_simultaneous(
        mdp,
        ParamTensor.zeros(mdp),
        mdp.start,
        StochasticSchedule.from_user(mdp, "simultaneous", 4, 4),
        Substreams(1),
        sink,
    )
    last = StochasticSchedule.from_user(mdp, "dynamic", 2, 4)
    _, sink = train_stochastic_dynamic(mdp, ParamTensor.zeros(mdp), mu_list, last, Substreams(2), sink)

    assert [row["grad_evals"] for row in sink.rows] == list(range(1, 15))
    assert [row["phase"] for row in sink.rows] == [1, 1, 1, 0, 0, 0] + ["all"] * 4 + [1, 1, 0, 0]
    assert sink.phase_limits[0] <= backward_induction_optimal(mdp)[0].value(mdp.start) + 1e-12


def test_user_schedule_takes_one_step_size_per_epoch():
    mdp = build_dice(3)

    schedule = StochasticSchedule.from_user(mdp, "dynamic", 10, 4, [1 / 36, 1 / 24, 1 / 12])

    assert schedule.etas == [1 / 36, 1 / 24, 1 / 12]
    assert schedule.n_steps == [10, 10, 10]
    with pytest.raises(ValueError):
        StochasticSchedule.from_user(mdp, "dynamic", 10, 4, [0.1, 0.1])
    with pytest.raises(ValueError):
        StochasticSchedule.from_user(mdp, "simultaneous", 10, 4, [0.1, 0.1, 0.1])


def test_larger_batches_cross_less_and_spread_less():
    # at the theorem step size 1/(2 (H-h) R* sqrt(N)) no run gets below the threshold
    results = stochastic_sweep(build_dice(3), [16, 64, 256], n_steps=500, seeds=range(20), etas=[1 / 36, 1 / 24, 1 / 12])

    success = [result["success_fraction"] for result in results]
    crossing = [result["crossing_fraction"] for result in results]
    spread = [result["subopt_spread"] for result in results]
    assert success[-1] == 1.0
    assert success[0] <= success[-1]
    assert crossing[0] > crossing[2]
    assert crossing[1] > crossing[2]
    assert spread[0] > spread[2]
    assert all(len(result["final_subopts"]) == 20 for result in results)


def test_large_batches_succeed_in_sweep():
    results = stochastic_sweep(build_bandit2(), [1, 50], n_steps=100, seeds=[0, 1, 2, 3], max_workers=2)

    assert [result["batch"] for result in results] == [1, 50]
    assert results[1]["success_fraction"] == 1.0
    for result in results:
        assert 0.0 <= result["success_fraction"] <= 1.0
        assert 0.0 <= result["crossing_fraction"] <= 1.0


def test_theorem_schedules_are_huge():
    mdp = build_dice(2)

    dynamic = StochasticSchedule.theorem_dynamic(mdp, uniform_start_distributions(mdp), 1.0, 0.1)
    simultaneous = StochasticSchedule.theorem_simultaneous(build_bandit2(), np.ones(1), 1.0, 0.1, 0.5)

    assert dynamic.total_trajectories > 10**8
    assert simultaneous.total_trajectories > 10**8
    assert dynamic.etas[1] == pytest.approx(1 / (12 * math.sqrt(dynamic.n_steps[1])))


def test_user_schedule_step_size():
    schedule = StochasticSchedule.from_user(build_bandit2(), "simultaneous", 100, 10)

    assert schedule.etas == [pytest.approx(0.02)]
    assert schedule.total_trajectories == 1000


def test_schedule_validation():
    with pytest.raises(ValueError):
        StochasticSchedule("other", [1], [0.1], [1])
    with pytest.raises(ValueError):
        StochasticSchedule("dynamic", [1, 2], [0.1], [1])
    with pytest.raises(ValueError):
        StochasticSchedule("simultaneous", [1], [0.1], [0])
    with pytest.raises(ValueError):
        StochasticSchedule("simultaneous", [1], [0.1], [1], delta=1.0)
