"""Monitoring loop, threshold search, and replicated run-length experiments."""

from __future__ import annotations

import math

import numpy as np
import pytest

from sparsewatch import (
    CalibrationError,
    DataError,
    DimensionError,
    ModelConfig,
    Scenario,
    StateError,
    calibrate_threshold,
    collect_h0_trajectories,
    evaluate,
    gen_stream,
    init,
    replay_run_lengths,
    search_threshold,
    step,
)


def _null_scenario(dictionary, cfg, horizon):
    return Scenario(
        dictionary=dictionary, cfg=cfg, tau=None, change=(), horizon=horizon
    )


class TestInit:
    def test_same_seed_same_start(self, small_dictionary, small_config):
        a = init(small_config, small_dictionary, h=5.0, seed=3)
        b = init(small_config, small_dictionary, h=5.0, seed=3)
        np.testing.assert_array_equal(a.plan.z, b.plan.z)
        assert a.step == 0 and not a.alarmed

    def test_first_subset_respects_budget(self, small_dictionary, small_config):
        state = init(small_config, small_dictionary, h=5.0, seed=0)
        assert state.plan.m == small_config.m
        assert np.all((0 <= state.plan.z) & (state.plan.z < small_dictionary.p))

    def test_nan_threshold_rejected(self, small_dictionary, small_config):
        with pytest.raises(ValueError):
            init(small_config, small_dictionary, h=math.nan, seed=0)

    def test_extreme_thresholds_accepted(self, small_dictionary, small_config):
        init(small_config, small_dictionary, h=-1e9, seed=0)
        init(small_config, small_dictionary, h=math.inf, seed=0)

    def test_unknown_sampler_rejected(self, small_dictionary, small_config):
        with pytest.raises(ValueError):
            init(small_config, small_dictionary, h=5.0, seed=0, sampler="greedy")

    def test_oracle_sampler_precomputes_scorer(self, small_dictionary, small_config):
        state = init(
            small_config, small_dictionary, h=5.0, seed=0, sampler="oracle"
        )
        assert state.scorer is not None
        assert init(small_config, small_dictionary, h=5.0, seed=0).scorer is None

    def test_budget_beyond_p_rejected(self, small_dictionary):
        cfg = ModelConfig.homogeneous(
            k_a=4, sigma_e=0.1, sigma_b=0.5, sigma_j=2.0, w=0.2,
            v=1e-6, decay=0.1, m=7,
        )
        with pytest.raises(DimensionError):
            init(cfg, small_dictionary, h=5.0, seed=0)


class TestStep:
    def test_bottom_threshold_alarms_immediately(
        self, small_dictionary, small_config, rng
    ):
        state = init(small_config, small_dictionary, h=-1e9, seed=1)
        outcome = step(state, rng.normal(size=6))
        assert outcome.alarmed and outcome.step == 1
        assert outcome.next_plan is None
        assert state.alarmed

    def test_alarmed_engine_is_absorbing(self, small_dictionary, small_config, rng):
        state = init(small_config, small_dictionary, h=-1e9, seed=1)
        step(state, rng.normal(size=6))
        with pytest.raises(StateError):
            step(state, rng.normal(size=6))

    def test_observation_forms_agree(self, small_dictionary, small_config, rng):
        """Full vector, planned slice, and callable must be interchangeable."""
        x = rng.normal(size=6)
        outcomes = []
        for obs in (x, None, None):
            state = init(small_config, small_dictionary, h=math.inf, seed=2)
            z = state.plan.z
            if obs is None:
                obs = x[z] if outcomes and len(outcomes) == 1 else (lambda idx: x[idx])
            outcomes.append(step(state, obs))
        assert outcomes[0].stat == outcomes[1].stat == outcomes[2].stat
        np.testing.assert_array_equal(outcomes[0].z, outcomes[1].z)
        np.testing.assert_array_equal(
            outcomes[0].next_plan.z, outcomes[2].next_plan.z
        )

    def test_nan_at_planned_variable_named(self, small_dictionary, small_config):
        state = init(small_config, small_dictionary, h=math.inf, seed=4)
        x = np.zeros(6)
        x[state.plan.z[1]] = math.nan
        with pytest.raises(DataError, match=f"variable {state.plan.z[1]} in step 1"):
            step(state, x)

    def test_nan_outside_plan_ignored(self, small_dictionary, small_config):
        state = init(small_config, small_dictionary, h=math.inf, seed=4)
        x = np.zeros(6)
        unplanned = [i for i in range(6) if i not in set(state.plan.z)]
        x[unplanned[0]] = math.nan
        outcome = step(state, x)
        assert math.isfinite(outcome.stat)

    def test_wrong_size_observation_rejected(self, small_dictionary, small_config):
        state = init(small_config, small_dictionary, h=math.inf, seed=4)
        with pytest.raises(DataError):
            step(state, np.zeros(5))

    def test_steps_count_and_plans_roll(self, small_dictionary, small_config, rng):
        state = init(small_config, small_dictionary, h=math.inf, seed=5)
        for t in range(1, 6):
            planned = state.plan.z.copy()
            outcome = step(state, rng.normal(size=6))
            assert outcome.step == t == state.step
            np.testing.assert_array_equal(outcome.z, planned)
            assert outcome.next_plan is state.plan
            assert outcome.converged

    def test_trajectories_reproducible(self, small_dictionary, small_config):
        scenario = _null_scenario(small_dictionary, small_config, 30)
        one = collect_h0_trajectories(
            small_config, small_dictionary, n_reps=2, horizon=30, seed=11
        )
        two = collect_h0_trajectories(
            small_config, small_dictionary, n_reps=2, horizon=30, seed=11
        )
        np.testing.assert_array_equal(one, two)
        assert one.shape == (2, 30)


class TestReplay:
    def test_frozen_matrix(self):
        traj = np.array([[1.0, 2.0, 3.0], [5.0, 0.0, 0.0]])
        np.testing.assert_array_equal(replay_run_lengths(traj, 1.5), [2, 1])
        np.testing.assert_array_equal(replay_run_lengths(traj, 10.0), [3, 3])
        np.testing.assert_array_equal(replay_run_lengths(traj, 0.5), [1, 1])
        # Strict exceedance: a statistic equal to h does not alarm.
        np.testing.assert_array_equal(replay_run_lengths(traj, 3.0), [3, 1])

    def test_average_is_monotone_in_threshold(self, rng):
        traj = rng.normal(size=(40, 50))
        hs = np.sort(rng.normal(size=20))
        arls = [replay_run_lengths(traj, h).mean() for h in hs]
        assert all(a <= b + 1e-12 for a, b in zip(arls, arls[1:]))


class TestSearchThreshold:
    def test_meets_target_on_synthetic_trajectories(self, rng):
        traj = rng.uniform(size=(200, 80))
        h, achieved = search_threshold(traj, target_arl0=10.0, tol_rel=0.05)
        assert achieved == replay_run_lengths(traj, h).mean()
        assert abs(achieved - 10.0) / 10.0 <= 0.05

    def test_returns_best_of_bracketing_pair(self, rng):
        traj = rng.uniform(size=(100, 60))
        h, achieved = search_threshold(traj, target_arl0=8.0, tol_rel=0.2)
        values = np.unique(traj)
        idx = np.searchsorted(values, h)
        for neighbor in values[max(0, idx - 1) : idx + 2]:
            err_n = abs(replay_run_lengths(traj, neighbor).mean() - 8.0)
            assert abs(achieved - 8.0) <= err_n + 1e-12

    def test_unlandable_target_raises(self):
        """Constant trajectories offer only ARL 1 or the horizon."""
        traj = np.full((10, 40), 3.0)
        with pytest.raises(CalibrationError, match="closest achieves"):
            search_threshold(traj, target_arl0=20.0, tol_rel=0.02)

    def test_target_outside_feasible_range(self, rng):
        traj = rng.uniform(size=(10, 30))
        with pytest.raises(CalibrationError, match="outside the feasible"):
            search_threshold(traj, target_arl0=31.0, tol_rel=0.1)
        with pytest.raises(CalibrationError, match="outside the feasible"):
            search_threshold(traj, target_arl0=0.5, tol_rel=0.1)

    def test_bad_tolerance_rejected(self, rng):
        with pytest.raises(ValueError):
            search_threshold(rng.uniform(size=(5, 10)), 5.0, tol_rel=0.0)


class TestCalibrateAndEvaluate:
    def test_calibrated_threshold_reproduces_in_evaluation(
        self, small_dictionary, small_config
    ):
        """Same seed, same replication count: the null ARL evaluated at the
        calibrated threshold equals the replayed ARL exactly, because the
        statistic path of a run does not depend on the threshold before its
        alarm."""
        traj = collect_h0_trajectories(
            small_config, small_dictionary, n_reps=30, horizon=80, seed=21
        )
        h, achieved = search_threshold(traj, target_arl0=15.0, tol_rel=0.2)
        summary = evaluate(
            small_config,
            small_dictionary,
            h,
            _null_scenario(small_dictionary, small_config, 80),
            n_reps=30,
            seed=21,
        )
        assert summary.arl0 == achieved
        assert math.isnan(summary.add)
        assert summary.n_false_alarm == 0

    def test_horizon_guard(self, small_dictionary, small_config):
        with pytest.raises(CalibrationError, match="horizon"):
            calibrate_threshold(
                small_config, small_dictionary, target_arl0=50.0,
                n_reps=5, horizon=100, tol_rel=0.1, seed=0,
            )

    def test_nonpositive_reps_rejected(self, small_dictionary, small_config):
        with pytest.raises(ValueError):
            calibrate_threshold(
                small_config, small_dictionary, target_arl0=10.0,
                n_reps=0, horizon=50, tol_rel=0.1, seed=0,
            )
        with pytest.raises(ValueError):
            evaluate(
                small_config, small_dictionary, 1.0,
                _null_scenario(small_dictionary, small_config, 50),
                n_reps=0, seed=0,
            )

    def test_worker_count_never_changes_results(
        self, small_dictionary, small_config
    ):
        """Replication results derive from (seed, rep) alone; pooled and
        inline execution must agree bit for bit."""
        scenario = Scenario(
            dictionary=small_dictionary, cfg=small_config, tau=10,
            change=((1, 1.5),), horizon=40,
        )
        runs = []
        for workers in (1, 2):
            summary, records = evaluate(
                small_config, small_dictionary, 2.0, scenario,
                n_reps=6, seed=33, workers=workers, return_records=True,
            )
            runs.append((summary, records))
        assert runs[0][0] == runs[1][0]
        assert runs[0][1] == runs[1][1]
        traj_1 = collect_h0_trajectories(
            small_config, small_dictionary, n_reps=4, horizon=30, seed=9, workers=1
        )
        traj_2 = collect_h0_trajectories(
            small_config, small_dictionary, n_reps=4, horizon=30, seed=9, workers=2
        )
        np.testing.assert_array_equal(traj_1, traj_2)

    def test_change_scenario_records_delays(self, small_dictionary, small_config):
        scenario = Scenario(
            dictionary=small_dictionary, cfg=small_config, tau=8,
            change=((0, 2.0),), horizon=60,
        )
        summary, records = evaluate(
            small_config, small_dictionary, 0.5, scenario,
            n_reps=8, seed=13, return_records=True,
        )
        assert [rec["rep"] for rec in records] == list(range(8))
        delays = [rec["delay"] for rec in records if rec["delay"] is not None]
        if delays:
            assert summary.add == pytest.approx(float(np.mean(delays)))
        for rec in records:
            if rec["false_alarm"]:
                assert rec["T"] <= 8 and rec["delay"] is None
            elif rec["delay"] is not None:
                assert rec["T"] == 8 + rec["delay"]
            else:
                assert rec["T"] == 61
        assert math.isnan(summary.arl0)

    def test_config_mismatch_rejected(self, small_dictionary, small_config):
        other = ModelConfig.homogeneous(
            k_a=4, sigma_e=0.2, sigma_b=0.5, sigma_j=2.0, w=0.2,
            v=1e-6, decay=0.1, m=3,
        )
        with pytest.raises(DimensionError):
            evaluate(
                other, small_dictionary, 1.0,
                _null_scenario(small_dictionary, small_config, 40),
                n_reps=2, seed=0,
            )

    def test_planted_change_is_detected_after_tau(
        self, small_dictionary, small_config
    ):
        """A strong change with a sane threshold yields mostly true detections
        shortly after the change point."""
        traj = collect_h0_trajectories(
            small_config, small_dictionary, n_reps=30, horizon=120, seed=55
        )
        h, _ = search_threshold(traj, target_arl0=40.0, tol_rel=0.25)
        scenario = Scenario(
            dictionary=small_dictionary, cfg=small_config, tau=10,
            change=((2, 3.0),), horizon=120,
        )
        summary = evaluate(
            small_config, small_dictionary, h, scenario, n_reps=20, seed=77
        )
        assert summary.add < 10.0
        assert summary.n_censored == 0
