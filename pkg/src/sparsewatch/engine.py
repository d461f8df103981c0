"""Online monitoring loop and run-length experiments.

One engine instance monitors one stream: each step it observes its planned
subset of variables, refits the posteriors, evaluates the monitoring
statistic against the threshold, and (absent an alarm) selects the next
subset.  On top of the loop sit threshold calibration to a target average
run length under the null, and replicated run-length evaluation.

Reproducibility contract: a replication's randomness derives only from
(seed, rep) through ``numpy.random.SeedSequence``, replications are reduced
in rep order, and no output depends on wall-clock time or worker count.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .bases import BasisDictionary
from .detection import DetectionInputs, alarm_check, lambda_stat
from .errors import CalibrationError, DataError, DimensionError, StateError
from .inference import (
    BackgroundPosterior,
    DecayedStats,
    ModelConfig,
    SpikeSlabPosterior,
    fit,
)
from .sampling import (
    OracleScorer,
    SensingPlan,
    draw_anomaly_sample,
    score_variables,
    select_top_m,
    synthesize_anomaly_signal,
)
from .simgen import Scenario, gen_stream

__all__ = [
    "EngineState",
    "StepOutcome",
    "RunLengthSummary",
    "init",
    "step",
    "collect_h0_trajectories",
    "replay_run_lengths",
    "search_threshold",
    "calibrate_threshold",
    "evaluate",
]

SAMPLERS = ("thompson", "oracle")


# ── State ─────────────────────────────────────────────────────────────────


@dataclass
class EngineState:
    """Mutable state of one monitored stream."""

    cfg: ModelConfig
    dictionary: BasisDictionary
    h: float
    rng: np.random.Generator
    post: SpikeSlabPosterior
    bg: BackgroundPosterior
    stats: DecayedStats
    plan: SensingPlan
    sampler: str = "thompson"
    step: int = 0
    alarmed: bool = False
    fit_tol: float = 1e-6
    fit_max_iters: int = 100
    scorer: OracleScorer | None = field(default=None, repr=False)


@dataclass(frozen=True)
class StepOutcome:
    """Result of processing one observation."""

    step: int
    stat: float
    alarmed: bool
    z: np.ndarray
    next_plan: SensingPlan | None
    converged: bool


@dataclass(frozen=True)
class RunLengthSummary:
    """Replication summary of one evaluate call.

    Null scenarios (tau None) report ``arl0``; change scenarios report the
    average detection delay over replications that alarmed after the change.
    Undefined fields are NaN.  ``n_censored`` counts replications that never
    alarmed within the horizon; ``n_false_alarm`` counts alarms at or before
    the change point.
    """

    arl0: float
    arl0_stderr: float
    add: float
    add_stderr: float
    std_dd: float
    n_reps: int
    n_censored: int
    n_false_alarm: int


# ── Monitoring loop ───────────────────────────────────────────────────────


def init(
    cfg: ModelConfig,
    dictionary: BasisDictionary,
    h: float,
    seed,
    sampler: str = "thompson",
    fit_tol: float = 1e-6,
    fit_max_iters: int = 100,
) -> EngineState:
    """Fresh engine at its priors with a uniformly random first subset.

    ``seed`` may be anything ``numpy.random.default_rng`` accepts, including
    an existing Generator.  ``sampler`` picks the subset strategy for later
    steps: ``"thompson"`` (posterior sampling) or ``"oracle"`` (exhaustive).
    """
    if sampler not in SAMPLERS:
        raise ValueError(f"sampler must be one of {SAMPLERS}")
    if math.isnan(h):
        raise ValueError("threshold must not be NaN")
    if cfg.k_a != dictionary.k_a:
        raise DimensionError("config and dictionary disagree on k_a")
    if cfg.m > dictionary.p:
        raise DimensionError("sensing budget exceeds the number of variables")
    rng = np.random.default_rng(seed)
    z0 = rng.choice(dictionary.p, size=cfg.m, replace=False)
    scorer = OracleScorer(dictionary, cfg, cfg.m) if sampler == "oracle" else None
    return EngineState(
        cfg=cfg,
        dictionary=dictionary,
        h=float(h),
        rng=rng,
        post=SpikeSlabPosterior.prior(cfg),
        bg=BackgroundPosterior.prior(cfg, dictionary.k_b),
        stats=DecayedStats.empty(cfg.k_a),
        plan=SensingPlan(z=z0),
        sampler=sampler,
        fit_tol=fit_tol,
        fit_max_iters=fit_max_iters,
        scorer=scorer,
    )


def _extract_observation(state: EngineState, observation) -> np.ndarray:
    z = state.plan.z
    if callable(observation):
        x_z = np.asarray(observation(z), dtype=np.float64).ravel()
    else:
        x = np.asarray(observation, dtype=np.float64).ravel()
        if x.size == state.dictionary.p:
            x_z = x[z]
        elif x.size == z.size:
            x_z = x
        else:
            raise DataError(
                f"observation has {x.size} values; expected the full {state.dictionary.p} "
                f"or the planned {z.size}"
            )
    if x_z.size != z.size:
        raise DataError("observation does not match the planned subset size")
    bad = np.flatnonzero(~np.isfinite(x_z))
    if bad.size:
        raise DataError(
            f"non-finite value at variable {int(z[bad[0]])} in step {state.step + 1}"
        )
    return x_z


def step(state: EngineState, observation) -> StepOutcome:
    """Process one observation: refit, test, and plan the next subset.

    ``observation`` is a full length-p vector, a length-m vector matching
    the current plan, or a callable mapping the planned indices to values.
    An alarmed engine is absorbing and refuses further steps.
    """
    if state.alarmed:
        raise StateError("engine has alarmed; start a new engine to continue")
    z = state.plan.z
    x_z = _extract_observation(state, observation)

    res = fit(
        x_z,
        z,
        state.post,
        state.stats,
        state.dictionary,
        state.cfg,
        tol=state.fit_tol,
        max_iters=state.fit_max_iters,
    )
    state.post, state.bg, state.stats = res.post, res.bg, res.stats
    state.step += 1

    stat = lambda_stat(
        DetectionInputs(x_z=x_z, z=z, post=state.post, bg=state.bg),
        state.dictionary,
        state.cfg,
    )
    if alarm_check(stat, state.h):
        state.alarmed = True
        return StepOutcome(
            step=state.step,
            stat=stat,
            alarmed=True,
            z=z,
            next_plan=None,
            converged=res.converged,
        )

    theta_hat = draw_anomaly_sample(state.post, state.cfg, state.rng)
    x1_hat = synthesize_anomaly_signal(theta_hat, state.dictionary, state.cfg, state.rng)
    if state.sampler == "oracle":
        plan = state.scorer.select(x1_hat, state.post, state.rng)
    else:
        scores = score_variables(x1_hat, state.post, state.dictionary)
        plan = select_top_m(scores, state.cfg.m, state.rng)
    state.plan = plan
    return StepOutcome(
        step=state.step,
        stat=stat,
        alarmed=False,
        z=z,
        next_plan=plan,
        converged=res.converged,
    )


# ── Replications ──────────────────────────────────────────────────────────


def _rep_rngs(seed: int, rep: int):
    """Independent generators for a replication's stream and engine."""
    stream_ss, engine_ss = np.random.SeedSequence(entropy=[seed, rep]).spawn(2)
    return stream_ss, engine_ss


def _run_one(args):
    """One replication; returns (rep, alarm step or horizon+1, alarmed, stats).

    Top-level so process pools can pickle it.  With ``collect=True`` the
    per-step statistic trajectory is returned in place of the run length.
    """
    (scenario, h, seed, rep, sampler, collect) = args
    stream_ss, engine_ss = _rep_rngs(seed, rep)
    stream = gen_stream(scenario, stream_ss)
    state = init(
        scenario.cfg,
        scenario.dictionary,
        h=math.inf if collect else h,
        seed=engine_ss,
        sampler=sampler,
    )
    if collect:
        traj = np.empty(scenario.horizon)
        for t in range(scenario.horizon):
            traj[t] = step(state, stream[t]).stat
        return rep, traj
    for t in range(scenario.horizon):
        if step(state, stream[t]).alarmed:
            return rep, t + 1, True
    return rep, scenario.horizon + 1, False


def _map_reps(worklist, workers: int):
    """Run replication tasks, inline or pooled, preserving submission order."""
    if workers <= 1:
        return [_run_one(args) for args in worklist]
    chunk = max(1, len(worklist) // (workers * 4))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_one, worklist, chunksize=chunk))


def _null_scenario(cfg: ModelConfig, dictionary: BasisDictionary, horizon: int):
    return Scenario(
        dictionary=dictionary, cfg=cfg, tau=None, change=(), horizon=horizon
    )


def _same_config(a: ModelConfig, b: ModelConfig) -> bool:
    return (
        a is b
        or (
            a.sigma_e == b.sigma_e
            and a.sigma_b == b.sigma_b
            and a.v == b.v
            and a.decay == b.decay
            and a.m == b.m
            and np.array_equal(a.sigma_j, b.sigma_j)
            and np.array_equal(a.w, b.w)
        )
    )


def collect_h0_trajectories(
    cfg: ModelConfig,
    dictionary: BasisDictionary,
    n_reps: int,
    horizon: int,
    seed: int,
    workers: int = 1,
    sampler: str = "thompson",
) -> np.ndarray:
    """Per-step statistic trajectories of null replications, shape (n_reps, horizon).

    The adaptive sensing loop runs exactly as in monitoring (threshold held
    at +inf), so a threshold can later be chosen by replaying these
    trajectories against candidate values.
    """
    scenario = _null_scenario(cfg, dictionary, horizon)
    worklist = [(scenario, math.inf, seed, rep, sampler, True) for rep in range(n_reps)]
    results = _map_reps(worklist, workers)
    results.sort(key=lambda r: r[0])
    return np.vstack([traj for _, traj in results])


def replay_run_lengths(trajectories: np.ndarray, h: float) -> np.ndarray:
    """Run length of each stored trajectory at threshold h.

    Alarm at the first step whose statistic strictly exceeds h; trajectories
    that never alarm count as the horizon, matching how censored
    replications enter the average run length.
    """
    trajectories = np.atleast_2d(np.asarray(trajectories, dtype=np.float64))
    horizon = trajectories.shape[1]
    exceeded = trajectories > h
    any_alarm = exceeded.any(axis=1)
    first = exceeded.argmax(axis=1) + 1
    return np.where(any_alarm, first, horizon)


def search_threshold(
    trajectories: np.ndarray, target_arl0: float, tol_rel: float
) -> tuple[float, float]:
    """Threshold whose replayed average run length meets the target.

    Binary-searches the sorted unique statistic values (the only points
    where the replayed ARL can change) and returns (h, achieved ARL).
    Raises CalibrationError when no candidate lands within ``tol_rel``
    relative error of the target.
    """
    if tol_rel <= 0:
        raise ValueError("tol_rel must be positive")
    trajectories = np.atleast_2d(np.asarray(trajectories, dtype=np.float64))
    horizon = trajectories.shape[1]
    if not 1.0 <= target_arl0 <= horizon:
        raise CalibrationError(
            f"target ARL {target_arl0} outside the feasible [1, {horizon}] range"
        )

    values = np.unique(trajectories)
    # The replayed ARL is non-decreasing in h; find the first candidate
    # meeting the target, then compare with its predecessor.
    lo, hi = 0, values.size - 1
    arl_hi = float(replay_run_lengths(trajectories, values[hi]).mean())
    if arl_hi < target_arl0:
        raise CalibrationError(
            f"target ARL {target_arl0} unreachable; even the largest observed "
            f"statistic achieves only {arl_hi:.2f}"
        )
    while lo < hi:
        mid = (lo + hi) // 2
        if float(replay_run_lengths(trajectories, values[mid]).mean()) >= target_arl0:
            hi = mid
        else:
            lo = mid + 1
    candidates = [values[lo]] if lo == 0 else [values[lo - 1], values[lo]]
    best_h, best_arl, best_err = None, None, math.inf
    for h in candidates:
        arl = float(replay_run_lengths(trajectories, h).mean())
        err = abs(arl - target_arl0) / target_arl0
        if err < best_err:
            best_h, best_arl, best_err = float(h), arl, err
    if best_err > tol_rel:
        raise CalibrationError(
            f"no threshold lands within {tol_rel:.3g} relative error of "
            f"ARL {target_arl0}; closest achieves {best_arl:.2f} "
            f"(error {best_err:.3g}); increase n_reps or horizon"
        )
    return best_h, best_arl


def calibrate_threshold(
    cfg: ModelConfig,
    dictionary: BasisDictionary,
    target_arl0: float,
    n_reps: int,
    horizon: int,
    tol_rel: float,
    seed: int,
    workers: int = 1,
    sampler: str = "thompson",
) -> float:
    """Threshold achieving the target null average run length.

    Simulates ``n_reps`` null replications with adaptive sensing active and
    the threshold held at +inf, then replays their statistic trajectories
    against candidate thresholds.  The horizon must exceed twice the target
    so censoring cannot dominate the average.
    """
    if n_reps < 1:
        raise ValueError("n_reps must be positive")
    if not target_arl0 < horizon / 2:
        raise CalibrationError(
            f"target ARL {target_arl0} needs a horizon above {2 * target_arl0:g} "
            f"(got {horizon}) to keep censoring negligible"
        )
    traj = collect_h0_trajectories(
        cfg, dictionary, n_reps, horizon, seed, workers=workers, sampler=sampler
    )
    h, _ = search_threshold(traj, target_arl0, tol_rel)
    return h


def evaluate(
    cfg: ModelConfig,
    dictionary: BasisDictionary,
    h: float,
    scenario: Scenario,
    n_reps: int,
    seed: int,
    workers: int = 1,
    sampler: str = "thompson",
    return_records: bool = False,
):
    """Run-length experiment: monitor ``n_reps`` independent streams at threshold h.

    Returns a RunLengthSummary; with ``return_records=True`` also the
    per-replication records (rep, T, false_alarm, delay) in rep order, where
    T is the alarm step (horizon+1 when censored), false_alarm flags alarms
    at or before the change point, and delay is T − tau for true detections.
    """
    if n_reps < 1:
        raise ValueError("n_reps must be positive")
    if not _same_config(scenario.cfg, cfg):
        # The scenario carries the generating model; the monitor must match.
        raise DimensionError("scenario and evaluate disagree on the model config")
    worklist = [(scenario, h, seed, rep, sampler, False) for rep in range(n_reps)]
    results = _map_reps(worklist, workers)
    results.sort(key=lambda r: r[0])

    tau = scenario.tau
    records = []
    for rep, t_alarm, alarmed in results:
        false_alarm = bool(alarmed and tau is not None and t_alarm <= tau)
        delay = (
            t_alarm - tau if (alarmed and tau is not None and t_alarm > tau) else None
        )
        records.append(
            {
                "rep": rep,
                "T": int(t_alarm),
                "false_alarm": false_alarm,
                "delay": None if delay is None else int(delay),
            }
        )

    n_censored = sum(1 for _, _, alarmed in results if not alarmed)
    n_false = sum(1 for rec in records if rec["false_alarm"])
    if tau is None:
        lengths = np.array(
            [min(rec["T"], scenario.horizon) for rec in records], dtype=np.float64
        )
        arl0 = float(lengths.mean())
        arl0_stderr = (
            float(lengths.std(ddof=1) / math.sqrt(len(lengths)))
            if len(lengths) > 1
            else math.nan
        )
        add = add_stderr = std_dd = math.nan
    else:
        delays = np.array(
            [rec["delay"] for rec in records if rec["delay"] is not None],
            dtype=np.float64,
        )
        arl0 = arl0_stderr = math.nan
        if delays.size:
            add = float(delays.mean())
            std_dd = float(delays.std(ddof=1)) if delays.size > 1 else math.nan
            add_stderr = (
                std_dd / math.sqrt(delays.size) if delays.size > 1 else math.nan
            )
        else:
            add = add_stderr = std_dd = math.nan

    summary = RunLengthSummary(
        arl0=arl0,
        arl0_stderr=arl0_stderr,
        add=add,
        add_stderr=add_stderr,
        std_dd=std_dd,
        n_reps=n_reps,
        n_censored=n_censored,
        n_false_alarm=n_false,
    )
    if return_records:
        return summary, records
    return summary
