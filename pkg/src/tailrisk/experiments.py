"""The four headline experiments: tail-risk scaling, ERM neglect, Markov order and adaptation."""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .env import (
    EnvError,
    Policy,
    crossing_probability,
    induced_observation_distribution,
    run_episode,
    stationary_occupancy,
    uniform_policy,
    value_iteration,
)
from .learners import ErmLearner, ExpertWeights, PolicyClass, QLearner, expected_reward, exact_minimizer, policy_risk_problem, reward_loss, state_event
from .measure import EpsilonSchedule, classify_convergence, loglog_slope, mix_regions, tail_limit_sweep, tail_risk
from .metrics import markov_order_gap, performance_series, phase_labels, pre_event_baseline, recovery_time, shift_report
from .scenario import Scenario, ScenarioError

EXPERIMENTS = ("prop1", "erm_neglect", "markov", "adaptation")

PHASE_RULE = (
    "training: steps up to the ERM cutoff; degradation: from the forced event to the moving-average minimum "
    "before recovery; adaptation: from that minimum to the recovery step; recovered: from the first step whose "
    "moving average stays at or above baseline - band for a full window"
)
PERFORMANCE_MEASURE = "trailing moving average of per-step reward"


@dataclass
class RunResult:
    """Tables and scalars of one or more experiments on one scenario and seed."""

    provenance: dict
    summary: dict = field(default_factory=dict)
    series: dict[str, list[dict]] = field(default_factory=dict)
    sweep: list[dict] | None = None
    shift: dict | None = None

    def merge(self, other: RunResult) -> RunResult:
        merged = RunResult(
            dict(self.provenance, experiments=self.provenance["experiments"] + other.provenance["experiments"]),
            {**self.summary, **other.summary},
            {**self.series, **other.series},
            other.sweep if other.sweep is not None else self.sweep,
            other.shift if other.shift is not None else self.shift,
        )
        return merged


def provenance(scenario: Scenario, experiment: str) -> dict:
    return {
        "scenario_name": scenario.name,
        "scenario_sha256": scenario.digest,
        "seed": scenario.seed,
        "version": __version__,
        "experiments": [experiment],
    }


def thread_count() -> int:
    """Worker cap from ``TAILRISK_THREADS`` (default: CPU count). Never affects results."""
    raw = os.environ.get("TAILRISK_THREADS")
    if raw is None or raw.strip() == "":
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"TAILRISK_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"TAILRISK_THREADS must be a positive integer, got {raw!r}")
    return n


# -- shared helpers -----------------------------------------------------------


def region_occupancy(env, policy, region) -> tuple[np.ndarray, str]:
    """Region-restricted stationary law, or the forced-entry law when the restricted chain is undefined."""
    try:
        return stationary_occupancy(env, policy, region), "stationary"
    except EnvError:
        if region == env.disruption:
            return np.array(env.entry_law), "entry"
        raise


def regional_optimum(env, policy_class: PolicyClass, region) -> int:
    """Exact risk minimiser with states drawn from the region's law under uniform exploration."""
    occ, _ = region_occupancy(env, uniform_policy(env), region)
    return exact_minimizer(*policy_risk_problem(env, policy_class, occ))


def resolve_policy(scenario: Scenario, spec, policy_class: PolicyClass | None = None) -> Policy | np.ndarray:
    env = scenario.env
    if isinstance(spec, list):
        return Policy(spec)
    if spec == "uniform":
        return uniform_policy(env)
    pc = policy_class or PolicyClass.all_deterministic(env.observation_count, env.action_count)
    region = env.disruption if spec == "disruption_optimal" else env.nominal
    return pc[regional_optimum(env, pc, region)]


# -- tail-risk scaling --------------------------------------------------------


def run_prop1(scenario: Scenario, epsilons=None, rho: float | None = None, schedule_length: int | None = None) -> RunResult:
    """Tail risk and reweighted-measure errors as the disruption mass shrinks.

    Outcomes are (state, observation) pairs. The nominal and disruption
    conditional laws are fixed; ``Pr(D)`` is swept by mixing them.
    """
    cfg = scenario.experiment("prop1")
    env = scenario.env
    eps_list = [float(e) for e in (epsilons if epsilons is not None else cfg.get("epsilons", [1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6]))]
    rho = float(rho if rho is not None else cfg.get("rho", 0.5))
    length = int(schedule_length if schedule_length is not None else cfg.get("schedule_length", 12))
    if not eps_list or any(not 0.0 < e < 1.0 for e in eps_list):
        raise ScenarioError(["experiments.prop1.epsilons: every value must lie strictly inside (0, 1)"])
    if not 0.0 < rho < 1.0:
        raise ScenarioError(["experiments.prop1.rho: must lie strictly inside (0, 1)"])
    if len(eps_list) > 1 and any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ScenarioError(["experiments.prop1.epsilons: must be strictly decreasing"])

    behavior = uniform_policy(env)
    occ_n, _ = region_occupancy(env, behavior, env.nominal)
    occ_d, d_source = region_occupancy(env, behavior, env.disruption)
    policy = resolve_policy(scenario, cfg.get("policy", "nominal_optimal"))
    pc = PolicyClass((policy,)) if isinstance(policy, Policy) else None
    if pc is None:
        raise ScenarioError(["experiments.prop1.policy: a deterministic policy is required"])
    p_n = (occ_n[:, None] * env.obs_map).reshape(-1)
    p_d = (occ_d[:, None] * env.obs_map).reshape(-1)
    _, loss = policy_risk_problem(env, pc, occ_n)
    d_event = state_event(env, env.disruption)
    max_abs = float(np.abs(loss.row(0)).max())

    tails, bound_ok = [], True
    for e in eps_list:
        space = mix_regions(p_n, p_d, e)
        tr = tail_risk(space, loss, 0, d_event)
        bound_ok &= abs(tr) <= space.probability(d_event) * max_abs * (1 + 1e-12)
        tails.append(tr)

    ref = mix_regions(p_n, p_d, eps_list[0])
    eps_ref = ref.probability(d_event)
    decade = EpsilonSchedule(tuple(min(e, eps_ref) for e in eps_list))
    mu_err = tail_limit_sweep(ref, loss, 0, d_event, decade)
    rows = []
    for i, e in enumerate(eps_list):
        ratio = mu_err[i] / mu_err[i - 1] if i and mu_err[i - 1] > 0 else None
        rows.append({"epsilon": e, "tail_risk": tails[i], "mu_p_error": mu_err[i], "ratio": ratio})

    geo = EpsilonSchedule.geometric(eps_ref, rho, length, start=0)
    geo_err = tail_limit_sweep(ref, loss, 0, d_event, geo)
    geo_ratios = [b / a for a, b in zip(geo_err, geo_err[1:]) if a > 0]
    slope = loglog_slope(eps_list, tails) if len(eps_list) >= 2 and all(t > 0 for t in tails) else None

    summary = {
        "policy": list(policy.table),
        "disruption_law": d_source,
        "epsilons": eps_list,
        "tail_risk": tails,
        "tail_bound_holds": bool(bound_ok),
        "loglog_slope": slope,
        "slope_within_0.05_of_1": slope is not None and abs(slope - 1.0) <= 0.05,
        "tail_verdict": str(classify_convergence(tails)),
        "mu_p_error_verdict": str(classify_convergence(mu_err)),
        "rho": rho,
        "rho_schedule_errors": geo_err,
        "rho_schedule_ratios": geo_ratios,
        "rho_schedule_max_ratio_error": max((abs(r - rho) for r in geo_ratios), default=None),
        "rho_schedule_verdict": str(classify_convergence(geo_err)),
    }
    return RunResult(provenance(scenario, "prop1"), {"prop1": summary}, sweep=rows)


# -- ERM neglect --------------------------------------------------------------


def _train_erm(scenario: Scenario, env, pc: PolicyClass, steps: int, tag: str) -> tuple[ErmLearner, int | None]:
    learner = ErmLearner(pc, steps - 1, env.reward_range, env.action_count)
    traj = run_episode(env, learner, steps, scenario.seed, agent_stream=("erm_neglect", tag))
    if not learner.frozen:
        raise EnvError("ERM learner did not reach its training cutoff")
    return learner, traj.first_entry(env.disruption)


def _neglect_case(scenario: Scenario, env, pc: PolicyClass, steps: int, tag: str) -> dict:
    behavior = uniform_policy(env)
    occ_n, _ = region_occupancy(env, behavior, env.nominal)
    occ_d, d_source = region_occupancy(env, behavior, env.disruption)
    p_step = crossing_probability(env, behavior, env.nominal, env.disruption, occ_n)
    learner, first_d = _train_erm(scenario, env, pc, steps, tag)
    blind = exact_minimizer(*policy_risk_problem(env, pc, occ_n))
    aware = exact_minimizer(*policy_risk_problem(env, pc, occ_d))
    erm_reward_d = expected_reward(env, pc[learner.frozen_choice], occ_d)
    aware_reward_d = expected_reward(env, pc[aware], occ_d)
    return {
        "epsilon_per_step": p_step,
        "train_steps": steps,
        "sampling_disruption_bound": -math.expm1(steps * math.log1p(-p_step)) if p_step < 1 else 1.0,
        "disruption_visited_in_training": first_d is not None,
        "erm_policy_index": learner.frozen_choice,
        "erm_policy": list(pc[learner.frozen_choice].table),
        "blind_optimum_index": blind,
        "aware_optimum_index": aware,
        "aware_policy": list(pc[aware].table),
        "erm_equals_blind_optimum": learner.frozen_choice == blind,
        "erm_reward_on_disruption": erm_reward_d,
        "aware_reward_on_disruption": aware_reward_d,
        "gap": aware_reward_d - erm_reward_d,
        "disruption_law": d_source,
    }


def run_erm_neglect(scenario: Scenario, train_steps: int | None = None, contrast_epsilon: float | None = None) -> RunResult:
    cfg = scenario.experiment("erm_neglect")
    env = scenario.env
    steps = train_steps if train_steps is not None else cfg.get("train_steps", scenario.learners.get("erm", {}).get("train_steps"))
    if not steps or steps < 1:
        raise ScenarioError(["experiments.erm_neglect.train_steps: training budget required (must be at least 1)"])
    if not env.disruption.members:
        raise ScenarioError(["environment.disruption: the neglect experiment needs disruption states"])
    margin = float(cfg.get("margin", 0.0))
    pc = PolicyClass.all_deterministic(env.observation_count, env.action_count)
    main = _neglect_case(scenario, env, pc, int(steps), "erm")
    main["margin"] = margin
    main["gap_meets_margin"] = main["gap"] >= margin
    main["sampling_bound_below_5pct"] = main["sampling_disruption_bound"] < 0.05
    summary = {"erm_neglect": main}
    contrast_eps = contrast_epsilon if contrast_epsilon is not None else cfg.get("contrast_epsilon")
    if contrast_eps is not None:
        contrast = scenario.with_changes(epsilon=contrast_eps)
        case = _neglect_case(contrast, contrast.env, pc, int(steps), "contrast")
        case["contrast_epsilon"] = float(contrast_eps)
        main["contrast"] = case
    return RunResult(provenance(scenario, "erm_neglect"), summary)


# -- Markov order -------------------------------------------------------------


def run_markov(scenario: Scenario, policy=None, horizon: int = 1) -> RunResult:
    cfg = scenario.experiment("markov")
    pol = resolve_policy(scenario, policy if policy is not None else cfg.get("policy", "nominal_optimal"))
    gap = markov_order_gap(scenario.env, pol, horizon)
    witness = None
    if gap.witness is not None:
        *prev, o, o_next = gap.witness
        witness = {"previous": prev[0] if len(prev) == 1 else prev, "current": o, "next": o_next}
    summary = {
        "policy": list(pol.table) if isinstance(pol, Policy) else np.asarray(pol).tolist(),
        "horizon": horizon,
        "gap": gap.gap,
        "witness": witness,
    }
    return RunResult(provenance(scenario, "markov"), {"markov": summary})


# -- adaptation after a forced disruption -------------------------------------


def _learners(scenario: Scenario, pc: PolicyClass, horizon: int) -> dict:
    env = scenario.env
    lc = scenario.learners
    erm_steps = int(lc.get("erm", {}).get("train_steps", 1000))
    eta = lc.get("expert_weights", {}).get("eta", "auto")
    eta = ExpertWeights.tuned_eta(len(pc), horizon) if eta == "auto" else float(eta)
    q = lc.get("q_learning", {})
    return {
        "frozen_erm": ErmLearner(pc, erm_steps - 1, env.reward_range, env.action_count),
        "expert_weights": ExpertWeights(pc, eta, env.reward_range),
        "q_learning": QLearner(
            env.observation_count,
            env.action_count,
            float(q.get("alpha", 0.1)),
            float(q.get("xi", 0.05)),
            float(q.get("gamma", 0.5)),
        ),
    }


def post_shift_optimum(env, gamma: float) -> float:
    """Normalised discounted optimum from the forced-entry law: ``(1 - gamma) * sum_s entry(s) V*(s)``."""
    v, _, _ = value_iteration(env, gamma)
    return (1.0 - gamma) * math.fsum(env.entry_law * v)


def run_adaptation(scenario: Scenario, event_step: int | None = None) -> RunResult:
    cfg = scenario.experiment("adaptation")
    env = scenario.env
    t_star = event_step if event_step is not None else cfg.get("event_step")
    if t_star is None:
        raise ScenarioError(["experiments.adaptation.event_step: the forced event step t* is required"])
    post = int(cfg.get("post_event_steps", 10_000))
    window = int(cfg.get("window", 200))
    band_frac = float(cfg.get("band", 0.1))
    gamma = float(cfg.get("vi_gamma", 0.99))
    horizon = int(t_star) + post
    pc = PolicyClass.all_deterministic(env.observation_count, env.action_count)
    learners = _learners(scenario, pc, horizon)
    if learners["frozen_erm"].t0 >= t_star:
        raise ScenarioError(["learners.erm.train_steps: ERM must finish training before the event step"])

    def run(name):
        return name, run_episode(env, learners[name], horizon, scenario.seed, forced_event=int(t_star), agent_stream=("adaptation", name))

    with ThreadPoolExecutor(max_workers=min(thread_count(), len(learners))) as pool:
        trajectories = dict(pool.map(run, sorted(learners)))

    optimum = post_shift_optimum(env, gamma)
    band = band_frac * abs(optimum)
    lo, hi = env.reward_range
    band_loss = float(reward_loss(hi - band, lo, hi))
    n_pol = len(pc)
    regret_bound = 2.0 * math.sqrt(horizon * math.log(n_pol)) if n_pol > 1 else 0.0
    recovery_bound = math.ceil(regret_bound / band_loss) + window if band_loss > 0 else None

    per_learner, series_rows = {}, {}
    for name in sorted(learners):
        traj = trajectories[name]
        series = performance_series(traj, window)
        rec = recovery_time(series, optimum, band, int(t_star))
        rewards = series.per_step_reward
        info = {
            "recovery_time": rec,
            "recovered": rec is not None,
            "pre_event_baseline": pre_event_baseline(series, int(t_star)),
            "post_event_mean_reward": math.fsum(rewards[t_star:].tolist()) / post,
            "exploration_cost": math.fsum((optimum - rewards[t_star:]).tolist()),
            "entered_disruption_at": traj.first_entry(env.disruption),
        }
        learner = learners[name]
        if isinstance(learner, ExpertWeights):
            info["eta"] = learner.eta
            info["regret"] = learner.regret()
            info["regret_bound"] = regret_bound
            info["regret_within_bound"] = learner.regret() <= regret_bound
            info["recovery_bound"] = recovery_bound
            info["recovery_within_bound"] = rec is not None and recovery_bound is not None and rec <= recovery_bound
            info["final_policy_weights"] = learner.probabilities.tolist()
        if isinstance(learner, ErmLearner):
            info["frozen_policy"] = list(learner.policy.table)
            info["train_steps"] = learner.t0 + 1
        per_learner[name] = info
        labels = phase_labels(series, int(t_star), rec, learners["frozen_erm"].t0 if name == "frozen_erm" else None)
        series_rows[name] = [
            {"t": t, "reward": float(rewards[t]), "moving_avg": float(series.moving_avg[t]), "phase": labels[t]}
            for t in range(len(series))
        ]

    behavior = uniform_policy(env)
    occ_n, _ = region_occupancy(env, behavior, env.nominal)
    occ_d, d_source = region_occupancy(env, behavior, env.disruption)
    qn = induced_observation_distribution(env, env.nominal, occ_n)
    qd = induced_observation_distribution(env, env.disruption, occ_d)
    report = shift_report(qn, qd)
    shift = {
        "q_nominal": qn.mass.tolist(),
        "q_disruption": qd.mass.tolist(),
        "disruption_law": d_source,
        **report.to_dict(),
    }
    summary = {
        "event_step": int(t_star),
        "horizon": horizon,
        "window": window,
        "band_fraction": band_frac,
        "vi_gamma": gamma,
        "post_shift_optimum": optimum,
        "band": band,
        "baseline_rule": "post-shift value-iteration optimum; the pre-event 10-window mean is reported per learner",
        "performance_measure": PERFORMANCE_MEASURE,
        "phase_rule": PHASE_RULE,
        "time_axis": {"tau0": env.clock.tau0, "delta_tau": env.clock.delta_tau},
        "learners": per_learner,
        "shift": {"tv": report.tv, "support_overlap": report.support_overlap},
    }
    return RunResult(provenance(scenario, "adaptation"), {"adaptation": summary}, series_rows, shift=shift)


RUNNERS = {
    "prop1": run_prop1,
    "erm_neglect": run_erm_neglect,
    "markov": run_markov,
    "adaptation": run_adaptation,
}


def run_experiment(scenario: Scenario, name: str) -> RunResult:
    if name not in RUNNERS:
        raise ScenarioError([f"unknown experiment {name!r}; expected one of {', '.join(EXPERIMENTS)}"])
    return RUNNERS[name](scenario)


def run_all(scenario: Scenario) -> RunResult:
    """Every experiment configured in the scenario, in a fixed order."""
    names = [n for n in EXPERIMENTS if n in scenario.experiments]
    if not names:
        raise ScenarioError(["experiments: the scenario configures no experiments"])
    result = run_experiment(scenario, names[0])
    for n in names[1:]:
        result = result.merge(run_experiment(scenario, n))
    return result
