"""Performance curves, recovery, observation shift and Markov-order diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .env import EnvironmentModel, ObservationDistribution, Trajectory, induced_chain, policy_matrix, unichain_stationary


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class PerformanceSeries:
    """Per-step rewards and their trailing moving average over ``window`` steps.

    ``moving_avg[t]`` averages ``reward[t - window + 1 .. t]`` and is NaN for
    ``t < window - 1``.
    """

    per_step_reward: np.ndarray
    window: int
    moving_avg: np.ndarray

    def __len__(self) -> int:
        return int(self.per_step_reward.size)


def performance_series(traj: Trajectory | np.ndarray, window: int) -> PerformanceSeries:
    rewards = np.asarray(traj.step_rewards if isinstance(traj, Trajectory) else traj, float)
    n = rewards.size
    if window < 1:
        raise MetricsError(f"window must be at least 1, got {window}")
    if window > n:
        raise MetricsError(f"window {window} exceeds series length {n}")
    ma = np.full(n, np.nan)
    vals = rewards.tolist()
    for t in range(window - 1, n):
        ma[t] = math.fsum(vals[t - window + 1 : t + 1]) / window
    rewards = rewards.copy()
    rewards.setflags(write=False)
    ma.setflags(write=False)
    return PerformanceSeries(rewards, window, ma)


def recovery_time(series: PerformanceSeries, baseline: float, band: float, event_step: int) -> int | None:
    """Steps after ``event_step`` until the moving average re-enters ``[baseline - band, inf)``
    and stays there for ``window`` consecutive steps; None if it never does.
    """
    n = len(series)
    if not 0 <= event_step < n:
        raise MetricsError(f"event step {event_step} outside [0, {n})")
    ok = series.moving_avg >= baseline - band  # NaN compares False
    w = series.window
    run = 0
    # scan backwards so run[t] = number of consecutive in-band steps starting at t
    runs = np.zeros(n, dtype=np.int64)
    for t in range(n - 1, event_step - 1, -1):
        run = run + 1 if ok[t] else 0
        runs[t] = run
    hits = np.flatnonzero(runs[event_step:] >= w)
    return int(hits[0]) if hits.size else None


def pre_event_baseline(series: PerformanceSeries, event_step: int, span_windows: int = 10) -> float:
    """Mean reward over the last ``span_windows * window`` steps before the event."""
    start = max(0, event_step - span_windows * series.window)
    if event_step <= start:
        raise MetricsError("no pre-event steps to form a baseline")
    return math.fsum(series.per_step_reward[start:event_step].tolist()) / (event_step - start)


def phase_labels(
    series: PerformanceSeries, event_step: int | None, recovery: int | None, training_until: int | None = None
) -> list[str]:
    """Label each step training / nominal / degradation / adaptation / recovered.

    Degradation runs from the event to the moving-average minimum before
    recovery (or before the end); adaptation from there to the recovery step.
    """
    n = len(series)
    labels = ["nominal"] * n
    if training_until is not None:
        for t in range(min(n, training_until + 1)):
            labels[t] = "training"
    if event_step is None:
        return labels
    end = n if recovery is None else event_step + recovery
    seg = series.moving_avg[event_step:end]
    if seg.size and np.any(np.isfinite(seg)):
        trough = event_step + int(np.nanargmin(seg))
    else:
        trough = event_step
    for t in range(event_step, n):
        if t < trough:
            labels[t] = "degradation"
        elif t < end:
            labels[t] = "adaptation"
        else:
            labels[t] = "recovered"
    return labels


# -- distribution shift -------------------------------------------------------


@dataclass(frozen=True)
class ShiftReport:
    tv: float
    kl: float  # KL(qd || qn); math.inf when qd has mass outside qn's support
    support_overlap: float

    @property
    def kl_infinite(self) -> bool:
        return math.isinf(self.kl)

    def to_dict(self) -> dict:
        return {
            "tv": self.tv,
            "kl": None if self.kl_infinite else self.kl,
            "kl_infinite": self.kl_infinite,
            "support_overlap": self.support_overlap,
        }


def shift_report(qn: ObservationDistribution, qd: ObservationDistribution) -> ShiftReport:
    p, q = qn.mass, qd.mass
    if p.shape != q.shape:
        raise MetricsError(f"observation spaces differ: {p.size} vs {q.size}")
    tv = 0.5 * math.fsum(np.abs(p - q).tolist())
    support = p > 0
    overlap = math.fsum(q[support].tolist())
    if np.any((q > 0) & ~support):
        kl = math.inf
    else:
        m = q > 0
        kl = max(0.0, math.fsum((q[m] * np.log(q[m] / p[m])).tolist()))
    return ShiftReport(min(1.0, tv), kl, min(1.0, overlap))


# -- Markov order of the observation process ----------------------------------


@dataclass(frozen=True)
class MarkovGap:
    gap: float
    witness: tuple[int, ...] | None  # (o_prev..., o, o_next) attaining the gap


def _sequence_probabilities(env: EnvironmentModel, policy, length: int) -> dict[tuple[int, ...], Fraction]:
    """Stationary probability of every observation window of ``length``, in exact arithmetic.

    The float inputs are converted to fractions exactly, so conditional
    probabilities that coincide structurally (e.g. under an injective
    observation map) compare equal without rounding noise.
    """
    pi = policy_matrix(env, policy)
    stationary = [Fraction(x) for x in unichain_stationary(induced_chain(env, policy))]
    n_s, n_o = env.state_count, env.observation_count
    # moving from a state that emitted o uses the action law at o
    step = [
        [[math.fsum(pi[o, a] * env.kernel[s, a, t] for a in range(env.action_count)) for t in range(n_s)] for s in range(n_s)]
        for o in range(n_o)
    ]
    step = [[[Fraction(x) for x in row] for row in m] for m in step]
    emit = [[Fraction(x) for x in env.obs_map[:, o]] for o in range(n_o)]
    alphas = {(o,): [p * e for p, e in zip(stationary, emit[o])] for o in range(n_o)}
    for _ in range(length - 1):
        grown = {}
        for seq, alpha in alphas.items():
            m = step[seq[-1]]
            live = [s for s in range(n_s) if alpha[s]]
            moved = [sum((alpha[s] * m[s][t] for s in live), Fraction(0)) for t in range(n_s)]
            for o in range(n_o):
                grown[seq + (o,)] = [x * e for x, e in zip(moved, emit[o])]
        alphas = grown
    return {seq: sum(alpha, Fraction(0)) for seq, alpha in alphas.items()}


def markov_order_gap(env: EnvironmentModel, policy, horizon: int = 1, min_mass: float = 1e-14) -> MarkovGap:
    """Largest change in ``P(o' | o)`` from also conditioning on the ``horizon`` preceding observations.

    Computed exactly from the stationary law of the induced chain, which must
    have a single recurrent class. Zero when observations are themselves a
    first-order Markov chain.
    """
    if horizon < 1:
        raise MetricsError("horizon must be at least 1")
    n_o = env.observation_count
    long = _sequence_probabilities(env, policy, horizon + 2)
    zero = Fraction(0)
    pair, ctx = {}, {}
    for seq, p in long.items():
        pair[seq[-2:]] = pair.get(seq[-2:], zero) + p
        ctx[seq[:-1]] = ctx.get(seq[:-1], zero) + p
    single = {o: sum((pair[(o, k)] for k in range(n_o)), zero) for o in range(n_o)}
    best, witness = zero, None
    for seq in sorted(long):
        h = seq[:-1]
        o, o_next = seq[-2], seq[-1]
        if ctx[h] <= min_mass or single[o] <= min_mass:
            continue
        diff = abs(pair[(o, o_next)] / single[o] - long[seq] / ctx[h])
        if diff > best:
            best, witness = diff, seq
    return MarkovGap(float(best), witness)
