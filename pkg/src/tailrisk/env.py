"""Finite partially observed environment with nominal and disruption regions.

States are split into a nominal region and a disjoint disruption region. The
agent sees only an observation drawn from ``obs_map`` for the current state,
and a step's reward is ``rewards[next_state, action]``. At step ``t`` the agent
holds the observation of ``s_t``; after acting it receives the reward of the
transition and the observation of ``s_{t+1}``.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Protocol

import numpy as np
from scipy.sparse.csgraph import connected_components

from .measure import Event
from .rng import stream

ROW_TOL = 1e-12
RESIDUAL_TOL = 1e-10


class EnvError(ValueError):
    """Invalid environment, policy, occupancy or schedule."""


def _ro(a, dtype=float) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Clock:
    """Wall-clock labelling of discrete steps: ``tau0 + delta_tau * t`` seconds."""

    tau0: float = 0.0
    delta_tau: float = 1.0

    def seconds(self, t):
        return self.tau0 + self.delta_tau * np.asarray(t)


@dataclass(frozen=True)
class EnvironmentModel:
    kernel: np.ndarray  # (state, action, next_state)
    obs_map: np.ndarray  # (state, observation)
    rewards: np.ndarray  # (next_state, action)
    nominal: Event
    disruption: Event
    entry: np.ndarray | None = None  # successor law of a forced event, supported on the disruption region
    initial_state: int = 0
    clock: Clock = field(default_factory=Clock)
    reward_range: tuple[float, float] | None = None
    require_lossy: bool = True

    def __post_init__(self) -> None:
        k, o, r = _ro(self.kernel), _ro(self.obs_map), _ro(self.rewards)
        if k.ndim != 3 or k.shape[0] != k.shape[2] or k.shape[0] < 1 or k.shape[1] < 1:
            raise EnvError(f"kernel must have shape (S, A, S), got {k.shape}")
        n_s, n_a = k.shape[:2]
        if o.ndim != 2 or o.shape[0] != n_s or o.shape[1] < 1:
            raise EnvError(f"obs_map must have shape ({n_s}, O), got {o.shape}")
        if r.shape != (n_s, n_a):
            raise EnvError(f"rewards must have shape ({n_s}, {n_a}), got {r.shape}")
        object.__setattr__(self, "kernel", k)
        object.__setattr__(self, "obs_map", o)
        object.__setattr__(self, "rewards", r)
        if self.entry is not None:
            e = _ro(self.entry)
            if e.shape != (n_s,):
                raise EnvError(f"entry must have shape ({n_s},), got {e.shape}")
            object.__setattr__(self, "entry", e)
        if self.reward_range is None:
            object.__setattr__(self, "reward_range", (float(r.min()), float(r.max())))
        else:
            object.__setattr__(self, "reward_range", tuple(float(x) for x in self.reward_range))

    @property
    def state_count(self) -> int:
        return int(self.kernel.shape[0])

    @property
    def action_count(self) -> int:
        return int(self.kernel.shape[1])

    @property
    def observation_count(self) -> int:
        return int(self.obs_map.shape[1])

    @cached_property
    def expected_rewards(self) -> np.ndarray:
        """``E[reward | state, action]`` over the successor draw, shape (S, A)."""
        return _ro(np.einsum("sap,pa->sa", self.kernel, self.rewards))

    @cached_property
    def entry_law(self) -> np.ndarray:
        if self.entry is not None:
            return self.entry
        d = self.disruption.mask(self.state_count)
        if not d.any():
            raise EnvError("environment has no disruption states")
        return _ro(d / d.sum())

    @cached_property
    def _samplers(self):
        kernel = [[_Sampler(self.kernel[s, a]) for a in range(self.action_count)] for s in range(self.state_count)]
        obs = [_Sampler(self.obs_map[s]) for s in range(self.state_count)]
        return kernel, obs, self.rewards.tolist()

    @cached_property
    def _forced_samplers(self):
        d = self.disruption.mask(self.state_count)
        rows = []
        for s in range(self.state_count):
            per_action = []
            for a in range(self.action_count):
                row = np.where(d, self.kernel[s, a], 0.0)
                total = math.fsum(row)
                per_action.append(_Sampler(row / total if total > 0 else self.entry_law))
            rows.append(per_action)
        return rows


class _Sampler:
    """Inverse-CDF draw from one probability row."""

    __slots__ = ("cdf", "last")

    def __init__(self, probs: np.ndarray) -> None:
        self.cdf = np.cumsum(probs).tolist()
        self.last = int(np.flatnonzero(np.asarray(probs) > 0)[-1])

    def __call__(self, u: float) -> int:
        return min(bisect.bisect_right(self.cdf, u), self.last)


def _row_errors(rows: np.ndarray, label) -> list[str]:
    errs = []
    for idx in np.ndindex(rows.shape[:-1]):
        row = rows[idx]
        where = label(*idx)
        if not np.all(np.isfinite(row)) or np.any(row < 0):
            errs.append(f"{where}: entries must be finite and non-negative")
            continue
        total = math.fsum(row)
        if abs(total - 1.0) > ROW_TOL:
            errs.append(f"{where}: row sums to {total:.15g}, expected 1")
    return errs


def validate(env: EnvironmentModel) -> list[str]:
    """All invariant violations of ``env``; an empty list means valid."""
    errs = _row_errors(env.kernel, lambda s, a: f"kernel[state={s}, action={a}]")
    errs += _row_errors(env.obs_map, lambda s: f"obs_map[state={s}]")
    if not np.all(np.isfinite(env.rewards)):
        errs.append("rewards: entries must be finite")
    n = env.state_count
    for name, ev in (("nominal", env.nominal), ("disruption", env.disruption)):
        bad = sorted(i for i in ev.members if i >= n)
        if bad:
            errs.append(f"{name}: states {bad} outside [0, {n})")
    overlap = sorted(env.nominal.members & env.disruption.members)
    if overlap:
        errs.append(f"nominal and disruption regions must be disjoint, both contain {overlap}")
    missing = sorted(set(range(n)) - env.nominal.members - env.disruption.members)
    if missing:
        errs.append(f"nominal and disruption regions must cover all states, missing {missing}")
    if env.require_lossy and env.observation_count >= n:
        errs.append(f"observation count {env.observation_count} must be smaller than state count {n}")
    if not 0 <= env.initial_state < n:
        errs.append(f"initial_state {env.initial_state} outside [0, {n})")
    if env.entry is not None:
        errs += _row_errors(env.entry[None, :], lambda _: "entry")
        outside = [i for i in range(n) if env.entry[i] > 0 and i not in env.disruption]
        if outside:
            errs.append(f"entry puts mass on non-disruption states {outside}")
    lo, hi = env.reward_range
    if not lo < hi:
        errs.append(f"reward_range must satisfy min < max, got ({lo}, {hi})")
    elif env.rewards.min() < lo or env.rewards.max() > hi:
        errs.append(f"rewards fall outside the declared reward_range ({lo}, {hi})")
    return errs


def check(env: EnvironmentModel) -> EnvironmentModel:
    errs = validate(env)
    if errs:
        raise EnvError("; ".join(errs))
    return env


def regional_kernel(
    nominal: list[int],
    disruption: list[int],
    within_nominal,
    within_disruption,
    crossing,
    recovery,
    epsilon: float,
    delta: float,
    action_count: int,
) -> np.ndarray:
    """Assemble a kernel from per-region dynamics and the rare crossings.

    From a nominal state the chain moves by ``within_nominal`` with probability
    ``1 - epsilon`` and jumps into the disruption region by ``crossing`` with
    probability ``epsilon``; from a disruption state it follows
    ``within_disruption`` and returns to nominal by ``recovery`` with
    probability ``delta``. Within-region matrices are either (n, n), shared by
    all actions, or (n, A, n).
    """
    if not 0.0 <= epsilon <= 1.0 or not 0.0 <= delta <= 1.0:
        raise EnvError(f"epsilon and delta must lie in [0, 1], got {epsilon}, {delta}")
    n = len(nominal) + len(disruption)
    k = np.zeros((n, action_count, n))

    def per_action(m, size):
        m = np.asarray(m, float)
        if m.ndim == 2:
            m = np.repeat(m[:, None, :], action_count, axis=1)
        if m.shape != (size, action_count, size):
            raise EnvError(f"within-region dynamics must have shape ({size}, {size}) or ({size}, {action_count}, {size})")
        return m

    wn, wd = per_action(within_nominal, len(nominal)), per_action(within_disruption, len(disruption))
    crossing, recovery = np.asarray(crossing, float), np.asarray(recovery, float)
    if crossing.shape != (len(disruption),) or recovery.shape != (len(nominal),):
        raise EnvError("crossing must range over disruption states and recovery over nominal states")
    for i, s in enumerate(nominal):
        k[s, :, nominal] = ((1.0 - epsilon) * wn[i]).T
        k[s, :, disruption] = epsilon * crossing[:, None]
    for i, s in enumerate(disruption):
        k[s, :, disruption] = ((1.0 - delta) * wd[i]).T
        k[s, :, nominal] = delta * recovery[:, None]
    return k


# -- policies -----------------------------------------------------------------


@dataclass(frozen=True)
class Policy:
    """Memoryless deterministic policy: observation index to action index."""

    table: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "table", tuple(int(a) for a in self.table))

    def act(self, observation: int, rng=None) -> int:
        return self.table[observation]

    def observe(self, step) -> None:
        pass

    def matrix(self, action_count: int) -> np.ndarray:
        m = np.zeros((len(self.table), action_count))
        m[np.arange(len(self.table)), self.table] = 1.0
        return m


def policy_matrix(env: EnvironmentModel, policy) -> np.ndarray:
    """Row-stochastic (O, A) action law of a ``Policy`` or an explicit matrix."""
    if isinstance(policy, Policy):
        if len(policy.table) != env.observation_count:
            raise EnvError(f"policy covers {len(policy.table)} observations, environment has {env.observation_count}")
        if any(not 0 <= a < env.action_count for a in policy.table):
            raise EnvError(f"policy actions must lie in [0, {env.action_count})")
        return policy.matrix(env.action_count)
    m = np.asarray(policy, float)
    if m.shape != (env.observation_count, env.action_count):
        raise EnvError(f"policy matrix must have shape ({env.observation_count}, {env.action_count})")
    return m


def uniform_policy(env: EnvironmentModel) -> np.ndarray:
    return np.full((env.observation_count, env.action_count), 1.0 / env.action_count)


def induced_chain(env: EnvironmentModel, policy) -> np.ndarray:
    """State transition matrix when actions follow ``policy`` on the emitted observation."""
    pi = policy_matrix(env, policy)
    state_action = env.obs_map @ pi  # (S, A)
    return np.einsum("sa,sap->sp", state_action, env.kernel)


# -- exact chain quantities ---------------------------------------------------


def _check_occupancy(env: EnvironmentModel, region: Event, occupancy) -> np.ndarray:
    occ = np.asarray(occupancy, float)
    if occ.shape != (env.state_count,):
        raise EnvError(f"occupancy must have shape ({env.state_count},)")
    if np.any(occ < 0) or abs(math.fsum(occ) - 1.0) > 1e-9:
        raise EnvError("occupancy must be a probability vector")
    mask = region.mask(env.state_count)
    if math.fsum(occ[~mask]) > ROW_TOL:
        raise EnvError("occupancy puts mass outside the region it should be supported on")
    return occ


def crossing_probability(env: EnvironmentModel, policy, from_: Event, to: Event, occupancy) -> float:
    """One-step probability of landing in ``to`` when the state is drawn from ``occupancy`` on ``from_``."""
    occ = _check_occupancy(env, from_, occupancy)
    chain = induced_chain(env, policy)
    to_mask = to.mask(env.state_count)
    return math.fsum(occ[s] * math.fsum(chain[s, to_mask]) for s in range(env.state_count) if occ[s] > 0)


@dataclass(frozen=True)
class ObservationDistribution:
    mass: np.ndarray

    def __post_init__(self) -> None:
        m = _ro(self.mass)
        if m.ndim != 1 or np.any(m < 0) or abs(math.fsum(m) - 1.0) > ROW_TOL:
            raise EnvError("observation distribution must be a probability vector")
        object.__setattr__(self, "mass", m)


def induced_observation_distribution(env: EnvironmentModel, region: Event, occupancy) -> ObservationDistribution:
    occ = _check_occupancy(env, region, occupancy)
    q = occ @ env.obs_map
    return ObservationDistribution(q / math.fsum(q))


def _strongly_connected(adj: np.ndarray) -> tuple[int, np.ndarray]:
    return connected_components(adj > 0, directed=True, connection="strong")


def gth_stationary(p: np.ndarray) -> np.ndarray:
    """Stationary law of an irreducible row-stochastic matrix (Grassmann-Taksar-Heyman).

    Subtraction-free elimination, so the result is accurate to working
    precision even for nearly decomposable chains.
    """
    a = np.array(p, float)
    n = a.shape[0]
    for k in range(n - 1, 0, -1):
        s = math.fsum(a[k, :k])
        a[:k, k] /= s
        a[:k, :k] += np.outer(a[:k, k], a[k, :k])
    pi = np.zeros(n)
    pi[0] = 1.0
    for k in range(1, n):
        pi[k] = math.fsum(pi[:k] * a[:k, k])
    return pi / math.fsum(pi)


def _closed_classes(p: np.ndarray) -> list[np.ndarray]:
    count, labels = _strongly_connected(p)
    closed = []
    for c in range(count):
        members = np.flatnonzero(labels == c)
        outside = np.setdiff1d(np.arange(p.shape[0]), members)
        if not np.any(p[np.ix_(members, outside)] > 0):
            closed.append(members)
    return closed


def stationary_occupancy(env: EnvironmentModel, policy, region: Event | None = None) -> np.ndarray:
    """Stationary state law of the induced chain, optionally conditioned to stay in ``region``.

    The region-restricted chain renormalises each row's in-region mass. Raises
    :class:`EnvError` unless the (restricted) chain is irreducible.
    """
    p = induced_chain(env, policy)
    states = np.arange(env.state_count) if region is None else np.array(sorted(region.members), dtype=int)
    if region is not None:
        region.check(env.state_count)
    if states.size == 0:
        raise EnvError("cannot compute occupancy of an empty region")
    sub = p[np.ix_(states, states)]
    rows = sub.sum(axis=1)
    if np.any(rows <= 0):
        raise EnvError(
            f"states {states[rows <= 0].tolist()} leave the region with certainty; "
            "the restricted chain is undefined, adjust the scenario's region dynamics"
        )
    sub = sub / rows[:, None]
    count, _ = _strongly_connected(sub)
    if count != 1:
        raise EnvError(
            f"induced chain on states {states.tolist()} is reducible ({count} communicating classes); "
            "make the scenario's region dynamics irreducible"
        )
    pi_sub = gth_stationary(sub)
    residual = np.abs(pi_sub @ sub - pi_sub).max()
    if residual > RESIDUAL_TOL:
        raise EnvError(f"stationary solve residual {residual:.3g} exceeds {RESIDUAL_TOL}")
    occ = np.zeros(env.state_count)
    occ[states] = pi_sub
    return occ


def unichain_stationary(p: np.ndarray) -> np.ndarray:
    """Stationary law of a chain with exactly one closed class (transient states get zero mass)."""
    closed = _closed_classes(p)
    if len(closed) != 1:
        raise EnvError(f"chain has {len(closed)} closed classes; a unique recurrent class is required")
    members = closed[0]
    pi = np.zeros(p.shape[0])
    pi[members] = gth_stationary(p[np.ix_(members, members)])
    return pi


def value_iteration(env: EnvironmentModel, gamma: float, tol: float = 1e-12, max_iter: int = 1_000_000):
    """Optimal discounted state values with full state information.

    Returns ``(values, q_values, greedy_actions)``; ties go to the lowest action.
    """
    if not 0.0 <= gamma < 1.0:
        raise EnvError(f"gamma must lie in [0, 1), got {gamma}")
    k, r = env.kernel, env.rewards
    immediate = env.expected_rewards
    v = np.zeros(env.state_count)
    for _ in range(max_iter):
        q = immediate + gamma * np.einsum("sap,p->sa", k, v)
        v_new = q.max(axis=1)
        if np.abs(v_new - v).max() <= tol * max(1.0, np.abs(v_new).max()):
            v = v_new
            break
        v = v_new
    else:
        raise EnvError("value iteration did not converge")
    q = immediate + gamma * np.einsum("sap,p->sa", k, v)
    return v, q, np.argmax(q, axis=1)


# -- simulation ---------------------------------------------------------------


class Agent(Protocol):
    def act(self, observation: int, rng: np.random.Generator) -> int: ...

    def observe(self, step: Step) -> None: ...


@dataclass(frozen=True)
class Step:
    """One transition as seen by the agent."""

    t: int
    observation: int
    action: int
    reward: float
    next_observation: int
    action_rewards: tuple[float, ...]  # rewards[next_state, a] for every action, the supervisor's full feedback


def step(env: EnvironmentModel, state: int, action: int, rng: np.random.Generator) -> tuple[int, int, float]:
    """Draw ``(next_state, observation, reward)``; consumes two uniforms from ``rng``."""
    if not 0 <= state < env.state_count or not 0 <= action < env.action_count:
        raise EnvError(f"invalid state/action ({state}, {action})")
    kernel, obs, rewards = env._samplers
    u_state, u_obs = rng.random(2)
    nxt = kernel[state][action](u_state)
    return nxt, obs[nxt](u_obs), rewards[nxt][action]


@dataclass(frozen=True)
class Trajectory:
    """Actions ``a_0..a_{T-1}``, observations and hidden states ``0..T``, rewards ``r_1..r_T``.

    ``rewards[0]`` is the (empty) initial reward and is always 0.
    """

    actions: np.ndarray
    observations: np.ndarray
    rewards: np.ndarray
    states: np.ndarray
    forced_event: int | None = None

    def __post_init__(self) -> None:
        t = len(self.actions)
        if not (len(self.observations) == len(self.rewards) == len(self.states) == t + 1):
            raise EnvError("trajectory arrays have inconsistent lengths")
        for name in ("actions", "observations", "states"):
            object.__setattr__(self, name, _ro(getattr(self, name), np.int64))
        object.__setattr__(self, "rewards", _ro(self.rewards))

    @property
    def horizon(self) -> int:
        return len(self.actions)

    @property
    def step_rewards(self) -> np.ndarray:
        """Reward earned by the transition out of step ``t``, for ``t = 0..T-1``."""
        return self.rewards[1:]

    def first_entry(self, region: Event) -> int | None:
        """First step whose hidden state lies in ``region``, or None."""
        hits = np.flatnonzero(np.isin(self.states, sorted(region.members)))
        return int(hits[0]) if hits.size else None


def run_episode(
    env: EnvironmentModel,
    agent,
    horizon: int,
    seed: int,
    forced_event: int | None = None,
    agent_stream: tuple[str, ...] = ("agent",),
    initial_state: int | None = None,
) -> Trajectory:
    """Simulate ``horizon`` transitions.

    Environment draws come from the ``env`` stream of ``seed`` and agent draws
    from ``agent_stream``, so agents run with the same seed share identical
    environment randomness. When ``forced_event`` is set, the transition out of
    that step is drawn from the kernel conditioned on the disruption region (or
    from ``env.entry_law`` if the row has no such mass), so ``states[forced_event + 1]``
    is a disruption state.
    """
    if horizon < 0:
        raise EnvError(f"horizon must be non-negative, got {horizon}")
    if forced_event is not None and not 0 <= forced_event < horizon:
        raise EnvError(f"forced event step {forced_event} outside [0, {horizon})")
    kernel, obs, rewards = env._samplers
    forced = env._forced_samplers if forced_event is not None else None
    u = stream(seed, "env").random((horizon + 1, 2)).tolist()
    agent_rng = stream(seed, *agent_stream)
    observe = getattr(agent, "observe", None)

    s = env.initial_state if initial_state is None else int(initial_state)
    o = obs[s](u[0][1])
    states, observations, actions, rew = [s], [o], [], [0.0]
    for t in range(horizon):
        a = int(agent.act(o, agent_rng))
        if not 0 <= a < env.action_count:
            raise EnvError(f"agent chose invalid action {a} at step {t}")
        u_s, u_o = u[t + 1]
        nxt = forced[s][a](u_s) if t == forced_event else kernel[s][a](u_s)
        o_next = obs[nxt](u_o)
        r = rewards[nxt][a]
        if observe is not None:
            observe(Step(t, o, a, r, o_next, tuple(rewards[nxt])))
        actions.append(a)
        states.append(nxt)
        observations.append(o_next)
        rew.append(r)
        s, o = nxt, o_next
    return Trajectory(np.array(actions, dtype=np.int64), observations, rew, states, forced_event)
