"""Exact risk minimisation, train-then-freeze ERM and two continual learners.

Rewards are bound to losses by ``L = (r_max - r) / (r_max - r_min)`` so every
loss lies in [0, 1]. All argmin/argmax ties go to the lowest index.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple

import numpy as np

from .env import EnvironmentModel, Policy, Step, policy_matrix
from .measure import Event, FiniteProbabilitySpace, LossTable, risk


class LearnerError(ValueError):
    pass


def reward_loss(reward, r_min: float, r_max: float):
    return (r_max - np.asarray(reward, float)) / (r_max - r_min)


@dataclass(frozen=True)
class PolicyClass:
    """Finite model space of memoryless policies."""

    policies: tuple[Policy, ...]

    def __post_init__(self) -> None:
        pols = tuple(p if isinstance(p, Policy) else Policy(p) for p in self.policies)
        if not pols:
            raise LearnerError("policy class must not be empty")
        if len({len(p.table) for p in pols}) != 1:
            raise LearnerError("all policies must cover the same observations")
        object.__setattr__(self, "policies", pols)

    @classmethod
    def all_deterministic(cls, observation_count: int, action_count: int) -> PolicyClass:
        """Every observation-to-action table, in lexicographic order (observation 0 most significant)."""
        return cls(tuple(Policy(t) for t in itertools.product(range(action_count), repeat=observation_count)))

    def __len__(self) -> int:
        return len(self.policies)

    def __getitem__(self, i: int) -> Policy:
        return self.policies[i]

    @cached_property
    def tables(self) -> np.ndarray:
        """(policies, observations) array of chosen actions."""
        t = np.array([p.table for p in self.policies], dtype=np.int64)
        t.setflags(write=False)
        return t

    def check(self, env: EnvironmentModel) -> None:
        for p in self.policies:
            policy_matrix(env, p)

    def index(self, policy: Policy) -> int:
        return self.policies.index(policy)


def _argmin(values) -> int:
    best, best_i = math.inf, 0
    for i, v in enumerate(values):
        if v < best:
            best, best_i = v, i
    return best_i


# -- exact risk over a policy class -------------------------------------------


def policy_risk_problem(
    env: EnvironmentModel, policy_class: PolicyClass, occupancy
) -> tuple[FiniteProbabilitySpace, LossTable]:
    """Risk problem of choosing a policy when the state is drawn from ``occupancy``.

    Outcomes are (state, observation) pairs, flattened as ``state * O + obs``,
    with probability ``occupancy[s] * obs_map[s, o]``. The loss of policy
    ``theta`` at ``(s, o)`` is the bound loss of the expected one-step reward
    of taking ``theta(o)`` in ``s``.
    """
    policy_class.check(env)
    occ = np.asarray(occupancy, float)
    prob = (occ[:, None] * env.obs_map).reshape(-1)
    lo, hi = env.reward_range
    exp_loss = reward_loss(env.expected_rewards, lo, hi)  # (S, A)
    tables = policy_class.tables  # (P, O)
    values = exp_loss[:, tables]  # (S, P, O)
    loss = values.transpose(1, 0, 2).reshape(len(policy_class), -1)
    return FiniteProbabilitySpace(prob / math.fsum(prob)), LossTable(loss)


def state_event(env: EnvironmentModel, region: Event) -> Event:
    """The (state, observation) outcomes whose state lies in ``region``."""
    o = env.observation_count
    return Event(frozenset(s * o + k for s in region for k in range(o)))


def exact_minimizer(space: FiniteProbabilitySpace, loss: LossTable) -> int:
    """Index of the risk-minimising model; ties go to the lowest index."""
    return _argmin(risk(space, loss, theta) for theta in range(loss.model_count))


def expected_reward(env: EnvironmentModel, policy, occupancy) -> float:
    """Expected one-step reward of ``policy`` with the state drawn from ``occupancy``."""
    pi = policy_matrix(env, policy)
    occ = np.asarray(occupancy, float)
    state_action = occ[:, None] * (env.obs_map @ pi)
    return math.fsum((state_action * env.expected_rewards).reshape(-1))


# -- two-phase ERM ------------------------------------------------------------


class Record(NamedTuple):
    observation: int
    action: int
    reward: float
    next_observation: int
    propensity: float


@dataclass
class ErmLearner:
    """Collects experience with uniformly random actions up to step ``t0``, then freezes.

    The empirical risk of a policy is the inverse-propensity estimate
    ``(1/l) sum_i 1[theta(o_i) = a_i] L(r_i) / p_i``, which is unbiased for
    the policy's risk under the data-collecting state law.
    """

    policy_class: PolicyClass
    t0: int
    reward_range: tuple[float, float]
    action_count: int
    buffer: list[Record] = field(default_factory=list)
    frozen_choice: int | None = None
    current_step: int = 0

    def __post_init__(self) -> None:
        if self.t0 < 0:
            raise LearnerError("training cutoff t0 must be non-negative")

    @property
    def frozen(self) -> bool:
        return self.frozen_choice is not None

    @property
    def policy(self) -> Policy:
        if self.frozen_choice is None:
            raise LearnerError("ERM learner has not been trained yet")
        return self.policy_class[self.frozen_choice]

    def act(self, observation: int, rng: np.random.Generator) -> int:
        if self.frozen_choice is not None:
            return self.policy.act(observation)
        return int(rng.integers(self.action_count))

    def observe(self, step: Step) -> None:
        self.current_step = step.t + 1
        if self.frozen_choice is not None:
            return  # deployment: rewards are ignored
        self.buffer.append(Record(step.observation, step.action, step.reward, step.next_observation, 1.0 / self.action_count))
        if self.current_step > self.t0:
            erm_train(self)


def empirical_policy_risks(records, policy_class: PolicyClass, reward_range) -> list[float]:
    """Inverse-propensity empirical risk of every policy in the class.

    Per-(observation, action) totals are exactly rounded sums, so the result
    does not depend on record order.
    """
    if not records:
        raise LearnerError("empirical risk needs at least one record")
    obs, act, reward, _, propensity = (np.asarray(c) for c in zip(*records))
    lo, hi = reward_range
    weighted = reward_loss(reward, lo, hi) / propensity
    n_o, n_a = policy_class.tables.shape[1], int(max(policy_class.tables.max(), act.max())) + 1
    key = obs.astype(np.int64) * n_a + act.astype(np.int64)
    order = np.argsort(key, kind="stable")
    bounds = np.searchsorted(key[order], np.arange(n_o * n_a + 1))
    ordered = weighted[order].tolist()
    totals = [math.fsum(ordered[bounds[k] : bounds[k + 1]]) for k in range(n_o * n_a)]
    n = len(records)
    return [math.fsum(totals[o * n_a + a] for o, a in enumerate(row)) / n for row in policy_class.tables.tolist()]


def erm_train(learner: ErmLearner) -> int:
    """Pick the empirical-risk minimiser from the buffer and freeze the learner.

    The result does not depend on the order of the buffer. A frozen learner
    keeps its choice.
    """
    if learner.frozen_choice is not None:
        return learner.frozen_choice
    if not learner.buffer:
        raise LearnerError("cannot train on an empty buffer")
    if learner.current_step <= learner.t0:
        raise LearnerError(f"training starts after step t0={learner.t0}, current step is {learner.current_step}")
    risks = empirical_policy_risks(learner.buffer, learner.policy_class, learner.reward_range)
    learner.frozen_choice = _argmin(risks)
    return learner.frozen_choice


# -- continual learners -------------------------------------------------------

LOG_WEIGHT_FLOOR = -700.0  # exp() of this is still a normal double


@dataclass
class ExpertWeights:
    """Exponential weights over a policy class with full reward feedback.

    Every round the supervisor reveals the reward each action would have earned,
    so each policy's loss is known. Weights are kept as log-weights shifted to
    a maximum of 0 and floored at ``LOG_WEIGHT_FLOOR`` so no weight underflows
    to zero.
    """

    policy_class: PolicyClass
    eta: float
    reward_range: tuple[float, float]
    log_weights: np.ndarray = field(default=None)
    cumulative_loss: np.ndarray = field(default=None)
    mixture_loss: float = 0.0
    rounds: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.eta <= 1.0:
            raise LearnerError(f"eta must lie in [0, 1], got {self.eta}")
        n = len(self.policy_class)
        if self.log_weights is None:
            self.log_weights = np.zeros(n)
        if self.cumulative_loss is None:
            self.cumulative_loss = np.zeros(n)

    @staticmethod
    def tuned_eta(policy_count: int, horizon: int) -> float:
        """``sqrt(8 ln N / T)``, capped at 1; gives regret at most ``sqrt(T ln N / 2)``."""
        if policy_count < 2 or horizon < 1:
            return 1.0
        return min(1.0, math.sqrt(8.0 * math.log(policy_count) / horizon))

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    @property
    def probabilities(self) -> np.ndarray:
        w = self.weights
        return w / math.fsum(w)

    def action_probabilities(self, observation: int, action_count: int) -> np.ndarray:
        return np.bincount(self.policy_class.tables[:, observation], weights=self.probabilities, minlength=action_count)

    def act(self, observation: int, rng: np.random.Generator) -> int:
        probs = self.action_probabilities(observation, int(self.policy_class.tables.max()) + 1)
        a = int(np.searchsorted(np.cumsum(probs), rng.random(), side="right"))
        return min(a, int(np.flatnonzero(probs > 0)[-1]))

    def observe(self, step: Step) -> None:
        ew_update(self, np.asarray(step.action_rewards)[self.policy_class.tables[:, step.observation]])

    def regret(self) -> float:
        """Cumulative mixture loss minus the best single policy's loss."""
        return self.mixture_loss - float(self.cumulative_loss.min())


def ew_update(learner: ExpertWeights, rewards) -> np.ndarray:
    """One multiplicative-weights round from per-policy rewards; returns the new weights."""
    r = np.asarray(rewards, float)
    lo, hi = learner.reward_range
    if r.shape != (len(learner.policy_class),):
        raise LearnerError(f"expected {len(learner.policy_class)} per-policy rewards, got shape {r.shape}")
    if np.any(r < lo) or np.any(r > hi) or not np.all(np.isfinite(r)):
        raise LearnerError(f"rewards must lie in the declared range [{lo}, {hi}]")
    loss = reward_loss(r, lo, hi)
    learner.mixture_loss += math.fsum(learner.probabilities * loss)
    learner.cumulative_loss = learner.cumulative_loss + loss
    lw = learner.log_weights - learner.eta * loss
    learner.log_weights = np.maximum(lw - lw.max(), LOG_WEIGHT_FLOOR)
    learner.rounds += 1
    return learner.weights


@dataclass
class QLearner:
    """Tabular one-step value learning on observations with xi-greedy exploration."""

    observation_count: int
    action_count: int
    alpha: float
    xi: float
    gamma: float
    q: np.ndarray = field(default=None)

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise LearnerError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 <= self.xi <= 1.0:
            raise LearnerError(f"xi must lie in [0, 1], got {self.xi}")
        if not 0.0 <= self.gamma < 1.0:
            raise LearnerError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.q is None:
            self.q = np.zeros((self.observation_count, self.action_count))

    def greedy(self, observation: int) -> int:
        return int(np.argmax(self.q[observation]))

    def act(self, observation: int, rng: np.random.Generator) -> int:
        if not 0 <= observation < self.observation_count:
            raise LearnerError(f"observation {observation} outside [0, {self.observation_count})")
        if rng.random() < self.xi:
            return int(rng.integers(self.action_count))
        return self.greedy(observation)

    def observe(self, step: Step) -> None:
        q_update(self, step.observation, step.action, step.reward, step.next_observation)


def q_update(learner: QLearner, observation: int, action: int, reward: float, next_observation: int) -> np.ndarray:
    if not (0 <= observation < learner.observation_count and 0 <= next_observation < learner.observation_count):
        raise LearnerError("observation index out of range")
    if not 0 <= action < learner.action_count:
        raise LearnerError(f"action {action} outside [0, {learner.action_count})")
    target = reward + learner.gamma * learner.q[next_observation].max()
    learner.q[observation, action] += learner.alpha * (target - learner.q[observation, action])
    return learner.q


def act(agent, observation: int, rng: np.random.Generator | None = None) -> int:
    """Action of a policy or learner for ``observation``."""
    if isinstance(agent, Policy):
        if not 0 <= observation < len(agent.table):
            raise LearnerError(f"observation {observation} outside [0, {len(agent.table)})")
        return agent.act(observation)
    if rng is None:
        raise LearnerError("learners need a random stream to act")
    return agent.act(observation, rng)

