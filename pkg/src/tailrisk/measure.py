"""Exact finite probability spaces, risk functionals and the reweighted measure family.

Sums are either correctly rounded (:func:`math.fsum`) or exact over the float
inputs (:class:`fractions.Fraction`), so no result depends on summation order.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .rng import stream

PROB_TOL = 1e-12


class MeasureError(ValueError):
    """Invalid space, event, measure or schedule."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class FiniteProbabilitySpace:
    """A probability mass vector over outcomes ``0 .. n-1`` (power-set sigma-algebra)."""

    prob: np.ndarray

    def __post_init__(self) -> None:
        p = np.array(self.prob, dtype=float).reshape(-1)
        if p.size < 1:
            raise MeasureError("a probability space needs at least one outcome")
        if not np.all(np.isfinite(p)):
            raise MeasureError("probabilities must be finite")
        if np.any(p < 0):
            raise MeasureError(f"negative probability at outcome {int(np.argmin(p))}")
        total = math.fsum(p)
        if abs(total - 1.0) > PROB_TOL:
            raise MeasureError(f"probabilities sum to {total!r}, expected 1")
        object.__setattr__(self, "prob", _frozen(p))

    @property
    def outcome_count(self) -> int:
        return int(self.prob.size)

    def probability(self, event: Event) -> float:
        return math.fsum(self.prob[event.mask(self.outcome_count)])


@dataclass(frozen=True)
class Event:
    """A set of outcome indices."""

    members: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        members = frozenset(int(i) for i in self.members)
        if any(i < 0 for i in members):
            raise MeasureError("event members must be non-negative indices")
        object.__setattr__(self, "members", members)

    @classmethod
    def of(cls, *indices: int) -> Event:
        return cls(frozenset(indices))

    def check(self, outcome_count: int) -> None:
        bad = sorted(i for i in self.members if i >= outcome_count)
        if bad:
            raise MeasureError(f"event members {bad} outside [0, {outcome_count})")

    def mask(self, outcome_count: int) -> np.ndarray:
        self.check(outcome_count)
        m = np.zeros(outcome_count, dtype=bool)
        m[sorted(self.members)] = True
        return m

    def complement(self, outcome_count: int) -> Event:
        self.check(outcome_count)
        return Event(frozenset(range(outcome_count)) - self.members)

    def __contains__(self, i: object) -> bool:
        return i in self.members

    def __len__(self) -> int:
        return len(self.members)

    def __iter__(self):
        return iter(sorted(self.members))


@dataclass(frozen=True)
class LossTable:
    """Loss ``L(omega, theta)``: rows are model indices, columns outcomes."""

    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.array(self.values, dtype=float)
        if v.ndim == 1:
            v = v.reshape(1, -1)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise MeasureError(f"loss table must be a non-empty matrix, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise MeasureError("loss table entries must be finite")
        object.__setattr__(self, "values", _frozen(v))

    @property
    def model_count(self) -> int:
        return int(self.values.shape[0])

    @property
    def outcome_count(self) -> int:
        return int(self.values.shape[1])

    def row(self, theta: int) -> np.ndarray:
        if not 0 <= theta < self.model_count:
            raise MeasureError(f"model index {theta} outside [0, {self.model_count})")
        return self.values[theta]


@dataclass(frozen=True)
class ReweightedMeasure:
    """The measure that pins the mass of ``d_event`` to ``weight`` and rescales the rest.

    ``mu(A) = (w / eps) Pr(A & D) + ((1 - w) / (1 - eps)) Pr(A - D)`` with
    ``eps = Pr(D)``; requires ``0 < eps < 1`` and ``0 < w <= eps``. The
    ``1 - eps`` denominator is evaluated as the summed mass of the complement,
    which keeps ``mu(Omega) = 1`` to rounding even when ``eps`` is close to 1.
    """

    space: FiniteProbabilitySpace
    d_event: Event
    weight: float
    epsilon: float = field(init=False)
    complement_mass: float = field(init=False)

    def __post_init__(self) -> None:
        eps = self.space.probability(self.d_event)
        if not 0.0 < eps < 1.0:
            raise MeasureError(f"Pr(D) must lie strictly inside (0, 1), got {eps!r}")
        w = float(self.weight)
        if not 0.0 < w <= eps:
            raise MeasureError(f"weight must lie in (0, Pr(D)] = (0, {eps!r}], got {w!r}")
        object.__setattr__(self, "epsilon", eps)
        object.__setattr__(self, "complement_mass", math.fsum(self.space.prob[~self.d_event.mask(self.space.outcome_count)]))
        object.__setattr__(self, "weight", w)

    @property
    def inside_scale(self) -> float:
        return self.weight / self.epsilon

    @property
    def outside_scale(self) -> float:
        return (1.0 - self.weight) / self.complement_mass


@dataclass(frozen=True)
class EpsilonSchedule:
    """Strictly decreasing positive weights ``eps_1 > eps_2 > ...``."""

    values: tuple[float, ...]

    def __post_init__(self) -> None:
        vals = tuple(float(v) for v in self.values)
        if not vals:
            raise MeasureError("schedule must not be empty")
        if any(not math.isfinite(v) or v <= 0 for v in vals):
            raise MeasureError("schedule entries must be positive and finite")
        if any(b >= a for a, b in zip(vals, vals[1:])):
            raise MeasureError("schedule must be strictly decreasing")
        object.__setattr__(self, "values", vals)

    @classmethod
    def geometric(cls, epsilon: float, ratio: float, length: int, start: int = 1) -> EpsilonSchedule:
        """``eps * ratio**p`` for ``p = start .. start + length - 1``."""
        if not 0.0 < ratio < 1.0:
            raise MeasureError(f"ratio must lie in (0, 1), got {ratio!r}")
        return cls(tuple(epsilon * ratio**p for p in range(start, start + length)))

    def check(self, epsilon: float) -> None:
        if self.values[0] > epsilon:
            raise MeasureError(f"first schedule entry {self.values[0]!r} exceeds Pr(D) = {epsilon!r}")

    def __len__(self) -> int:
        return len(self.values)

    def __iter__(self):
        return iter(self.values)


@dataclass(frozen=True)
class SampleSet:
    outcomes: np.ndarray
    seed: int | None = None

    def __post_init__(self) -> None:
        o = np.array(self.outcomes, dtype=np.int64).reshape(-1)
        if o.size < 1:
            raise MeasureError("sample set must contain at least one outcome")
        if np.any(o < 0):
            raise MeasureError("sample outcomes must be non-negative indices")
        object.__setattr__(self, "outcomes", _frozen(o))

    def __len__(self) -> int:
        return int(self.outcomes.size)


@dataclass(frozen=True)
class Convergence:
    kind: str  # linear | superlinear | sublinear | inconclusive
    rate: float | None = None

    def __str__(self) -> str:
        return f"linear({self.rate:.12g})" if self.kind == "linear" else self.kind


# -- operations ---------------------------------------------------------------


def _check_dims(space: FiniteProbabilitySpace, loss: LossTable) -> None:
    if space.outcome_count != loss.outcome_count:
        raise MeasureError(
            f"dimension mismatch: space has {space.outcome_count} outcomes, "
            f"loss table has {loss.outcome_count} columns"
        )


def _mask_measure(m: ReweightedMeasure, mask: np.ndarray) -> float:
    d = m.d_event.mask(m.space.outcome_count)
    p = m.space.prob
    return m.inside_scale * math.fsum(p[mask & d]) + m.outside_scale * math.fsum(p[mask & ~d])


def measure_of(m: ReweightedMeasure, a: Event) -> float:
    return _mask_measure(m, a.mask(m.space.outcome_count))


def risk(space: FiniteProbabilitySpace, loss: LossTable, theta: int) -> float:
    """Expected loss of model ``theta``."""
    _check_dims(space, loss)
    return math.fsum(loss.row(theta) * space.prob)


def tail_risk(space: FiniteProbabilitySpace, loss: LossTable, theta: int, d_event: Event) -> float:
    """Contribution of ``d_event`` to the risk of ``theta``."""
    _check_dims(space, loss)
    mask = d_event.mask(space.outcome_count)
    return math.fsum(loss.row(theta)[mask] * space.prob[mask])


def _as_values(f: Callable[[int], float] | Sequence[float] | np.ndarray, n: int) -> np.ndarray:
    if callable(f):
        vals = np.array([f(i) for i in range(n)], dtype=float)
    else:
        vals = np.array(f, dtype=float).reshape(-1)
    if vals.size != n:
        raise MeasureError(f"function has {vals.size} values, space has {n} outcomes")
    if not np.all(np.isfinite(vals)):
        raise MeasureError("function values must be finite")
    return vals


def _dyadic_dot(xs: np.ndarray, ys: np.ndarray) -> Fraction:
    """Exact ``sum x*y`` over floats, using integer mantissas on a shared power of two."""
    terms = []
    for x, y in zip(xs.tolist(), ys.tolist()):
        if x == 0.0 or y == 0.0:
            continue
        (mx, dx), (my, dy) = x.as_integer_ratio(), y.as_integer_ratio()
        # denominators of finite floats are powers of two
        terms.append((mx * my, (dx * dy).bit_length() - 1))
    if not terms:
        return Fraction(0)
    top = max(e for _, e in terms)
    return Fraction(sum(n << (top - e) for n, e in terms), 1 << top)


def _exact_integral(m: ReweightedMeasure, vals: np.ndarray) -> Fraction:
    # Exact rational arithmetic on the float inputs; callers round once.
    d = m.d_event.mask(m.space.outcome_count)
    p = m.space.prob
    inside = Fraction(m.weight) / Fraction(m.epsilon)
    outside = (1 - Fraction(m.weight)) / Fraction(m.complement_mass)
    return inside * _dyadic_dot(vals[d], p[d]) + outside * _dyadic_dot(vals[~d], p[~d])


def integrate_under(m: ReweightedMeasure, f) -> float:
    """Integral of ``f`` against ``m``.

    ``f`` is a per-outcome value array or a callable on outcome indices. The sum
    is evaluated exactly in rationals and rounded once.
    """
    vals = _as_values(f, m.space.outcome_count)
    return float(_exact_integral(m, vals))


def tail_limit_sweep(
    space: FiniteProbabilitySpace,
    loss: LossTable,
    theta: int,
    d_event: Event,
    schedule: EpsilonSchedule,
) -> list[float]:
    """Distances ``|int L dmu_p - int_{not D} L dPr / (1 - eps)|`` along ``schedule``.

    The difference is taken before rounding, so no cancellation error enters
    the successive ratios.
    """
    _check_dims(space, loss)
    row = _as_values(loss.row(theta), space.outcome_count)
    mask = d_event.mask(space.outcome_count)
    eps = space.probability(d_event)
    if not 0.0 < eps < 1.0:
        raise MeasureError(f"Pr(D) must lie strictly inside (0, 1), got {eps!r}")
    schedule.check(eps)
    rest = _dyadic_dot(row[~mask], space.prob[~mask])
    limit = rest / Fraction(math.fsum(space.prob[~mask]))
    errors = []
    for w in schedule:
        m = ReweightedMeasure(space, d_event, w)
        errors.append(float(abs(_exact_integral(m, row) - limit)))
    return errors


def classify_convergence(errors: Iterable[float], spread_tol: float = 1e-6) -> Convergence:
    """Ratio test on an error sequence.

    Zero errors count as converged and are left out of the ratio estimate;
    negative or non-finite entries, or fewer than four positive entries, give
    ``inconclusive``.
    """
    e = [float(x) for x in errors]
    if any(not math.isfinite(x) or x < 0 for x in e):
        return Convergence("inconclusive")
    ratios = [b / a for a, b in zip(e, e[1:]) if a > 0 and b > 0]
    if sum(1 for x in e if x > 0) < 4 or len(ratios) < 3:
        return Convergence("inconclusive")
    mean = math.fsum(ratios) / len(ratios)
    if 0.0 < mean < 1.0 and (max(ratios) - min(ratios)) / mean < spread_tol:
        return Convergence("linear", mean)
    decreasing = all(b < a for a, b in zip(ratios, ratios[1:]))
    if decreasing and ratios[-1] <= 0.1 * ratios[0]:
        return Convergence("superlinear")
    increasing = all(b >= a for a, b in zip(ratios, ratios[1:]))
    if increasing and ratios[-1] < 1.0 and 1.0 - ratios[-1] <= 0.5 * (1.0 - ratios[0]):
        return Convergence("sublinear")
    return Convergence("inconclusive")


def empirical_risk(samples: SampleSet, loss: LossTable, theta: int) -> float:
    """Sample mean of ``L(omega_i, theta)``; order of the samples is irrelevant."""
    if len(samples) < 1:
        raise MeasureError("empirical risk needs at least one sample")
    row = loss.row(theta)
    if samples.outcomes.max() >= loss.outcome_count:
        raise MeasureError("sample outcome outside the loss table's outcome range")
    return math.fsum(row[samples.outcomes]) / len(samples)


def sample_iid(space: FiniteProbabilitySpace, count: int, seed: int) -> SampleSet:
    """Draw ``count`` i.i.d. outcomes by inverse-CDF on the ``sample_iid`` stream."""
    if count < 1:
        raise MeasureError("sample count must be at least 1")
    u = stream(seed, "sample_iid").random(count)
    cdf = np.cumsum(space.prob)
    idx = np.searchsorted(cdf, u, side="right")
    # guard the u > cdf[-1] rounding edge
    last = int(np.flatnonzero(space.prob > 0)[-1])
    return SampleSet(np.minimum(idx, last), seed)


def mix_regions(nominal: np.ndarray, disruption: np.ndarray, epsilon: float) -> FiniteProbabilitySpace:
    """``(1 - eps) * nominal + eps * disruption`` for two conditional laws on the same outcomes."""
    if not 0.0 <= epsilon <= 1.0:
        raise MeasureError(f"epsilon must lie in [0, 1], got {epsilon!r}")
    return FiniteProbabilitySpace((1.0 - epsilon) * np.asarray(nominal, float) + epsilon * np.asarray(disruption, float))


def loglog_slope(x: Sequence[float], y: Sequence[float]) -> float:
    """Least-squares slope of ``log y`` against ``log x``."""
    lx, ly = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    if lx.size < 2:
        raise MeasureError("slope needs at least two points")
    slope, _ = np.polyfit(lx, ly, 1)
    return float(slope)
