import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tailrisk.measure import (
    EpsilonSchedule,
    Event,
    FiniteProbabilitySpace,
    LossTable,
    MeasureError,
    ReweightedMeasure,
    SampleSet,
    classify_convergence,
    empirical_risk,
    integrate_under,
    loglog_slope,
    measure_of,
    mix_regions,
    risk,
    sample_iid,
    tail_limit_sweep,
    tail_risk,
)


# -- independent oracles: plain python loops, shuffled term order ------------


def naive_sum(terms, seed=0):
    terms = list(terms)
    random.Random(seed).shuffle(terms)
    total = 0.0
    for t in terms:
        total += t
    return total


def naive_decomposition(prob, d, eps_p, f):
    eps = naive_sum(prob[i] for i in range(len(prob)) if i in d)
    inside = naive_sum(f[i] * prob[i] for i in range(len(prob)) if i in d)
    outside = naive_sum(f[i] * prob[i] for i in range(len(prob)) if i not in d)
    return eps_p / eps * inside + (1 - eps_p) / (1 - eps) * outside


def random_instance(rng, n_max=64):
    n = int(rng.integers(2, n_max + 1))
    p = rng.random(n) ** 3
    p /= p.sum()
    k = int(rng.integers(1, n))
    d = frozenset(rng.choice(n, size=k, replace=False).tolist())
    return FiniteProbabilitySpace(p), Event(d)


# -- types --------------------------------------------------------------------


def test_space_rejects_bad_mass():
    with pytest.raises(MeasureError):
        FiniteProbabilitySpace([0.5, 0.6])
    with pytest.raises(MeasureError):
        FiniteProbabilitySpace([1.5, -0.5])
    with pytest.raises(MeasureError):
        FiniteProbabilitySpace([])
    with pytest.raises(MeasureError):
        FiniteProbabilitySpace([np.nan, 1.0])


def test_space_is_immutable():
    s = FiniteProbabilitySpace([0.25, 0.75])
    with pytest.raises(ValueError):
        s.prob[0] = 1.0


def test_event_range_checked():
    s = FiniteProbabilitySpace([0.5, 0.5])
    with pytest.raises(MeasureError):
        s.probability(Event.of(2))
    assert Event.of(0).complement(3) == Event.of(1, 2)


def test_loss_table_must_be_finite():
    with pytest.raises(MeasureError):
        LossTable([[1.0, np.inf]])


def test_schedule_invariants():
    with pytest.raises(MeasureError):
        EpsilonSchedule((0.1, 0.1))
    with pytest.raises(MeasureError):
        EpsilonSchedule((0.1, -0.01))
    sched = EpsilonSchedule.geometric(0.2, 0.5, 4)
    assert sched.values == (0.1, 0.05, 0.025, 0.0125)
    with pytest.raises(MeasureError):
        sched.check(0.05)


# -- measure_of ---------------------------------------------------------------


def test_measure_rejects_degenerate_epsilon():
    s = FiniteProbabilitySpace([0.0, 1.0])
    with pytest.raises(MeasureError):
        ReweightedMeasure(s, Event.of(0), 0.0)
    with pytest.raises(MeasureError):
        ReweightedMeasure(s, Event.of(1), 0.5)


def test_measure_rejects_weight_outside_range():
    s = FiniteProbabilitySpace([0.1, 0.9])
    with pytest.raises(MeasureError):
        ReweightedMeasure(s, Event.of(0), 0.2)
    with pytest.raises(MeasureError):
        ReweightedMeasure(s, Event.of(0), 0.0)


def test_identity_weight_reproduces_pr():
    rng = np.random.default_rng(1)
    for _ in range(50):
        space, d = random_instance(rng, 16)
        m = ReweightedMeasure(space, d, space.probability(d))
        a = Event(frozenset(rng.choice(space.outcome_count, size=3).tolist()))
        assert measure_of(m, a) == pytest.approx(space.probability(a), abs=1e-12)


def test_pinning_and_normalization():
    space = FiniteProbabilitySpace([0.05, 0.15, 0.3, 0.5])
    d = Event.of(0, 1)
    m = ReweightedMeasure(space, d, 0.01)
    assert measure_of(m, d) == pytest.approx(0.01, abs=1e-12)
    assert measure_of(m, Event.of(0, 1, 2, 3)) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.floats(0.0, 1.0), min_size=2, max_size=64),
    st.data(),
)
def test_measure_properties(raw, data):
    p = np.array(raw) + 1e-3
    p /= p.sum()
    n = p.size
    space = FiniteProbabilitySpace(p)
    d = Event(frozenset(data.draw(st.sets(st.integers(0, n - 1), min_size=1, max_size=n - 1))))
    eps = space.probability(d)
    w = eps * data.draw(st.floats(1e-9, 1.0))
    m = ReweightedMeasure(space, d, w)
    assert abs(measure_of(m, Event(frozenset(range(n)))) - 1.0) <= 1e-12
    assert abs(measure_of(m, d) - w) <= 1e-12
    a = Event(frozenset(data.draw(st.sets(st.integers(0, n - 1)))))
    b = Event(frozenset(range(n)) - a.members)
    b = Event(frozenset(data.draw(st.sets(st.sampled_from(sorted(b.members)))) if b.members else frozenset()))
    union = Event(a.members | b.members)
    assert measure_of(m, union) == pytest.approx(measure_of(m, a) + measure_of(m, b), abs=1e-12)
    assert 0.0 <= measure_of(m, a) <= 1.0 + 1e-12


# -- risk / tail_risk ---------------------------------------------------------


def test_risk_trivial_cases():
    s = FiniteProbabilitySpace([0.5, 0.5])
    assert risk(s, LossTable([[1.0, 3.0]]), 0) == 2.0
    assert risk(s, LossTable([[0.0, 0.0]]), 0) == 0.0


def test_risk_matches_naive_sum():
    rng = np.random.default_rng(7)
    p = rng.random(16)
    p /= p.sum()
    space = FiniteProbabilitySpace(p)
    loss = LossTable(rng.normal(size=(3, 16)))
    for theta in range(3):
        oracle = naive_sum(loss.values[theta, i] * p[i] for i in range(16))
        assert abs(risk(space, loss, theta) - oracle) <= 1e-12
        row = loss.values[theta]
        assert row.min() - 1e-12 <= risk(space, loss, theta) <= row.max() + 1e-12


def test_risk_dimension_mismatch():
    with pytest.raises(MeasureError):
        risk(FiniteProbabilitySpace([1.0]), LossTable([[1.0, 2.0]]), 0)
    with pytest.raises(MeasureError):
        risk(FiniteProbabilitySpace([1.0]), LossTable([[1.0]]), 3)


def test_tail_risk_cases():
    s = FiniteProbabilitySpace([0.5, 0.29, 0.2, 0.01])
    loss = LossTable([[1.0, 2.0, 3.0, 5.0]])
    assert tail_risk(FiniteProbabilitySpace([1.0, 0.0]), LossTable([[1.0, 9.0]]), 0, Event.of(1)) == 0.0
    assert tail_risk(s, loss, 0, Event.of(0, 1, 2, 3)) == risk(s, loss, 0)
    oracle = naive_sum([5.0 * 0.01])
    assert tail_risk(s, loss, 0, Event.of(3)) == pytest.approx(0.05, abs=1e-15)
    assert tail_risk(s, loss, 0, Event.of(3)) == pytest.approx(oracle, abs=1e-15)


def test_tail_bound_random():
    rng = np.random.default_rng(3)
    for _ in range(200):
        space, d = random_instance(rng, 32)
        loss = LossTable(rng.normal(size=(1, space.outcome_count)) * 10)
        bound = space.probability(d) * np.abs(loss.values[0]).max()
        assert abs(tail_risk(space, loss, 0, d)) <= bound * (1 + 1e-12)


def test_tail_risk_scales_linearly():
    cond_n = np.array([0.5, 0.5, 0.0, 0.0])
    cond_d = np.array([0.0, 0.0, 0.25, 0.75])
    loss = LossTable([[0.1, 0.3, 2.0, 4.0]])
    eps = [10.0**-k for k in range(1, 7)]
    tails = [tail_risk(mix_regions(cond_n, cond_d, e), loss, 0, Event.of(2, 3)) for e in eps]
    assert abs(loglog_slope(eps, tails) - 1.0) <= 0.05
    # the conditional loss on D is 3.5, so tail = 3.5 * eps
    for e, t in zip(eps, tails):
        assert t == pytest.approx(3.5 * e, rel=1e-12)


# -- integrate_under ----------------------------------------------------------


def test_constant_integrates_to_itself():
    rng = np.random.default_rng(5)
    for _ in range(20):
        space, d = random_instance(rng, 20)
        m = ReweightedMeasure(space, d, space.probability(d) * rng.random())
        assert integrate_under(m, lambda i: 2.5) == pytest.approx(2.5, abs=1e-12)


def test_identity_weight_integral_is_expectation():
    rng = np.random.default_rng(6)
    space, d = random_instance(rng, 30)
    f = rng.normal(size=space.outcome_count)
    m = ReweightedMeasure(space, d, space.probability(d))
    assert integrate_under(m, f) == pytest.approx(risk(space, LossTable([f]), 0), abs=1e-12)


def test_integral_decomposition_random():
    rng = np.random.default_rng(11)
    for k in range(300):
        space, d = random_instance(rng)
        f = rng.normal(size=space.outcome_count) * rng.choice([1e-3, 1.0, 1e3])
        # repeated values exercise the level-set grouping
        f[rng.random(space.outcome_count) < 0.3] = 1.25
        w = space.probability(d) * rng.random()
        if w == 0.0:
            continue
        m = ReweightedMeasure(space, d, w)
        got = integrate_under(m, f)
        want = naive_decomposition(space.prob, d.members, w, f)
        scale = max(1.0, naive_sum(abs(f[i]) * space.prob[i] for i in range(space.outcome_count)))
        assert abs(got - want) <= 1e-10 * scale, k


def test_integrate_rejects_nonfinite():
    m = ReweightedMeasure(FiniteProbabilitySpace([0.5, 0.5]), Event.of(0), 0.1)
    with pytest.raises(MeasureError):
        integrate_under(m, [1.0, np.nan])


# -- tail_limit_sweep / classify_convergence ----------------------------------


def closed_form_errors(prob, d, f, schedule):
    """e_p = eps_p * |I_D / eps - I_rest / (1 - eps)|, derived by hand from the measure definition."""
    eps = naive_sum(prob[i] for i in d)
    i_d = naive_sum(f[i] * prob[i] for i in d)
    i_rest = naive_sum(f[i] * prob[i] for i in range(len(prob)) if i not in d)
    return [w * abs(i_d / eps - i_rest / (1 - eps)) for w in schedule]


def test_geometric_schedule_ratio_half():
    space = FiniteProbabilitySpace([0.1, 0.2, 0.3, 0.4])
    loss = LossTable([[5.0, 1.0, 0.5, 0.2]])
    d = Event.of(0)
    sched = EpsilonSchedule.geometric(0.1, 0.5, 12, start=0)
    errs = tail_limit_sweep(space, loss, 0, d, sched)
    ratios = [b / a for a, b in zip(errs, errs[1:])]
    assert all(abs(r - 0.5) <= 1e-9 for r in ratios)
    verdict = classify_convergence(errs)
    assert verdict.kind == "linear"
    assert verdict.rate == pytest.approx(0.5, abs=1e-9)
    assert all(b < a for a, b in zip(errs, errs[1:]))


def test_constant_loss_sweep_degenerates():
    space = FiniteProbabilitySpace([0.1, 0.2, 0.3, 0.4])
    loss = LossTable([[3.0, 3.0, 3.0, 3.0]])
    sched = EpsilonSchedule.geometric(0.3, 0.5, 8, start=0)
    errs = tail_limit_sweep(space, loss, 0, Event.of(0, 1), sched)
    # closed form: c * eps_p * |1 - 1| = 0
    assert all(e <= 1e-15 for e in closed_form_errors(space.prob, {0, 1}, [3.0] * 4, sched))
    assert all(e <= 1e-15 for e in errs)
    assert classify_convergence([0.0] * 8).kind == "inconclusive"


def test_sweep_ratio_law_random():
    rng = np.random.default_rng(13)
    for _ in range(100):
        space, d = random_instance(rng, 32)
        eps = space.probability(d)
        f = rng.normal(size=space.outcome_count)
        rho = float(rng.uniform(0.1, 0.9))
        sched = EpsilonSchedule.geometric(eps, rho, 10, start=0)
        errs = tail_limit_sweep(space, LossTable([f]), 0, d, sched)
        oracle = closed_form_errors(space.prob, d.members, f, sched)
        for e, o in zip(errs, oracle):
            assert e == pytest.approx(o, rel=1e-8, abs=1e-15)
        for (a, b), (wa, wb) in zip(zip(errs, errs[1:]), zip(sched.values, sched.values[1:])):
            assert abs(b / a - wb / wa) <= 1e-9
        verdict = classify_convergence(errs)
        assert verdict.kind == "linear" and abs(verdict.rate - rho) <= 1e-9


def test_sweep_rejects_schedule_above_epsilon():
    space = FiniteProbabilitySpace([0.1, 0.9])
    with pytest.raises(MeasureError):
        tail_limit_sweep(space, LossTable([[1.0, 0.0]]), 0, Event.of(0), EpsilonSchedule((0.2, 0.1)))


@pytest.mark.parametrize(
    "errors, kind, rate",
    [
        ((1, 0.5, 0.25, 0.125), "linear", 0.5),
        ((1, 0.1, 0.001, 1e-6), "superlinear", None),
        ((1, 1 / 2, 1 / 3, 1 / 4, 1 / 5, 1 / 6), "sublinear", None),
        ((1, 0.5, 0.25), "inconclusive", None),
        ((1, -0.5, 0.25, 0.1), "inconclusive", None),
        ((1, 0.5, 0.7, 0.1), "inconclusive", None),
    ],
)
def test_classify_convergence(errors, kind, rate):
    v = classify_convergence(errors)
    assert v.kind == kind
    if rate is not None:
        assert v.rate == pytest.approx(rate, abs=1e-12)
        assert str(v) == "linear(0.5)"


def test_classify_skips_zero_errors():
    v = classify_convergence((1, 0.5, 0.25, 0.125, 0.0, 0.0))
    assert v.kind == "linear" and v.rate == pytest.approx(0.5)


# -- empirical risk / sampling ------------------------------------------------


def test_empirical_risk_trivial():
    loss = LossTable([[0.3, 0.7, 1.1]])
    assert empirical_risk(SampleSet([2]), loss, 0) == 1.1
    assert empirical_risk(SampleSet([1] * 17), loss, 0) == 0.7
    with pytest.raises(MeasureError):
        SampleSet([])


def test_empirical_risk_permutation_invariant_bit_exact():
    rng = np.random.default_rng(0)
    loss = LossTable(rng.normal(size=(1, 50)) * 1e6 + rng.random((1, 50)))
    outcomes = rng.integers(0, 50, size=5000)
    base = empirical_risk(SampleSet(outcomes), loss, 0)
    for k in range(10):
        assert empirical_risk(SampleSet(rng.permutation(outcomes)), loss, 0) == base


def test_sample_iid_point_mass_and_determinism():
    s = FiniteProbabilitySpace([0.0, 0.0, 1.0, 0.0])
    assert set(sample_iid(s, 1000, 3).outcomes.tolist()) == {2}
    u = FiniteProbabilitySpace([0.25] * 4)
    assert np.array_equal(sample_iid(u, 100, 42).outcomes, sample_iid(u, 100, 42).outcomes)
    assert not np.array_equal(sample_iid(u, 100, 42).outcomes, sample_iid(u, 100, 43).outcomes)
    with pytest.raises(MeasureError):
        sample_iid(u, 0, 1)


def test_sample_iid_frequencies():
    # binomial oracle: sd of a frequency is sqrt(0.25 * 0.75 / 1e5) ~ 0.00137, so 0.01 is > 7 sd
    u = FiniteProbabilitySpace([0.25] * 4)
    ok = 0
    for seed in range(100):
        freq = np.bincount(sample_iid(u, 100_000, seed).outcomes, minlength=4) / 100_000
        ok += bool(np.all(np.abs(freq - 0.25) <= 0.01))
    assert ok >= 99


def test_erm_consistency_statistical():
    rng = np.random.default_rng(21)
    p = rng.random(8)
    p /= p.sum()
    space = FiniteProbabilitySpace(p)
    loss = LossTable(rng.normal(size=(1, 8)))
    r = risk(space, loss, 0)
    sigma = math.sqrt(naive_sum((loss.values[0, i] - r) ** 2 * p[i] for i in range(8)))
    ell = 100_000
    ok = sum(
        abs(empirical_risk(sample_iid(space, ell, seed), loss, 0) - r) <= 4 * sigma / math.sqrt(ell)
        for seed in range(100)
    )
    assert ok >= 99
