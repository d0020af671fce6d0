import math
from fractions import Fraction

import numpy as np
import pytest

from superou.branching import BranchingMechanism
from superou.engine import PopulationCapError
from superou.harness import (
    ConditioningError,
    DegenerateSampleError,
    ExperimentSpec,
    InsufficientDataError,
    RegimeMismatchError,
    build_statistic,
    crosscheck,
    independence_test,
    normality_test,
    run_ensemble,
    verify,
)
from superou.moments import AtomicMeasure, mean_functional
from superou.spectral import OUParams, SpectralFunction

QUAD = BranchingMechanism(1, 1.0)


def make_spec(b=Fraction(3, 10), f=(1,), **kw):
    params = OUParams(1, b, 1.0)
    fn = f if isinstance(f, SpectralFunction) else SpectralFunction.basis(params, f)
    base = dict(mechanism=QUAD, params=params, mu=AtomicMeasure.dirac([0.0]), f=fn, eps=0.2,
                t_eval=1.0, replicates=20, seed=11)
    base.update(kw)
    return ExperimentSpec(**base)


def test_single_replicate():
    spec = make_spec(replicates=1, t_grid=(0.5,))
    s = run_ensemble(spec)
    rows = list(s.rows())
    assert len(rows) == 2 and [r[1] for r in rows] == [0.5, 1.0]
    assert s.total_mass.shape == (1, 2)


def test_order_and_threads_do_not_change_output():
    spec = make_spec(replicates=24, t_grid=(0.5,), f=SpectralFunction.basis(OUParams(1, Fraction(3, 10), 1.0), (2,)))
    a = run_ensemble(spec)
    b = run_ensemble(spec, order=np.random.default_rng(0).permutation(24))
    c = run_ensemble(spec, threads=2)
    for other in (b, c):
        assert a.functional.tobytes() == other.functional.tobytes()
        assert a.total_mass.tobytes() == other.total_mass.tobytes()
        assert a.coords[(2,)].tobytes() == other.coords[(2,)].tobytes()
        assert np.array_equal(a.extinct_at, other.extinct_at, equal_nan=True)


def test_survival_frequency():
    spec = make_spec(eps=0.25, t_eval=6.0, replicates=800, seed=3)
    s = run_ensemble(spec)
    surv = s.survived(6.0).mean()
    p = 1 - math.exp(-1)
    assert abs(surv - p) < 4 * math.sqrt(p * (1 - p) / 800)


def test_regime_guard():
    spec = make_spec(f=(0,))
    with pytest.raises(RegimeMismatchError):
        verify(spec, "T1.4")
    samples = run_ensemble(make_spec(f=(0,), replicates=5))
    with pytest.raises(RegimeMismatchError):
        build_statistic(samples, spec, "T1.4")
    with pytest.raises(RegimeMismatchError):
        build_statistic(samples, spec, "T2.3")


def test_critical_statistic_form():
    spec = make_spec(b=Fraction(1, 2), f=(1,), t_eval=2.0, replicates=30)
    s = run_ensemble(spec)
    stat = build_statistic(s, spec, "T1.5")
    alive = s.survived(2.0)
    expect = s.coords[(1,)][alive, 0] / (math.sqrt(2.0) * np.sqrt(s.total_mass[alive, 0]))
    assert np.array_equal(stat.values, expect)
    assert stat.target == pytest.approx(2.0)
    assert np.allclose(stat.w, math.exp(-2.0) * s.total_mass[alive, 0])


def test_small_statistic_conditions_on_survival():
    spec = make_spec(f=(2,), t_eval=1.5, replicates=60)
    s = run_ensemble(spec)
    stat = build_statistic(s, spec, "T1.4")
    assert stat.n == int(s.survived(1.5).sum()) < 60
    assert stat.target == pytest.approx(10.0)


def test_plugin_statistic_subtracts_martingale_limit():
    params = OUParams(1, Fraction(1, 10), 1.0)
    f = SpectralFunction.basis(params, (1,)) + SpectralFunction.basis(params, (6,))
    spec = make_spec(b=Fraction(1, 10), f=f, t_eval=1.0, delta=1.0, replicates=30)
    s = run_ensemble(spec)
    stat = build_statistic(s, spec, "T2.1")
    alive = s.survived(1.0)
    h = math.exp(-0.9 * 2.0) * s.coords[(1,)][alive, 1]
    expect = (s.functional[alive, 0] - math.exp(0.9) * h) / np.sqrt(s.total_mass[alive, 0])
    assert np.allclose(stat.values, expect, rtol=1e-12)
    assert stat.target == pytest.approx(12.5)
    with pytest.raises(ValueError):
        build_statistic(s, make_spec(b=Fraction(1, 10), f=f, t_eval=1.0, replicates=30), "T2.1")


def test_conditioning_error():
    spec = make_spec(f=(2,), mu=AtomicMeasure.dirac([0.0], 0.001), eps=0.5, replicates=5)
    s = run_ensemble(spec)
    assert np.all(s.total_mass == 0)
    with pytest.raises(ConditioningError):
        build_statistic(s, spec, "T1.4")


def test_cap_error_carries_replicate():
    spec = make_spec(eps=0.01, t_eval=4.0, mu=AtomicMeasure.dirac([0.0], 5.0), replicates=3, cap=1000)
    with pytest.raises(PopulationCapError) as err:
        run_ensemble(spec)
    assert err.value.replicate == 0


def test_normality_examples():
    x = np.random.default_rng(1).normal(size=10_000)
    ok = normality_test(x, 1.0)
    assert 0 <= ok.p_value <= 1 and ok.n == 10_000
    wide = normality_test(x, 4.0)
    assert wide.p_value < 1e-6 and wide.variance_ratio == pytest.approx(0.25, rel=0.05)
    assert normality_test(x + 1.0, 1.0).p_value < 1e-6
    with pytest.raises(InsufficientDataError):
        normality_test(x[:99], 1.0)
    with pytest.raises(DegenerateSampleError):
        normality_test(np.ones(200), 1.0)
    with pytest.raises(ValueError):
        normality_test(x, 0.0)


def test_independence_examples():
    rng = np.random.default_rng(2)
    n = 2000
    w = rng.exponential(size=n)
    g = rng.normal(size=n)
    ind = independence_test(w, g, n_perm=2000)
    assert ind.corr_abs < 4 / math.sqrt(n)
    dep = independence_test(w, np.sqrt(w) * g, n_perm=2000)
    assert dep.corr_abs > 0 and dep.p_value < 0.01 and not dep.passes()
    with pytest.raises(DegenerateSampleError):
        independence_test(np.ones(n), g)
    with pytest.raises(InsufficientDataError):
        independence_test(w[:50], g[:50])
    with pytest.raises(ValueError):
        independence_test(w, g[:-1])


def test_crosscheck_small():
    spec = make_spec(f=(1,), eps=0.1, t_eval=1.0, t_grid=(0.0,), replicates=300)
    rep = crosscheck(spec)
    zero = [r for r in rep.rows if r["t"] == 0.0 and r["moment"] == "mean"]
    assert zero and all(r["direct"] == r["backbone"] for r in zero)
    assert rep.passed, [r for r in rep.rows if not r["passed"]]


def test_verify_martingale_report():
    spec = make_spec(b=Fraction(1, 10), f=(1,), eps=0.25, t_eval=1.0, delta=1.0, t_grid=(2.0, 3.0), replicates=300)
    rep = verify(spec, "T1.3")
    assert rep.theorem == "T1.3" and rep.regime == "large"
    means = rep.checks["mean_constant"]
    assert [m["t"] for m in means] == [1.0, 2.0, 3.0]
    for m in means:
        assert m["target"] == pytest.approx(math.exp(-0.9 * m["t"]) * mean_functional(
            spec.f, spec.mu, m["t"], spec.derived))
    assert len(rep.checks["increment_decay"]) == 1
