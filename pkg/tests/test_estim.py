import json

import numpy as np
import pytest

from lcepc.design import ModelSpec, ParamVector
from lcepc.estim import (FitOptions, FitResult, InformationError, NonConvergenceError, bic, bootstrap_pvalue,
                         deviance, em_step, fit, fit_population, marginal_log_odds, order_classes,
                         random_start, wald_test, wald_tests)
from lcepc.model import evaluate, loglik
from lcepc.patterns import from_counts

from conftest import M2_DEPS


def test_em_monotone(dentistry):
    s = ModelSpec(5, 2, "effect", ((1, 3),))
    th = random_start(s, np.random.default_rng(4))
    ll = loglik(th, dentistry)
    for _ in range(40):
        th = em_step(th, dentistry)
        new = loglik(th, dentistry)
        assert new >= ll - 1e-8 * abs(ll)
        ll = new


def test_em_monotone_three_classes(dentistry):
    s = ModelSpec(5, 3, "dummy")
    th = random_start(s, np.random.default_rng(2))
    lls = []
    for _ in range(30):
        th = em_step(th, dentistry)
        lls.append(loglik(th, dentistry))
    assert np.all(np.diff(lls) >= -1e-8 * abs(lls[0]))


def test_independence_fit(m0):
    d = deviance(m0)
    assert d.L2 == pytest.approx(129.85, abs=0.01)
    assert d.df == 20
    assert m0.converged and m0.gradient_norm < 1e-6
    assert m0.class_probs[0] >= m0.class_probs[1]


def test_dependence_fits(m1, m2):
    assert deviance(m1).L2 == pytest.approx(35.74, abs=0.05)
    assert bic(m1) == pytest.approx(-88.17, abs=0.05)
    assert deviance(m2).L2 == pytest.approx(28.4, abs=0.05)
    assert deviance(m2).df == 15
    assert bic(m2) == pytest.approx(-95.5, abs=0.05)
    psi = {p: m2.theta.values[m2.spec.psi_index(p)] for p in M2_DEPS}
    expect = {(1, 3): 1.377, (1, 5): 0.740, (2, 3): 1.294, (2, 5): 0.729, (3, 5): 1.385}
    for p, v in expect.items():
        assert psi[p] == pytest.approx(v, abs=0.01)
    np.testing.assert_allclose(m2.class_probs, [0.79, 0.21], atol=0.01)


def test_wald_expected_information(m2):
    w = {r.pair: r.wald for r in wald_tests(m2)}
    expect = {(1, 3): 49.7, (1, 5): 8.0, (2, 3): 60.4, (2, 5): 34.4, (3, 5): 59.0}
    for p, v in expect.items():
        assert w[p] == pytest.approx(v, abs=1.0)
    obs = wald_test(m2, (1, 3), information="observed")
    assert obs.wald == pytest.approx(w[(1, 3)], rel=0.1)


def test_wald_insignificant_dependence(m1):
    r = wald_test(m1, (1, 4))
    assert r.estimate == pytest.approx(0.167, abs=0.01)
    assert r.p_value > 0.5
    with pytest.raises(ValueError):
        wald_test(m1, (1, 2))


def test_multistart_deterministic(dentistry):
    s = ModelSpec(5, 2, "effect", ((1, 3),))
    a = fit(dentistry, s, starts=4, seed=7)
    b = fit(dentistry, s, starts=4, seed=7)
    np.testing.assert_array_equal(a.theta.values, b.theta.values)


def test_parallel_starts_match_serial(dentistry):
    s = ModelSpec(5, 2)
    a = fit(dentistry, s, starts=3, seed=2)
    b = fit(dentistry, s, starts=3, seed=2, n_jobs=2)
    assert a.loglik == pytest.approx(b.loglik, abs=1e-9)


def test_too_many_parameters(dentistry):
    with pytest.raises(ValueError, match="free parameters"):
        fit(dentistry, ModelSpec(5, 6))


def test_nonconvergence_raises(dentistry):
    with pytest.raises(NonConvergenceError) as info:
        fit(dentistry, ModelSpec(5, 2), starts=1, max_iter=2, newton_max_iter=0)
    assert info.value.best is not None


def test_population_fit_recovers_truth():
    s = ModelSpec(5, 2, "effect", ((1, 2),))
    truth = ParamVector.from_blocks(s, alpha=0.2, lam=0.8, psi={(1, 2): 0.3})
    res = fit_population(evaluate(truth).marginal, s, starts=3, seed=0)
    th = order_classes(res.theta)
    np.testing.assert_allclose(np.abs(th.values), np.abs(truth.values), atol=1e-5)


def test_order_classes():
    s = ModelSpec(3, 3)
    th = ParamVector.from_blocks(s, alpha=[-1.0, 0.5])
    np.testing.assert_array_equal(np.argsort(-evaluate(order_classes(th)).class_probs), [0, 1, 2])


def test_json_roundtrip(m2, dentistry):
    doc = json.loads(m2.to_json())
    assert doc["df"] == 15
    back = FitResult.from_dict(doc, dentistry)
    np.testing.assert_allclose(back.theta.values, m2.theta.values)
    assert back.loglik == pytest.approx(m2.loglik)


def test_item_probs_shape(m2):
    p = m2.item_probs()
    assert p.shape == (2, 5)
    assert np.all((p > 0) & (p < 1))


def test_bootstrap_saturated_gives_one():
    # J=3, T=2 has p = 7 = R - 1: every replicate fits exactly
    data = from_counts([30, 12, 9, 14, 8, 11, 13, 40])
    res = fit(data, ModelSpec(3, 2), starts=3, seed=0)
    assert deviance(res).L2 == pytest.approx(0.0, abs=1e-5)
    b = bootstrap_pvalue(res, B=10, seed=0, opts=FitOptions(starts=1, grad_tol=1e-4))
    assert b.p_value == 1.0


def test_bootstrap_bound_reported(m0):
    b = bootstrap_pvalue(m0, B=5, seed=0, opts=FitOptions(starts=0))
    assert b.exceedances == 0
    assert "p < 0.2" in str(b)


@pytest.mark.slow
def test_bootstrap_dependence_model(m2):
    b = bootstrap_pvalue(m2, B=499, seed=0)
    assert b.p_value == pytest.approx(0.07, abs=0.04)


@pytest.mark.parametrize("coding, factor", [("effect", 4.0), ("dummy", 1.0)])
def test_marginal_log_odds_single_pair(coding, factor):
    # one dependence with no overlap: collapsing leaves the loglinear term
    s = ModelSpec(4, 2, coding, ((1, 2),))
    truth = ParamVector.from_blocks(s, alpha=0.1, tau=[0.2, -0.3, 0.1, 0.4], lam=[0.7, 0.5, -0.6, 0.8],
                                    psi={(1, 2): 0.6})
    res = fit(from_counts(5000 * evaluate(truth).marginal), s, init=(truth,), starts=0)
    for t in range(2):
        assert marginal_log_odds(res, (1, 2), t) == pytest.approx(factor * 0.6, abs=1e-6)
        assert marginal_log_odds(res, (3, 4), t) == pytest.approx(0.0, abs=1e-8)


def test_marginal_log_odds_brute_force(m2):
    # collapse the class-conditional table by explicit pattern summation
    pat = m2.data.table.patterns
    for t in range(2):
        c = m2.probs.cond[t]
        cell = lambda a, b: c[(pat[:, 0] == a) & (pat[:, 2] == b)].sum()
        lor = np.log(cell(1, 1) * cell(0, 0) / (cell(1, 0) * cell(0, 1)))
        assert marginal_log_odds(m2, (1, 3), t) == pytest.approx(lor, abs=1e-12)


@pytest.mark.slow
def test_wald_null_distribution():
    # psi = 0 truth with psi freed: Wald ~ chi2(1), median 0.455
    s1 = ModelSpec(5, 2, "effect", ((1, 2),))
    truth = ParamVector.from_blocks(s1, alpha=0.2, lam=0.8)
    p = evaluate(truth).marginal
    stats_ = []
    for rep in range(400):
        rng = np.random.default_rng([99, rep])
        data = from_counts(rng.multinomial(1024, p).astype(float))
        try:
            res = fit(data, s1, init=(truth,), starts=0)
            stats_.append(wald_test(res, (1, 2)).wald)
        except (NonConvergenceError, InformationError):
            continue
    assert len(stats_) > 380
    assert np.median(stats_) == pytest.approx(0.455, abs=0.15)
