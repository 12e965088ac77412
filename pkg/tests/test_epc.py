import numpy as np
import pytest

from lcepc.deriv import observed_info, score, jacobian
from lcepc.design import ModelSpec, ParamVector
from lcepc.epc import EpcError, bvr, epc_gs, epc_l, reports_from_csv, reports_to_csv, reports_to_json, scan
from lcepc.estim import fit, fit_population
from lcepc.model import evaluate
from lcepc.patterns import from_counts

# (pair) -> (EPC_L, T_L, EPC_GS, T_GS) for the dentistry independence model
INDEPENDENCE_SCAN = {
    (1, 3): (1.04, 34.0, 0.97, 31.6),
}


@pytest.fixture(scope="module")
def reports(m0):
    return {r.pair: r for r in scan(m0)}


def test_scan_covers_all_pairs(reports):
    assert len(reports) == 10
    assert all(r.df == 1 and not r.flags for r in reports.values())


def test_scan_reference_row(reports):
    r = reports[(1, 3)]
    el, tl, eg, tg = INDEPENDENCE_SCAN[(1, 3)]
    assert r.epc_l == pytest.approx(el, abs=0.02)
    assert r.t_l == pytest.approx(tl, abs=0.5)
    assert r.epc_gs == pytest.approx(eg, abs=0.02)
    assert r.t_gs == pytest.approx(tg, abs=0.5)


def test_scan_skips_free_pairs(m1):
    rows = scan(m1)
    assert len(rows) == 5
    top = max(rows, key=lambda r: r.t_l)
    assert top.pair == (1, 5)
    assert top.epc_l == pytest.approx(0.93, abs=0.02)
    assert scan(m1, pairs=[(1, 3)]) == []


def test_observed_information_epc_is_newton_step(m0):
    # EPC with I_Y equals the candidate part of one full Newton step from the restricted fit
    pair = (2, 5)
    s1 = m0.spec.with_deps(m0.spec.free_deps + (pair,))
    th = ParamVector(s1, m0.theta.values)
    g = score(jacobian(th, columns=s1.free_index), m0.data.counts)
    step = np.linalg.solve(observed_info(th, m0.data, s1.free_index), g)
    pos = int(np.flatnonzero(s1.free_index == s1.psi_index(pair))[0])
    assert epc_l(m0, pair, information="observed").change[0] == pytest.approx(step[pos], rel=1e-6)


def test_zero_when_restriction_true():
    # population proportions from the restricted model: score and EPC vanish
    s = ModelSpec(5, 2)
    truth = ParamVector.from_blocks(s, alpha=0.2, tau=0.1, lam=0.8)
    res = fit_population(evaluate(truth).marginal, s, init=(truth,), starts=0)
    for pair in [(1, 2), (3, 5)]:
        assert abs(epc_l(res, pair).epc[0]) < 1e-6
        assert abs(epc_gs(res, pair).epc[0]) < 1e-6


def test_coding_invariance(dentistry):
    eff = fit(dentistry, ModelSpec(5, 2, "effect"), starts=5, seed=0)
    dum = fit(dentistry, ModelSpec(5, 2, "dummy"), starts=5, seed=0)
    for pair in [(1, 2), (2, 5)]:
        a, b = epc_l(eff, pair), epc_l(dum, pair)
        assert a.statistic == pytest.approx(b.statistic, rel=1e-5)
        assert 4 * a.epc[0] == pytest.approx(b.epc[0], rel=1e-5)
        assert epc_gs(eff, pair).statistic == pytest.approx(epc_gs(dum, pair).statistic, rel=1e-4)


def test_statistics_scale_with_n(m0):
    big = fit(m0.data.scaled(10.0), m0.spec, init=(m0.theta,), starts=0)
    a, b = epc_l(m0, (1, 3)), epc_l(big, (1, 3))
    assert b.epc[0] == pytest.approx(a.epc[0], rel=1e-5)
    assert b.statistic == pytest.approx(10 * a.statistic, rel=1e-5)
    assert epc_gs(big, (1, 3)).epc[0] == pytest.approx(epc_gs(m0, (1, 3)).epc[0], rel=1e-4)


def test_multi_parameter_candidate(m0):
    r = epc_l(m0, [(1, 3), (2, 5)])
    assert r.epc.shape == (2,) and r.df == 2
    assert r.statistic >= max(epc_l(m0, (1, 3)).statistic, epc_l(m0, (2, 5)).statistic) - 1e-8


def test_candidate_validation(m1):
    with pytest.raises(ValueError, match="already free"):
        epc_l(m1, (1, 3))
    with pytest.raises(ValueError, match="duplicate"):
        epc_l(m1, [(1, 2), (2, 1)])


def test_unidentified_candidate_raises():
    # J=3, T=2 independence model is saturated in the parameters (df = 0)
    data = from_counts([30, 12, 9, 14, 8, 11, 13, 40])
    res = fit(data, ModelSpec(3, 2), starts=3, seed=0)
    with pytest.raises(EpcError):
        epc_l(res, (1, 2))
    rows = scan(res)
    assert all(r.flags and np.isnan(r.epc_l) for r in rows)


def test_bvr_definition(m0):
    pat = m0.data.table.patterns
    m = (pat[:, 0] == 1) & (pat[:, 1] == 1)
    assert bvr(m0, (1, 2)) == pytest.approx(m0.data.counts[m].sum() - m0.expected_counts[m].sum())


def test_csv_roundtrip(tmp_path, m0):
    rows = scan(m0)
    path = tmp_path / "epc.csv"
    reports_to_csv(rows, path)
    back = reports_from_csv(path)
    assert [r.pair for r in back] == [r.pair for r in rows]
    np.testing.assert_allclose([r.t_gs for r in back], [r.t_gs for r in rows])
    assert '"pair": "1-2"' in reports_to_json(rows)


def test_threaded_scan_matches(m0):
    a = scan(m0)
    b = scan(m0, n_jobs=3)
    np.testing.assert_allclose([r.epc_gs for r in a], [r.epc_gs for r in b])
