import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lcepc.design import ModelSpec, ParamVector
from lcepc.model import evaluate, is_boundary, loglik
from lcepc.patterns import from_counts

from conftest import random_theta


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 5), st.integers(1, 4), st.sampled_from(["effect", "dummy"]), st.integers(0, 2 ** 31 - 1))
def test_probabilities_normalised(J, T, coding, seed):
    s = ModelSpec(J, T, coding, ((1, 2),))
    p = evaluate(random_theta(s, np.random.default_rng(seed), 2.0))
    assert p.marginal.sum() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(p.cond.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(p.posterior.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(p.class_probs @ p.cond, p.marginal, atol=1e-14)


def test_independence_within_class():
    s = ModelSpec(3, 2, "effect")
    th = ParamVector.from_blocks(s, alpha=0.2, tau=[0.1, 0.3, -0.5], lam=[0.8, -0.4, 0.6])
    p = evaluate(th).cond[0].reshape(2, 2, 2)
    m = [p.sum(axis=tuple(a for a in range(3) if a != k)) for k in range(3)]
    np.testing.assert_allclose(p, np.einsum("i,j,k->ijk", *m), atol=1e-14)
    # effect coding: Pr(Y_1 = 1 | class 0) = logistic(2 (tau + lambda))
    assert m[0][1] == pytest.approx(1 / (1 + np.exp(-2 * (0.1 + 0.8))))


def test_codings_describe_same_model():
    # dummy psi equals 4 x effect psi for the same distribution
    e = ModelSpec(2, 1, "effect", ((1, 2),))
    d = ModelSpec(2, 1, "dummy", ((1, 2),))
    pe = evaluate(ParamVector.from_blocks(e, psi={(1, 2): 0.25})).marginal
    pd = evaluate(ParamVector.from_blocks(d, tau=[-0.5, -0.5], psi={(1, 2): 1.0})).marginal
    np.testing.assert_allclose(pe, pd, atol=1e-14)


def test_extreme_values_stay_finite():
    s = ModelSpec(4, 2)
    th = ParamVector.from_blocks(s, tau=40.0, lam=-40.0)
    p = evaluate(th)
    assert np.all(np.isfinite(p.log_marginal))
    assert is_boundary(th)


def test_loglik_and_zero_probability():
    s = ModelSpec(2, 1)
    th = ParamVector(s)
    d = from_counts([1, 2, 3, 4])
    assert loglik(th, d) == pytest.approx(10 * np.log(0.25))
    with pytest.raises(ValueError):
        evaluate(ParamVector(s, [np.nan, 0.0, 0.0]))
