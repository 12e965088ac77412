"""Mixture likelihood: class-conditional, marginal and posterior probabilities."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .design import DesignMatrices, ParamVector, build_design, linear_predictor
from .patterns import ObservedData

# |parameter| beyond this puts conditional probabilities within ~3e-7 of 0 or 1
BOUNDARY_LIMIT = 15.0


@dataclass(frozen=True)
class Probabilities:
    """Model-implied probabilities at one parameter value.

    Attributes
    ----------
    class_probs : (T,) Pr(xi = t)
    cond : (T, R) Pr(Y = y_r | xi = t)
    marginal : (R,) Pr(Y = y_r)
    posterior : (R, T) Pr(xi = t | Y = y_r)
    log_marginal : (R,) log Pr(Y = y_r), accurate where marginal underflows
    """

    class_probs: np.ndarray
    cond: np.ndarray
    marginal: np.ndarray
    posterior: np.ndarray
    log_marginal: np.ndarray


def evaluate(theta: ParamVector, design: DesignMatrices | None = None) -> Probabilities:
    spec = theta.spec
    if design is None:
        design = build_design(spec)
    if not np.all(np.isfinite(theta.values)):
        raise ValueError("parameter vector contains non-finite values")
    logits = theta.class_logits()
    log_pi = logits - logsumexp(logits)
    log_cond = np.empty((spec.n_classes, spec.n_patterns))
    for t in range(spec.n_classes):
        eta = linear_predictor(theta, design, t)
        log_cond[t] = eta - logsumexp(eta)
    log_joint = log_pi[:, None] + log_cond
    log_marg = logsumexp(log_joint, axis=0)
    posterior = np.exp(log_joint - log_marg).T
    return Probabilities(np.exp(log_pi), np.exp(log_cond), np.exp(log_marg), posterior, log_marg)


def loglik(theta: ParamVector, data: ObservedData, design: DesignMatrices | None = None,
           probs: Probabilities | None = None) -> float:
    """n' log Pr(Y). Returns -inf when a pattern with positive count has zero probability."""
    if data.n_items != theta.spec.n_items:
        raise ValueError("data and model have different numbers of items")
    if probs is None:
        probs = evaluate(theta, design)
    n = data.counts
    pos = n > 0
    lm = probs.log_marginal[pos]
    if np.any(np.isneginf(lm)):
        return -np.inf
    return float(n[pos] @ lm)


def is_boundary(theta: ParamVector) -> bool:
    return bool(np.any(np.abs(theta.free) > BOUNDARY_LIMIT))
