"""Patternwise Jacobian, score and information matrices.

Columns are addressed by their position in the full parameter vector
(see :mod:`lcepc.design`), so candidate psi columns that are fixed in the
fitted model can be requested alongside the free ones.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .design import DesignMatrices, ParamVector, build_design
from .model import Probabilities, evaluate
from .patterns import ObservedData

FD_STEP = 1e-5


def _as_columns(theta: ParamVector, columns) -> np.ndarray:
    if columns is None:
        return np.arange(theta.spec.n_full)
    return np.asarray(columns, dtype=int).reshape(-1)


def jacobian(theta: ParamVector, design: DesignMatrices | None = None,
             probs: Probabilities | None = None, columns: Sequence[int] | None = None) -> np.ndarray:
    """R x len(columns) Jacobian of log Pr(Y) with respect to the requested parameters.

    For a parameter with class-specific design column x_t the column is
    ``sum_t post_t * (x_t - E_t[x_t])``; for the class intercepts it is
    ``(post - Pr(xi)) @ X_alpha``.
    """
    spec = theta.spec
    if design is None:
        design = build_design(spec)
    if probs is None:
        probs = evaluate(theta, design)
    cols = _as_columns(theta, columns)
    b = spec.blocks
    post, cond = probs.posterior, probs.cond
    A = design.X_alpha
    R = spec.n_patterns
    S = np.empty((R, cols.size))

    def want(block):
        return np.any((cols >= b[block].start) & (cols < b[block].stop))

    parts = {}
    if want("alpha"):
        parts["alpha"] = (post - probs.class_probs[None, :]) @ A
    if want("tau") or want("lambda"):
        M = cond @ design.X_Y  # (T, J) class-conditional expectations of item codes
        if want("tau"):
            parts["tau"] = design.X_Y - post @ M
        if want("lambda"):
            lam_cols = []
            for c in range(A.shape[1]):
                w = post @ A[:, c]
                lam_cols.append(design.X_Y * w[:, None] - post @ (A[:, c][:, None] * M))
            parts["lambda"] = np.hstack(lam_cols) if lam_cols else np.zeros((R, 0))
    for block, part in parts.items():
        sel = (cols >= b[block].start) & (cols < b[block].stop)
        S[:, sel] = part[:, cols[sel] - b[block].start]
    sel = cols >= b["psi"].start
    if np.any(sel):
        X = design.X_YY[:, cols[sel] - b["psi"].start]
        S[:, sel] = X - post @ (cond @ X)
    return S


def score(S: np.ndarray, n: np.ndarray) -> np.ndarray:
    """s = S' n."""
    return S.T @ np.asarray(n, dtype=float)


def expected_info(S: np.ndarray, probs: Probabilities, N: float) -> np.ndarray:
    """I_L = sum_r N Pr(y_r) S_r' S_r over the full pattern table."""
    w = N * probs.marginal
    return (S * w[:, None]).T @ S


def outer_product(S: np.ndarray, n: np.ndarray) -> np.ndarray:
    """D = sum_r n_r S_r' S_r."""
    return (S * np.asarray(n, dtype=float)[:, None]).T @ S


def score_at(theta: ParamVector, data: ObservedData, columns=None,
             design: DesignMatrices | None = None) -> np.ndarray:
    return score(jacobian(theta, design, columns=columns), data.counts)


def observed_info(theta: ParamVector, data: ObservedData, columns: Sequence[int] | None = None,
                  design: DesignMatrices | None = None, step: float = FD_STEP) -> np.ndarray:
    """I_Y = -d s / d theta' by central differences of the analytic score.

    The result is symmetrised; a warning is issued if the raw difference
    quotient is asymmetric beyond 1e-4 of its norm.
    """
    if design is None:
        design = build_design(theta.spec)
    cols = _as_columns(theta, columns)
    k = cols.size
    A = np.empty((k, k))
    for i, c in enumerate(cols):
        h = step * (1.0 + abs(theta.values[c]))
        up = theta.with_values([c], [theta.values[c] + h])
        dn = theta.with_values([c], [theta.values[c] - h])
        A[:, i] = -(score_at(up, data, cols, design) - score_at(dn, data, cols, design)) / (2.0 * h)
    asym = np.linalg.norm(A - A.T)
    norm = np.linalg.norm(A)
    if norm > 0 and asym > 1e-4 * norm:
        warnings.warn(f"observed information asymmetric before symmetrisation "
                      f"(relative {asym / norm:.2e})", RuntimeWarning, stacklevel=2)
    return 0.5 * (A + A.T)


@dataclass(frozen=True)
class DerivativeBundle:
    """Derivatives at one parameter value over a chosen set of columns."""

    columns: np.ndarray
    S: np.ndarray
    s: np.ndarray
    I_L: np.ndarray
    D: np.ndarray
    I_Y: np.ndarray | None = None


def derivatives(theta: ParamVector, data: ObservedData, columns: Sequence[int] | None = None,
                observed: bool = True, design: DesignMatrices | None = None) -> DerivativeBundle:
    if design is None:
        design = build_design(theta.spec)
    cols = _as_columns(theta, columns)
    probs = evaluate(theta, design)
    S = jacobian(theta, design, probs, cols)
    I_Y = observed_info(theta, data, cols, design) if observed else None
    return DerivativeBundle(cols, S, score(S, data.counts), expected_info(S, probs, data.N),
                            outer_product(S, data.counts), I_Y)
