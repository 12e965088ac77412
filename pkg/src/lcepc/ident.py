"""Local identifiability checks.

The model is locally identified at a parameter value when the Jacobian of
the log pattern probabilities has full column rank. ``rank_probe``
evaluates that rank at random parameter values; ``theorem1_check`` is the
degrees-of-freedom shortcut for class-independent dependencies; and
``lemma1_rank_check`` verifies the design conditions for adding arbitrary
class-independent columns.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from math import comb
from typing import Sequence

import numpy as np

from .deriv import jacobian
from .design import ModelSpec, Pair, ParamVector, build_design
from .model import evaluate

RANK_TOL = 1e-8


class IdentificationError(ValueError):
    """The base model is not identified, so the requested check is meaningless."""


@dataclass
class IdentReport:
    spec: ModelSpec
    n_draws: int
    ranks: list[int]
    n_params: int
    verdict: str
    identifiable_dep_count: int | None = None
    total_dep_count: int = 0
    identifiable_deps: tuple[Pair, ...] = ()
    boundary_checked: bool = False
    notes: list[str] = field(default_factory=list)

    @property
    def identified(self) -> bool:
        return self.verdict == "identified"

    def cell(self) -> str:
        """Table-style summary: ``"k/m"`` or ``"-"`` if the base model is not identified."""
        if not self.identified or self.identifiable_dep_count is None:
            return "-"
        return f"{self.identifiable_dep_count}/{self.total_dep_count}"

    def summary(self) -> str:
        s = self.spec
        head = f"J={s.n_items} T={s.n_classes}: p={self.n_params}, R-1={s.n_patterns - 1}"
        if not self.identified:
            return f"{head}; base model not identified (ranks {min(self.ranks)}..{max(self.ranks)})"
        tail = ""
        if self.identifiable_dep_count is not None:
            tail = f"; {self.identifiable_dep_count}/{self.total_dep_count} dependencies addable"
        return f"{head}; model identified{tail}"

    def to_dict(self) -> dict:
        return {"spec": self.spec.to_dict(), "n_draws": self.n_draws, "ranks": self.ranks,
                "n_params": self.n_params, "verdict": self.verdict,
                "identifiable_dep_count": self.identifiable_dep_count,
                "total_dep_count": self.total_dep_count,
                "identifiable_deps": [list(p) for p in self.identifiable_deps],
                "boundary_checked": self.boundary_checked, "notes": self.notes, "cell": self.cell()}


def draw_parameters(spec: ModelSpec, rng: np.random.Generator) -> ParamVector:
    """alpha, tau ~ U(-1, 1); lambda ~ U(0.3, 1.5) with random signs; every psi ~ U(-0.5, 0.5).

    All psi entries are drawn so the same draw serves any dependence subset;
    only the entries free in ``spec`` enter the Jacobian columns.
    """
    T, J = spec.n_classes, spec.n_items
    alpha = rng.uniform(-1, 1, T - 1)
    tau = rng.uniform(-1, 1, J)
    lam = rng.uniform(0.3, 1.5, (T - 1) * J) * rng.choice([-1.0, 1.0], (T - 1) * J)
    psi = rng.uniform(-0.5, 0.5, spec.n_pairs)
    return ParamVector.from_blocks(spec, alpha=alpha, tau=tau, lam=lam, psi=psi)


def numerical_rank(M: np.ndarray, tol: float = RANK_TOL) -> int:
    if M.size == 0:
        return 0
    sv = np.linalg.svd(M, compute_uv=False)
    return int(np.sum(sv > tol * sv[0])) if sv[0] > 0 else 0


class _Draws:
    """Fixed random parameter draws shared by all subset probes."""

    def __init__(self, spec: ModelSpec, n_draws: int, seed: int):
        base = spec.independence()
        rng = np.random.default_rng(seed)
        self.spec = base
        self.design = build_design(base)
        self.thetas = [draw_parameters(base, rng) for _ in range(n_draws)]
        self._cache = {}

    def _psi_values(self, theta: ParamVector, deps: Sequence[Pair]) -> ParamVector:
        """Parameter vector with only ``deps`` carrying their drawn psi."""
        b = self.spec.blocks["psi"]
        v = theta.values.copy()
        keep = np.zeros(self.spec.n_pairs, dtype=bool)
        for p in deps:
            keep[self.spec.psi_index(p) - b.start] = True
        v[b][~keep] = 0.0
        return ParamVector(self.spec, v)

    def ranks(self, deps: Sequence[Pair]) -> list[int]:
        deps = tuple(sorted(deps))
        if deps not in self._cache:
            cols = np.concatenate([np.arange(self.spec.blocks["psi"].start),
                                   [self.spec.psi_index(p) for p in deps]]).astype(int)
            out = []
            for th in self.thetas:
                th = self._psi_values(th, deps)
                S = jacobian(th, self.design, evaluate(th, self.design), cols)
                out.append(numerical_rank(S))
            self._cache[deps] = out
        return self._cache[deps]

    def full_rank(self, deps: Sequence[Pair]) -> bool:
        p = self.spec.n_params + len(deps)
        return all(r == p for r in self.ranks(deps))


def _verdict(ranks: list[int], p: int) -> str:
    full = [r == p for r in ranks]
    if all(full):
        return "identified"
    if not any(full):
        return "not-identified"
    return "mixed"


def rank_probe(spec: ModelSpec, n_draws: int = 50, seed: int = 0, search: bool = True,
               exhaustive_limit: int = 20000) -> IdentReport:
    """Probe local identifiability at ``n_draws`` random parameter values.

    The verdict refers to ``spec`` as given (including its free
    dependencies). With ``search=True`` and an identified model, the largest
    number of further dependencies that can be added is found greedily and
    then confirmed by checking every subset one larger (skipped when that
    size already exceeds the degrees of freedom).
    """
    draws = _Draws(spec, n_draws, seed)
    p = spec.n_params
    total = spec.n_pairs
    if p > spec.n_patterns - 1:
        return IdentReport(spec, n_draws, [], p, "not-identified",
                           None, total, notes=[f"p={p} exceeds R-1={spec.n_patterns - 1}"])
    ranks = draws.ranks(spec.free_deps)
    report = IdentReport(spec, n_draws, ranks, p, _verdict(ranks, p), None, total)
    if not (search and report.identified):
        return report

    chosen = list(spec.free_deps)
    candidates = [q for q in spec.pairs if q not in spec.free_deps]
    for q in candidates:
        if draws.full_rank(chosen + [q]):
            chosen.append(q)
    added = [q for q in chosen if q not in spec.free_deps]
    k = len(chosen)
    report.identifiable_deps = tuple(sorted(chosen))
    report.identifiable_dep_count = k

    df_left = spec.n_patterns - 1 - spec.n_params
    n_more = len(added) + 1
    if len(added) < len(candidates):
        if n_more > df_left:
            report.boundary_checked = True
            report.notes.append(f"no subset of {k + 1} dependencies can be identified: "
                                f"it would exceed R-1")
        elif comb(len(candidates), n_more) <= exhaustive_limit:
            for sub in combinations(candidates, n_more):
                if draws.full_rank(list(spec.free_deps) + list(sub)):
                    report.identifiable_dep_count = len(spec.free_deps) + n_more
                    report.identifiable_deps = tuple(sorted(spec.free_deps + sub))
                    report.notes.append("greedy search was not maximal")
                    break
            else:
                report.boundary_checked = True
        else:
            report.notes.append("boundary subset size too large for exhaustive check")
    return report


@dataclass(frozen=True)
class DependencyCountVerdict:
    identifiable: bool
    k: int
    d: int


def theorem1_check(spec: ModelSpec, k: int, n_draws: int = 50, seed: int = 0,
                   base_report: IdentReport | None = None) -> DependencyCountVerdict:
    """Whether k free dependencies can be added to the independence model of ``spec``.

    Requires the independence model to be identified (probed unless
    ``base_report`` is supplied); then any k <= d = (R-1) - p_base is
    identifiable.
    """
    base = spec.independence()
    rep = base_report or rank_probe(base, n_draws, seed, search=False)
    if not rep.identified:
        raise IdentificationError(f"independence model with J={spec.n_items}, T={spec.n_classes} "
                                  f"is not identified")
    d = base.n_patterns - 1 - base.n_params
    return DependencyCountVerdict(k <= d, k, d)


@dataclass(frozen=True)
class ColumnConditionVerdict:
    ok: bool
    failed: tuple[str, ...]
    details: dict


def lemma1_rank_check(spec: ModelSpec, new_columns: np.ndarray, theta: ParamVector | None = None,
                      seed: int = 0) -> ColumnConditionVerdict:
    """Check the design conditions for identifying extra class-independent columns.

    ``new_columns`` is an (R, m) matrix, or a (T, R, m) array of per-class
    columns (condition iv requires these to be equal across classes).

    (i)   new columns have full column rank;
    (ii)  m <= R - 1 - rank(S of the current free parameters);
    (iii) new columns are linearly independent of the model's design
          columns (per-class intercepts, main effects, class interactions,
          free dependencies);
    (iv)  the columns do not vary over classes.
    """
    X = np.asarray(new_columns, dtype=float)
    failed = []
    T, R = spec.n_classes, spec.n_patterns
    if X.ndim == 3:
        if X.shape[0] != T:
            raise ValueError(f"per-class columns need leading dimension {T}")
        if not all(np.allclose(X[t], X[0]) for t in range(T)):
            failed.append("iv")
        X = X[0]
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] != R:
        raise ValueError(f"new columns need {R} rows, got {X.shape[0]}")
    m = X.shape[1]
    design = build_design(spec)

    rank_new = numerical_rank(X)
    if rank_new < m:
        failed.append("i")

    if theta is None:
        theta = draw_parameters(spec, np.random.default_rng(seed))
        theta = ParamVector(spec, np.where(spec.free_mask, theta.values, 0.0))
    S2 = jacobian(theta, design, columns=spec.free_index)
    rank_s2 = numerical_rank(S2)
    df = R - 1 - rank_s2
    if m > df:
        failed.append("ii")

    free_psi = np.array([spec.psi_index(p) for p in spec.free_deps], dtype=int) - spec.blocks["psi"].start
    blocks = []
    for t in range(T):
        intercept = np.zeros((R, T))
        intercept[:, t] = 1.0
        blocks.append(np.hstack([intercept, design.X_Y, design.X_Yxi(t), design.X_YY[:, free_psi]]))
    X2 = np.vstack(blocks)
    Xn = np.vstack([X] * T)
    r2 = numerical_rank(X2)
    r_joint = numerical_rank(np.hstack([X2, Xn]))
    if r_joint - r2 < m:
        failed.append("iii")
    return ColumnConditionVerdict(not failed, tuple(sorted(failed, key=["i", "ii", "iii", "iv"].index)),
                        {"rank_new": rank_new, "df": df, "rank_S2": rank_s2,
                         "rank_design": r2, "rank_joint": r_joint})


def table1(items=(3, 4, 5, 6), classes=(2, 3, 4, 5, 6), n_draws: int = 50, seed: int = 0) -> dict:
    """Identifiable-dependency counts for a grid of (T, J); values are ``"k/m"`` or ``"-"``."""
    return {(T, J): rank_probe(ModelSpec(J, T), n_draws, seed).cell() for T in classes for J in items}
