"""Expected parameter change and score tests for fixed dependence parameters.

For candidate parameters theta_1 (fixed in the fitted model) and the free
parameters theta_2, with score s_1 at the restricted estimates:

* EPC_L  = V_L^-1 s_1,  V_L  = I_L11 - I_L12 I_L22^-1 I_L21 (expected information)
* EPC_GS = V_GS^-1 s_1, V_GS = (1, -I_Y12 I_Y22^-1) D (1, -I_Y12 I_Y22^-1)'

The score statistics are s_1' V^-1 s_1 with rank(S_1) degrees of freedom.
Reported EPC values are the values the parameters would take if freed
(fixed value plus the expected change).
"""
from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from .deriv import expected_info, jacobian, observed_info, outer_product, score
from .design import Pair, build_design, format_pair, normalize_pair
from .estim import FitResult

COND_LIMIT = 1e12
RANK_TOL = 1e-10


class EpcError(np.linalg.LinAlgError):
    """EPC not computable for a candidate (singular V or information block)."""


@dataclass(frozen=True)
class EpcResult:
    """EPC and score test for one candidate set."""

    pairs: tuple[Pair, ...]
    epc: np.ndarray
    change: np.ndarray
    statistic: float
    df: int
    p_value: float


@dataclass
class EpcReport:
    """One row of a scan: both EPC variants and the bivariate residual."""

    pair: Pair
    epc_l: float = np.nan
    t_l: float = np.nan
    p_l: float = np.nan
    epc_gs: float = np.nan
    t_gs: float = np.nan
    p_gs: float = np.nan
    bvr: float = np.nan
    df: int = 0
    flags: list[str] = field(default_factory=list)

    def as_row(self) -> dict:
        return {"pair": format_pair(self.pair), "epc_l": self.epc_l, "t_l": self.t_l, "p_l": self.p_l,
                "epc_gs": self.epc_gs, "t_gs": self.t_gs, "p_gs": self.p_gs, "bvr": self.bvr,
                "df": self.df, "flags": ";".join(self.flags)}


def _candidate_pairs(fit: FitResult, candidate) -> tuple[Pair, ...]:
    if len(candidate) == 2 and all(np.isscalar(v) for v in candidate):
        cand = (normalize_pair(candidate),)
    else:
        cand = tuple(normalize_pair(p) for p in candidate)
    for p in cand:
        if p in fit.spec.free_deps:
            raise ValueError(f"pair {p} is already free")
    if len(set(cand)) != len(cand):
        raise ValueError("duplicate candidate pairs")
    return cand


class _Candidate:
    """Derivatives at the restricted fit over (candidate, free) columns."""

    def __init__(self, fit: FitResult, pairs: tuple[Pair, ...], observed: bool):
        spec = fit.spec
        self.fit = fit
        self.pairs = pairs
        self.k = len(pairs)
        cand = np.array([spec.psi_index(p) for p in pairs], dtype=int)
        self.cols = np.concatenate([cand, spec.free_index])
        design = build_design(spec)
        S = jacobian(fit.theta, design, fit.probs, self.cols)
        n = fit.data.counts
        self.S1 = S[:, : self.k]
        self.s1 = score(self.S1, n)
        self.I_L = expected_info(S, fit.probs, fit.data.N)
        self.D = outer_product(S, n)
        self.I_Y = observed_info(fit.theta, fit.data, self.cols, design) if observed else None
        self.fixed = fit.theta.values[cand]

    def df(self) -> int:
        sv = np.linalg.svd(self.S1, compute_uv=False)
        return int(np.sum(sv > RANK_TOL * sv[0])) if sv.size and sv[0] > 0 else 0

    def _result(self, V: np.ndarray, label: str) -> EpcResult:
        V = 0.5 * (V + V.T)
        ev = np.linalg.eigvalsh(V)
        scale = max(np.max(np.abs(np.diag(self.I_L[: self.k, : self.k]))), np.finfo(float).tiny)
        if ev[0] <= scale / COND_LIMIT or ev[-1] / ev[0] > COND_LIMIT:
            raise EpcError(f"{label}: V is singular for candidate {self.pairs}; "
                           "the dependence is not identifiable at this solution")
        change = np.linalg.solve(V, self.s1)
        stat = float(self.s1 @ change)
        df = self.df()
        return EpcResult(self.pairs, self.fixed + change, change, stat, df,
                         float(stats.chi2.sf(stat, df)) if df else np.nan)

    def epc_l(self, information: str = "expected") -> EpcResult:
        k = self.k
        if information == "expected":
            I = self.I_L
        elif information == "observed":
            I = self.I_Y if self.I_Y is not None else observed_info(
                self.fit.theta, self.fit.data, self.cols)
        else:
            raise ValueError(f"information must be 'expected' or 'observed', got {information!r}")
        I11, I12, I22 = I[:k, :k], I[:k, k:], I[k:, k:]
        if np.linalg.cond(I22) > COND_LIMIT:
            raise EpcError("information of the free parameters is singular")
        V = I11 - I12 @ np.linalg.solve(I22, I12.T)
        return self._result(V, "EPC_L")

    def epc_gs(self) -> EpcResult:
        k = self.k
        IY12, IY22 = self.I_Y[:k, k:], self.I_Y[k:, k:]
        if np.linalg.cond(IY22) > COND_LIMIT:
            raise EpcError("observed information of the free parameters is singular; "
                           "EPC_GS is not computable, use EPC_L")
        A = np.hstack([np.eye(k), -np.linalg.solve(IY22, IY12.T).T])
        return self._result(A @ self.D @ A.T, "EPC_GS")


def epc_l(fit: FitResult, candidate: Pair | Sequence[Pair], information: str = "expected") -> EpcResult:
    """EPC with the expected information and Rao's efficient score test.

    ``information="observed"`` uses the observed information instead, which
    makes the EPC the candidate component of a full Newton step from the
    restricted estimates.
    """
    pairs = _candidate_pairs(fit, candidate)
    return _Candidate(fit, pairs, observed=(information == "observed")).epc_l(information)


def epc_gs(fit: FitResult, candidate: Pair | Sequence[Pair]) -> EpcResult:
    """Generalized EPC with the misspecification-robust V_GS and the generalized score test."""
    return _Candidate(fit, _candidate_pairs(fit, candidate), observed=True).epc_gs()


def bvr(fit: FitResult, pair: Sequence[int]) -> float:
    """Raw residual n_11 - mu_11 in the (1,1) cell of the pair's crosstable."""
    j, k = normalize_pair(pair)
    pat = fit.data.table.patterns
    both = (pat[:, j - 1] == 1) & (pat[:, k - 1] == 1)
    return float(np.sum(fit.data.counts[both] - fit.expected_counts[both]))


def _report(fit: FitResult, pair: Pair) -> EpcReport:
    rep = EpcReport(pair)
    rep.bvr = bvr(fit, pair)
    if fit.spec.df < 1:
        rep.flags.append("not identifiable: no degrees of freedom left")
        return rep
    cand = _Candidate(fit, (pair,), observed=True)
    rep.df = cand.df()
    try:
        r = cand.epc_l()
        rep.epc_l, rep.t_l, rep.p_l = float(r.epc[0]), r.statistic, r.p_value
    except EpcError as e:
        rep.flags.append(f"EPC_L: {e}")
    try:
        r = cand.epc_gs()
        rep.epc_gs, rep.t_gs, rep.p_gs = float(r.epc[0]), r.statistic, r.p_value
    except EpcError as e:
        rep.flags.append(f"EPC_GS: {e}")
    return rep


def scan(fit: FitResult, pairs: Iterable[Sequence[int]] | None = None, n_jobs: int = 1) -> list[EpcReport]:
    """EPC_L, EPC_GS, score tests and residuals for every non-free pair.

    Pairs already free in the fit are skipped. Failures are recorded as
    row flags and do not stop the scan.
    """
    if pairs is None:
        todo = [p for p in fit.spec.pairs if p not in fit.spec.free_deps]
    else:
        todo = sorted({normalize_pair(p) for p in pairs} - set(fit.spec.free_deps))
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as ex:
            return list(ex.map(lambda p: _report(fit, p), todo))
    return [_report(fit, p) for p in todo]


CSV_COLUMNS = ["pair", "epc_l", "t_l", "p_l", "epc_gs", "t_gs", "p_gs", "bvr", "df", "flags"]


def reports_to_csv(reports: Sequence[EpcReport], dest=None) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow(r.as_row())
    text = buf.getvalue()
    if dest is not None:
        with open(dest, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text


def reports_from_csv(source) -> list[EpcReport]:
    with open(source, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        j, k = (int(v) for v in row["pair"].split("-"))
        out.append(EpcReport((j, k), *(float(row[c]) for c in CSV_COLUMNS[1:8]), int(row["df"]),
                             [f for f in row["flags"].split(";") if f]))
    return out


def reports_to_json(reports: Sequence[EpcReport]) -> str:
    def clean(v):
        return None if isinstance(v, float) and not np.isfinite(v) else v
    rows = [{k: clean(v) for k, v in r.as_row().items()} for r in reports]
    for row, r in zip(rows, reports):
        row["flags"] = list(r.flags)
    return json.dumps(rows, indent=2)
