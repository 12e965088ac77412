"""Maximum likelihood estimation and fit statistics.

Estimation runs EM from several starting values and polishes each EM
solution with Newton steps on the free parameters (analytic score,
finite-difference observed information). The best local maximum wins.
"""
from __future__ import annotations

import json
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np
from scipy import stats
from scipy.special import logsumexp

from .deriv import jacobian, observed_info, score
from .design import (DesignMatrices, ModelSpec, Pair, ParamVector, build_design, format_pair,
                     normalize_pair, split_class_effects)
from .model import Probabilities, evaluate, is_boundary, loglik
from .patterns import ObservedData, from_counts

log = logging.getLogger(__name__)


class NonConvergenceError(RuntimeError):
    """No start converged; ``best`` holds the highest-likelihood partial result."""

    def __init__(self, msg: str, best: "FitResult | None" = None):
        super().__init__(msg)
        self.best = best


class InformationError(np.linalg.LinAlgError):
    """Information matrix is singular where an inverse is required."""


@dataclass(frozen=True)
class FitOptions:
    """Estimation settings.

    ``init`` values (if any) are tried before ``starts`` random starts.
    """

    starts: int = 10
    seed: int = 0
    tol: float = 1e-8
    max_iter: int = 1000
    grad_tol: float = 1e-6
    newton_max_iter: int = 50
    n_jobs: int = 1
    init: tuple[ParamVector, ...] = ()


@dataclass
class FitResult:
    spec: ModelSpec
    theta: ParamVector
    loglik: float
    data: ObservedData
    probs: Probabilities
    converged: bool
    n_iterations: int
    n_starts: int
    best_of_starts: int
    boundary_flag: bool
    gradient_norm: float
    start_index: int = 0
    messages: list[str] = field(default_factory=list)

    @property
    def expected_counts(self) -> np.ndarray:
        return self.data.N * self.probs.marginal

    @property
    def posterior(self) -> np.ndarray:
        return self.probs.posterior

    @property
    def class_probs(self) -> np.ndarray:
        return self.probs.class_probs

    def item_probs(self) -> np.ndarray:
        """(T, J) Pr(Y_k = 1 | xi = t), marginal over the other items."""
        T, J = self.spec.n_classes, self.spec.n_items
        pat = self.data.table.patterns
        return np.array([[self.probs.cond[t] @ pat[:, k] for k in range(J)] for t in range(T)])

    def to_dict(self) -> dict:
        dev = deviance(self)
        th = self.theta
        return {
            "spec": self.spec.to_dict(),
            "item_names": list(self.data.item_names),
            "N": self.data.N,
            "theta": {
                "alpha": th.alpha.tolist(),
                "tau": th.tau.tolist(),
                "lambda": th.lam.tolist(),
                "psi": {format_pair(p): float(v) for p, v in zip(self.spec.pairs, th.psi)},
            },
            "loglik": self.loglik,
            "deviance": dev.L2,
            "df": dev.df,
            "bic": bic(self),
            "class_probs": self.class_probs.tolist(),
            "item_probs": self.item_probs().tolist(),
            "flags": {
                "converged": self.converged,
                "boundary": self.boundary_flag,
                "n_iterations": self.n_iterations,
                "n_starts": self.n_starts,
                "best_of_starts": self.best_of_starts,
                "gradient_norm": self.gradient_norm,
                "messages": list(self.messages),
            },
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), indent=kw.pop("indent", 2), **kw)

    @classmethod
    def from_dict(cls, doc: dict, data: ObservedData) -> "FitResult":
        spec = ModelSpec.from_dict(doc["spec"])
        if data.n_items != spec.n_items:
            raise ValueError(f"fit has {spec.n_items} items but data has {data.n_items}")
        th = doc["theta"]
        psi = {tuple(int(v) for v in k.split("-")): val for k, val in th["psi"].items()}
        theta = ParamVector.from_blocks(spec, alpha=th["alpha"], tau=th["tau"],
                                        lam=np.asarray(th["lambda"], float).reshape(-1), psi=psi)
        flags = doc.get("flags", {})
        return _make_result(theta, data, converged=bool(flags.get("converged", True)),
                            n_iterations=int(flags.get("n_iterations", 0)),
                            n_starts=int(flags.get("n_starts", 1)),
                            best_of_starts=int(flags.get("best_of_starts", 1)),
                            messages=list(flags.get("messages", [])))


def _make_result(theta, data, converged, n_iterations, n_starts=1, best_of_starts=1,
                 start_index=0, messages=()) -> FitResult:
    design = build_design(theta.spec)
    probs = evaluate(theta, design)
    g = score(jacobian(theta, design, probs, theta.spec.free_index), data.counts)
    return FitResult(theta.spec, theta, loglik(theta, data, probs=probs), data, probs, converged,
                     n_iterations, n_starts, best_of_starts, is_boundary(theta),
                     float(np.max(np.abs(g))) if g.size else 0.0, start_index, list(messages))


# ---------------------------------------------------------------------------
# EM


class _MStep:
    """Cached per-class design for the complete-data loglinear M-step."""

    def __init__(self, spec: ModelSpec, design: DesignMatrices):
        b = spec.blocks
        self.spec = spec
        self.design = design
        free_psi = [spec.psi_index(p) for p in spec.free_deps]
        self.index = np.concatenate([np.arange(b["tau"].start, b["lambda"].stop),
                                     np.asarray(free_psi, dtype=int)]).astype(int)
        psi_cols = design.X_YY[:, np.asarray(free_psi, dtype=int) - b["psi"].start]
        self.Z = [np.hstack([design.X_Y, design.X_Yxi(t), psi_cols]) for t in range(spec.n_classes)]

    def offsets(self, theta: ParamVector) -> np.ndarray:
        """Contribution of parameters not updated in the M-step (fixed psi)."""
        v = theta.values.copy()
        v[self.index] = 0.0
        return self.design.X_YY @ v[self.spec.blocks["psi"]]

    def q(self, beta, W, off):
        out = 0.0
        for t, Z in enumerate(self.Z):
            eta = Z @ beta + off
            out += W[:, t] @ eta - W[:, t].sum() * logsumexp(eta)
        return out

    def solve(self, beta, W, off, max_iter=25):
        q_old = self.q(beta, W, off)
        for _ in range(max_iter):
            g = np.zeros(beta.size)
            H = np.zeros((beta.size, beta.size))
            for t, Z in enumerate(self.Z):
                eta = Z @ beta + off
                c = np.exp(eta - logsumexp(eta))
                Wt = W[:, t].sum()
                zc = Z.T @ c
                g += Z.T @ W[:, t] - Wt * zc
                H += Wt * ((Z * c[:, None]).T @ Z - np.outer(zc, zc))
            try:
                step = np.linalg.solve(H, g)
            except np.linalg.LinAlgError:
                step = np.linalg.lstsq(H, g, rcond=None)[0]
            if not np.all(np.isfinite(step)):
                break
            h = 1.0
            for _ in range(21):
                cand = beta + h * step
                q_new = self.q(cand, W, off)
                if q_new >= q_old - 1e-14 * abs(q_old):
                    break
                h *= 0.5
            else:
                break
            beta, q_old = cand, q_new
            if np.max(np.abs(h * step)) < 1e-11:
                break
        return beta


def em_step(theta: ParamVector, data: ObservedData, design: DesignMatrices | None = None,
            _mstep: _MStep | None = None) -> ParamVector:
    """One EM iteration.

    E-step posteriors weight the R*T expanded table; the M-step updates the
    class intercepts in closed form and (tau, lambda, free psi) by Newton on
    the complete-data loglinear likelihood.
    """
    spec = theta.spec
    if design is None:
        design = build_design(spec)
    ms = _mstep or _MStep(spec, design)
    probs = evaluate(theta, design)
    W = data.counts[:, None] * probs.posterior
    mass = np.maximum(W.sum(axis=0), 1e-300)
    _, alpha = split_class_effects(np.log(mass), spec.coding)
    beta = ms.solve(theta.values[ms.index], W, ms.offsets(theta))
    v = theta.values.copy()
    v[spec.blocks["alpha"]] = alpha
    v[ms.index] = beta
    return ParamVector(spec, v)


# ---------------------------------------------------------------------------
# Newton polish


def _newton(theta: ParamVector, data: ObservedData, opts: FitOptions, design) -> tuple[ParamVector, bool, int, list]:
    spec = theta.spec
    free = spec.free_index
    ll = loglik(theta, data, design)
    msgs = []
    for it in range(opts.newton_max_iter):
        probs = evaluate(theta, design)
        g = score(jacobian(theta, design, probs, free), data.counts)
        if np.max(np.abs(g)) < opts.grad_tol:
            return theta, True, it, msgs
        info = observed_info(theta, data, free, design)
        try:
            L = np.linalg.cholesky(info)
            step = np.linalg.solve(L.T, np.linalg.solve(L, g))
        except np.linalg.LinAlgError:
            # not negative definite here: fall back to Fisher scoring
            S = jacobian(theta, design, probs, free)
            IL = (S * (data.N * probs.marginal)[:, None]).T @ S
            try:
                step = np.linalg.solve(IL + 1e-10 * np.trace(IL) / IL.shape[0] * np.eye(IL.shape[0]), g)
            except np.linalg.LinAlgError:
                msgs.append("singular Newton system; EM-only solution")
                return theta, False, it, msgs
        h = 1.0
        for _ in range(30):
            cand = theta.with_free(theta.free + h * step)
            ll_new = loglik(cand, data, design)
            if np.isfinite(ll_new) and ll_new >= ll - 1e-12 * max(1.0, abs(ll)):
                break
            h *= 0.5
        else:
            msgs.append("Newton line search failed")
            return theta, False, it, msgs
        theta, ll = cand, ll_new
    probs = evaluate(theta, design)
    g = score(jacobian(theta, design, probs, free), data.counts)
    return theta, bool(np.max(np.abs(g)) < opts.grad_tol), opts.newton_max_iter, msgs


def _run_em(theta: ParamVector, data: ObservedData, opts: FitOptions, design, ms) -> tuple[ParamVector, int]:
    ll = loglik(theta, data, design)
    it = 0
    for it in range(1, opts.max_iter + 1):
        theta = em_step(theta, data, design, ms)
        ll_new = loglik(theta, data, design)
        if abs(ll_new - ll) <= opts.tol * max(abs(ll), 1e-300):
            break
        ll = ll_new
    return theta, it


def _fit_one(args) -> FitResult:
    theta, data, opts, index = args
    spec = theta.spec
    design = build_design(spec)
    ms = _MStep(spec, design)
    theta, n_em = _run_em(theta, data, opts, design, ms)
    theta, ok, n_nt, msgs = _newton(theta, data, opts, design)
    if not ok and n_em < opts.max_iter:
        # EM-only fallback: continue EM at a tighter tolerance
        tighter = replace(opts, tol=opts.tol * 1e-4)
        theta, more = _run_em(theta, data, tighter, design, ms)
        n_em += more
        theta, ok, extra, m2 = _newton(theta, data, opts, design)
        n_nt += extra
        msgs += m2
    return _make_result(theta, data, ok, n_em + n_nt, start_index=index, messages=msgs)


def random_start(spec: ModelSpec, rng: np.random.Generator) -> ParamVector:
    """alpha, tau ~ U(-0.5, 0.5); lambda ~ U(0.2, 1.2) with random sign; free psi = 0."""
    T, J = spec.n_classes, spec.n_items
    lam = rng.uniform(0.2, 1.2, size=(T - 1, J)) * rng.choice([-1.0, 1.0], size=(T - 1, J))
    return ParamVector.from_blocks(spec, alpha=rng.uniform(-0.5, 0.5, T - 1),
                                   tau=rng.uniform(-0.5, 0.5, J), lam=lam.ravel())


def _starts(spec: ModelSpec, opts: FitOptions) -> list[ParamVector]:
    out = []
    for th in opts.init:
        if th.spec.n_full != spec.n_full:
            raise ValueError("initial values do not match the model layout")
        out.append(ParamVector(spec, th.values))
    for i in range(opts.starts):
        out.append(random_start(spec, np.random.default_rng([opts.seed, i])))
    if not out:
        raise ValueError("no starting values: set starts > 0 or provide init")
    return out


def order_classes(theta: ParamVector) -> ParamVector:
    """Relabel classes by descending class probability."""
    logits = theta.class_logits()
    order = np.argsort(-logits, kind="stable")
    if np.array_equal(order, np.arange(order.size)):
        return theta
    return theta.permute_classes(order)


def fit(data: ObservedData, spec: ModelSpec, opts: FitOptions | None = None, **kw) -> FitResult:
    """Maximum likelihood fit of ``spec`` to ``data`` over several starts.

    Keyword arguments override fields of ``opts``.
    """
    opts = replace(opts or FitOptions(), **kw)
    if isinstance(opts.init, ParamVector):
        opts = replace(opts, init=(opts.init,))
    if data.n_items != spec.n_items:
        raise ValueError(f"data have {data.n_items} items but the model has {spec.n_items}")
    if spec.n_params > spec.n_patterns - 1:
        raise ValueError(f"model has {spec.n_params} free parameters but only "
                         f"{spec.n_patterns - 1} independent pattern frequencies")
    tasks = [(th, data, opts, i) for i, th in enumerate(_starts(spec, opts))]
    if opts.n_jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=opts.n_jobs) as ex:
            results = list(ex.map(_fit_one, tasks))
    else:
        results = [_fit_one(t) for t in tasks]

    ok = [r for r in results if r.converged]
    pool = ok or results
    best = max(pool, key=lambda r: (r.loglik, -r.start_index))
    n_best = sum(1 for r in results if abs(r.loglik - best.loglik) <= 1e-6 * max(1.0, abs(best.loglik)))
    theta = order_classes(best.theta)
    result = _make_result(theta, data, best.converged, best.n_iterations, len(results), n_best,
                          best.start_index, best.messages)
    if result.boundary_flag:
        result.messages.append("boundary estimate: some |parameter| > 15")
    if not ok:
        raise NonConvergenceError(f"none of {len(results)} starts converged "
                                  f"(best gradient norm {result.gradient_norm:.2e})", result)
    return result


def fit_population(true_probs: Sequence[float], spec: ModelSpec, opts: FitOptions | None = None,
                   **kw) -> FitResult:
    """Fit to population proportions (the Kullback-Leibler closest model)."""
    p = np.asarray(true_probs, dtype=float)
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"population probabilities sum to {p.sum()}, not 1")
    kw.setdefault("grad_tol", 1e-11)
    return fit(from_counts(p, ()), spec, opts, **kw)


# ---------------------------------------------------------------------------
# fit statistics


class Deviance(NamedTuple):
    L2: float
    df: int


def deviance(fit: FitResult, data: ObservedData | None = None) -> Deviance:
    """Likelihood-ratio statistic against the saturated multinomial."""
    data = data or fit.data
    n = data.counts
    mu = data.N * fit.probs.marginal
    pos = n > 0
    L2 = 2.0 * float(np.sum(n[pos] * (np.log(n[pos]) - np.log(mu[pos]))))
    return Deviance(L2, fit.spec.df)


def bic(fit: FitResult, data: ObservedData | None = None) -> float:
    """L2 - df * ln(N)."""
    data = data or fit.data
    d = deviance(fit, data)
    return d.L2 - d.df * np.log(data.N)


@dataclass(frozen=True)
class BootstrapResult:
    p_value: float
    exceedances: int
    replicates: int
    failures: int
    observed: float
    statistics: np.ndarray

    def __str__(self) -> str:
        if self.exceedances == 0:
            return f"p < {1.0 / self.replicates:.3g} (0 of {self.replicates} replicates)"
        return f"p = {self.p_value:.3f} ({self.exceedances} of {self.replicates} replicates)"


def _bootstrap_one(args):
    theta, N, opts, seed = args
    rng = np.random.default_rng(seed)
    counts = rng.multinomial(N, evaluate(theta).marginal).astype(float)
    data = from_counts(counts)
    try:
        res = fit(data, theta.spec, opts)
    except NonConvergenceError:
        return np.nan
    return deviance(res).L2


def bootstrap_pvalue(fit: FitResult, data: ObservedData | None = None, spec: ModelSpec | None = None,
                     B: int = 499, seed: int = 0, opts: FitOptions | None = None,
                     n_jobs: int = 1) -> BootstrapResult:
    """Parametric bootstrap p-value of the deviance.

    Replicate ``b`` draws N observations from the fitted model with seed
    ``seed + b`` and refits, starting from the estimates plus
    ``opts.starts`` random starts (default 2).
    """
    data = data or fit.data
    spec = spec or fit.spec
    observed = deviance(fit, data).L2
    N = int(round(data.N))
    opts = opts or FitOptions(starts=2)
    opts = replace(opts, init=(ParamVector(spec, fit.theta.values),), n_jobs=1)
    tasks = [(fit.theta, N, replace(opts, seed=seed + b), seed + b) for b in range(B)]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as ex:
            stats_ = np.array(list(ex.map(_bootstrap_one, tasks, chunksize=8)))
    else:
        stats_ = np.array([_bootstrap_one(t) for t in tasks])
    ok = np.isfinite(stats_)
    failures = int((~ok).sum())
    if failures > 0.1 * B:
        warnings.warn(f"{failures} of {B} bootstrap replicates failed to converge", RuntimeWarning)
    exceed = int(np.sum(stats_[ok] >= observed - 1e-9))
    n_ok = int(ok.sum())
    return BootstrapResult(exceed / n_ok if n_ok else np.nan, exceed, n_ok, failures, observed, stats_)


class WaldResult(NamedTuple):
    pair: Pair
    estimate: float
    se: float
    wald: float
    p_value: float


def _free_covariance(fit: FitResult, information: str = "expected") -> np.ndarray:
    free = fit.spec.free_index
    if information == "expected":
        S = jacobian(fit.theta, None, fit.probs, free)
        info = (S * fit.expected_counts[:, None]).T @ S
    elif information == "observed":
        info = observed_info(fit.theta, fit.data, free)
    else:
        raise ValueError(f"information must be 'expected' or 'observed', got {information!r}")
    sv = np.linalg.svd(info, compute_uv=False)
    rank = int(np.sum(sv > 1e-10 * sv[0])) if sv.size else 0
    if rank < info.shape[0]:
        raise InformationError(f"{information} information is singular: rank {rank} of {info.shape[0]} "
                               f"(defect {info.shape[0] - rank})")
    return np.linalg.inv(info)


def wald_test(fit: FitResult, pair: Sequence[int], cov: np.ndarray | None = None,
              information: str = "expected") -> WaldResult:
    """Wald statistic psi^2 / Var(psi) for a freed dependence.

    Var(psi) is the diagonal element of the inverse information of the free
    parameters at the estimates (expected information by default,
    ``information="observed"`` for the finite-difference observed one).
    """
    pair = normalize_pair(pair)
    if pair not in fit.spec.free_deps:
        raise ValueError(f"pair {pair} is not free in the fitted model")
    cov = _free_covariance(fit, information) if cov is None else cov
    pos = int(np.flatnonzero(fit.spec.free_index == fit.spec.psi_index(pair))[0])
    est = float(fit.theta.values[fit.spec.psi_index(pair)])
    var = float(cov[pos, pos])
    w = est * est / var
    return WaldResult(pair, est, float(np.sqrt(var)), w, float(stats.chi2.sf(w, 1)))


def wald_tests(fit: FitResult, information: str = "expected") -> list[WaldResult]:
    if not fit.spec.free_deps:
        return []
    cov = _free_covariance(fit, information)
    return [wald_test(fit, p, cov) for p in fit.spec.free_deps]


def marginal_log_odds(fit: FitResult, pair: Sequence[int], t: int) -> float:
    """Within-class log-odds ratio of a pair, marginal over all other items.

    ``t`` is a 0-based class index (classes are ordered by size). A zero cell
    gives +/-inf.
    """
    j, k = normalize_pair(pair)
    J = fit.spec.n_items
    p = fit.probs.cond[t].reshape((2,) * J)
    other = tuple(a for a in range(J) if a not in (j - 1, k - 1))
    tab = p.sum(axis=other) if other else p
    with np.errstate(divide="ignore"):
        return float(np.log(tab[0, 0]) + np.log(tab[1, 1]) - np.log(tab[0, 1]) - np.log(tab[1, 0]))
