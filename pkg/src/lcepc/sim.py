"""Population (KL-model) and Monte Carlo studies of EPC behaviour.

The generating model has two classes, effect coding, tau = 0, class
intercept alpha, a common lambda for every item and one dependence psi on a
single item pair. The restricted (independence) model is fitted either to
the population proportions or to multinomial samples, and EPC_L and EPC_GS
are computed for the omitted pair.
"""
from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from os import PathLike
from pathlib import Path
from typing import Sequence

import numpy as np

from .design import ModelSpec, Pair, ParamVector, normalize_pair
from .epc import EpcError, _Candidate
from .estim import FitOptions, FitResult, NonConvergenceError, fit, fit_population
from .model import evaluate
from .patterns import ObservedData, from_counts

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StudyConfig:
    lambda_levels: tuple[float, ...] = (0.5, 0.8)
    psi_levels: tuple[float, ...] = (-0.5, -0.2, -0.05, 0.0, 0.05, 0.2, 0.5)
    sample_sizes: tuple[int, ...] = (128, 256, 512, 1024, 2048)
    replications: int = 400
    seed: int = 0
    pair: Pair = (1, 2)
    alpha: float = 0.2
    n_items: int = 5
    starts: int = 0
    # explicit (lambda, psi) conditions; empty means the full crossing
    conditions: tuple[tuple[float, float], ...] = ()

    def grid(self) -> list[tuple[float, float]]:
        if self.conditions:
            return list(self.conditions)
        return [(lam, psi) for lam in self.lambda_levels for psi in self.psi_levels]


_LIST_KEYS = {"lambda_levels": float, "psi_levels": float, "sample_sizes": int}
_SCALAR_KEYS = {"replications": int, "seed": int, "alpha": float, "n_items": int, "starts": int}


def parse_config(text: str) -> StudyConfig:
    """Parse ``key = value`` lines (``#`` starts a comment; lists are comma separated)."""
    kw = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            if key in _LIST_KEYS:
                kw[key] = tuple(_LIST_KEYS[key](v) for v in value.split(",") if v.strip())
            elif key in _SCALAR_KEYS:
                kw[key] = _SCALAR_KEYS[key](value)
            elif key == "pair":
                kw[key] = normalize_pair(value.replace(",", "-").split("-"))
            elif key == "conditions":
                kw[key] = tuple(tuple(float(x) for x in c.split(":")) for c in value.split(",") if c.strip())
            else:
                raise ValueError(f"unknown key {key!r}")
        except ValueError as e:
            raise ValueError(f"line {lineno}: {e}") from None
    return StudyConfig(**kw)


def read_config(path: str | PathLike) -> StudyConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def true_parameters(lam: float, psi: float, config: StudyConfig = StudyConfig()) -> ParamVector:
    """Generating parameters (the dependence pair is free in the returned spec)."""
    spec = ModelSpec(config.n_items, 2, "effect", (config.pair,))
    return ParamVector.from_blocks(spec, alpha=config.alpha, tau=0.0, lam=lam, psi={config.pair: psi})


def null_spec(config: StudyConfig = StudyConfig()) -> ModelSpec:
    return ModelSpec(config.n_items, 2, "effect")


def draw_sample(theta: ParamVector, N: int, seed) -> ObservedData:
    """Multinomial sample of N observations over the model's pattern probabilities."""
    rng = np.random.default_rng(seed)
    counts = rng.multinomial(int(N), evaluate(theta).marginal).astype(float)
    return from_counts(counts)


def _epcs(res: FitResult, pair: Pair) -> dict:
    cand = _Candidate(res, (pair,), observed=True)
    out = {}
    for name, fn in (("l", cand.epc_l), ("gs", cand.epc_gs)):
        r = fn()
        out[f"epc_{name}"] = float(r.epc[0])
        out[f"t_{name}"] = r.statistic
    return out


def relative_bias(epc: float, psi: float) -> float:
    """100 (EPC - psi) / psi; NaN when psi = 0."""
    return 100.0 * (epc - psi) / psi if psi != 0 else float("nan")


@dataclass
class PopulationCell:
    lam: float
    psi: float
    epc_l: float = float("nan")
    epc_gs: float = float("nan")
    t_l: float = float("nan")
    t_gs: float = float("nan")
    bias_l: float = float("nan")
    bias_gs: float = float("nan")
    flags: list[str] = field(default_factory=list)


def population_fit(lam: float, psi: float, config: StudyConfig = StudyConfig()) -> FitResult:
    """KL fit of the independence model to the generating model's proportions."""
    truth = true_parameters(lam, psi, config)
    spec = null_spec(config)
    init = ParamVector(spec, np.where(np.arange(truth.values.size) < spec.blocks["psi"].start,
                                      truth.values, 0.0))
    return fit_population(evaluate(truth).marginal, spec, starts=2, seed=config.seed, init=(init,))


def population_cell(lam: float, psi: float, config: StudyConfig = StudyConfig()) -> PopulationCell:
    cell = PopulationCell(lam, psi)
    try:
        res = population_fit(lam, psi, config)
    except NonConvergenceError as e:
        cell.flags.append(str(e))
        res = e.best
    try:
        vals = _epcs(res, config.pair)
    except EpcError as e:
        cell.flags.append(str(e))
        return cell
    cell.epc_l, cell.epc_gs, cell.t_l, cell.t_gs = vals["epc_l"], vals["epc_gs"], vals["t_l"], vals["t_gs"]
    cell.bias_l, cell.bias_gs = relative_bias(cell.epc_l, psi), relative_bias(cell.epc_gs, psi)
    return cell


def population_study(config: StudyConfig = StudyConfig()) -> list[PopulationCell]:
    """Population EPC_L / EPC_GS over every (lambda, psi) condition."""
    return [population_cell(lam, psi, config) for lam, psi in config.grid()]


@dataclass
class MonteCarloCell:
    lam: float
    psi: float
    N: int
    epc_l: np.ndarray
    epc_gs: np.ndarray
    t_l: np.ndarray
    t_gs: np.ndarray
    failures: int
    replications: int

    @property
    def median_epc_l(self) -> float:
        return float(np.median(self.epc_l)) if self.epc_l.size else float("nan")

    @property
    def median_epc_gs(self) -> float:
        return float(np.median(self.epc_gs)) if self.epc_gs.size else float("nan")

    @property
    def flagged(self) -> bool:
        return self.failures > 0.05 * self.replications

    def summary(self) -> dict:
        return {"lambda": self.lam, "psi": self.psi, "N": self.N,
                "median_epc_l": self.median_epc_l, "median_epc_gs": self.median_epc_gs,
                "failures": self.failures, "replications": self.replications, "flagged": self.flagged}


def replication_seed(master_seed: int, condition: int, rep: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([master_seed, condition, rep])


def _replicate(args):
    truth, start, N, seed, starts, pair = args
    data = draw_sample(truth, N, seed)
    try:
        res = fit(data, start.spec, FitOptions(starts=starts, seed=int(seed.generate_state(1)[0]),
                                               init=(start,)))
        return _epcs(res, pair)
    except (NonConvergenceError, EpcError, np.linalg.LinAlgError):
        return None


def monte_carlo_cell(lam: float, psi: float, N: int, config: StudyConfig, condition_index: int,
                     start: ParamVector | None = None, n_jobs: int = 1) -> MonteCarloCell:
    """Replicate draw -> fit independence model -> EPCs for one (lambda, psi, N) condition.

    Each replicate starts from the population KL solution (plus
    ``config.starts`` random starts). Failed replicates are dropped and counted.
    """
    truth = true_parameters(lam, psi, config)
    if start is None:
        start = population_fit(lam, psi, config).theta
    tasks = [(truth, start, N, replication_seed(config.seed, condition_index, r), config.starts, config.pair)
             for r in range(config.replications)]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as ex:
            out = list(ex.map(_replicate, tasks, chunksize=max(1, len(tasks) // (4 * n_jobs))))
    else:
        out = [_replicate(t) for t in tasks]
    ok = [o for o in out if o is not None]
    col = lambda k: np.array([o[k] for o in ok])
    cell = MonteCarloCell(lam, psi, N, col("epc_l"), col("epc_gs"), col("t_l"), col("t_gs"),
                          len(out) - len(ok), config.replications)
    if cell.flagged:
        log.warning("condition lambda=%s psi=%s N=%s: %d of %d replicates failed",
                    lam, psi, N, cell.failures, cell.replications)
    return cell


def monte_carlo(config: StudyConfig = StudyConfig(), n_jobs: int = 1) -> list[MonteCarloCell]:
    """Monte Carlo study over every (lambda, psi) condition and sample size."""
    cells = []
    idx = 0
    for lam, psi in config.grid():
        start = population_fit(lam, psi, config).theta
        for N in config.sample_sizes:
            cells.append(monte_carlo_cell(lam, psi, N, config, idx, start, n_jobs))
            idx += 1
    return cells


def curve_data(lam: float, psi: float, grid: Sequence[float] | None = None, tau: float = 0.0,
               coding: str = "effect") -> list[dict]:
    """Pr(Y_j = 1 | xi, Y_j') along a grid of class design values.

    The class design value is treated as continuous purely for display.
    Under effect coding the log-odds are 2 (tau + lam * xi + psi * x_j') with
    x_j' = +/-1; under dummy coding tau + lam * xi + psi * y_j'.
    """
    grid = np.linspace(-1.0, 1.0, 41) if grid is None else np.asarray(grid, dtype=float)
    rows = []
    for y_other in (0, 1):
        if coding == "effect":
            logit = 2.0 * (tau + lam * grid + psi * (2 * y_other - 1))
        elif coding == "dummy":
            logit = tau + lam * grid + psi * y_other
        else:
            raise ValueError(f"unknown coding {coding!r}")
        prob = 1.0 / (1.0 + np.exp(-logit))
        rows += [{"lambda": lam, "psi": psi, "xi": float(x), "y_other": y_other, "prob": float(p)}
                 for x, p in zip(grid, prob)]
    return rows


# ---------------------------------------------------------------------------
# output


def _fmt(v: float) -> str:
    return "-" if not np.isfinite(v) else f"{v:.3f}"


def write_population_tables(cells: Sequence[PopulationCell], outdir: str | PathLike) -> list[Path]:
    """Write ``population_epc_l.csv`` and ``population_epc_gs.csv`` (values then relative bias)."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    lams = sorted({c.lam for c in cells})
    psis = sorted({c.psi for c in cells})
    lookup = {(c.lam, c.psi): c for c in cells}
    paths = []
    for name in ("l", "gs"):
        path = outdir / f"population_epc_{name}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["quantity", "lambda"] + [f"{p:g}" for p in psis])
            for qty in ("epc", "bias"):
                for lam in lams:
                    row = []
                    for psi in psis:
                        c = lookup.get((lam, psi))
                        v = float("nan") if c is None else getattr(c, f"{qty}_{name}")
                        row.append(_fmt(v) if qty == "epc" else ("-" if not np.isfinite(v) else f"{v:.0f}"))
                    w.writerow([qty, f"{lam:g}"] + row)
        paths.append(path)
    arch = outdir / "population.json"
    arch.write_text(json.dumps([asdict(c) for c in cells], indent=2, default=float), encoding="utf-8")
    paths.append(arch)
    return paths


def write_monte_carlo_tables(cells: Sequence[MonteCarloCell], outdir: str | PathLike,
                             population: Sequence[PopulationCell] = ()) -> list[Path]:
    """Median EPC grids: rows are sample sizes (plus a population row), columns (psi, lambda)."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    conds = sorted({(c.psi, c.lam) for c in cells})
    Ns = sorted({c.N for c in cells})
    lookup = {(c.psi, c.lam, c.N): c for c in cells}
    pop = {(c.psi, c.lam): c for c in population}
    paths = []
    for name in ("l", "gs"):
        path = outdir / f"montecarlo_median_epc_{name}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["N"] + [f"psi={p:g};lambda={l:g}" for p, l in conds])
            for N in Ns:
                w.writerow([N] + [_fmt(getattr(lookup[(p, l, N)], f"median_epc_{name}"))
                                  if (p, l, N) in lookup else "" for p, l in conds])
            if pop:
                w.writerow(["population"] + [_fmt(getattr(pop[k], f"epc_{name}")) if k in pop else ""
                                             for k in conds])
        paths.append(path)
    arch = outdir / "montecarlo.json"
    arch.write_text(json.dumps([c.summary() for c in cells], indent=2), encoding="utf-8")
    paths.append(arch)
    return paths


def write_curves(rows: Sequence[dict], dest: str | PathLike) -> Path:
    dest = Path(dest)
    dest.parent.mkdir(parents=True, exist_ok=True)
    with open(dest, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["lambda", "psi", "xi", "y_other", "prob"])
        w.writeheader()
        w.writerows(rows)
    return dest
