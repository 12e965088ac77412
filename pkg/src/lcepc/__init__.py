"""Binary latent class models with loglinear local dependencies and EPC diagnostics."""
from .design import ModelSpec, ParamVector, parse_pairs
from .epc import EpcReport, EpcResult, bvr, epc_gs, epc_l, scan
from .estim import FitOptions, FitResult, NonConvergenceError, bic, bootstrap_pvalue, deviance, fit, wald_test
from .ident import rank_probe, theorem1_check
from .patterns import ObservedData, from_counts, from_responses, ingest

__version__ = "0.1.0"

__all__ = [
    "ModelSpec", "ParamVector", "parse_pairs", "EpcReport", "EpcResult", "bvr", "epc_gs", "epc_l", "scan",
    "FitOptions", "FitResult", "NonConvergenceError", "bic", "bootstrap_pvalue", "deviance", "fit",
    "wald_test", "rank_probe", "theorem1_check", "ObservedData", "from_counts", "from_responses", "ingest",
]
