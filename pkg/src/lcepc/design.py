"""Design matrices, model specification and parameter layout.

The full parameter vector is ordered ``(alpha, tau, lambda, psi)``:

* ``alpha``  -- T-1 class-intercept contrasts,
* ``tau``    -- J item main effects,
* ``lambda`` -- J*(T-1) item-by-class effects, contrast-major
  (entry ``c*J + k`` belongs to item ``k`` and class contrast ``c``),
* ``psi``    -- one loglinear dependence per item pair, pairs in
  lexicographic order (1,2), (1,3), ..., (J-1,J).

Alpha, tau and lambda are always free; each psi is either free or fixed.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from itertools import combinations
from math import comb
from typing import Iterable, Mapping, Sequence

import numpy as np

from .patterns import PatternTable, enumerate_patterns

CODINGS = ("effect", "dummy")

Pair = tuple[int, int]


def normalize_pair(pair: Sequence[int]) -> Pair:
    j, k = (int(v) for v in pair)
    if j == k:
        raise ValueError(f"dependence pair needs two distinct items, got ({j}, {k})")
    return (j, k) if j < k else (k, j)


def parse_pairs(text: str) -> tuple[Pair, ...]:
    """Parse ``"1-3,2-5"`` into ``((1, 3), (2, 5))``. Empty text gives ``()``."""
    out = []
    for tok in text.replace(" ", "").split(","):
        if not tok:
            continue
        parts = tok.split("-")
        if len(parts) != 2:
            raise ValueError(f"cannot parse pair {tok!r}; expected 'j-k'")
        try:
            out.append(normalize_pair((int(parts[0]), int(parts[1]))))
        except ValueError:
            raise ValueError(f"cannot parse pair {tok!r}; expected 'j-k'") from None
    return tuple(out)


def format_pair(pair: Pair) -> str:
    return f"{pair[0]}-{pair[1]}"


def all_pairs(n_items: int) -> tuple[Pair, ...]:
    return tuple((j + 1, k + 1) for j, k in combinations(range(n_items), 2))


@dataclass(frozen=True)
class ModelSpec:
    """Latent class model with optional class-independent pairwise dependencies.

    Parameters
    ----------
    n_items : int
        Number of binary items J.
    n_classes : int
        Number of latent classes T.
    coding : {"effect", "dummy"}
        Design coding of items and of the class variable.
    free_deps : sequence of pairs
        1-based item pairs whose psi is estimated.
    fixed_psi : mapping of pair to float
        Values of fixed psi entries; unlisted pairs are fixed at 0.
    """

    n_items: int
    n_classes: int = 2
    coding: str = "effect"
    free_deps: tuple[Pair, ...] = ()
    fixed_psi: tuple[tuple[Pair, float], ...] = field(default=())

    def __post_init__(self):
        if not 1 <= self.n_items <= 20:
            raise ValueError(f"n_items must be in [1, 20], got {self.n_items}")
        if self.n_classes < 1:
            raise ValueError(f"n_classes must be >= 1, got {self.n_classes}")
        if self.coding not in CODINGS:
            raise ValueError(f"coding must be one of {CODINGS}, got {self.coding!r}")
        deps = tuple(sorted({normalize_pair(p) for p in self.free_deps}))
        if len(deps) != len(self.free_deps):
            raise ValueError("free_deps contains duplicate pairs")
        for j, k in deps:
            if not (1 <= j <= self.n_items and 1 <= k <= self.n_items):
                raise ValueError(f"pair ({j}, {k}) out of range for {self.n_items} items")
        object.__setattr__(self, "free_deps", deps)
        fixed = dict(self.fixed_psi.items() if isinstance(self.fixed_psi, Mapping) else self.fixed_psi)
        fixed = {normalize_pair(p): float(v) for p, v in fixed.items()}
        for p in fixed:
            if p in deps:
                raise ValueError(f"pair {p} is both free and fixed")
            if max(p) > self.n_items:
                raise ValueError(f"pair {p} out of range for {self.n_items} items")
        object.__setattr__(self, "fixed_psi", tuple(sorted((p, v) for p, v in fixed.items() if v != 0.0)))

    # -- layout -----------------------------------------------------------
    @property
    def n_patterns(self) -> int:
        return 1 << self.n_items

    @property
    def n_pairs(self) -> int:
        return comb(self.n_items, 2)

    @cached_property
    def pairs(self) -> tuple[Pair, ...]:
        return all_pairs(self.n_items)

    @cached_property
    def _pair_pos(self) -> dict[Pair, int]:
        return {p: i for i, p in enumerate(self.pairs)}

    @cached_property
    def blocks(self) -> dict[str, slice]:
        T, J = self.n_classes, self.n_items
        a = T - 1
        b = a + J
        c = b + J * (T - 1)
        return {"alpha": slice(0, a), "tau": slice(a, b), "lambda": slice(b, c),
                "psi": slice(c, c + self.n_pairs)}

    @property
    def n_full(self) -> int:
        return self.blocks["psi"].stop

    @property
    def n_params(self) -> int:
        """Number of free parameters p."""
        return (self.n_classes - 1) + self.n_items * self.n_classes + len(self.free_deps)

    @property
    def df(self) -> int:
        return self.n_patterns - 1 - self.n_params

    def psi_index(self, pair: Sequence[int]) -> int:
        """Position of a pair's psi in the full parameter vector."""
        p = normalize_pair(pair)
        if p not in self._pair_pos:
            raise ValueError(f"pair {p} out of range for {self.n_items} items")
        return self.blocks["psi"].start + self._pair_pos[p]

    @cached_property
    def free_index(self) -> np.ndarray:
        base = np.arange(self.blocks["psi"].start)
        deps = np.array([self.psi_index(p) for p in self.free_deps], dtype=int)
        out = np.concatenate([base, deps]).astype(int)
        out.flags.writeable = False
        return out

    @cached_property
    def free_mask(self) -> np.ndarray:
        m = np.zeros(self.n_full, dtype=bool)
        m[self.free_index] = True
        m.flags.writeable = False
        return m

    def param_names(self) -> list[str]:
        T, J = self.n_classes, self.n_items
        names = [f"alpha[{c + 1}]" for c in range(T - 1)]
        names += [f"tau[{k + 1}]" for k in range(J)]
        names += [f"lambda[{k + 1},{c + 1}]" for c in range(T - 1) for k in range(J)]
        names += [f"psi[{j},{k}]" for j, k in self.pairs]
        return names

    # -- derived specs ----------------------------------------------------
    def with_deps(self, free_deps: Iterable[Sequence[int]]) -> "ModelSpec":
        deps = tuple(normalize_pair(p) for p in free_deps)
        fixed = tuple((p, v) for p, v in self.fixed_psi if p not in deps)
        return ModelSpec(self.n_items, self.n_classes, self.coding, deps, fixed)

    def independence(self) -> "ModelSpec":
        return ModelSpec(self.n_items, self.n_classes, self.coding)

    def to_dict(self) -> dict:
        return {"n_items": self.n_items, "n_classes": self.n_classes, "coding": self.coding,
                "free_deps": [list(p) for p in self.free_deps],
                "fixed_psi": [[list(p), v] for p, v in self.fixed_psi]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        return cls(int(d["n_items"]), int(d["n_classes"]), d.get("coding", "effect"),
                   tuple(tuple(p) for p in d.get("free_deps", ())),
                   tuple((tuple(p), float(v)) for p, v in d.get("fixed_psi", ())))


def class_contrasts(n_classes: int, coding: str) -> np.ndarray:
    """T x (T-1) class design.

    Effect coding uses sum-to-zero contrasts with class T loaded -1 on every
    column; dummy coding uses indicators with class T as reference.
    """
    T = n_classes
    A = np.zeros((T, max(T - 1, 0)))
    A[: T - 1, :] = np.eye(T - 1)
    if coding == "effect":
        A[T - 1, :] = -1.0
    return A


def split_class_effects(values: np.ndarray, coding: str) -> tuple[np.ndarray, np.ndarray]:
    """Decompose class-specific values (T, ...) into an overall part and T-1 contrasts.

    Inverse of ``overall + class_contrasts @ contrasts``.
    """
    values = np.asarray(values, dtype=float)
    overall = values.mean(axis=0) if coding == "effect" else values[-1]
    return overall, (values - overall)[:-1]


@dataclass(frozen=True)
class DesignMatrices:
    """Design matrices for one model specification.

    Attributes
    ----------
    X_Y : (R, J) item main-effect columns.
    X_YY : (R, C(J,2)) pairwise product columns in lexicographic pair order.
    X_alpha : (T, T-1) class design, also used as the class factor of lambda.
    """

    spec: ModelSpec
    table: PatternTable
    X_Y: np.ndarray
    X_YY: np.ndarray
    X_alpha: np.ndarray

    def X_Yxi(self, t: int) -> np.ndarray:
        """(R, J*(T-1)) lambda design for class ``t`` (0-based), contrast-major."""
        return np.hstack([self.X_Y * self.X_alpha[t, c] for c in range(self.X_alpha.shape[1])]) \
            if self.X_alpha.shape[1] else np.zeros((self.X_Y.shape[0], 0))

    def pair_column(self, pair: Sequence[int]) -> np.ndarray:
        return self.X_YY[:, self.spec.psi_index(pair) - self.spec.blocks["psi"].start]


def item_codes(responses: np.ndarray, coding: str) -> np.ndarray:
    y = np.asarray(responses, dtype=float)
    return 2.0 * y - 1.0 if coding == "effect" else y


@lru_cache(maxsize=64)
def build_design(spec: ModelSpec) -> DesignMatrices:
    """Build (and cache) the design matrices for ``spec``."""
    table = enumerate_patterns(spec.n_items)
    X_Y = item_codes(table.patterns, spec.coding)
    if spec.n_pairs:
        j, k = np.array(spec.pairs).T - 1
        X_YY = X_Y[:, j] * X_Y[:, k]
    else:
        X_YY = np.zeros((table.n_patterns, 0))
    X_alpha = class_contrasts(spec.n_classes, spec.coding)
    for a in (X_Y, X_YY, X_alpha):
        a.flags.writeable = False
    return DesignMatrices(spec, table, X_Y, X_YY, X_alpha)


class ParamVector:
    """Full parameter vector for a :class:`ModelSpec`.

    Fixed psi entries always hold their fixed values; :meth:`with_free`
    replaces the free subvector only.
    """

    __slots__ = ("spec", "values")

    def __init__(self, spec: ModelSpec, values: Sequence[float] | None = None):
        self.spec = spec
        if values is None:
            v = np.zeros(spec.n_full)
        else:
            v = np.array(values, dtype=float)
            if v.shape != (spec.n_full,):
                raise ValueError(f"expected {spec.n_full} parameters, got shape {v.shape}")
        for p, val in spec.fixed_psi:
            v[spec.psi_index(p)] = val
        self.values = v

    @classmethod
    def from_blocks(cls, spec: ModelSpec, alpha=None, tau=None, lam=None, psi=None) -> "ParamVector":
        """Assemble from blocks. ``lam`` may be (T-1, J), flat, or a scalar; ``psi`` may be a dict of pairs."""
        v = np.zeros(spec.n_full)
        b = spec.blocks
        if alpha is not None:
            v[b["alpha"]] = np.broadcast_to(np.asarray(alpha, float), (spec.n_classes - 1,))
        if tau is not None:
            v[b["tau"]] = np.broadcast_to(np.asarray(tau, float), (spec.n_items,))
        if lam is not None:
            n = b["lambda"].stop - b["lambda"].start
            v[b["lambda"]] = np.broadcast_to(np.asarray(lam, float).ravel() if np.ndim(lam) > 1
                                             else np.asarray(lam, float), (n,))
        if psi is not None:
            if isinstance(psi, Mapping):
                for p, val in psi.items():
                    v[spec.psi_index(p)] = val
            else:
                v[b["psi"]] = psi
        return cls(spec, v)

    @property
    def alpha(self) -> np.ndarray:
        return self.values[self.spec.blocks["alpha"]]

    @property
    def tau(self) -> np.ndarray:
        return self.values[self.spec.blocks["tau"]]

    @property
    def lam(self) -> np.ndarray:
        """(T-1, J) view of lambda."""
        return self.values[self.spec.blocks["lambda"]].reshape(self.spec.n_classes - 1, self.spec.n_items)

    @property
    def psi(self) -> np.ndarray:
        return self.values[self.spec.blocks["psi"]]

    @property
    def free(self) -> np.ndarray:
        return self.values[self.spec.free_index]

    @property
    def fixed(self) -> np.ndarray:
        return self.values[~self.spec.free_mask]

    def with_free(self, free: Sequence[float]) -> "ParamVector":
        v = self.values.copy()
        v[self.spec.free_index] = free
        return ParamVector(self.spec, v)

    def with_values(self, index: Sequence[int], values: Sequence[float]) -> "ParamVector":
        """Copy with arbitrary entries replaced (fixed psi entries may be set too)."""
        v = self.values.copy()
        v[np.asarray(index, dtype=int)] = values
        out = ParamVector.__new__(ParamVector)
        out.spec, out.values = self.spec, v
        return out

    def respec(self, spec: ModelSpec) -> "ParamVector":
        """Same values under a spec with the same layout but different free/fixed psi."""
        if spec.n_full != self.spec.n_full:
            raise ValueError("layouts differ")
        v = self.values.copy()
        out = ParamVector.__new__(ParamVector)
        out.spec, out.values = spec, v
        return out

    def class_logits(self) -> np.ndarray:
        return class_contrasts(self.spec.n_classes, self.spec.coding) @ self.alpha

    def item_class_effects(self) -> np.ndarray:
        """(T, J) array of tau + class-specific lambda effect per item."""
        A = class_contrasts(self.spec.n_classes, self.spec.coding)
        return self.tau[None, :] + A @ self.lam

    def permute_classes(self, order: Sequence[int]) -> "ParamVector":
        """Relabel classes so that new class ``i`` is old class ``order[i]``."""
        order = np.asarray(order, dtype=int)
        coding = self.spec.coding
        _, alpha = split_class_effects(self.class_logits()[order], coding)
        tau, lam = split_class_effects(self.item_class_effects()[order], coding)
        return ParamVector.from_blocks(self.spec, alpha=alpha, tau=tau, lam=lam, psi=self.psi)

    def copy(self) -> "ParamVector":
        return self.respec(self.spec)

    def __repr__(self) -> str:
        return f"ParamVector({self.spec.n_items} items, {self.spec.n_classes} classes, values={self.values!r})"


def linear_predictor(theta: ParamVector, design: DesignMatrices, t: int) -> np.ndarray:
    """Loglinear predictor eta_t over all R patterns for class ``t`` (0-based)."""
    spec = theta.spec
    if design.X_Y.shape[1] != spec.n_items or design.X_alpha.shape[0] != spec.n_classes:
        raise ValueError("parameter vector and design matrices do not match")
    effects = theta.tau + design.X_alpha[t] @ theta.lam if spec.n_classes > 1 else theta.tau
    return design.X_Y @ effects + design.X_YY @ theta.psi
