"""Regression bases for conditional-expectation estimates along paths.

Features are built from the scalar pairing X = <g, Z>, the transported
terminal pairing phi = <g, E^(N-k) Z> and optionally the leading lift
coordinates.  The transport feature matters: for shift lifts <g, nu> = 0,
so polynomials in X alone have zero directional derivative along the
injection and would blind every gradient-based consumer; phi carries the
exact kernel sensitivity <g, E^(N-k) nu> = K((N-k) dt) instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

AUTO_RIDGE_SCALE = 1e-8
COND_RIDGE_TRIGGER = 1e8


@dataclass(frozen=True)
class RegressionBasis:
    """Feature set plus ridge setting.

    ``terms`` is a tuple drawn from {"1", "x", "x^2", "x^3", "phi",
    "phi^2", "x*phi", "z0", "z1", ...}.  ``ridge`` is a coefficient or
    "auto" (trace-normalized 1e-8, also forced on whenever the design
    matrix condition number exceeds 1e8).
    """

    terms: tuple
    ridge: object = "auto"

    @property
    def size(self) -> int:
        return len(self.terms)

    @property
    def n_coords(self) -> int:
        return sum(1 for t in self.terms if t.startswith("z"))

    def describe(self) -> str:
        return "+".join(self.terms) + f"|ridge={self.ridge}"


_CATALOG = {
    "poly3": ("1", "x", "x^2", "x^3"),
    "poly3_transport": ("1", "x", "x^2", "x^3", "phi", "phi^2", "x*phi"),
    "poly2_transport": ("1", "x", "x^2", "phi", "phi^2", "x*phi"),
}


def parse_basis(spec: str, ridge="auto") -> RegressionBasis:
    """Named basis, optionally extended with leading coordinates.

    ``"poly3_transport+z4"`` appends the 4 leading lift coordinates.
    """
    name, _, coords = spec.partition("+z")
    if name not in _CATALOG:
        raise ValueError(f"unknown basis {name!r} (catalog: {sorted(_CATALOG)})")
    terms = _CATALOG[name]
    if coords:
        terms = terms + tuple(f"z{i}" for i in range(int(coords)))
    return RegressionBasis(terms=terms, ridge=ridge)


def build_features(basis: RegressionBasis, x, phi=None, zlead=None) -> np.ndarray:
    """Design matrix for states given as (x, phi[, leading coords])."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    cols = []
    for term in basis.terms:
        if term == "1":
            cols.append(np.ones_like(x))
        elif term == "x":
            cols.append(x)
        elif term == "x^2":
            cols.append(x * x)
        elif term == "x^3":
            cols.append(x * x * x)
        elif term == "phi":
            _need(phi, term)
            cols.append(np.asarray(phi, dtype=float))
        elif term == "phi^2":
            _need(phi, term)
            p = np.asarray(phi, dtype=float)
            cols.append(p * p)
        elif term == "x*phi":
            _need(phi, term)
            cols.append(x * np.asarray(phi, dtype=float))
        elif term.startswith("z"):
            _need(zlead, term)
            j = int(term[1:])
            cols.append(np.asarray(zlead, dtype=float)[..., j])
        else:
            raise ValueError(f"unknown basis term {term!r}")
    return np.column_stack(cols)


def _need(value, term):
    if value is None:
        raise ValueError(f"basis term {term!r} needs data the ensemble did not store")


@dataclass(frozen=True)
class FitResult:
    coeffs: np.ndarray
    cond: float
    r2: float
    ridge: float


def fit_least_squares(A: np.ndarray, y: np.ndarray, ridge="auto") -> FitResult:
    """OLS with optional trace-normalized ridge; intercept unpenalized.

    Rank-deficient designs (e.g. the shared-initial-state step where every
    feature is constant) are handled by SVD when ridge is zero and by the
    regularized normal equations otherwise.
    """
    A = np.asarray(A, dtype=float)
    y = np.asarray(y, dtype=float)
    gram = A.T @ A
    eig = np.linalg.eigvalsh(gram)
    cond = float(math.sqrt(max(eig[-1], 0.0) / max(eig[0], 1e-300))) if eig[0] > 0 else math.inf
    lam = 0.0 if ridge is None else ridge
    if lam == "auto" or (lam == 0.0 and cond > COND_RIDGE_TRIGGER):
        lam = AUTO_RIDGE_SCALE * float(np.mean(np.diag(gram)))
    if lam > 0.0:
        penalty = lam * np.ones(A.shape[1])
        for j in range(A.shape[1]):
            if np.all(A[:, j] == A[0, j]):
                penalty[j] = 0.0  # first constant column acts as the intercept
                break
        try:
            coeffs = np.linalg.solve(gram + np.diag(penalty), A.T @ y)
        except np.linalg.LinAlgError:
            coeffs, *_ = np.linalg.lstsq(A, y, rcond=None)
    else:
        coeffs, *_ = np.linalg.lstsq(A, y, rcond=None)
    pred = A @ coeffs
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - np.mean(y)) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0.0 else 1.0
    return FitResult(coeffs=coeffs, cond=cond, r2=r2, ridge=float(lam))
