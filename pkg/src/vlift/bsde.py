"""Backward SDE solver by least-squares Monte Carlo regression.

Backward induction on an uncontrolled forward ensemble estimates the pair
(p, q) of the backward equation

    p_k = E[p_{k+1} | Z_k] + H(t_k, Z_k, q_k) dt,
    q_k = E[p_{k+1} dW_k | Z_k] / dt,

with conditional expectations replaced by per-step basis regressions
(Longstaff-Schwartz style refits, fitted continuation values carried
backward).  The costate is regressed directly as the scalar coupling
q . nu, the only form in which it enters the Hamiltonian; the q-target is
centered with the fitted continuation, which leaves the conditional
expectation unchanged and cuts its variance.

The value function is v(t_k, z) = p_k(z); the terminal slice is the exact
terminal cost, never a fit.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .control import ControlProblem, hamiltonian_batch
from .lift import DiscreteLift
from .regression import RegressionBasis, build_features, fit_least_squares, parse_basis
from .simulate import STREAM_SAMPLER, PathEnsemble, substream

P_EXPLOSION_BOUND = 1e6
FD_REL_STEP = 1e-4


class RegressionExplosion(RuntimeError):
    """|p_hat| exceeded the sanity bound during backward induction."""


@dataclass
class BsdeSolution:
    """Per-timestep basis coefficients for p_hat and the coupling q_tilde.

    ``p_coeffs[k]`` and ``q_coeffs[k]`` are defined for k = 0..N-1; the
    terminal slice evaluates the terminal cost exactly.  ``value0``/``se0``
    estimate v(0, zeta0) and its Monte Carlo standard error.
    """

    problem: ControlProblem
    lift: DiscreteLift
    basis: RegressionBasis
    n_steps: int
    dt: float
    t0: float
    seed: int
    khat: np.ndarray
    p_coeffs: list
    q_coeffs: list
    diagnostics: list
    value0: float
    se0: float
    x0_pair: float
    phi0: float
    method: str = "lsmc"

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    def _features(self, x, phi, zlead=None):
        return build_features(self.basis, x, phi, zlead)

    def q_at(self, k: int, x, phi, zlead=None):
        """Fitted scalar costate coupling q_tilde_k at given states."""
        if not (0 <= k < self.n_steps):
            raise IndexError("q is defined for interior steps 0..N-1")
        return self._features(x, phi, zlead) @ self.q_coeffs[k]

    def value_at(self, k: int, x, phi=None, zlead=None):
        """Evaluate p_hat_k: fitted continuation plus the Hamiltonian term."""
        if k == self.n_steps:
            return np.asarray(self.problem.G(x), dtype=float)
        if not (0 <= k < self.n_steps):
            raise IndexError(f"step {k} outside 0..{self.n_steps}")
        feats = self._features(x, phi, zlead)
        cont = feats @ self.p_coeffs[k]
        s = feats @ self.q_coeffs[k]
        t = self.t0 + k * self.dt
        x_arr = np.atleast_1d(np.asarray(x, dtype=float))
        h_val, _ = hamiltonian_batch(self.problem, t, x_arr, s)
        return cont + h_val * self.dt

    def nu_gradient(self, k: int, x, phi=None, zlead=None):
        """Central finite difference of value_at along the injection direction."""
        return fd_nu_gradient(self, k, x, phi, zlead)


def fd_nu_gradient(value, k: int, x, phi=None, zlead=None):
    """Directional derivative of a fitted value along the injection nu.

    Central finite differences with step 1e-4 * (1 + scale); the feature
    arguments are bumped by their exact nu-sensitivities (dx = K_hat(0),
    dphi = K_hat((N-k) dt), leading coordinates by the injection entries).
    Works for any object exposing value_at, khat, n_steps, lift, basis.
    """
    x = np.asarray(x, dtype=float)
    dx = float(value.khat[0])
    dphi = float(value.khat[value.n_steps - k]) if k < value.n_steps else float(value.khat[0])
    phi_arr = None if phi is None else np.asarray(phi, dtype=float)
    eps = FD_REL_STEP * (1.0 + np.abs(x) + (np.abs(phi_arr) if phi_arr is not None else 0.0))
    dz = None
    if zlead is not None:
        zlead = np.asarray(zlead, dtype=float)
        dz = value.lift.injection_state()[: zlead.shape[-1]]
    eps_col = eps[..., None] if np.ndim(eps) else eps
    up = value.value_at(k, x + eps * dx,
                        None if phi_arr is None else phi_arr + eps * dphi,
                        None if zlead is None else zlead + eps_col * dz)
    dn = value.value_at(k, x - eps * dx,
                        None if phi_arr is None else phi_arr - eps * dphi,
                        None if zlead is None else zlead - eps_col * dz)
    return (up - dn) / (2.0 * eps)


def _leading_coords(ensemble: PathEnsemble, basis: RegressionBasis):
    if basis.n_coords == 0:
        return None
    if ensemble.Z is None:
        raise ValueError("basis uses lift coordinates but the ensemble stored no Z")
    return ensemble.Z[:, :, : basis.n_coords]


def solve_lsmc(
    ensemble: PathEnsemble,
    problem: ControlProblem,
    lift: DiscreteLift,
    basis: Optional[RegressionBasis] = None,
) -> BsdeSolution:
    """Backward regression sweep over an uncontrolled forward ensemble.

    The forward must be driverless (R == 0): pass an ensemble simulated
    without a policy.  Requires n_paths >= 10 x basis size.
    """
    if basis is None:
        basis = parse_basis("poly3_transport")
    if ensemble.control_trace is not None:
        raise ValueError("solve_lsmc needs the uncontrolled forward ensemble (R == 0)")
    if ensemble.phi is None:
        raise ValueError("ensemble lacks transported pairings; simulate with simulate_lifted")
    n, n_paths = ensemble.grid.n_steps, ensemble.n_paths
    if n_paths < 10 * basis.size:
        raise ValueError(f"need n_paths >= {10 * basis.size} for a {basis.size}-term basis")
    dt = ensemble.grid.dt
    times = ensemble.grid.times
    X, PHI, dW = ensemble.X, ensemble.phi, ensemble.grid.increments
    zlead = _leading_coords(ensemble, basis)

    g_term = np.asarray(problem.G(X[:, n]), dtype=float)
    p = g_term
    h_accum = np.zeros(n_paths)
    p_coeffs = [None] * n
    q_coeffs = [None] * n
    diagnostics = [None] * n
    for k in range(n - 1, -1, -1):
        feats = build_features(basis, X[:, k], PHI[:, k],
                               None if zlead is None else zlead[:, k])
        fit_p = fit_least_squares(feats, p, basis.ridge)
        cont = feats @ fit_p.coeffs
        resid = p - cont
        fit_q = fit_least_squares(feats, resid * dW[:, k] / dt, basis.ridge)
        q_vals = feats @ fit_q.coeffs
        h_vals, _ = hamiltonian_batch(problem, times[k], X[:, k], q_vals)
        h_accum += h_vals * dt
        p = cont + h_vals * dt
        worst = float(np.max(np.abs(p)))
        if worst > P_EXPLOSION_BOUND:
            raise RegressionExplosion(f"|p_hat| = {worst:.3e} at step {k}")
        p_coeffs[k] = fit_p.coeffs
        q_coeffs[k] = fit_q.coeffs
        diagnostics[k] = {
            "r2_p": fit_p.r2, "r2_q": fit_q.r2,
            "cond": fit_p.cond, "ridge": fit_p.ridge,
        }
    # MC error proxy for the nested estimator: spread of the raw pathwise
    # cost-to-go, not of the smoothed fitted values.
    se0 = float(np.std(g_term + h_accum, ddof=1) / math.sqrt(n_paths))
    sol = BsdeSolution(
        problem=problem, lift=lift, basis=basis, n_steps=n, dt=dt,
        t0=ensemble.grid.t0, seed=ensemble.grid.seed,
        khat=lift.kernel_grid(n), p_coeffs=p_coeffs, q_coeffs=q_coeffs,
        diagnostics=diagnostics, value0=float(np.mean(p)), se0=se0,
        x0_pair=float(X[0, 0]), phi0=float(PHI[0, 0]),
    )
    return sol


def one_step_residuals(solution: BsdeSolution, ensemble: PathEnsemble):
    """Discrete backward-equation residual per step: mean and standard error.

    E[p_{k+1} - p_k + H dt - q dW] should vanish; returns arrays of the
    sample means and their standard errors for k = 0..N-1.  The per-path
    residuals cancel the martingale increment almost exactly (the fit
    absorbed it), so the naive spread misses the dominant noise the
    coefficients inherited from the q dW sample mean; the reported SE adds
    that term back, which calibrates the statistic on the training paths.
    """
    n, n_paths = solution.n_steps, ensemble.n_paths
    dt = solution.dt
    times = solution.times
    X, PHI, dW = ensemble.X, ensemble.phi, ensemble.grid.increments
    zlead = _leading_coords(ensemble, solution.basis)
    means = np.empty(n)
    ses = np.empty(n)
    for k in range(n):
        zl = None if zlead is None else zlead[:, k]
        zl1 = None if zlead is None else zlead[:, k + 1]
        p_next = solution.value_at(k + 1, X[:, k + 1], PHI[:, k + 1], zl1)
        p_here = solution.value_at(k, X[:, k], PHI[:, k], zl)
        q_here = solution.q_at(k, X[:, k], PHI[:, k], zl)
        h_here, _ = hamiltonian_batch(solution.problem, times[k], X[:, k], q_here)
        resid = p_next - p_here + h_here * dt - q_here * dW[:, k]
        means[k] = float(np.mean(resid))
        var_resid = float(np.var(resid, ddof=1))
        var_mart = float(np.var(q_here * dW[:, k], ddof=1))
        ses[k] = math.sqrt((var_resid + var_mart) / n_paths)
    return means, ses


def identification_check(
    solution: BsdeSolution,
    ensemble: PathEnsemble,
    lift: Optional[DiscreteLift] = None,
    problem: Optional[ControlProblem] = None,
    n_samples: int = 4000,
    seed: Optional[int] = None,
):
    """Costate identification: q_tilde vs grad_nu(v_hat) * sigma.

    Samples interior (step, path) pairs, compares the regressed coupling
    against the finite-difference directional derivative of the fitted
    value scaled by the volatility, and reports the median and 90th
    percentile relative error.
    """
    problem = problem or solution.problem
    lift = lift or solution.lift
    n = solution.n_steps
    k_lo, k_hi = max(1, math.ceil(0.1 * n)), math.floor(0.9 * n)
    rng = substream(seed if seed is not None else solution.seed, STREAM_SAMPLER)
    ks = rng.integers(k_lo, k_hi + 1, size=n_samples)
    paths = rng.integers(0, ensemble.n_paths, size=n_samples)
    zlead = _leading_coords(ensemble, solution.basis)
    times = solution.times
    rel = np.empty(n_samples)
    for i in range(n_samples):
        k, p_idx = int(ks[i]), int(paths[i])
        x = ensemble.X[p_idx, k]
        phi = ensemble.phi[p_idx, k]
        zl = None if zlead is None else zlead[p_idx, k]
        q_reg = float(np.asarray(solution.q_at(k, x, phi, zl)).flat[0])
        grad = float(np.asarray(solution.nu_gradient(k, x, phi, zl)).flat[0])
        sig = float(np.asarray(problem.coeffs.sigma(times[k], x)))
        q_id = grad * sig
        if abs(q_reg) < 1e-10 and abs(q_id) < 1e-10:
            rel[i] = 0.0
        else:
            rel[i] = abs(q_id - q_reg) / max(abs(q_reg), 1e-12)
    return {
        "median": float(np.median(rel)),
        "p90": float(np.quantile(rel, 0.9)),
        "n_samples": int(n_samples),
        "k_range": (k_lo, k_hi),
    }


# ---------------------------------------------------------------------------
# Persistence: versioned CSV bundle, one file per timestep plus a manifest.
# ---------------------------------------------------------------------------

BUNDLE_FORMAT = "vlift-bundle-1"


def save_solution(solution, out_dir) -> None:
    """Write the coefficient bundle; reloadable without resimulation."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    is_bsde = solution.method == "lsmc"
    with open(out / "manifest.txt", "w") as fh:
        fh.write(f"format: {BUNDLE_FORMAT}\n")
        fh.write(f"method: {solution.method}\n")
        fh.write(f"problem: {solution.problem.name}\n")
        fh.write(f"kernel: {solution.problem.kernel.name}\n")
        fh.write(f"n_steps: {solution.n_steps}\n")
        fh.write(f"dt: {solution.dt!r}\n")
        fh.write(f"t0: {solution.t0!r}\n")
        fh.write(f"seed: {solution.seed}\n")
        fh.write(f"basis: {solution.basis.describe()}\n")
        fh.write(f"value0: {solution.value0!r}\n")
        fh.write(f"se0: {solution.se0!r}\n")
        fh.write(f"x0_pair: {solution.x0_pair!r}\n")
        fh.write(f"phi0: {solution.phi0!r}\n")
    for k in range(solution.n_steps):
        with open(out / f"step_{k:04d}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            if is_bsde:
                writer.writerow(["term", "p_coeff", "q_coeff"])
                for term, cp, cq in zip(solution.basis.terms,
                                        solution.p_coeffs[k], solution.q_coeffs[k]):
                    writer.writerow([term, repr(float(cp)), repr(float(cq))])
            else:
                writer.writerow(["term", "w_coeff"])
                for term, cw in zip(solution.basis.terms, solution.w_coeffs[k]):
                    writer.writerow([term, repr(float(cw))])


def load_manifest(out_dir) -> dict:
    meta = {}
    for line in (Path(out_dir) / "manifest.txt").read_text().splitlines():
        key, _, value = line.partition(":")
        meta[key.strip()] = value.strip()
    return meta


def load_solution(out_dir, problem: ControlProblem, lift: DiscreteLift) -> BsdeSolution:
    """Rebuild a :class:`BsdeSolution` from a saved bundle."""
    out = Path(out_dir)
    meta = load_manifest(out)
    if meta["format"] != BUNDLE_FORMAT:
        raise ValueError(f"unsupported bundle format {meta['format']!r}")
    if meta["method"] != "lsmc":
        raise ValueError("bundle holds a picard value function; use hjb.load_value_function")
    n = int(meta["n_steps"])
    basis_spec, _, ridge = meta["basis"].partition("|ridge=")
    terms = tuple(basis_spec.split("+"))
    basis = RegressionBasis(terms=terms, ridge="auto" if ridge == "auto" else float(ridge))
    p_coeffs, q_coeffs = [], []
    for k in range(n):
        rows = list(csv.reader(open(out / f"step_{k:04d}.csv")))
        p_coeffs.append(np.array([float(r[1]) for r in rows[1:]]))
        q_coeffs.append(np.array([float(r[2]) for r in rows[1:]]))
    return BsdeSolution(
        problem=problem, lift=lift, basis=basis, n_steps=n,
        dt=float(meta["dt"]), t0=float(meta["t0"]), seed=int(meta["seed"]),
        khat=lift.kernel_grid(n), p_coeffs=p_coeffs, q_coeffs=q_coeffs,
        diagnostics=[{} for _ in range(n)],
        value0=float(meta["value0"]), se0=float(meta["se0"]),
        x0_pair=float(meta["x0_pair"]), phi0=float(meta["phi0"]),
    )
