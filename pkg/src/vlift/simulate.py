"""Forward simulation of controlled Volterra dynamics.

Two schemes share one Brownian grid:

* ``simulate_direct``: left-point Euler on the scalar convolution
  X_k = x0(t_k) + sum_{j<k} K((k-j) dt) * [beta_j + sigma_j R_j] dt
      + sum_{j<k} K((k-j) dt) * sigma_j dW_j,
  cost O(n_steps^2) per path.  It is the ground-truth oracle and is kept
  un-truncated on purpose.

* ``simulate_lifted``: exponential-Euler mild scheme on the lifted state,
  Z_{k+1} = E (Z_k + nu * [beta_k + sigma_k R_k] dt + nu * sigma_k dW_k),
  cost O(n_steps * state_dim) per path.  E is applied after the increment
  so the recursion telescopes to the direct convolution at grid lags; for
  grid-exact lifts the two schemes agree pathwise to roundoff.

Both simulators also carry the transported terminal pairing
phi_k = <g, E^(N-k) Z_k>, updated incrementally; it is the natural extra
state summary consumed by the regression bases downstream.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .lift import DiscreteLift

# Named substream ids: all randomness flows from one seed through these.
STREAM_PATHS = 1
STREAM_POLICY = 2
STREAM_SAMPLER = 3

# A path is flagged when a coefficient or state goes non-finite; the
# ensemble aborts when more than this fraction of paths is flagged.
MAX_FLAGGED_FRACTION = 1e-3


class SimulationAbort(RuntimeError):
    """Too many paths hit non-finite states."""


def substream(seed: int, *ids: int) -> np.random.Generator:
    """Deterministic generator for a named substream of the master seed."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *ids])))


@dataclass
class BrownianGrid:
    """Time grid plus N(0, dt) increments with per-path substreams.

    Increments are drawn per path from ``SeedSequence([seed, STREAM_PATHS,
    path_index])`` so that path i's noise does not depend on n_paths and
    regeneration with the same seed is bit-exact.
    """

    t0: float
    T: float
    n_steps: int
    n_paths: int
    seed: int
    increments: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.n_steps < 1 or self.n_paths < 1:
            raise ValueError("n_steps and n_paths must be positive")
        if self.T <= self.t0:
            raise ValueError("T must exceed t0")
        if self.increments is None:
            self.increments = _draw_increments(self.seed, self.n_paths, self.n_steps, self.dt)

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)


def _draw_increments(seed: int, n_paths: int, n_steps: int, dt: float) -> np.ndarray:
    out = np.empty((n_paths, n_steps))
    sqdt = np.sqrt(dt)
    for i in range(n_paths):
        rng = substream(seed, STREAM_PATHS, i)
        out[i] = rng.standard_normal(n_steps) * sqdt
    return out


@dataclass
class VolterraCoefficients:
    """Drift and volatility maps for the scalar Volterra state.

    ``beta`` and ``sigma`` map (t, x) -> real and must accept ndarray x.
    ``x0`` is the initial curve t -> real.  Analytic x-derivatives are
    optional; a central finite difference with step 1e-6*(1+|x|) is the
    fallback used by the tangent machinery.
    """

    beta: Callable
    sigma: Callable
    x0: Callable[[float], float]
    dbeta_dx: Optional[Callable] = None
    dsigma_dx: Optional[Callable] = None
    lipschitz_hint: Optional[float] = None

    def beta_dx(self, t, x):
        if self.dbeta_dx is not None:
            return self.dbeta_dx(t, x)
        return _fd_x(self.beta, t, x)

    def sigma_dx(self, t, x):
        if self.dsigma_dx is not None:
            return self.dsigma_dx(t, x)
        return _fd_x(self.sigma, t, x)

    def linear_growth_probe(self, x_lo=-10.0, x_hi=10.0, t_hi=1.0, n=41) -> float:
        """max |beta(t,x)| / (1+|x|) on a probe box (advisory)."""
        xs = np.linspace(x_lo, x_hi, n)
        worst = 0.0
        for t in np.linspace(0.0, t_hi, 9):
            worst = max(worst, float(np.max(np.abs(self.beta(t, xs)) / (1.0 + np.abs(xs)))))
        return worst


def _fd_x(f, t, x, rel_step=1e-6):
    h = rel_step * (1.0 + np.abs(x))
    val = (np.asarray(f(t, x + h)) - np.asarray(f(t, x - h))) / (2.0 * h)
    if not np.all(np.isfinite(val)):
        raise FloatingPointError("non-finite derivative probe")
    return val


@dataclass
class PathEnsemble:
    """Simulated trajectories on a shared Brownian grid.

    ``X`` holds the scalar states, ``phi`` the transported terminal
    pairings (lifted scheme), ``Z`` the optional full lifted states and
    ``control_trace`` the applied controls.  ``flagged`` lists paths that
    hit non-finite values (kept as NaN rows).
    """

    grid: BrownianGrid
    X: np.ndarray
    scheme: str
    phi: Optional[np.ndarray] = None
    Z: Optional[np.ndarray] = None
    control_trace: Optional[np.ndarray] = None
    norms: Optional[dict] = None
    zeta0: Optional[np.ndarray] = None
    flagged: tuple = ()
    meta: dict = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return self.X.shape[0]


def _apply_policy(policy, k, t, x, phi):
    u = policy(k, t, x, phi)
    return np.broadcast_to(np.asarray(u, dtype=float), x.shape)


def simulate_direct(
    coeffs: VolterraCoefficients,
    kernel_grid: np.ndarray,
    grid: BrownianGrid,
    r_map: Optional[Callable] = None,
    policy: Optional[Callable] = None,
) -> PathEnsemble:
    """Left-point Euler on the direct convolution (O(n_steps^2) per path).

    ``kernel_grid[m]`` must hold K(m*dt) for m = 0..n_steps.  ``policy`` is
    a map (k, t, x, phi) -> u evaluated path-by-path (phi is None here);
    ``r_map`` is the bounded controlled-drift map (t, x, u) -> real.
    """
    kernel_grid = np.asarray(kernel_grid, dtype=float)
    if kernel_grid.shape[0] < grid.n_steps + 1:
        raise ValueError("kernel_grid must cover lags 0..n_steps")
    n, m = grid.n_steps, grid.n_paths
    dt, times = grid.dt, grid.times
    X = np.empty((m, n + 1))
    X[:, 0] = coeffs.x0(times[0])
    d = np.zeros((m, n))
    trace = np.empty((m, n)) if policy is not None else None
    alive = np.ones(m, dtype=bool)
    for k in range(n):
        x = X[:, k]
        u = _apply_policy(policy, k, times[k], x, None) if policy is not None else None
        if trace is not None:
            trace[:, k] = u
        b = np.broadcast_to(np.asarray(coeffs.beta(times[k], x), dtype=float), x.shape)
        s = np.broadcast_to(np.asarray(coeffs.sigma(times[k], x), dtype=float), x.shape)
        drift = b.copy()
        if r_map is not None:
            drift = drift + s * np.broadcast_to(np.asarray(r_map(times[k], x, u), dtype=float), x.shape)
        d[:, k] = drift * dt + s * grid.increments[:, k]
        X[:, k + 1] = coeffs.x0(times[k + 1]) + d[:, : k + 1] @ kernel_grid[1: k + 2][::-1]
        bad = ~np.isfinite(X[:, k + 1])
        if bad.any():
            alive &= ~bad
            X[bad, k + 1:] = np.nan
            d[bad, :] = 0.0
    flagged = tuple(np.flatnonzero(~alive))
    if len(flagged) > MAX_FLAGGED_FRACTION * m:
        raise SimulationAbort(f"{len(flagged)}/{m} paths went non-finite")
    return PathEnsemble(
        grid=grid, X=X, scheme="direct", control_trace=trace, flagged=flagged,
        meta={"kernel_grid": kernel_grid[: n + 1].copy()},
    )


def simulate_lifted(
    coeffs: VolterraCoefficients,
    lift: DiscreteLift,
    grid: BrownianGrid,
    zeta0: np.ndarray,
    r_map: Optional[Callable] = None,
    policy: Optional[Callable] = None,
    store_z: bool = False,
    store_norms: bool = False,
) -> PathEnsemble:
    """Exponential-Euler mild scheme on the lifted state.

    ``zeta0`` must satisfy <g, E^k zeta0> = x0(t_k) on the grid (see
    :meth:`DiscreteLift.embed_initial_curve`).  The policy map receives the
    transported pairing phi alongside x, enabling feedback laws.
    """
    zeta0 = np.asarray(zeta0, dtype=float)
    if zeta0.shape != (lift.state_dim,):
        raise ValueError(f"zeta0 has shape {zeta0.shape}, lift expects ({lift.state_dim},)")
    if lift.kind == "shift":
        if abs(grid.dt - lift.dt) > 1e-12 * max(1.0, lift.dt):
            raise ValueError("grid dt must equal shift-lift dt for grid-exact stepping")
        if grid.n_steps > lift.dim:
            raise ValueError("simulation window exceeds the lift horizon")
    n, m = grid.n_steps, grid.n_paths
    dt, times = grid.dt, grid.times
    khat = lift.kernel_grid(n)
    dim = lift.dim

    Zc = np.tile(zeta0, (m, 1))
    X = np.empty((m, n + 1))
    phi = np.empty((m, n + 1))
    X[:, 0] = lift.pair(zeta0)
    phi[:, 0] = lift.pair_after_steps(n, zeta0)
    Zfull = np.empty((m, n + 1, lift.state_dim)) if store_z else None
    if store_z:
        Zfull[:, 0, :] = Zc
    norms = None
    if store_norms:
        norms = {
            "inf": np.full(m, float(np.max(np.abs(zeta0)))),
            "two": np.full(m, float(np.linalg.norm(zeta0))),
        }
    trace = np.empty((m, n)) if policy is not None else None
    alive = np.ones(m, dtype=bool)
    for k in range(n):
        x = X[:, k]
        u = _apply_policy(policy, k, times[k], x, phi[:, k]) if policy is not None else None
        if trace is not None:
            trace[:, k] = u
        b = np.broadcast_to(np.asarray(coeffs.beta(times[k], x), dtype=float), x.shape)
        s = np.broadcast_to(np.asarray(coeffs.sigma(times[k], x), dtype=float), x.shape)
        drift = b.copy()
        if r_map is not None:
            drift = drift + s * np.broadcast_to(np.asarray(r_map(times[k], x, u), dtype=float), x.shape)
        d = drift * dt + s * grid.increments[:, k]
        bad = ~np.isfinite(d)
        if bad.any():
            alive &= ~bad
            d = np.where(bad, 0.0, d)
        if lift.kind == "shift":
            Zc[:, :dim] += d[:, None] * lift.nu_vec
            Zc = np.concatenate([np.zeros((m, 1)), Zc[:, :-1]], axis=1)
        else:
            Zc = (Zc + d[:, None] * lift.nu_vec) * lift.multipliers
        X[:, k + 1] = lift.pair(Zc)
        phi[:, k + 1] = phi[:, k] + khat[n - k] * d
        if store_z:
            Zfull[:, k + 1, :] = Zc
        if store_norms:
            np.maximum(norms["inf"], np.max(np.abs(Zc), axis=1), out=norms["inf"])
            np.maximum(norms["two"], np.linalg.norm(Zc, axis=1), out=norms["two"])
    X[~alive, :] = np.nan
    flagged = tuple(np.flatnonzero(~alive))
    if len(flagged) > MAX_FLAGGED_FRACTION * m:
        raise SimulationAbort(f"{len(flagged)}/{m} paths went non-finite")
    return PathEnsemble(
        grid=grid, X=X, scheme="lifted", phi=phi, Z=Zfull, control_trace=trace,
        norms=norms, zeta0=zeta0, flagged=flagged, meta={"khat": khat},
    )


def pair(lift: DiscreteLift, z_state: np.ndarray) -> np.ndarray:
    """Duality pairing <g, Z> of a lifted state."""
    return lift.pair(z_state)


def tangent_process(
    coeffs: VolterraCoefficients,
    lift: DiscreteLift,
    grid: BrownianGrid,
    zeta0: np.ndarray,
    h: np.ndarray,
    path_index: int = 0,
    start_index: int = 0,
) -> np.ndarray:
    """Directional derivative of the lifted flow along a frozen noise path.

    Returns H of shape (n_steps+1, state_dim) with H_k = h for
    k <= start_index and, for k >= start_index,

        H_{k+1} = E (H_k + nu * [dbeta + dsigma dW_k] <g, H_k>)

    evaluated along the base path started at ``zeta0`` (uncontrolled
    forward: the tangent machinery is defined for the FBSDE dynamics).
    """
    h = np.asarray(h, dtype=float)
    if h.shape != (lift.state_dim,):
        raise ValueError(f"h has shape {h.shape}, lift expects ({lift.state_dim},)")
    n = grid.n_steps
    dt, times = grid.dt, grid.times
    dW = grid.increments[path_index]
    nu_state = lift.injection_state()

    # Base path (scalar pairing is all the recursion needs).
    base = simulate_lifted(
        coeffs, lift, BrownianGrid(grid.t0, grid.T, n, 1, grid.seed,
                                   increments=dW[None, :]), zeta0,
    )
    x_base = base.X[0]

    H = np.empty((n + 1, lift.state_dim))
    H[: start_index + 1] = h
    Hk = h.copy()
    for k in range(start_index, n):
        xk = x_base[k]
        gh = float(lift.pair(Hk))
        db = float(coeffs.beta_dx(times[k], xk))
        ds = float(coeffs.sigma_dx(times[k], xk))
        Hk = lift.step(Hk + nu_state * ((db * dt + ds * dW[k]) * gh))
        H[k + 1] = Hk
    return H


def malliavin_bump_check(
    coeffs: VolterraCoefficients,
    lift: DiscreteLift,
    grid: BrownianGrid,
    zeta0: np.ndarray,
    path_index: int,
    s_index: int,
    tau_index: int,
    bump: float = 1e-5,
):
    """Noise-bump derivative vs tangent-process prediction at (s, tau).

    bump_derivative = (Z_tau(dW_s + eps) - Z_tau(dW_s)) / eps with the
    noise otherwise frozen; tangent_prediction is the tangent process
    started at s with h = nu * sigma(t_s, X_s).  Returns the two state
    vectors and their relative gap in the Euclidean norm.
    """
    if not (0 <= s_index < tau_index <= grid.n_steps):
        raise IndexError("need 0 <= s_index < tau_index <= n_steps")
    dW = grid.increments[path_index]

    def run(increments):
        g1 = BrownianGrid(grid.t0, grid.T, grid.n_steps, 1, grid.seed,
                          increments=increments[None, :])
        return simulate_lifted(coeffs, lift, g1, zeta0, store_z=True)

    base = run(dW)
    dW_bumped = dW.copy()
    dW_bumped[s_index] += bump
    bumped = run(dW_bumped)
    bump_derivative = (bumped.Z[0, tau_index] - base.Z[0, tau_index]) / bump

    x_s = base.X[0, s_index]
    sigma_s = float(np.asarray(coeffs.sigma(grid.times[s_index], x_s)))
    h = lift.injection_state() * sigma_s
    H = tangent_process(coeffs, lift, grid, zeta0, h,
                        path_index=path_index, start_index=s_index)
    tangent_prediction = H[tau_index]
    rel_error = float(
        np.linalg.norm(bump_derivative - tangent_prediction)
        / max(np.linalg.norm(tangent_prediction), 1e-12)
    )
    return bump_derivative, tangent_prediction, rel_error


def moment_diagnostic(
    coeffs: VolterraCoefficients,
    lift: DiscreteLift,
    grid: BrownianGrid,
    zeta0: np.ndarray,
    p_values=(2, 4),
    zeta_scales=(1.0, 2.0, 5.0, 10.0),
    r_map=None,
    policy=None,
):
    """Growth-estimate shadow: E[sup_k ||Z_k||^p] / (1 + ||zeta||^p).

    Resimulates on the shared grid with rescaled initial states and
    reports the ratio per (scale, norm, p); a row is flagged when the
    ratio grows more than 10x across the sweep (advisory only).
    """
    rows = []
    for scale in zeta_scales:
        ens = simulate_lifted(coeffs, lift, grid, zeta0 * scale,
                              r_map=r_map, policy=policy, store_norms=True)
        for norm_kind in ("inf", "two"):
            z0n = float(np.max(np.abs(zeta0 * scale))) if norm_kind == "inf" else float(
                np.linalg.norm(zeta0 * scale))
            for p in p_values:
                ratio = float(np.mean(ens.norms[norm_kind] ** p) / (1.0 + z0n ** p))
                rows.append({"scale": float(scale), "norm": norm_kind, "p": int(p),
                             "ratio": ratio})
    for norm_kind in ("inf", "two"):
        for p in p_values:
            vals = [r["ratio"] for r in rows if r["norm"] == norm_kind and r["p"] == p]
            spread = max(vals) / max(min(vals), 1e-300)
            for r in rows:
                if r["norm"] == norm_kind and r["p"] == p:
                    r["flagged"] = bool(spread > 10.0)
    return rows


# ---------------------------------------------------------------------------
# Serialization: CSV long format and the compact "VLFT1" binary dump.
# ---------------------------------------------------------------------------

_MAGIC = b"VLFT1"


def ensemble_to_csv(ensemble: PathEnsemble, path, include_z: bool = False) -> None:
    """Long-format dump: path_id, step, t, X [, u] [, Z coordinates]."""
    import csv as _csv

    times = ensemble.grid.times
    has_u = ensemble.control_trace is not None
    has_z = include_z and ensemble.Z is not None
    with open(path, "w", newline="") as fh:
        writer = _csv.writer(fh)
        header = ["path_id", "step", "t", "X"]
        if has_u:
            header.append("u")
        if has_z:
            header += [f"Z{j}" for j in range(ensemble.Z.shape[2])]
        writer.writerow(header)
        for i in range(ensemble.n_paths):
            for k in range(times.shape[0]):
                row = [i, k, repr(float(times[k])), repr(float(ensemble.X[i, k]))]
                if has_u:
                    row.append(repr(float(ensemble.control_trace[i, k])) if k < ensemble.grid.n_steps else "")
                if has_z:
                    row += [repr(float(v)) for v in ensemble.Z[i, k]]
                writer.writerow(row)


def save_ensemble(ensemble: PathEnsemble, path) -> None:
    """Compact binary dump (magic ``VLFT1``, little-endian doubles)."""
    grid = ensemble.grid
    z_dim = ensemble.Z.shape[2] if ensemble.Z is not None else 0
    flags = (1 if ensemble.phi is not None else 0) | (2 if ensemble.control_trace is not None else 0)
    header = np.array(
        [grid.n_paths, grid.n_steps, z_dim, flags, np.uint64(grid.seed)], dtype="<u8"
    )
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(header.tobytes())
        fh.write(np.array([grid.t0, grid.T], dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(grid.increments, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ensemble.X, dtype="<f8").tobytes())
        if ensemble.phi is not None:
            fh.write(np.ascontiguousarray(ensemble.phi, dtype="<f8").tobytes())
        if ensemble.control_trace is not None:
            fh.write(np.ascontiguousarray(ensemble.control_trace, dtype="<f8").tobytes())
        if z_dim:
            fh.write(np.ascontiguousarray(ensemble.Z, dtype="<f8").tobytes())


def load_ensemble(path) -> PathEnsemble:
    """Inverse of :func:`save_ensemble`."""
    with open(path, "rb") as fh:
        magic = fh.read(5)
        if magic != _MAGIC:
            raise ValueError(f"bad magic {magic!r}; expected {_MAGIC!r}")
        n_paths, n_steps, z_dim, flags, seed = np.frombuffer(fh.read(5 * 8), dtype="<u8")
        t0, T = np.frombuffer(fh.read(2 * 8), dtype="<f8")
        n_paths, n_steps, z_dim = int(n_paths), int(n_steps), int(z_dim)

        def block(*shape):
            count = int(np.prod(shape))
            return np.frombuffer(fh.read(count * 8), dtype="<f8").reshape(shape).copy()

        increments = block(n_paths, n_steps)
        X = block(n_paths, n_steps + 1)
        phi = block(n_paths, n_steps + 1) if flags & 1 else None
        trace = block(n_paths, n_steps) if flags & 2 else None
        Z = block(n_paths, n_steps + 1, z_dim) if z_dim else None
    grid = BrownianGrid(float(t0), float(T), n_steps, n_paths, int(seed), increments=increments)
    return PathEnsemble(grid=grid, X=X, scheme="loaded", phi=phi, Z=Z, control_trace=trace)
