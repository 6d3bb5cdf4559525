"""Control problems, lifted costs and the Hamiltonian.

The control enters the dynamics only through the bounded drift load R and
the cost only through F, so the whole optimization reduces to the
pointwise Hamiltonian

    H(t, z, xi) = inf_{u in U} [ F^g(t, z, u) + (xi . nu) R^g(t, z, u) ],

where the costate xi couples to the state through the scalar xi . nu.
Minimization uses a closed form when F is quadratic and R affine in u
(all catalog problems), otherwise a 257-point grid scan refined by
golden-section search.  The measurable selection Gamma_0 is pinned to the
smallest minimizer, which makes every downstream policy reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .kernels import Kernel, laplace_kernel, sqrt_kernel
from .lift import DiscreteLift
from .simulate import STREAM_POLICY, PathEnsemble, VolterraCoefficients, substream

GRID_POINTS = 257
U_TOL = 1e-8          # golden-section refinement tolerance in u
VALUE_TOL = 1e-9      # probes within this of the infimum join the argmin set
DEFAULT_K_R = 10.0


@dataclass(frozen=True)
class QuadraticControlStructure:
    """phi(u) = qa u^2 + (qb + s ra) u + s rb + const: closed-form argmin data.

    Coefficients are constants in u with no state dependence; the clamp on
    R must be inactive on U for the closed form to be valid (checked at
    problem construction).
    """

    qa: float
    qb: float = 0.0
    ra: float = 1.0
    rb: float = 0.0


@dataclass
class ControlProblem:
    """Costs, control interval and bounded controlled drift.

    ``r_raw`` is hard-clamped to [-K_R, K_R] before it ever reaches the
    dynamics or the Hamiltonian.  ``quad`` enables the closed-form
    Hamiltonian branch.  U must be a nonempty bounded interval; unbounded
    control sets are rejected because the minimizer set could be empty.
    """

    name: str
    kernel: Kernel
    coeffs: VolterraCoefficients
    r_raw: Callable
    F: Callable
    G: Callable
    u_lo: float
    u_hi: float
    K_R: float = DEFAULT_K_R
    a1: Optional[float] = None
    a2: Optional[float] = None
    quad: Optional[QuadraticControlStructure] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (math.isfinite(self.u_lo) and math.isfinite(self.u_hi)):
            raise ValueError("U must be a bounded interval (unbounded sets rejected)")
        if self.u_lo > self.u_hi:
            raise ValueError("u_lo must not exceed u_hi")
        if self.K_R <= 0.0:
            raise ValueError("K_R must be positive")
        if self.quad is not None:
            reach = abs(self.quad.ra) * max(abs(self.u_lo), abs(self.u_hi)) + abs(self.quad.rb)
            if reach > self.K_R:
                raise ValueError(
                    "closed-form Hamiltonian invalid: clamp active inside U "
                    f"(|R| reaches {reach:g} > K_R={self.K_R:g})"
                )

    def r_map(self, t, x, u):
        """Controlled drift load clamped at K_R."""
        return np.clip(self.r_raw(t, x, u), -self.K_R, self.K_R)

    def phi(self, t, x, u, s):
        """Hamiltonian integrand F + s * R at scalar coupling s."""
        return self.F(t, x, u) + s * self.r_map(t, x, u)


@dataclass(frozen=True)
class HamiltonianResult:
    value: float
    argmin_set: tuple
    selected: float


def lift_cost(problem: ControlProblem, lift: DiscreteLift):
    """Lifted cost maps: F^g and G^g factor through the pairing."""

    def F_g(t, z_state, u):
        return problem.F(t, lift.pair(z_state), u)

    def G_g(z_state):
        return problem.G(lift.pair(z_state))

    return F_g, G_g


def _closed_form_batch(problem, s):
    q = problem.quad
    lo, hi = problem.u_lo, problem.u_hi
    s = np.asarray(s, dtype=float)
    b = q.qb + s * q.ra
    if q.qa > 0.0:
        u = np.clip(-b / (2.0 * q.qa), lo, hi)
    elif q.qa < 0.0:
        phi_lo = q.qa * lo * lo + b * lo
        phi_hi = q.qa * hi * hi + b * hi
        u = np.where(phi_lo <= phi_hi, lo, hi)
    else:
        u = np.where(b > 0.0, lo, np.where(b < 0.0, hi, lo))
    value = q.qa * u * u + b * u + s * q.rb
    return value, u


def _grid_scan_batch(problem, t, x, s):
    lo, hi = problem.u_lo, problem.u_hi
    x = np.asarray(x, dtype=float)
    s = np.asarray(s, dtype=float)
    us = np.linspace(lo, hi, GRID_POINTS)
    vals = np.empty((us.shape[0],) + x.shape)
    for i, u in enumerate(us):
        vals[i] = problem.phi(t, x, u, s)
    if not np.all(np.isfinite(vals)):
        raise FloatingPointError("non-finite Hamiltonian integrand on the probe grid")
    best = np.argmin(vals, axis=0)
    # Golden-section refinement on the bracketing cells, vectorized.
    lo_b = us[np.maximum(best - 1, 0)]
    hi_b = us[np.minimum(best + 1, GRID_POINTS - 1)]
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo_b.astype(float), hi_b.astype(float)
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc = problem.phi(t, x, c, s)
    fd = problem.phi(t, x, d, s)
    n_iter = max(1, int(math.ceil(math.log(U_TOL / max(hi - lo, U_TOL)) / math.log(invphi))))
    for _ in range(n_iter):
        take_c = fc < fd
        b = np.where(take_c, d, b)
        a = np.where(take_c, a, c)
        c = b - invphi * (b - a)
        d = a + invphi * (b - a)
        fc = problem.phi(t, x, c, s)
        fd = problem.phi(t, x, d, s)
    u = 0.5 * (a + b)
    value = np.minimum(problem.phi(t, x, u, s), vals.min(axis=0))
    u = np.where(problem.phi(t, x, u, s) <= vals.min(axis=0), u, us[best])
    return value, u


def hamiltonian_batch(problem: ControlProblem, t, x, s):
    """Vectorized (H, argmin) over arrays of states and couplings.

    The selected control follows the Gamma_0 tie-break (smallest
    minimizer), which the closed-form branches implement directly.
    """
    if problem.u_lo == problem.u_hi:
        x = np.asarray(x, dtype=float)
        u = np.full(np.broadcast(x, np.asarray(s)).shape, problem.u_lo)
        return np.asarray(problem.phi(t, x, problem.u_lo, s), dtype=float), u
    if problem.quad is not None:
        return _closed_form_batch(problem, s)
    return _grid_scan_batch(problem, t, x, s)


def hamiltonian(problem: ControlProblem, lift: DiscreteLift, t, z_state, xi) -> HamiltonianResult:
    """Pointwise Hamiltonian with its minimizer set.

    ``xi`` is the costate in lift coordinates; only the scalar coupling
    xi . nu enters.  The argmin set collects every probe within
    ``VALUE_TOL`` of the infimum so flat regions stay visible.
    """
    xi = np.asarray(xi, dtype=float)
    nu = lift.injection_state()
    if xi.shape != nu.shape:
        raise ValueError(f"xi has shape {xi.shape}, lift expects ({lift.state_dim},)")
    s = float(xi @ nu)
    x = float(lift.pair(z_state))
    value, u_best = hamiltonian_batch(problem, t, np.array(x), np.array(s))
    value, u_best = float(value), float(u_best)

    us = np.linspace(problem.u_lo, problem.u_hi, GRID_POINTS)
    phis = np.array([float(problem.phi(t, x, u, s)) for u in us])
    if not np.all(np.isfinite(phis)):
        raise FloatingPointError("non-finite Hamiltonian integrand on the probe grid")
    members = set(float(u) for u in us[phis <= value + VALUE_TOL])
    members.add(u_best)
    argmin_set = tuple(sorted(members))
    return HamiltonianResult(value=value, argmin_set=argmin_set, selected=min(argmin_set))


def gamma_select(result: HamiltonianResult) -> float:
    """Deterministic measurable selection: smallest minimizer."""
    if not result.argmin_set:
        raise ValueError("empty argmin set: minimization tolerance misconfigured")
    return min(result.argmin_set)


def evaluate_cost(problem: ControlProblem, lift, ensemble: PathEnsemble, policy=None):
    """Monte Carlo cost J_hat with its standard error.

    Left-point Riemann sum of the running cost plus the terminal cost.
    Controls come from the recorded trace; a policy may be supplied for
    ensembles simulated without one.
    """
    grid = ensemble.grid
    dt, times = grid.dt, grid.times
    X = ensemble.X
    trace = ensemble.control_trace
    costs = np.zeros(ensemble.n_paths)
    for k in range(grid.n_steps):
        if trace is not None:
            u = trace[:, k]
        elif policy is not None:
            phi_col = ensemble.phi[:, k] if ensemble.phi is not None else None
            u = np.broadcast_to(np.asarray(policy(k, times[k], X[:, k], phi_col), dtype=float),
                                X[:, k].shape)
        else:
            u = None
        costs += np.asarray(problem.F(times[k], X[:, k], u), dtype=float) * dt
    costs += np.asarray(problem.G(X[:, -1]), dtype=float)
    if ensemble.flagged:
        keep = np.ones(ensemble.n_paths, dtype=bool)
        keep[list(ensemble.flagged)] = False
        costs = costs[keep]
    j_hat = float(np.mean(costs))
    se = float(np.std(costs, ddof=1) / math.sqrt(costs.shape[0])) if costs.shape[0] > 1 else 0.0
    return j_hat, se


# ---------------------------------------------------------------------------
# Problem catalog
# ---------------------------------------------------------------------------

def consumption_problem(
    kernel_name: str = "sqrt",
    a1: float = 1.0,
    a2: float = 1.0,
    c_bar: float = 1.0,
    sigma0: float = 0.2,
    x_bar: float = 1.0,
    K_R: float = DEFAULT_K_R,
    horizon: float = 1.0,
    sigma_kind: str = "const",
    eps: float = 0.5,
) -> ControlProblem:
    """Optimal consumption of a cash flow with kernel memory.

    Consumption at rate c in [0, c_bar] drains the flow through the drift
    load R(c) = -c, costs F(c) = -a1 c^2 and is rewarded by the terminal
    value G(x) = a2 x.  With constant volatility the minimizing policy is
    the bang-bang c = c_bar and

        J* = -a1 c_bar^2 T + a2 x_bar - a2 sigma0 c_bar (2/3) T^(3/2)

    for the sqrt kernel.  ``sigma_kind="sin"`` switches to the smooth
    state-dependent volatility sigma0 (1 + 0.3 sin x).
    """
    if a1 < 0.0 or a2 <= 0.0:
        raise ValueError("need a1 >= 0 and a2 > 0")
    if kernel_name == "sqrt":
        kernel = sqrt_kernel(horizon=horizon)
    elif kernel_name == "laplace":
        kernel = laplace_kernel(eps=eps, horizon=horizon)
    else:
        raise ValueError(f"unsupported consumption kernel {kernel_name!r}")

    if sigma_kind == "const":
        sigma = lambda t, x: sigma0 * np.ones_like(np.asarray(x, dtype=float))
        dsigma = lambda t, x: np.zeros_like(np.asarray(x, dtype=float))
    elif sigma_kind == "sin":
        sigma = lambda t, x: sigma0 * (1.0 + 0.3 * np.sin(np.asarray(x, dtype=float)))
        dsigma = lambda t, x: sigma0 * 0.3 * np.cos(np.asarray(x, dtype=float))
    else:
        raise ValueError(f"unknown sigma_kind {sigma_kind!r}")

    coeffs = VolterraCoefficients(
        beta=lambda t, x: np.zeros_like(np.asarray(x, dtype=float)),
        sigma=sigma,
        x0=lambda t: x_bar,
        dbeta_dx=lambda t, x: np.zeros_like(np.asarray(x, dtype=float)),
        dsigma_dx=dsigma,
    )
    name = "consumption_sqrt" if kernel_name == "sqrt" else "consumption_laplace"
    return ControlProblem(
        name=name,
        kernel=kernel,
        coeffs=coeffs,
        r_raw=lambda t, x, u: -np.asarray(u, dtype=float) * np.ones_like(np.asarray(x, dtype=float)),
        F=lambda t, x, u: -a1 * np.asarray(u, dtype=float) ** 2 * np.ones_like(np.asarray(x, dtype=float)),
        G=lambda x: a2 * np.asarray(x, dtype=float),
        u_lo=0.0,
        u_hi=c_bar,
        K_R=K_R,
        a1=a1,
        a2=a2,
        quad=QuadraticControlStructure(qa=-a1, qb=0.0, ra=-1.0, rb=0.0),
        meta={"sigma0": sigma0, "x_bar": x_bar, "c_bar": c_bar,
              "sigma_kind": sigma_kind, "eps": eps if kernel_name == "laplace" else None},
    )


def lq_smooth_problem(
    sigma0: float = 0.3,
    x_bar: float = 1.0,
    K_R: float = DEFAULT_K_R,
    horizon: float = 1.0,
) -> ControlProblem:
    """Interior-minimum test problem: F = u^2, R = u, G(x) = x^2.

    phi(u) = u^2 + s u is strictly convex, so the feedback is the smooth
    interior law u* = clip(-s/2, -1, 1).
    """
    coeffs = VolterraCoefficients(
        beta=lambda t, x: np.zeros_like(np.asarray(x, dtype=float)),
        sigma=lambda t, x: sigma0 * np.ones_like(np.asarray(x, dtype=float)),
        x0=lambda t: x_bar,
        dbeta_dx=lambda t, x: np.zeros_like(np.asarray(x, dtype=float)),
        dsigma_dx=lambda t, x: np.zeros_like(np.asarray(x, dtype=float)),
    )
    return ControlProblem(
        name="lq_smooth",
        kernel=sqrt_kernel(horizon=horizon),
        coeffs=coeffs,
        r_raw=lambda t, x, u: np.asarray(u, dtype=float) * np.ones_like(np.asarray(x, dtype=float)),
        F=lambda t, x, u: np.asarray(u, dtype=float) ** 2 * np.ones_like(np.asarray(x, dtype=float)),
        G=lambda x: np.asarray(x, dtype=float) ** 2,
        u_lo=-1.0,
        u_hi=1.0,
        K_R=K_R,
        quad=QuadraticControlStructure(qa=1.0, qb=0.0, ra=1.0, rb=0.0),
        meta={"sigma0": sigma0, "x_bar": x_bar},
    )


PROBLEM_CATALOG = {
    "consumption_sqrt": lambda **kw: consumption_problem(kernel_name="sqrt", **kw),
    "consumption_laplace": lambda **kw: consumption_problem(kernel_name="laplace", **kw),
    "lq_smooth": lambda **kw: lq_smooth_problem(**kw),
}


def make_problem(name: str, **kwargs) -> ControlProblem:
    """Instantiate a named catalog problem."""
    if name not in PROBLEM_CATALOG:
        raise ValueError(f"unknown problem {name!r} (catalog: {sorted(PROBLEM_CATALOG)})")
    return PROBLEM_CATALOG[name](**kwargs)


def random_policies(problem: ControlProblem, n: int, seed: int):
    """Admissible comparison policies: constants and clipped affine feedback.

    Used by the verification-inequality harness; all draws flow from the
    policy substream of the master seed.
    """
    rng = substream(seed, STREAM_POLICY)
    lo, hi = problem.u_lo, problem.u_hi
    policies = []
    n_const = (n + 1) // 2
    for i in range(n):
        if i < n_const:
            c = float(rng.uniform(lo, hi))
            policies.append((f"const_{c:.4f}", _const_policy(c)))
        else:
            a = float(rng.uniform(lo, hi))
            b = float(rng.uniform(-1.0, 1.0)) * (hi - lo)
            policies.append((f"affine_{a:.3f}_{b:.3f}", _affine_policy(a, b, lo, hi)))
    return policies


def _const_policy(c):
    return lambda k, t, x, phi: c * np.ones_like(np.asarray(x, dtype=float))


def _affine_policy(a, b, lo, hi):
    return lambda k, t, x, phi: np.clip(a + b * np.asarray(x, dtype=float), lo, hi)
