"""Forward schemes: lift equivalence, moment oracles, tangent machinery."""

import math

import numpy as np
import pytest

from vlift.kernels import exp_kernel, sqrt_kernel
from vlift.lift import build_laplace_lift, build_shift_lift
from vlift.simulate import (
    BrownianGrid,
    PathEnsemble,
    SimulationAbort,
    VolterraCoefficients,
    ensemble_to_csv,
    load_ensemble,
    malliavin_bump_check,
    moment_diagnostic,
    pair,
    save_ensemble,
    simulate_direct,
    simulate_lifted,
    tangent_process,
)

SEED = 20260810


def make_grid(n_steps=64, n_paths=200, T=1.0, seed=SEED):
    return BrownianGrid(0.0, T, n_steps, n_paths, seed)


def const_coeffs(beta=0.0, sigma=0.0, x0=1.0):
    return VolterraCoefficients(
        beta=lambda t, x: beta * np.ones_like(np.asarray(x, dtype=float)),
        sigma=lambda t, x: sigma * np.ones_like(np.asarray(x, dtype=float)),
        x0=lambda t: x0,
        dbeta_dx=lambda t, x: np.zeros_like(np.asarray(x, dtype=float)),
        dsigma_dx=lambda t, x: np.zeros_like(np.asarray(x, dtype=float)),
    )


def sqrt_kernel_grid(n_steps, dt):
    return np.sqrt(dt * np.arange(n_steps + 1))


# ---------------------------------------------------------------------------
# Brownian grid
# ---------------------------------------------------------------------------

def test_increment_moments():
    grid = make_grid(n_steps=8, n_paths=10_000)
    dW = grid.increments
    dt = grid.dt
    se_mean = math.sqrt(dt / dW.size)
    assert abs(dW.mean()) <= 4 * se_mean
    se_var = dt * math.sqrt(2.0 / (dW.size - 1))
    assert abs(dW.var() - dt) <= 4 * se_var


def test_seed_regeneration_bit_exact():
    a = make_grid(n_steps=16, n_paths=50)
    b = make_grid(n_steps=16, n_paths=50)
    assert np.array_equal(a.increments, b.increments)


def test_path_substreams_independent_of_ensemble_size():
    small = make_grid(n_steps=16, n_paths=10)
    big = make_grid(n_steps=16, n_paths=40)
    assert np.array_equal(small.increments, big.increments[:10])


# ---------------------------------------------------------------------------
# Direct scheme oracles
# ---------------------------------------------------------------------------

def test_degenerate_deterministic():
    grid = make_grid(n_steps=32, n_paths=5)
    ens = simulate_direct(const_coeffs(), sqrt_kernel_grid(32, grid.dt), grid)
    assert np.all(ens.X == 1.0)


def test_ito_isometry_variance():
    # beta=0, sigma=1: Var X_T = sum_m K(m dt)^2 dt = (T^2 + T dt)/2 exactly.
    grid = make_grid(n_steps=64, n_paths=20_000)
    ens = simulate_direct(const_coeffs(sigma=1.0), sqrt_kernel_grid(64, grid.dt), grid)
    xT = ens.X[:, -1]
    var_exact = 0.5 * (1.0 + grid.dt)
    se = var_exact * math.sqrt(2.0 / (grid.n_paths - 1))
    assert abs(xT.var(ddof=1) - var_exact) <= 4 * se
    assert abs(xT.var(ddof=1) - 0.5) <= 3 * se + 0.5 * grid.dt


def test_variance_convergence_rate():
    # Discrete-exact variances (Ito isometry oracle) converge at O(dt) >= O(dt^0.4).
    errs = []
    for n in (64, 128, 256):
        dt = 1.0 / n
        kg = sqrt_kernel_grid(n, dt)
        var_disc = float(np.sum(kg[1:] ** 2) * dt)
        errs.append(abs(var_disc - 0.5))
    rate1 = math.log2(errs[0] / errs[1])
    rate2 = math.log2(errs[1] / errs[2])
    assert rate1 >= 0.4 and rate2 >= 0.4


def test_deterministic_drift_riemann_rate():
    # beta=1, sigma=0, x0=0: X_T -> (2/3) T^{3/2} at rate >= 0.5.
    errs = []
    for n in (32, 64, 128):
        grid = BrownianGrid(0.0, 1.0, n, 1, SEED)
        coeffs = const_coeffs(beta=1.0, sigma=0.0, x0=0.0)
        ens = simulate_direct(coeffs, sqrt_kernel_grid(n, grid.dt), grid)
        errs.append(abs(ens.X[0, -1] - 2.0 / 3.0))
    assert errs[1] < errs[0] and errs[2] < errs[1]
    rate = math.log2(errs[0] / errs[2]) / 2.0
    assert rate >= 0.5


def test_direct_aborts_on_explosion():
    grid = make_grid(n_steps=16, n_paths=8)
    blowup = VolterraCoefficients(
        beta=lambda t, x: np.exp(np.asarray(x, dtype=float) ** 2) * 1e6,
        sigma=lambda t, x: np.zeros_like(np.asarray(x, dtype=float)),
        x0=lambda t: 30.0,
    )
    with np.errstate(over="ignore"), pytest.raises(SimulationAbort):
        simulate_direct(blowup, sqrt_kernel_grid(16, grid.dt), grid)


# ---------------------------------------------------------------------------
# Lifted scheme: pure flow and pathwise equivalence
# ---------------------------------------------------------------------------

def smooth_sigma_coeffs(x_bar=1.0):
    return VolterraCoefficients(
        beta=lambda t, x: np.zeros_like(np.asarray(x, dtype=float)),
        sigma=lambda t, x: 0.2 * (1.0 + 0.3 * np.sin(np.asarray(x, dtype=float))),
        x0=lambda t: x_bar,
        dbeta_dx=lambda t, x: np.zeros_like(np.asarray(x, dtype=float)),
        dsigma_dx=lambda t, x: 0.06 * np.cos(np.asarray(x, dtype=float)),
    )


def test_pure_semigroup_flow_reproduces_initial_curve():
    lift = build_shift_lift(sqrt_kernel(), dt=1 / 32, horizon=1.0)
    x0 = lambda t: 1.0 + 0.5 * math.sin(3.0 * t)
    zeta0, _ = lift.embed_initial_curve(x0, 32)
    grid = make_grid(n_steps=32, n_paths=3)
    ens = simulate_lifted(const_coeffs(0.0, 0.0), lift, grid, zeta0)
    expected = np.array([x0(t) for t in grid.times])
    assert np.max(np.abs(ens.X - expected[None, :])) <= 1e-10


def test_pathwise_lift_equivalence_state_dependent_sigma():
    n = 128
    lift = build_shift_lift(sqrt_kernel(), dt=1.0 / n, horizon=1.0)
    coeffs = smooth_sigma_coeffs()
    zeta0, resid = lift.embed_initial_curve(coeffs.x0, n)
    assert resid <= 1e-12
    grid = BrownianGrid(0.0, 1.0, n, 100, SEED)
    r_map = lambda t, x, u: -np.ones_like(np.asarray(x, dtype=float))  # constant drift load
    direct = simulate_direct(coeffs, lift.kernel_grid(n), grid,
                             r_map=r_map, policy=lambda k, t, x, p: 1.0)
    lifted = simulate_lifted(coeffs, lift, grid, zeta0,
                             r_map=r_map, policy=lambda k, t, x, p: 1.0)
    sup = np.max(np.abs(direct.X - lifted.X))
    assert sup <= 1e-10


def test_exponential_kernel_single_node_equivalence():
    lam = 1.5
    n = 64
    kern = exp_kernel(lam)
    lift = build_laplace_lift(kern, dt=1.0 / n, horizon=1.0)
    coeffs = VolterraCoefficients(
        beta=lambda t, x: 0.3 - 0.2 * np.asarray(x, dtype=float),
        sigma=lambda t, x: 0.4 * np.ones_like(np.asarray(x, dtype=float)),
        x0=lambda t: 0.0,
    )
    zeta0 = np.zeros(1)
    grid = BrownianGrid(0.0, 1.0, n, 64, SEED)
    kg = np.array([kern.evaluator(m * grid.dt) for m in range(n + 1)])
    direct = simulate_direct(coeffs, kg, grid)
    lifted = simulate_lifted(coeffs, lift, grid, zeta0)
    assert np.max(np.abs(direct.X - lifted.X)) <= 1e-10


def test_pair_matches_stored_states():
    lift = build_shift_lift(sqrt_kernel(), dt=1 / 16, horizon=1.0)
    zeta0, _ = lift.embed_initial_curve(lambda t: 1.0, 16)
    grid = make_grid(n_steps=16, n_paths=7)
    ens = simulate_lifted(smooth_sigma_coeffs(), lift, grid, zeta0, store_z=True)
    recomputed = pair(lift, ens.Z)
    assert np.max(np.abs(recomputed - ens.X)) <= 1e-12


def test_phi_terminal_column_equals_x_terminal():
    lift = build_shift_lift(sqrt_kernel(), dt=1 / 16, horizon=1.0)
    zeta0, _ = lift.embed_initial_curve(lambda t: 1.0, 16)
    grid = make_grid(n_steps=16, n_paths=9)
    ens = simulate_lifted(smooth_sigma_coeffs(), lift, grid, zeta0)
    assert np.max(np.abs(ens.phi[:, -1] - ens.X[:, -1])) <= 1e-12


def test_simulation_determinism():
    lift = build_shift_lift(sqrt_kernel(), dt=1 / 32, horizon=1.0)
    zeta0, _ = lift.embed_initial_curve(lambda t: 1.0, 32)
    runs = []
    for _ in range(2):
        grid = make_grid(n_steps=32, n_paths=25)
        runs.append(simulate_lifted(smooth_sigma_coeffs(), lift, grid, zeta0).X)
    assert np.array_equal(runs[0], runs[1])


# ---------------------------------------------------------------------------
# Tangent process and Malliavin bump identification
# ---------------------------------------------------------------------------

def test_tangent_constant_coefficients_is_transport():
    lift = build_shift_lift(sqrt_kernel(), dt=1 / 16, horizon=1.0)
    zeta0, _ = lift.embed_initial_curve(lambda t: 1.0, 16)
    grid = make_grid(n_steps=16, n_paths=1)
    h = np.zeros(lift.state_dim)
    h[:3] = (0.3, -1.0, 2.0)
    H = tangent_process(const_coeffs(beta=0.5, sigma=0.7), lift, grid, zeta0, h)
    for k in (1, 5, 16):
        assert np.allclose(H[k], lift.step_power(k, h), atol=1e-14)


def test_tangent_linearity_in_h():
    lift = build_shift_lift(sqrt_kernel(), dt=1 / 16, horizon=1.0)
    coeffs = smooth_sigma_coeffs()
    zeta0, _ = lift.embed_initial_curve(coeffs.x0, 16)
    grid = make_grid(n_steps=16, n_paths=1)
    rng = np.random.default_rng(3)
    h1 = rng.standard_normal(lift.state_dim)
    h2 = rng.standard_normal(lift.state_dim)
    a = 0.37
    Ha = tangent_process(coeffs, lift, grid, zeta0, a * h1 + h2)
    H1 = tangent_process(coeffs, lift, grid, zeta0, h1)
    H2 = tangent_process(coeffs, lift, grid, zeta0, h2)
    assert np.max(np.abs(Ha - (a * H1 + H2))) <= 1e-12


def test_tangent_bump_order():
    # |Z(zeta0 + eps h) - Z(zeta0) - eps H| = o(eps) along a frozen path.
    n = 32
    lift = build_shift_lift(sqrt_kernel(), dt=1.0 / n, horizon=1.0)
    coeffs = smooth_sigma_coeffs()
    zeta0, _ = lift.embed_initial_curve(coeffs.x0, n)
    grid = make_grid(n_steps=n, n_paths=1)
    rng = np.random.default_rng(4)
    h = rng.standard_normal(lift.state_dim)
    H = tangent_process(coeffs, lift, grid, zeta0, h)

    def flow_terminal(z0):
        return simulate_lifted(coeffs, lift, grid, z0, store_z=True).Z[0, -1]

    base = flow_terminal(zeta0)
    gaps = []
    for eps in (1e-4, 1e-5):
        bumped = flow_terminal(zeta0 + eps * h)
        gaps.append(np.linalg.norm(bumped - base - eps * H[-1]) / eps)
    # First-order remainder: the normalized gap shrinks ~10x with eps.
    assert gaps[1] <= gaps[0] * 0.2 + 1e-12


def test_tangent_linear_drift_scalar_recursion():
    # beta = a x, sigma = 0: <g, H_k> solves the deterministic resolvent recursion.
    a = 0.8
    n = 32
    lift = build_shift_lift(sqrt_kernel(), dt=1.0 / n, horizon=1.0)
    coeffs = VolterraCoefficients(
        beta=lambda t, x: a * np.asarray(x, dtype=float),
        sigma=lambda t, x: np.zeros_like(np.asarray(x, dtype=float)),
        x0=lambda t: 1.0,
        dbeta_dx=lambda t, x: a * np.ones_like(np.asarray(x, dtype=float)),
        dsigma_dx=lambda t, x: np.zeros_like(np.asarray(x, dtype=float)),
    )
    zeta0, _ = lift.embed_initial_curve(coeffs.x0, n)
    grid = make_grid(n_steps=n, n_paths=1)
    rng = np.random.default_rng(5)
    h = rng.standard_normal(lift.state_dim)
    H = tangent_process(coeffs, lift, grid, zeta0, h)
    paired = np.array([lift.pair(H[k]) for k in range(n + 1)])

    kg = lift.kernel_grid(n)
    dt = grid.dt
    scalar = np.empty(n + 1)
    for k in range(n + 1):
        free = lift.pair_after_steps(k, h)
        scalar[k] = free + sum(kg[k - j] * a * dt * scalar[j] for j in range(k))
    assert np.max(np.abs(paired - scalar)) <= 1e-10


def test_malliavin_sigma_zero_both_sides_vanish():
    lift = build_shift_lift(sqrt_kernel(), dt=1 / 16, horizon=1.0)
    coeffs = const_coeffs(beta=0.4, sigma=0.0)
    zeta0, _ = lift.embed_initial_curve(coeffs.x0, 16)
    grid = make_grid(n_steps=16, n_paths=2)
    bump, tangent, rel = malliavin_bump_check(coeffs, lift, grid, zeta0, 0, 3, 10)
    assert np.allclose(bump, 0.0, atol=1e-9) and np.allclose(tangent, 0.0)
    assert rel == 0.0


def test_malliavin_constant_sigma_closed_form():
    sigma0 = 0.7
    lift = build_shift_lift(sqrt_kernel(), dt=1 / 32, horizon=1.0)
    coeffs = const_coeffs(beta=0.0, sigma=sigma0)
    zeta0, _ = lift.embed_initial_curve(coeffs.x0, 32)
    grid = make_grid(n_steps=32, n_paths=2)
    s, tau = 5, 20
    bump, tangent, rel = malliavin_bump_check(coeffs, lift, grid, zeta0, 1, s, tau)
    closed = lift.step_power(tau - s, lift.injection_state() * sigma0)
    assert np.allclose(tangent, closed, atol=1e-14)
    assert rel <= 1e-6


def test_malliavin_state_dependent_sigma():
    n = 200
    lift = build_shift_lift(sqrt_kernel(), dt=1.0 / n, horizon=1.0)
    coeffs = VolterraCoefficients(
        beta=lambda t, x: 0.1 * np.cos(np.asarray(x, dtype=float)),
        sigma=lambda t, x: 1.0 + 0.3 * np.sin(np.asarray(x, dtype=float)),
        x0=lambda t: 1.0,
        dbeta_dx=lambda t, x: -0.1 * np.sin(np.asarray(x, dtype=float)),
        dsigma_dx=lambda t, x: 0.3 * np.cos(np.asarray(x, dtype=float)),
    )
    zeta0, _ = lift.embed_initial_curve(coeffs.x0, n)
    grid = BrownianGrid(0.0, 1.0, n, 3, SEED)
    for (path, s, tau) in ((0, 10, 150), (1, 40, 120), (2, 90, 199)):
        _, _, rel = malliavin_bump_check(coeffs, lift, grid, zeta0, path, s, tau)
        assert rel <= 1e-2


# ---------------------------------------------------------------------------
# Moment diagnostic and serialization
# ---------------------------------------------------------------------------

def test_moment_diagnostic_degenerate_bounded():
    lift = build_shift_lift(sqrt_kernel(), dt=1 / 16, horizon=1.0)
    zeta0, _ = lift.embed_initial_curve(lambda t: 1.0, 16)
    grid = make_grid(n_steps=16, n_paths=50)
    rows = moment_diagnostic(const_coeffs(0.0, 0.0), lift, grid, zeta0)
    for row in rows:
        assert row["ratio"] <= 1.0 + 1e-12
        assert not row["flagged"]


def test_moment_diagnostic_lipschitz_stability_band():
    lift = build_shift_lift(sqrt_kernel(), dt=1 / 32, horizon=1.0)
    coeffs = smooth_sigma_coeffs()
    zeta0, _ = lift.embed_initial_curve(coeffs.x0, 32)
    grid = make_grid(n_steps=32, n_paths=400)
    rows = moment_diagnostic(coeffs, lift, grid, zeta0, p_values=(2, 4))
    assert all(np.isfinite(r["ratio"]) for r in rows)
    for norm in ("inf", "two"):
        for p in (2, 4):
            vals = [r["ratio"] for r in rows if r["norm"] == norm and r["p"] == p]
            assert max(vals) / min(vals) <= 3.0


def test_csv_and_binary_roundtrip(tmp_path):
    lift = build_shift_lift(sqrt_kernel(), dt=1 / 8, horizon=1.0)
    zeta0, _ = lift.embed_initial_curve(lambda t: 1.0, 8)
    grid = make_grid(n_steps=8, n_paths=4)
    ens = simulate_lifted(smooth_sigma_coeffs(), lift, grid, zeta0,
                          policy=lambda k, t, x, p: 0.5, r_map=lambda t, x, u: -u,
                          store_z=True)

    csv_path = tmp_path / "ens.csv"
    ensemble_to_csv(ens, csv_path, include_z=True)
    header = csv_path.read_text().splitlines()[0]
    assert header.startswith("path_id,step,t,X,u,Z0")

    bin_path = tmp_path / "ens.vlft"
    save_ensemble(ens, bin_path)
    assert bin_path.read_bytes()[:5] == b"VLFT1"
    back = load_ensemble(bin_path)
    assert np.array_equal(back.X, ens.X)
    assert np.array_equal(back.phi, ens.phi)
    assert np.array_equal(back.Z, ens.Z)
    assert np.array_equal(back.control_trace, ens.control_trace)
    assert np.array_equal(back.grid.increments, ens.grid.increments)
    assert back.grid.seed == ens.grid.seed
