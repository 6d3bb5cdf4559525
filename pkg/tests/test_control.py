"""Hamiltonian minimization, selection rule, cost evaluation."""

import dataclasses
import math

import numpy as np
import pytest

from vlift.control import (
    ControlProblem,
    HamiltonianResult,
    QuadraticControlStructure,
    consumption_problem,
    evaluate_cost,
    gamma_select,
    hamiltonian,
    hamiltonian_batch,
    lift_cost,
    lq_smooth_problem,
    make_problem,
    random_policies,
)
from vlift.kernels import sqrt_kernel
from vlift.lift import build_shift_lift
from vlift.simulate import BrownianGrid, VolterraCoefficients, simulate_lifted

SEED = 77


@pytest.fixture(scope="module")
def lift16():
    return build_shift_lift(sqrt_kernel(), dt=1 / 16, horizon=1.0)


def xi_with_coupling(lift, s):
    # Spread the coupling across the injection direction.
    nu = lift.injection_state()
    return nu * (s / float(nu @ nu))


def test_consumption_hamiltonian_endpoint(lift16):
    problem = consumption_problem()
    z = np.zeros(lift16.state_dim)
    res = hamiltonian(problem, lift16, 0.0, z, xi_with_coupling(lift16, 1.0))
    # phi(c) = -c^2 - c on [0, 1]: endpoint minimum.
    assert res.value == pytest.approx(-2.0, abs=1e-9)
    assert res.argmin_set == (1.0,)
    assert res.selected == 1.0


def test_consumption_hamiltonian_zero_coupling(lift16):
    problem = consumption_problem()
    z = np.zeros(lift16.state_dim)
    res = hamiltonian(problem, lift16, 0.0, z, np.zeros(lift16.state_dim))
    assert res.value == pytest.approx(-1.0, abs=1e-9)
    assert res.selected == 1.0


def test_lq_interior_minimum(lift16):
    problem = lq_smooth_problem()
    z = np.zeros(lift16.state_dim)
    res = hamiltonian(problem, lift16, 0.0, z, xi_with_coupling(lift16, 1.0))
    assert res.selected == pytest.approx(-0.5, abs=1e-8)
    assert res.value == pytest.approx(-0.25, abs=1e-9)


def test_gamma_select_tie_breaks():
    assert gamma_select(HamiltonianResult(0.0, (1.0,), 1.0)) == 1.0
    assert gamma_select(HamiltonianResult(0.0, (0.0, 1.0), 0.0)) == 0.0
    with pytest.raises(ValueError):
        gamma_select(HamiltonianResult(0.0, (), 0.0))


def test_symmetric_concave_argmin_contains_both_endpoints(lift16):
    # phi(u) = -u^2 on [-1, 1]: equal endpoints, selection takes u_lo.
    problem = lq_smooth_problem()
    problem = dataclasses.replace(
        problem, quad=QuadraticControlStructure(qa=-1.0, qb=0.0, ra=1.0, rb=0.0),
        F=lambda t, x, u: -np.asarray(u, dtype=float) ** 2,
    )
    z = np.zeros(lift16.state_dim)
    res = hamiltonian(problem, lift16, 0.0, z, np.zeros(lift16.state_dim))
    assert -1.0 in res.argmin_set and 1.0 in res.argmin_set
    assert gamma_select(res) == -1.0


def test_closed_form_and_scan_agree(lift16):
    for problem in (consumption_problem(), lq_smooth_problem()):
        scan = dataclasses.replace(problem, quad=None)
        rng = np.random.default_rng(SEED)
        for _ in range(25):
            s = float(rng.uniform(-3.0, 3.0))
            h_cf, u_cf = hamiltonian_batch(problem, 0.3, np.array(1.1), np.array(s))
            h_sc, u_sc = hamiltonian_batch(scan, 0.3, np.array(1.1), np.array(s))
            assert abs(float(u_cf) - float(u_sc)) <= 1e-6
            assert abs(float(h_cf) - float(h_sc)) <= 1e-9


def test_infimum_property_random_probes(lift16):
    problem = lq_smooth_problem()
    rng = np.random.default_rng(SEED + 1)
    z = np.zeros(lift16.state_dim)
    for _ in range(20):
        s = float(rng.uniform(-4.0, 4.0))
        res = hamiltonian(problem, lift16, 0.1, z, xi_with_coupling(lift16, s))
        for u in rng.uniform(problem.u_lo, problem.u_hi, size=8):
            assert res.value <= float(problem.phi(0.1, 0.0, float(u), s)) + 1e-9


def test_hamiltonian_lipschitz_in_coupling():
    problem = consumption_problem()
    rng = np.random.default_rng(SEED + 2)
    for _ in range(40):
        s1, s2 = rng.uniform(-5.0, 5.0, size=2)
        h1, _ = hamiltonian_batch(problem, 0.0, np.array(1.0), np.array(s1))
        h2, _ = hamiltonian_batch(problem, 0.0, np.array(1.0), np.array(s2))
        assert abs(float(h1) - float(h2)) <= problem.K_R * abs(s1 - s2) + 1e-12


def test_argmin_invariant_under_positive_scaling():
    base = lq_smooth_problem()
    lam = 7.3
    scaled = dataclasses.replace(
        base,
        F=lambda t, x, u: lam * (np.asarray(u, dtype=float) ** 2),
        r_raw=lambda t, x, u: lam * np.asarray(u, dtype=float),
        K_R=lam * base.K_R,
        quad=QuadraticControlStructure(qa=lam, qb=0.0, ra=lam, rb=0.0),
    )
    rng = np.random.default_rng(SEED + 3)
    s = rng.uniform(-2.0, 2.0, size=30)
    _, u_base = hamiltonian_batch(base, 0.0, np.ones(30), s)
    _, u_scaled = hamiltonian_batch(scaled, 0.0, np.ones(30), s)
    assert np.allclose(u_base, u_scaled, atol=1e-12)


def test_clamp_bounds_r_everywhere():
    problem = consumption_problem(K_R=0.75, c_bar=0.7)  # clamp inactive on U
    xs = np.linspace(-5.0, 5.0, 11)
    for u in (0.0, 0.3, 0.7):
        assert np.all(np.abs(problem.r_map(0.2, xs, u)) <= 0.75)


def test_closed_form_rejected_when_clamp_active():
    with pytest.raises(ValueError):
        consumption_problem(K_R=0.5, c_bar=1.0)


def test_unbounded_u_rejected():
    with pytest.raises(ValueError):
        lq = lq_smooth_problem()
        dataclasses.replace(lq, u_hi=math.inf)


def test_lift_cost_factors_through_pairing(lift16):
    problem = consumption_problem(a2=2.0)
    F_g, G_g = lift_cost(problem, lift16)
    z = np.zeros(lift16.state_dim)
    z[lift16.dim:] = 3.0 / lift16.reconstruct(1.0)  # pairing = 3
    assert float(lift16.pair(z)) == pytest.approx(3.0, abs=1e-12)
    assert float(G_g(z)) == pytest.approx(6.0, abs=1e-12)
    assert float(F_g(0.0, z, 2.0)) == pytest.approx(-4.0, abs=1e-12)
    # Any state with the same pairing gives the same lifted costs.
    z2 = np.zeros(lift16.state_dim)
    z2[lift16.dim] = 3.0 / lift16.g_vec[0]
    assert float(lift16.pair(z2)) == pytest.approx(3.0, abs=1e-12)
    assert float(G_g(z2)) == pytest.approx(float(G_g(z)), abs=1e-12)


def test_evaluate_cost_degenerate(lift16):
    problem = consumption_problem(a1=0.0, sigma0=0.0)
    problem = dataclasses.replace(problem, F=lambda t, x, u: np.zeros_like(np.asarray(x, dtype=float)))
    zeta0, _ = lift16.embed_initial_curve(lambda t: 1.0, 16)
    grid = BrownianGrid(0.0, 1.0, 16, 32, SEED)
    ens = simulate_lifted(problem.coeffs, lift16, grid, zeta0)
    j, se = evaluate_cost(problem, lift16, ens)
    assert j == pytest.approx(1.0, abs=1e-10)
    assert se <= 1e-10


def test_policy_ordering_for_consumption(lift16):
    # J(c_bar) <= J(0) for the consumption instance.
    problem = consumption_problem()
    zeta0, _ = lift16.embed_initial_curve(lambda t: 1.0, 16)
    grid = BrownianGrid(0.0, 1.0, 16, 2000, SEED)
    costs = {}
    for c in (0.0, 1.0):
        pol = lambda k, t, x, p, c=c: c * np.ones_like(x)
        ens = simulate_lifted(problem.coeffs, lift16, grid, zeta0,
                              r_map=problem.r_map, policy=pol)
        costs[c], _ = evaluate_cost(problem, lift16, ens)
    assert costs[1.0] < costs[0.0]


def test_make_problem_catalog():
    assert make_problem("consumption_sqrt").name == "consumption_sqrt"
    assert make_problem("consumption_laplace", eps=0.25).kernel.params["eps"] == 0.25
    assert make_problem("lq_smooth").quad.qa == 1.0
    with pytest.raises(ValueError):
        make_problem("nope")


def test_random_policies_admissible_and_deterministic():
    problem = consumption_problem()
    pols_a = random_policies(problem, 6, seed=SEED)
    pols_b = random_policies(problem, 6, seed=SEED)
    assert [n for n, _ in pols_a] == [n for n, _ in pols_b]
    xs = np.linspace(-3.0, 3.0, 7)
    for _, pol in pols_a:
        u = pol(0, 0.0, xs, None)
        assert np.all(u >= problem.u_lo - 1e-12) and np.all(u <= problem.u_hi + 1e-12)
