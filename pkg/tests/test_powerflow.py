import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridscreen.case_model import Branch, Bus, BusType, Generator, NetworkCase, load_case
from gridscreen.powerflow import PFState, flat_start, injections, jacobian, mismatch, solve_newton
from oracles import loop_injections

try:
    from pypower.api import ppoption, runpf
except ImportError:  # optional reference solver
    runpf = None


def fd_jacobian(case, state, h=1e-6):
    """Central differences of the mismatch over (va at pv+pq, vm at pq)."""
    cols = [("va", i) for i in case.pvpq] + [("vm", i) for i in case.pq]
    f0 = mismatch(case, state)
    jac = np.zeros((len(f0), len(cols)))
    for k, (which, i) in enumerate(cols):
        plus = PFState(state.va.copy(), state.vm.copy())
        minus = PFState(state.va.copy(), state.vm.copy())
        getattr(plus, which)[i] += h
        getattr(minus, which)[i] -= h
        jac[:, k] = (mismatch(case, plus) - mismatch(case, minus)) / (2 * h)
    return jac


def random_state(case, rng):
    return PFState(va=rng.uniform(-0.5, 0.5, case.n_bus), vm=rng.uniform(0.85, 1.15, case.n_bus))


def lossless_two_bus(pd=0.0):
    buses = [Bus(1, BusType.SLACK, 0, 0, 0, 0, 1.0, 0, 100), Bus(2, BusType.PQ, pd, 0, 0, 0, 1.0, 0, 100)]
    return NetworkCase(100.0, buses, [Generator(1, 0, 0, 1.0, True)], [Branch(1, 2, 0.0, 0.1, 0.0, 1.0, True)])


def test_flat_lossless_injections_zero():
    p, q = injections(lossless_two_bus(), PFState(np.zeros(2), np.ones(2)))
    assert np.allclose(p, 0, atol=1e-15) and np.allclose(q, 0, atol=1e-12)


def test_isolated_bus_injection_zero(case6):
    out = case6
    for k, br in enumerate(case6.branches):
        if 4 in (br.from_bus, br.to_bus):
            out = out.with_branch_status(k, False)
    p, q = injections(out, random_state(out, np.random.default_rng(1)))
    i = out.index[4]
    assert p[i] == 0 and q[i] == 0


@pytest.mark.parametrize("seed", range(3))
def test_injections_match_loop_oracle(case14, seed):
    s = random_state(case14, np.random.default_rng(seed))
    p, q = injections(case14, s)
    lp, lq = loop_injections(case14, s.va, s.vm)
    assert np.max(np.abs(p - lp)) < 1e-10 and np.max(np.abs(q - lq)) < 1e-10


def test_mismatch_matches_loop_oracle(case14):
    s = random_state(case14, np.random.default_rng(7))
    lp, lq = loop_injections(case14, s.va, s.vm)
    sb = case14.sbus
    expect = np.r_[lp[case14.pvpq] - sb.real[case14.pvpq], lq[case14.pq] - sb.imag[case14.pq]]
    assert np.max(np.abs(mismatch(case14, s) - expect)) < 1e-10


def test_injections_at_solution_match_schedule(case6):
    sol = solve_newton(case6)
    p, _ = injections(case6, sol.state)
    sched = case6.sbus.real
    non_slack = np.arange(case6.n_bus) != case6.slack
    assert np.max(np.abs(p[non_slack] - sched[non_slack])) <= 1e-8


@pytest.mark.parametrize("name", ["case6ww", "case14", "case30"])
def test_jacobian_vs_finite_differences(name):
    case = load_case(name)
    rng = np.random.default_rng(100)
    worst = 0.0
    for _ in range(100):
        s = random_state(case, rng)
        worst = max(worst, np.max(np.abs(jacobian(case, s) - fd_jacobian(case, s))))
    assert worst <= 1e-6


def test_jacobian_shape(any_case):
    j = jacobian(any_case, flat_start(any_case))
    n = len(any_case.pvpq) + len(any_case.pq)
    assert j.shape == (n, n)


def test_jacobian_without_pq_buses():
    buses = [Bus(1, BusType.SLACK, 0, 0, 0, 0, 1.0, 0, 100), Bus(2, BusType.PV, 30, 0, 0, 0, 1.0, 0, 100),
             Bus(3, BusType.PV, 20, 0, 0, 0, 1.0, 0, 100)]
    gens = [Generator(1, 0, 0, 1.0, True), Generator(2, 0, 0, 1.02, True), Generator(3, 0, 0, 0.99, True)]
    branches = [Branch(1, 2, 0.01, 0.1, 0, 1, True), Branch(2, 3, 0.01, 0.1, 0, 1, True)]
    case = NetworkCase(100.0, buses, gens, branches)
    s = random_state(case, np.random.default_rng(0))
    j = jacobian(case, s)
    assert j.shape == (2, 2)
    assert np.allclose(j, fd_jacobian(case, s), atol=1e-6)


@pytest.mark.parametrize("name,max_iter", [("case6ww", 15), ("case14", 10), ("case30", 15)])
def test_newton_flat_start(name, max_iter):
    case = load_case(name)
    sol = solve_newton(case)
    assert sol.converged and sol.iterations <= max_iter
    assert sol.max_mismatch <= 1e-8
    # re-evaluating the residual confirms the reported convergence
    assert np.max(np.abs(mismatch(case, sol.state))) <= 1e-8


@pytest.mark.skipif(runpf is None, reason="pypower not installed")
@pytest.mark.parametrize("name", ["case6ww", "case14", "case30"])
def test_newton_matches_reference_solver(name):
    import pypower.api as pp

    case = load_case(name)
    ref, ok = runpf(getattr(pp, name)(), ppoption(VERBOSE=0, OUT_ALL=0, ENFORCE_Q_LIMS=0, PF_TOL=1e-10))
    assert ok
    sol = solve_newton(case, tol=1e-10)
    assert np.max(np.abs(sol.state.vm - ref["bus"][:, 7])) < 1e-8
    assert np.max(np.abs(np.rad2deg(sol.state.va) - ref["bus"][:, 8])) < 1e-6


def test_zero_injection_network():
    sol = solve_newton(lossless_two_bus())
    assert sol.converged and sol.iterations <= 1
    assert np.allclose(sol.state.vm, 1.0) and np.allclose(sol.state.va, 0.0)


def test_heavy_load_diverges(case14):
    heavy = case14.with_loads(case14.pd * 20, case14.qd * 20)
    sol = solve_newton(heavy)
    assert not sol.converged


def test_solve_newton_validates_arguments(case6):
    with pytest.raises(ValueError):
        solve_newton(case6, tol=0)
    with pytest.raises(ValueError):
        solve_newton(case6, max_iter=0)


@settings(max_examples=15, deadline=None)
@given(st.permutations(range(30)))
def test_solution_independent_of_bus_order(perm):
    case = load_case("case30")
    shuffled = NetworkCase(case.base_mva, [case.buses[i] for i in perm], case.gens, case.branches, case.name)
    a, b = solve_newton(case), solve_newton(shuffled)
    p = np.array(perm)
    assert np.max(np.abs(b.state.vm - a.state.vm[p])) < 1e-10
    assert np.max(np.abs(b.state.va - a.state.va[p])) < 1e-10
