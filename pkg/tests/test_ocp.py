from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import stub_ing
from stdmpc.dynamics import LinearErrorModel
from stdmpc.errors import InfeasibleProblemError
from stdmpc.ingredients import AgentIngredients
from stdmpc.ocp import (OcpProblem, build_cost, constraint_violations, is_feasible, phi_bound, rollout_states,
                        rollout_sync, solve, warm_start_from)
from stdmpc.tightening import BoxSet

N = 6


def _agent_problem(prep, e0=None, assumed=None, rho=None, phi=None, s0=0.0, k=0):
    cfg = prep.cfg
    if assumed is None:
        assumed = [np.zeros(N) for _ in cfg.rho]
        rho = list(cfg.rho.values())
    return OcpProblem(prep.model, prep.ing, cfg.e0 if e0 is None else e0, s0, cfg.Y, cfg.Z, 0.2,
                      prep.u_ref[k:k + N], prep.boxes, assumed, rho or [], phi)


def _check_invariants(problem, sol):
    assert np.array_equal(sol.e_seq[0], problem.e0)
    assert np.allclose(sol.e_seq, rollout_states(problem, sol.u_seq), atol=1e-9, rtol=0)
    assert np.allclose(sol.s_seq, rollout_sync(problem, sol.u_seq), atol=1e-12, rtol=0)
    ib = problem.model.input_box
    assert np.all(sol.u_seq >= ib.lower - 1e-9) and np.all(sol.u_seq <= ib.upper + 1e-9)
    for t in range(1, problem.N):
        assert problem.boxes[t].contains(sol.e_seq[t], tol=1e-7)
    P = problem.ing.P
    assert sol.e_seq[-1] @ P @ sol.e_seq[-1] <= problem.ing.eps ** 2 + 1e-9
    if problem.phi is not None:
        assert sol.H <= problem.phi + 1e-7


def _scalar_problem(e0=1.0, N_=1, box=10.0):
    model = LinearErrorModel([[1.0]], [[1.0]], BoxSet.symmetric([box]), BoxSet.symmetric([box]))
    ing = AgentIngredients(np.array([[-0.5]]), np.eye(1), np.eye(1), np.eye(1), 1.0, 2.0, 0.0, 0.0)
    return OcpProblem(model, ing, [e0], 0.0, [0.0], [0.0], 0.2, np.zeros((N_, 1)),
                      [BoxSet.symmetric([box])] * (N_ + 1))


def test_build_cost_origin_is_zero(sec5_prepared):
    p = _agent_problem(sec5_prepared[0], e0=np.zeros(3), assumed=[], rho=[])
    c = build_cost(p, np.zeros((N, 2)))
    assert c.J == 0.0 and c.H == 0.0 and c.coupling == 0.0


def test_build_cost_without_coupling_equals_stage_cost(sec5_prepared):
    p = _agent_problem(sec5_prepared[1], assumed=[np.ones(N)], rho=[0.0])
    c = build_cost(p, np.full((N, 2), 0.05))
    assert c.J == c.H and c.coupling == 0.0


def test_build_cost_scalar_hand_rollout():
    c = build_cost(_scalar_problem(), [[-1.0]])
    assert c.H == pytest.approx(2.0, abs=1e-15) and c.J == c.H


def test_solve_origin_is_global_minimum(sec5_prepared):
    p = _agent_problem(sec5_prepared[0], e0=np.zeros(3), assumed=[], rho=[])
    sol = solve(p)
    assert np.allclose(sol.u_seq, 0.0, atol=1e-8) and sol.J == pytest.approx(0.0, abs=1e-12)
    _check_invariants(p, sol)


def test_solve_inside_terminal_set_no_worse_than_feedback(sec5_prepared):
    prep = sec5_prepared[2]
    ing = prep.ing
    # boundary point of Omega(eps) along the leading eigenvector of P
    w, V = np.linalg.eigh(ing.P)
    e0 = 0.9 * ing.eps * V[:, -1] / np.sqrt(w[-1])
    p = _agent_problem(prep, e0=e0, assumed=[], rho=[])
    U, _ = warm_start_from(np.zeros((N, 2)), N, e0, prep.model, ing.K, p.u_ref)
    sol = solve(p)
    assert sol.J <= build_cost(p, U).J + 1e-12
    _check_invariants(p, sol)


def test_solve_sec5_agent2_beats_zero_input(sec5_prepared):
    prep = sec5_prepared[1]
    p = _agent_problem(prep, assumed=[], rho=[])
    sol = solve(p)
    assert sol.status == "converged"
    assert sol.H < build_cost(p, np.zeros((N, 2))).H
    _check_invariants(p, sol)


def test_solve_is_deterministic_and_no_worse_than_warm_start(sec5_prepared):
    prep = sec5_prepared[1]
    p = _agent_problem(prep)
    first = solve(p)
    U, _ = warm_start_from(first.u_seq, 1, first.e_seq[1], prep.model, prep.ing.K, prep.u_ref[1:1 + N])
    p2 = _agent_problem(prep, e0=first.e_seq[1], s0=first.s_seq[1], k=1)
    a = solve(p2, warm_start=U)
    b = solve(p2, warm_start=U)
    assert np.array_equal(a.u_seq, b.u_seq) and a.J == b.J
    if is_feasible(constraint_violations(p2, U)):
        assert a.J <= build_cost(p2, U).J + 1e-12
    _check_invariants(p2, a)


def test_solve_reports_infeasibility():
    # a terminal set that is unreachable in one step under tight inputs
    p = _scalar_problem(e0=5.0, box=10.0)
    p.model.input_box = BoxSet.symmetric([0.1])
    with pytest.raises(InfeasibleProblemError) as info:
        solve(p)
    assert info.value.most_violated[0] == "terminal"
    assert info.value.best is not None


def test_warm_start_full_phase_is_terminal_feedback(sec5_prepared):
    prep = sec5_prepared[0]
    rng = np.random.default_rng(0)
    prev = rng.uniform(-0.1, 0.1, (N, 2))
    e = np.array([0.01, -0.02, 0.01])
    U, E = warm_start_from(prev, N, e, prep.model, prep.ing.K, prep.u_ref[:N])
    for t in range(N):
        assert np.allclose(U[t], prep.ing.K @ E[t], atol=1e-15)


def test_warm_start_unit_phase_shifts(sec5_prepared):
    prep = sec5_prepared[0]
    prev = np.arange(2 * N, dtype=float).reshape(N, 2) / 100
    U, E = warm_start_from(prev, 1, np.zeros(3), prep.model, prep.ing.K, prep.u_ref[:N])
    assert np.array_equal(U[:N - 1], prev[1:])
    assert np.allclose(U[-1], prep.ing.K @ E[-2])
    with pytest.raises(ValueError):
        warm_start_from(prev, 0, np.zeros(3), prep.model, prep.ing.K, prep.u_ref[:N])


def test_warm_start_nominal_replay(sec5_prepared):
    prep = sec5_prepared[1]
    p = _agent_problem(prep, assumed=[], rho=[])
    sol = solve(p)
    U, E = warm_start_from(sol.u_seq, 1, sol.e_seq[1], prep.model, prep.ing.K, prep.u_ref[1:1 + N])
    assert np.allclose(E[:N], sol.e_seq[1:], atol=1e-12, rtol=0)
    # the shifted candidate is feasible and keeps the terminal state in Omega(eps)
    p2 = _agent_problem(prep, e0=sol.e_seq[1], s0=sol.s_seq[1], k=1, assumed=[], rho=[])
    assert is_feasible(constraint_violations(p2, U))


def test_phi_bound_examples():
    ing = stub_ing(Q=np.eye(1), R=np.eye(1))
    assert phi_bound([0.0], [0.0], 2.0, 0.0, ing) == 2.0
    assert phi_bound([0.3], [0.0], 2.0, 0.0, ing) < 2.0
    ing = stub_ing(Q=0.5 * np.eye(1), R=0.1 * np.eye(1))
    assert phi_bound([1.0], [1.0], 2.0, 0.01, ing) == pytest.approx(1.41, abs=1e-14)


def test_problem_rejects_bad_inputs(sec5_prepared):
    with pytest.raises(ValueError):
        _agent_problem(sec5_prepared[0], assumed=[np.zeros(N - 1)], rho=[1.0])
    with pytest.raises(ValueError):
        _agent_problem(sec5_prepared[0], assumed=[np.zeros(N)], rho=[-1.0])


@settings(max_examples=15, deadline=None)
@given(scale=st.floats(0.1, 1.0), seed=st.integers(0, 2**16))
def test_solution_invariants_on_random_initial_states(sec5_prepared, scale, seed):
    prep = sec5_prepared[2]
    rng = np.random.default_rng(seed)
    e0 = scale * rng.uniform(-0.2, 0.2, 3)
    e0[2] = scale * rng.uniform(-0.1, 0.1)
    p = _agent_problem(prep, e0=e0, assumed=[rng.uniform(-0.05, 0.05, N)] * 2, rho=[1.0, 1.0])
    try:
        sol = solve(p)
    except InfeasibleProblemError:
        return
    _check_invariants(p, sol)
