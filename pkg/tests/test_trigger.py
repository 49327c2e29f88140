from __future__ import annotations

from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import stub_ing
from stdmpc.errors import ConfigError
from stdmpc.tightening import admissible_eta
from stdmpc.trigger import TriggerConstants, alpha, decide, psi, psi_terms, select_phase, upsilon

N = 6


def _growth(L, m):
    return ((1 + L) ** N - (1 + L) ** (N - m)) / L


def _sol(e_norms=(0.2,) * N, u=0.1):
    e_seq = np.zeros((N + 1, 3))
    e_seq[:N, 0] = e_norms
    return SimpleNamespace(e_seq=e_seq, u_seq=np.full((N, 2), u))


def test_upsilon_zero_disturbance_is_pure_contraction():
    ing = stub_ing()
    c = 1 - ing.lambda_min_Qstar / ing.lambda_max_P
    for m in range(1, N + 1):
        assert upsilon(m, ing, 0.0, N) == pytest.approx((c ** m - 1) * ing.eps ** 2, rel=1e-12)
        assert upsilon(m, ing, 0.0, N) < 0


def test_upsilon_radius_at_lemma_bound():
    ing = stub_ing()
    eta = admissible_eta(ing, N)
    c = 1 - ing.lambda_min_Qstar / ing.lambda_max_P
    for m in range(1, N + 1):
        radius = np.sqrt((upsilon(m, ing, eta, N) + ing.eps ** 2) / c ** m)
        fraction = _growth(ing.L_g, m) / _growth(ing.L_g, N)
        assert radius == pytest.approx(ing.eps + (ing.eps_r - ing.eps) * fraction, rel=1e-12)
        assert radius <= ing.eps_r + 1e-15


def test_upsilon_arithmetic_example():
    ing = stub_ing(lambda_max_P=10.0, lambda_min_Qstar=1.0, lambda_max_sqrtP=np.sqrt(10.0))
    eta = 0.01 / (ing.lambda_max_sqrtP * _growth(ing.L_g, 2))
    assert upsilon(2, ing, eta, N) == pytest.approx(0.81 * 0.06 ** 2 - 0.05 ** 2, rel=1e-12)
    assert upsilon(2, ing, eta, N) == pytest.approx(4.16e-4, rel=1e-12)


def test_upsilon_rejects_bad_contraction_and_phase():
    with pytest.raises(ConfigError):
        upsilon(1, stub_ing(lambda_min_Qstar=20.0, lambda_max_P=10.0), 1e-4, N)
    with pytest.raises(ValueError):
        upsilon(0, stub_ing(), 1e-4, N)


def test_psi_unit_phase_reduction():
    ing = stub_ing(L_Q=0.7, L_Qstar=0.9, L_P=2.5)
    nu = 1.24 ** (N - 1)
    assert psi(1, ing, N) == pytest.approx((nu - 1) / 0.24 * 0.7 + nu * 2.5, rel=1e-12)


def test_psi_zero_lipschitz_limits():
    ing = stub_ing(L_g=0.0, L_kappa=0.0)
    for m in range(1, N + 1):
        varpi, nu, tau, varsigma = psi_terms(m, ing, N)
        assert (varpi, nu, tau, varsigma) == (N - m, 1.0, m - 1, 1.0)
        assert np.isfinite(psi(m, ing, N))


def test_psi_terms_agent1_at_phase_two():
    varpi, nu, tau, varsigma = psi_terms(2, stub_ing(L_g=0.24, L_kappa=0.44), N)
    assert nu == pytest.approx(2.3642, abs=1e-4)
    assert varpi == pytest.approx(5.6842, abs=1e-4)
    assert varsigma == pytest.approx(1.44, rel=1e-12)
    assert tau == pytest.approx(1.0, rel=1e-12)


def test_alpha_examples():
    ing = stub_ing(L_g=0.24)
    assert alpha(3, 0.17, ing, 0.0) == 0.17
    assert alpha(3, 1e-6, ing, 1e-4) == 0.0
    assert alpha(2, 0.2, ing, 1e-4) == pytest.approx(0.199752, abs=1e-15)


def test_decide_zero_disturbance_grants_full_horizon():
    ing = stub_ing()
    const = TriggerConstants.build(0.5, 0.0, ing, N)
    d = decide(_sol(), np.array([0.2, 0, 0]), const, ing, N, k=7)
    assert d.m == N and d.next_instant == 7 + N and d.limiting_condition == "horizon"


def test_decide_unit_phase_when_second_containment_fails():
    ing = stub_ing()
    const = TriggerConstants(0.5, 1e-4, N, psi=(0.0,) * N, upsilon=(-1.0, 1e-3, -1, -1, -1, -1))
    d = decide(_sol(), np.zeros(3), const, ing, N)
    assert d.m == 1 and d.limiting_condition == "fallback"


def test_decide_stage_decrease_limits_phase():
    ing = stub_ing()
    const = TriggerConstants(0.5, 1e-4, N, psi=(0.0, 1.0, 1e6, 0.0, 0.0, 0.0),
                             upsilon=(-1, -1, -1, -1, 1.0, 1.0))
    d = decide(_sol(), np.zeros(3), const, ing, N)
    assert d.m == 2 and d.limiting_condition == "stage-decrease"
    assert select_phase([True] * 4 + [False] * 2, [True, True, False, True, True, True]) == (2, "stage-decrease")
    assert select_phase([True, True, True, False, True, True], [True] * 6) == (3, "feasibility")


def test_trigger_constants_validate_sigma():
    for bad in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(ConfigError):
            TriggerConstants.build(bad, 1e-4, stub_ing(), N)


@settings(max_examples=80, deadline=None)
@given(lg=st.floats(0.0, 1.0), lk=st.floats(0.0, 2.0), horizon=st.integers(2, 12))
def test_monotone_tables(lg, lk, horizon):
    ing = stub_ing(L_g=lg, L_kappa=lk)
    rows = [psi_terms(m, ing, horizon) for m in range(1, horizon + 1)]
    nus = [r[1] for r in rows]
    sigmas = [r[3] for r in rows]
    assert all(b <= a for a, b in zip(nus, nus[1:]))
    assert all(b >= a for a, b in zip(sigmas, sigmas[1:]))


@settings(max_examples=80, deadline=None)
@given(feasible=st.lists(st.booleans(), min_size=1, max_size=10), data=st.data())
def test_select_phase_is_cumulative_and_zeno_free(feasible, data):
    stage_ok = data.draw(st.lists(st.booleans(), min_size=len(feasible), max_size=len(feasible)))
    m, _ = select_phase(feasible, stage_ok)
    assert 1 <= m <= len(feasible)
    if m >= 2:
        assert all(feasible[:m]) and all(stage_ok[1:m])
