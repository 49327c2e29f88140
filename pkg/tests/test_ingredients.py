from __future__ import annotations

import math

import numpy as np
import pytest

from stdmpc.config import build_reference, reference_samples
from stdmpc.dynamics import LinearErrorModel, UnicycleErrorModel, model_from_dict
from stdmpc.errors import ConfigError, SynthesisError
from stdmpc.ingredients import (AgentIngredients, ellipsoid_samples, linearize, lyapunov_residual,
                                quadratic_difference_constant, spectral_radius, synthesize_terminal,
                                synthesize_validated, validate_terminal_region, weighted_norm_constants)
from stdmpc.tightening import BoxSet

P1_PRINTED = np.array([[12.2730, 2.8905, 2.9541], [2.8905, 12.3029, 3.0116], [2.9541, 3.0116, 11.3057]])
K1_PRINTED = np.array([[-1.9457, -1.9725, -1.9827], [-1.9484, -1.9753, -1.9858]])


def _sec5_linearization(vr=0.1, wr=0.1, T=0.2):
    return linearize(UnicycleErrorModel(T), (vr, wr))


def test_linearize_linear_model_exact():
    G = np.array([[1.0, 0.2], [-0.1, 0.95]])
    H = np.array([[0.0], [0.3]])
    Gl, Hl = linearize(LinearErrorModel(G, H))
    assert np.allclose(Gl, G, atol=1e-8) and np.allclose(Hl, H, atol=1e-8)


def test_linearize_unicycle_matches_analytic_jacobian():
    G, H = _sec5_linearization(0.3, 0.1)
    assert np.allclose(G, [[1, 0.02, 0], [-0.02, 1, 0.06], [0, 0, 1]], atol=1e-9)
    assert np.allclose(H, 0.2 * np.array([[1, 0], [0, 0], [0, 1]]), atol=1e-9)


def test_linearize_is_linear_in_sampling_period():
    G1, H1 = _sec5_linearization(0.3, 0.1, T=0.2)
    G2, H2 = _sec5_linearization(0.3, 0.1, T=0.4)
    assert np.allclose(G2 - np.eye(3), 2 * (G1 - np.eye(3)), atol=1e-9)
    assert np.allclose(H2, 2 * H1, atol=1e-9)


def test_synthesis_scalar_closed_form():
    K, P = synthesize_terminal([[0.5]], [[0.0]], [[1.0]], [[1.0]])
    assert K == pytest.approx(np.zeros((1, 1)), abs=1e-12)
    # 0.25 P - P = -1.05
    assert P[0, 0] == pytest.approx(1.4, rel=1e-12)


def test_synthesis_stabilizes_marginal_system():
    K, P = synthesize_terminal(np.eye(3), np.eye(3), np.eye(3), np.eye(3))
    assert spectral_radius(np.eye(3) + K) < 1


def test_synthesis_rejects_unstabilizable():
    with pytest.raises(SynthesisError):
        synthesize_terminal([[1.0, 0.0], [0.0, 1.2]], [[1.0], [0.0]], np.eye(2), [[1.0]])


def test_synthesized_pair_satisfies_linear_decrease_on_samples():
    G, H = _sec5_linearization()
    K, P = synthesize_terminal(G, H, 3 * np.eye(3), 0.01 * np.eye(2), margin=0.3)
    Gc = G + H @ K
    Qs = 3 * np.eye(3) + K.T @ (0.01 * np.eye(2)) @ K
    pts = ellipsoid_samples(P, 0.06, 10_000, seed=3)
    lhs = np.einsum("ti,ij,tj->t", pts @ Gc.T, P, pts @ Gc.T) - np.einsum("ti,ij,tj->t", pts, P, pts)
    assert np.all(lhs <= -np.einsum("ti,ij,tj->t", pts, Qs, pts) + 1e-12)
    assert lyapunov_residual(Gc, P, Qs) < 0


@pytest.mark.xfail(strict=True, reason="the printed agent-1 terminal pair does not satisfy the linear "
                   "Lyapunov decrease for the modelled linearisation; see the decisions ledger")
def test_printed_terminal_pair_satisfies_lyapunov_within_ten_percent():
    G, H = _sec5_linearization()
    Qs = 3 * np.eye(3) + K1_PRINTED.T @ (0.01 * np.eye(2)) @ K1_PRINTED
    Gc = G + H @ K1_PRINTED
    # residual of Gc' P Gc - P + Q* may exceed zero by at most 10 % of Q*
    assert lyapunov_residual(Gc, P1_PRINTED, Qs) <= 0.1 * np.linalg.eigvalsh(Qs).max()


def test_ingredient_invariants_enforced():
    K, P = np.zeros((2, 3)), np.eye(3)
    with pytest.raises(ConfigError):
        AgentIngredients(K, P, np.eye(3), np.eye(2), 0.06, 0.05, 0.1, 0.1)
    with pytest.raises(ConfigError):
        AgentIngredients(K, -P, np.eye(3), np.eye(2), 0.05, 0.06, 0.1, 0.1)
    with pytest.raises(ConfigError):
        AgentIngredients(np.zeros((3, 3)), P, np.eye(3), np.eye(2), 0.05, 0.06, 0.1, 0.1)


def test_spectral_cache_matches_fresh_eigenvalues(sec5_prepared):
    for pa in sec5_prepared:
        ing = pa.ing
        lp = np.linalg.eigvalsh(ing.P)
        assert ing.lambda_max_P == pytest.approx(lp.max(), rel=1e-10)
        assert ing.lambda_max_sqrtP == pytest.approx(math.sqrt(lp.max()), rel=1e-10)
        assert ing.lambda_min_Qstar == pytest.approx(np.linalg.eigvalsh(ing.Q + ing.K.T @ ing.R @ ing.K).min(), rel=1e-10)


def test_weighted_norm_constant_unit_ball():
    assert quadratic_difference_constant(np.eye(3), 1.0) == pytest.approx(2.0)
    rng = np.random.default_rng(0)
    a = rng.standard_normal((20_000, 3))
    a /= np.maximum(1.0, np.linalg.norm(a, axis=1))[:, None]
    b = rng.standard_normal((20_000, 3))
    b /= np.maximum(1.0, np.linalg.norm(b, axis=1))[:, None]
    lhs = np.sum(a * a, 1) - np.sum(b * b, 1)
    assert np.all(lhs <= 2.0 * np.linalg.norm(a - b, axis=1) + 1e-12)


def test_weighted_norm_constant_zero_scaling_and_unbounded():
    box = BoxSet.symmetric([0.3, 0.3, 0.3])
    assert quadratic_difference_constant(np.zeros((3, 3)), box) == 0.0
    Q = np.diag([1.0, 2.0, 3.0])
    assert quadratic_difference_constant(5 * Q, box) == pytest.approx(5 * quadratic_difference_constant(Q, box))
    with pytest.raises(ConfigError):
        quadratic_difference_constant(Q, BoxSet([-np.inf] * 3, [1.0] * 3))


def test_weighted_norm_constants_sound_on_box_pairs(sec5_prepared):
    ing = sec5_prepared[0].ing
    box = sec5_prepared[0].model.state_box
    L_Q, L_Qs, L_P = weighted_norm_constants(ing, box)
    rng = np.random.default_rng(1)
    a = rng.uniform(box.lower, box.upper, (10_000, 3))
    b = rng.uniform(box.lower, box.upper, (10_000, 3))
    dist = np.linalg.norm(a - b, axis=1)
    for M, L in ((ing.Q, L_Q), (ing.Q_star, L_Qs), (ing.P, L_P)):
        lhs = np.einsum("ti,ij,tj->t", a, M, a) - np.einsum("ti,ij,tj->t", b, M, b)
        assert np.all(lhs <= L * dist + 1e-12)


def test_validate_terminal_region_linear_exact_lyapunov():
    G = np.array([[1.0, 0.1], [0.0, 1.0]])
    H = np.array([[0.0], [0.1]])
    K, P = synthesize_terminal(G, H, np.eye(2), np.eye(1))
    model = LinearErrorModel(G, H, BoxSet.symmetric([10, 10]), BoxSet.symmetric([100.0]))
    ing = AgentIngredients(K, P, np.eye(2), np.eye(1), 0.5, 1.0, 0.0, 0.0)
    for n in (16, 256, 4096):
        assert validate_terminal_region(model, ing, n).ok


def test_validate_terminal_region_detects_input_violation():
    G = np.array([[1.0, 0.1], [0.0, 1.0]])
    H = np.array([[0.0], [0.1]])
    K, P = synthesize_terminal(G, H, np.eye(2), np.eye(1))
    model = LinearErrorModel(G, H, BoxSet.symmetric([10, 10]), BoxSet.symmetric([0.01]))
    ing = AgentIngredients(K, P, np.eye(2), np.eye(1), 5.0, 10.0, 0.0, 0.0)
    rep = validate_terminal_region(model, ing, 512)
    assert rep.count("input") > 0 and not rep.ok


def test_validate_terminal_region_origin_only():
    model = UnicycleErrorModel(0.2)
    G, H = _sec5_linearization()
    K, P = synthesize_terminal(G, H, 3 * np.eye(3), 0.01 * np.eye(2))
    ing = AgentIngredients(K, P, 3 * np.eye(3), 0.01 * np.eye(2), 1e-12, 2e-12, 0.0, 0.0)
    assert validate_terminal_region(model, ing, 0, u_refs=[(0.1, 0.1)]).ok


def test_fixture_ingredients_match_resynthesis(sec5):
    for a in sec5.agents:
        model = model_from_dict(a.model, T=sec5.T)
        _, _, u_ref = build_reference(a, sec5.T, sec5.steps + sec5.N + 1)
        K, P, margin, rep = synthesize_validated(model, a.Q, a.R, a.eps, a.eps_r, reference_samples(u_ref))
        assert margin == a.margin and rep.ok
        assert np.allclose(K, a.K, rtol=1e-9, atol=1e-12)
        assert np.allclose(P, a.P, rtol=1e-9, atol=1e-12)
