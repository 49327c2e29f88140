"""Self-triggered scheduling: terminal-containment margin, ISS margin constants and
the open-loop phase selection."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .tightening import _growth, contraction_factor


def upsilon(m, ing, eta, N):
    """Terminal-containment margin after an open-loop phase of length ``m``
    (non-positive means the shifted candidate ends inside ``Omega(eps)``)."""
    if not 1 <= m <= N:
        raise ValueError(f"phase m={m} outside [1, {N}]")
    c = contraction_factor(ing)
    if not 0 < c < 1:
        raise ConfigError(f"contraction factor 1 - lmin(Q*)/lmax(P) = {c} must lie in (0, 1)")
    radius = ing.eps + eta * ing.lambda_max_sqrtP * _growth(ing.L_g, N, m)
    return c ** m * radius ** 2 - ing.eps ** 2


def _geom(L, k):
    """``((1+L)^k - 1) / L`` with limit ``k`` as ``L -> 0``."""
    return float(k) if L == 0 else ((1.0 + L) ** k - 1.0) / L


def psi_terms(m, ing, N):
    """``(varpi, nu, tau, varsigma)`` for phase ``m``."""
    if not 1 <= m <= N:
        raise ValueError(f"phase m={m} outside [1, {N}]")
    nu = (1.0 + ing.L_g) ** (N - m)
    varsigma = (1.0 + ing.L_kappa) ** (m - 1)
    return _geom(ing.L_g, N - m), nu, _geom(ing.L_kappa, m - 1), varsigma


def psi(m, ing, N):
    varpi, nu, tau, varsigma = psi_terms(m, ing, N)
    return varpi * ing.L_Q + nu * tau * ing.L_Qstar + nu * varsigma * ing.L_P


def alpha(m, predicted_e_norm, ing, eta):
    """Lower bound on the actual error norm ``m - 1`` steps ahead."""
    if m < 1:
        raise ValueError("m must be >= 1")
    return max(0.0, predicted_e_norm - m * (1.0 + ing.L_g) ** (m - 1) * eta)


@dataclass(frozen=True)
class TriggerConstants:
    sigma: float
    eta: float
    N: int
    varpi: tuple = field(default=())
    nu: tuple = field(default=())
    tau: tuple = field(default=())
    varsigma: tuple = field(default=())
    psi: tuple = field(default=())
    upsilon: tuple = field(default=())

    def __post_init__(self):
        if not 0 < self.sigma < 1:
            raise ConfigError(f"triggering factor sigma={self.sigma} must lie in (0, 1)")
        if self.eta < 0:
            raise ConfigError("disturbance bound eta must be nonnegative")

    @classmethod
    def build(cls, sigma, eta, ing, N):
        """Precompute the per-phase tables (index ``m - 1``)."""
        rows = [psi_terms(m, ing, N) for m in range(1, N + 1)]
        cols = list(zip(*rows))
        return cls(sigma, eta, N, *(tuple(c) for c in cols),
                   psi=tuple(psi(m, ing, N) for m in range(1, N + 1)),
                   upsilon=tuple(upsilon(m, ing, eta, N) for m in range(1, N + 1)))


@dataclass
class TriggerDecision:
    m: int
    next_instant: int
    upsilon_values: tuple
    psi_values: tuple
    limiting_condition: str     # feasibility | stage-decrease | fallback | horizon
    literal_m: int              # the indicator-form phase, kept for comparison


def select_phase(feasible, stage_ok):
    """Largest ``m*`` with ``feasible[m'-1]`` for ``m' <= m*`` and ``stage_ok[m'-1]``
    for ``2 <= m' <= m*``; returns ``(m, limiting_condition)``."""
    N = len(feasible)
    m = 0
    limit = "horizon"
    for mp in range(1, N + 1):
        if not feasible[mp - 1]:
            limit = "feasibility"
            break
        if mp >= 2 and not stage_ok[mp - 1]:
            limit = "stage-decrease"
            break
        m = mp
    if m <= 1:
        return 1, ("fallback" if N > 1 else "horizon")
    return m, limit


def _literal_phase(feasible, stage_ok, first_step_ok):
    if first_step_ok:
        return 1
    N = len(feasible)
    mf = max((mp for mp in range(2, N + 1) if feasible[mp - 1]), default=1)
    ms = max((mp for mp in range(2, N + 1) if stage_ok[mp - 1]), default=1)
    return min(mf, ms)


def decide(sol, current_e, constants, ing, N, k=0):
    """Open-loop phase for the fresh solution ``sol`` computed at instant ``k``."""
    eta, sigma = constants.eta, constants.sigma
    ups = constants.upsilon if len(constants.upsilon) == N else tuple(upsilon(m, ing, eta, N) for m in range(1, N + 1))
    psis = constants.psi if len(constants.psi) == N else tuple(psi(m, ing, N) for m in range(1, N + 1))
    lmin_q = ing.lambda_min_Q
    feasible = [u <= 0.0 for u in ups]
    stage_ok = []
    for mp in range(1, N + 1):
        a = alpha(mp, float(np.linalg.norm(sol.e_seq[mp - 1])), ing, eta)
        u = sol.u_seq[mp - 1]
        stage_ok.append(psis[mp - 1] * eta <= sigma * (lmin_q * a * a + float(u @ ing.R @ u)))
    m, limit = select_phase(feasible, stage_ok)
    e = np.asarray(current_e, float)
    u0 = sol.u_seq[0]
    first_ok = psis[0] * eta <= sigma * (float(e @ ing.Q @ e) + float(u0 @ ing.R @ u0))
    return TriggerDecision(m, k + m, ups, psis, limit, _literal_phase(feasible, stage_ok, first_ok))
